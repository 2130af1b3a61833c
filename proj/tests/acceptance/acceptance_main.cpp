// Acceptance run: one PASS/FAIL line per criterion. Exit status 0 only when
// every selected criterion passes.
//
//   acceptance [--work DIR] [--only 1,4,7]

#include "medfuse/cli.hpp"
#include "medfuse/experiments.hpp"
#include "medfuse/io.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using namespace medfuse;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

fs::path g_work;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), {"medfuse", "--log-level", "warn"});
  return cli::run(args);
}

std::string path(const fs::path& rel) { return (g_work / rel).string(); }

void write(const fs::path& rel, const std::string& text) { io::write_file(g_work / rel, text); }

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

std::string fixed(double v, int prec = 4) {
  std::ostringstream o;
  o.precision(prec);
  o << std::fixed << v;
  return o.str();
}

// Column accessor over a CSV table.
struct Table {
  io::CsvTable t;
  explicit Table(const fs::path& p) : t(io::read_csv(p)) {}
  std::size_t size() const { return t.rows.size(); }
  const std::string& at(std::size_t row, const std::string& col) const {
    const int c = t.column(col);
    if (c < 0) throw std::runtime_error("column " + col + " missing");
    return t.rows[row][static_cast<std::size_t>(c)];
  }
  double num(std::size_t row, const std::string& col) const { return io::parse_double(at(row, col)); }
};

// ---- shared configuration ---------------------------------------------------------

// Synthetic U-shaped task: 5,000 entities, 9 numeric + 1 categorical feature,
// 30% of (feature, bin) cells observed.
const char* kCohort =
    "[cohort]\n"
    "seed = 7\n"
    "entities = 5000\n"
    "numeric_features = 9\n"
    "categorical_features = 1\n"
    "categories = 3\n"
    "observation_rate = 0.3\n"
    "window_length = 48\n"
    "bin_width = 2\n"
    "label_rule = u_shaped\n";

const char* kTokenize = "[window]\nwindow_length = 48\nbin_width = 2\n[split]\ntrain = 0.7\nval = 0.15\nseed = 7\n";

const char* kModel =
    "[fusion]\n"
    "kind = mufuse\n"
    "d = 32\n"
    "k = 4\n"
    "projector_hidden = 16\n"
    "d_c = 8\n"
    "[encoder]\n"
    "ff_dim = 32\n"
    "num_layers = 1\n"
    "num_heads = 2\n"
    "dropout = 0\n";

std::string train_section(int max_epochs, int patience) {
  return "[train]\nlearning_rate = 3e-3\nbatch_size = 32\nmax_epochs = " + std::to_string(max_epochs) +
         "\npatience = " + std::to_string(patience) + "\n";
}

// Tokenized 5,000-entity dataset, built once through the CLI.
fs::path main_dataset() {
  static bool built = false;
  const fs::path dir = g_work / "task" / "data";
  if (!built) {
    write("task/cohort.ini", kCohort);
    write("task/tokenize.ini", kTokenize);
    if (cli({"synth", "--spec", path("task/cohort.ini"), "--out", path("task/raw")}) != 0 ||
        cli({"tokenize", "--events", path("task/raw/events.csv"), "--labels", path("task/raw/labels.csv"),
             "--config", path("task/tokenize.ini"), "--out", dir.string()}) != 0) {
      throw std::runtime_error("could not build the synthetic dataset");
    }
    built = true;
  }
  return dir;
}

// ---- 1. algebraic identities -------------------------------------------------------

Outcome criterion_1() {
  Outcome out;
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  auto vec = [&](int n) {
    Vector<double> v(n);
    for (int i = 0; i < n; ++i) v(i) = u(rng);
    return v;
  };

  double worst = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const auto e = vec(144);
    const Vector<double> g = Tape<double>::sigmoid_of(vec(144).transpose()).transpose();
    worst = std::max(worst, (hadamard_product(e, g) - hadamard_reparam(e, g)).cwiseAbs().maxCoeff());
  }
  out.require(worst <= 1e-12, "reparameterization error " + sci(worst));

  long long mismatches = 0, cases = 0;
  for (int k : divisors(144)) {
    FusionConfig cfg;
    cfg.kind = FusionKind::kMuFuse;
    cfg.d = 144;
    cfg.k = k;
    cfg.d_prime = 144 / k;
    for (int trial = 0; trial < 200; ++trial) {
      const auto e_f = vec(144);
      const auto e_v = vec(cfg.d_prime);
      const auto block = fuse_mufuse(e_f, e_v, cfg);
      mismatches += !(block == fuse_mufuse_broadcast(e_f, e_v, cfg));
      // The tape path used in training must agree as well.
      Tape<double> tape;
      ParamStore<double> none;
      ParamBinder<double> binder(tape, none);
      auto fused = fuse_rows_tape<double>(binder, cfg, tape.constant(e_f.transpose()), tape.constant(e_v.transpose()));
      mismatches += !(tape.value(fused).row(0).transpose() == block);
      ++cases;
    }
  }
  out.require(mismatches == 0, std::to_string(mismatches) + " block/broadcast mismatches");

  FusionConfig scane;
  scane.kind = FusionKind::kScane;
  scane.d = 144;
  scane.d_prime = 1;
  scane.k = 144;
  long long scane_bad = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const auto e_f = vec(144);
    const auto e_v = vec(1);
    const double gate = Tape<double>::sigmoid_of(e_v.transpose())(0, 0);
    const Vector<double> scalar = gate * e_f;
    scane_bad += !(fuse_mufuse(e_f, e_v, scane) == scalar);
  }
  out.require(scane_bad == 0, std::to_string(scane_bad) + " scalar-gate mismatches");
  if (out.pass) {
    out.detail = "reparam max err " + sci(worst) + " over 10^4 pairs; " + std::to_string(cases) +
                 " block/broadcast cases bit-identical; scalar gate exact";
  }
  return out;
}

// ---- 2. gradient checks ----------------------------------------------------------

Outcome criterion_2() {
  Outcome out;
  const auto t0 = std::chrono::steady_clock::now();
  const auto data = fixture::tiny_dataset(40, 5);
  const auto batch = fixture::pointers(data.train, 4);
  std::string summary;
  for (auto kind : {FusionKind::kMuFuse, FusionKind::kAdditive, FusionKind::kConcat, FusionKind::kScane}) {
    const auto cfg = fixture::toy_config(kind, 8, 1);
    const auto rep = grad_check(make_model<double>(cfg, data.schema, 11), batch);
    double worst = 0.0;
    for (const auto& t : rep.tensors) worst = std::max(worst, t.max_rel_error);
    out.require(rep.pass(), to_string(kind) + " fails (max rel error " + sci(worst) + ")");
    summary += to_string(kind) + " " + fixed(worst * 1e6, 2) + "e-6  ";
  }
  const double secs = seconds_since(t0);
  out.require(secs < 60.0, "took " + fixed(secs, 1) + " s");
  if (out.pass) out.detail = "max rel error: " + summary + "(" + fixed(secs, 1) + " s)";
  return out;
}

// ---- 3. masking / collapse -------------------------------------------------------

Outcome criterion_3() {
  Outcome out;
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  const std::vector<int> ks{2, 3, 4, 6, 8, 12};
  double worst = 0.0;
  double min_additive_gap = std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < 1000; ++trial) {
    FusionConfig cfg;
    cfg.kind = FusionKind::kMuFuse;
    cfg.d = 24;
    cfg.k = ks[static_cast<std::size_t>(trial) % ks.size()];
    cfg.d_prime = cfg.d / cfg.k;
    Vector<double> e_f(cfg.d);
    for (int i = 0; i < cfg.d; ++i) e_f(i) = u(rng);
    const int block = static_cast<int>(rng() % static_cast<std::uint64_t>(cfg.d_prime));
    e_f.segment(block * cfg.k, cfg.k).setZero();

    Vector<double> a(cfg.d_prime);
    for (int i = 0; i < cfg.d_prime; ++i) a(i) = u(rng);
    Vector<double> b = a;
    b(block) = u(rng) + (b(block) >= 0 ? -4.0 : 4.0);  // clearly different value at gate `block`
    worst = std::max(worst, (fuse_mufuse(e_f, a, cfg) - fuse_mufuse(e_f, b, cfg)).cwiseAbs().maxCoeff());

    // Additive arm: value embeddings live in R^d; differ on the same block.
    Vector<double> va(cfg.d);
    for (int i = 0; i < cfg.d; ++i) va(i) = u(rng);
    Vector<double> vb = va;
    vb.segment(block * cfg.k, cfg.k) = b(block) - a(block) + va.segment(block * cfg.k, cfg.k).array();
    min_additive_gap =
        std::min(min_additive_gap, (fuse_additive(e_f, va) - fuse_additive(e_f, vb)).cwiseAbs().maxCoeff());
  }
  out.require(worst <= 1e-15, "masked outputs differ by " + sci(worst));
  out.require(min_additive_gap > 0.0, "additive outputs coincided");
  if (out.pass) {
    out.detail = "MuFuse max diff " + sci(worst) + " over 10^3 cases; additive min diff " +
                 fixed(min_additive_gap);
  }
  return out;
}

// ---- 4. metric oracles -------------------------------------------------------------

template <class F>
double or_nan(F&& f) {
  try {
    return f();
  } catch (const UndefinedMetricError&) {
    return oracle::nan();
  }
}

bool same(double want, double got) {
  if (std::isnan(want)) return std::isnan(got);
  return std::abs(want - got) <= 1e-12;
}

Outcome criterion_4() {
  Outcome out;
  std::mt19937_64 rng(404);
  int bad = 0, undefined = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto in = oracle::random_instance(rng, 1, 20);
    const double ap = oracle::auprc(in.scores, in.labels);
    undefined += std::isnan(ap);
    bad += !same(ap, or_nan([&] { return auprc(in.scores, in.labels); }));
    bad += !same(oracle::auroc(in.scores, in.labels), or_nan([&] { return auroc(in.scores, in.labels); }));
    bad += !same(oracle::c_index(in.scores, in.times, in.events),
                 or_nan([&] { return c_index(in.scores, in.times, in.events); }));
    bad += accuracy_at(in.scores, in.labels, 0.5) != oracle::accuracy(in.scores, in.labels, 0.5);
  }
  out.require(bad == 0, std::to_string(bad) + " oracle mismatches");

  const std::vector<double> half{0.5};
  const std::vector<int> one{1};
  out.require(accuracy_at(half, one, 0.5) == 1.0, "score == threshold must count as positive");
  const std::vector<double> s2{0.6, 0.4};
  const std::vector<int> y2{1, 0};
  out.require(accuracy_at(s2, y2, 0.5) == 1.0, "accuracy example");

  ScoredRows rows;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 300; ++i) {
    const int y = u(rng) < 0.25;
    rows.labels.push_back(y);
    rows.scores.push_back(0.4 * y + 0.6 * u(rng));
  }
  const MetricFn ap = [](const ScoredRows& r) { return auprc(r.scores, r.labels); };
  const auto a = bootstrap_ci(ap, rows, 1000, 0.95, 9, 1);
  const auto b = bootstrap_ci(ap, rows, 1000, 0.95, 9, 1);
  const auto c = bootstrap_ci(ap, rows, 1000, 0.95, 9, 4);
  out.require(a.low == b.low && a.high == b.high, "bootstrap differs between identical runs");
  out.require(a.low == c.low && a.high == c.high, "bootstrap depends on thread count");
  ScoredRows perfect = rows;
  for (std::size_t i = 0; i < perfect.size(); ++i) perfect.scores[i] = perfect.labels[i];
  const MetricFn acc = [](const ScoredRows& r) { return accuracy_at(r.scores, r.labels, 0.5); };
  const auto w = bootstrap_ci(acc, perfect, 200, 0.95, 1, 1);
  out.require(w.low == 1.0 && w.high == 1.0, "constant metric must give a zero-width interval");
  if (out.pass) {
    out.detail = "1000 instances (n<=20, " + std::to_string(undefined) +
                 " single-class) match brute force; bootstrap deterministic across runs and threads";
  }
  return out;
}

// ---- 5. synthetic U-shaped task ---------------------------------------------------

Outcome criterion_5() {
  Outcome out;
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path data = main_dataset();
  write("c5/train.ini", std::string(kModel) + "[time]\nmode = add\n" + train_section(50, 10));
  std::string detail;
  for (int seed : {1, 2, 3}) {
    const std::string ckpt = path("c5/seed" + std::to_string(seed) + ".ckpt");
    if (cli({"--seed", std::to_string(seed), "train", "--data", data.string(), "--config", path("c5/train.ini"),
             "--out", ckpt}) != 0) {
      out.require(false, "training failed for seed " + std::to_string(seed));
      continue;
    }
    Table trace(ckpt + ".trace.csv");
    double best = 0.0;
    int first = 0;
    for (std::size_t r = 0; r < trace.size(); ++r) {
      const double v = trace.num(r, "val_auroc");
      best = std::max(best, v);
      if (first == 0 && v >= 0.9) first = static_cast<int>(trace.num(r, "epoch"));
    }
    out.require(first > 0 && first <= 50, "seed " + std::to_string(seed) + " best val AUROC " + fixed(best));
    detail += "seed " + std::to_string(seed) + ": AUROC " + fixed(best) + (first ? " (>=0.9 at epoch " + std::to_string(first) + ")" : "") + "; ";
  }
  const double secs = seconds_since(t0);
  out.require(secs <= 900.0, "took " + fixed(secs, 0) + " s");
  out.detail = detail + fixed(secs, 0) + " s" + (out.detail.empty() ? "" : " | " + out.detail);
  return out;
}

// ---- 6. ablation -------------------------------------------------------------------

Outcome criterion_6() {
  Outcome out;
  const fs::path data = main_dataset();
  write("c6/ablation.ini", "[experiment]\nkind = ablation\nseeds = 1, 2, 3\n[grid]\narms = mufuse, additive, concat\n"
                           "[data]\ndir = " + data.string() + "\n" + kModel + train_section(30, 5) +
                           "[eval]\nn_bootstrap = 1000\n");
  if (cli({"ablate", "--spec", path("c6/ablation.ini"), "--out", path("c6/out")}) != 0) {
    out.require(false, "ablate command failed");
    return out;
  }
  Table res(path("c6/out/results.csv"));
  out.require(res.size() == 9, "expected 9 rows, got " + std::to_string(res.size()));
  std::map<std::string, std::set<std::string>> fingerprints, init_hashes;
  std::map<std::string, std::vector<double>> auprc_by_arm;
  std::set<std::pair<std::string, std::string>> cells;
  for (std::size_t r = 0; r < res.size(); ++r) {
    const auto seed = res.at(r, "seed");
    cells.insert({res.at(r, "arm"), seed});
    out.require(res.at(r, "status") == "ok", res.at(r, "arm") + " seed " + seed + " failed");
    fingerprints[seed].insert(res.at(r, "rng_fingerprint"));
    init_hashes[seed].insert(res.at(r, "init_hash"));
    if (res.at(r, "status") == "ok") auprc_by_arm[res.at(r, "arm")].push_back(res.num(r, "auprc"));
  }
  out.require(cells.size() == 9, "grid is not 3 arms x 3 seeds");
  for (const auto& [seed, fp] : fingerprints) {
    out.require(fp.size() == 1, "RNG fingerprints differ across arms for seed " + seed);
    out.require(init_hashes[seed].size() == 1, "shared initial tensors differ across arms for seed " + seed);
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? oracle::nan() : s / static_cast<double>(v.size());
  };
  const double mu = mean(auprc_by_arm["mufuse"]), add = mean(auprc_by_arm["additive"]),
               cat = mean(auprc_by_arm["concat"]);
  out.require(mu >= add - 0.02, "mean MuFuse AUPRC " + fixed(mu) + " < additive " + fixed(add) + " - 0.02");
  const std::string means =
      "mean test AUPRC mufuse " + fixed(mu) + ", additive " + fixed(add) + ", concat " + fixed(cat);
  out.detail = out.detail.empty() ? "9/9 rows, fingerprints match; " + means : out.detail + " | " + means;
  return out;
}

// ---- 7. k-sweep --------------------------------------------------------------------

Outcome criterion_7() {
  Outcome out;
  const std::string base =
      "[experiment]\nkind = ksweep\nseeds = 1\n[data]\nseed = 7\n[cohort]\nentities = 400\n"
      "[fusion]\nkind = mufuse\nd = 144\nk = 4\n[encoder]\nff_dim = 144\nnum_layers = 1\nnum_heads = 4\n"
      "dropout = 0\n[train]\nlearning_rate = 3e-3\nmax_epochs = 1\npatience = 1\n[eval]\nn_bootstrap = 100\n";
  write("c7/bad.ini", base + "[grid]\nk = 4, 5, 10\n");
  const auto t0 = std::chrono::steady_clock::now();
  const int bad_code = cli({"ksweep", "--spec", path("c7/bad.ini"), "--out", path("c7/bad_out")});
  const double reject_secs = seconds_since(t0);
  out.require(bad_code == 2, "non-divisor grid exit code " + std::to_string(bad_code));
  out.require(!fs::exists(g_work / "c7/bad_out"), "non-divisor grid produced output");
  out.require(reject_secs < 1.0, "rejection took " + fixed(reject_secs, 2) + " s");

  write("c7/sweep.ini", base + "[grid]\nk = all\n");
  if (cli({"ksweep", "--spec", path("c7/sweep.ini"), "--out", path("c7/out")}) != 0) {
    out.require(false, "ksweep command failed");
    return out;
  }
  Table res(path("c7/out/results.csv"));
  std::vector<int> ks;
  for (std::size_t r = 0; r < res.size(); ++r) {
    const int k = static_cast<int>(res.num(r, "k"));
    ks.push_back(k);
    out.require(res.at(r, "status") == "ok", "k=" + std::to_string(k) + " failed");
    out.require(static_cast<int>(res.num(r, "d_prime")) * k == 144, "d' * k != 144 at k=" + std::to_string(k));
    const std::string want = k == 144 ? "scane" : "mufuse";
    out.require(res.at(r, "kind") == want, "k=" + std::to_string(k) + " kind " + res.at(r, "kind"));
  }
  std::sort(ks.begin(), ks.end());
  out.require(ks == divisors(144), "k grid is not the 15 divisors of 144");
  Table lng(path("c7/out/ksweep_long.csv"));
  out.require(lng.t.header == std::vector<std::string>{"k", "d_prime", "kind", "seed", "metric", "value", "ci_low",
                                                        "ci_high"},
              "unexpected long-format header");
  out.require(lng.size() >= 15 * 2, "long-format CSV too short");
  if (out.pass) {
    out.detail = "15 divisors run, k=144 normalized to scane, non-divisors rejected in " + fixed(reject_secs, 3) + " s";
  }
  return out;
}

// ---- 8. transfer -------------------------------------------------------------------

Outcome criterion_8() {
  Outcome out;
  // Source: 5,000 entities with lab00..lab08 + categorical lab09. Target:
  // 1,000 entities sharing lab00..lab05 and lab09, with tgt06..tgt08 of its
  // own; lab08 maps onto tgt07 through the name map.
  write("c8/source.ini", "[cohort]\nseed = 11\nentities = 5000\nname_prefix = lab\n");
  write("c8/target.ini",
        "[cohort]\nseed = 12\nentities = 1000\nfeature_names = lab00, lab01, lab02, lab03, lab04, lab05, tgt06, "
        "tgt07, tgt08, lab09\n");
  write("c8/tokenize.ini", kTokenize);
  for (const char* side : {"source", "target"}) {
    const std::string s = side;
    if (cli({"synth", "--spec", path("c8/" + s + ".ini"), "--out", path("c8/" + s + "_raw")}) != 0 ||
        cli({"tokenize", "--events", path("c8/" + s + "_raw/events.csv"), "--labels",
             path("c8/" + s + "_raw/labels.csv"), "--config", path("c8/tokenize.ini"), "--out",
             path("c8/" + s + "_data")}) != 0) {
      out.require(false, "could not build the " + s + " cohort");
      return out;
    }
  }
  write("c8/names.ini", "[names]\nlab08 = tgt07\n");
  const std::string spec = "[experiment]\nkind = transfer\nseeds = 1\n[transfer]\n"
                           "directions = source_to_target, target_to_source\nfreeze_epochs = 5\n"
                           "name_map = names.ini\n[source]\ndir = source_data\n[target]\ndir = target_data\n" +
                           std::string(kModel) + train_section(30, 5) + "[eval]\nn_bootstrap = 200\n";
  write("c8/transfer.ini", spec);
  if (cli({"transfer", "--spec", path("c8/transfer.ini"), "--out", path("c8/out")}) != 0) {
    out.require(false, "transfer command failed");
    return out;
  }

  // Expected overlap from the two schemas, independently of the harness.
  const auto src = read_tokenized(g_work / "c8/source_data").schema;
  const auto tgt = read_tokenized(g_work / "c8/target_data").schema;
  const std::map<std::string, std::string> forward{{"lab08", "tgt07"}};
  auto overlap = [](const FeatureSchema& from, const FeatureSchema& to, const std::map<std::string, std::string>& m) {
    std::set<std::string> mapped;
    for (const auto& f : from.features()) {
      auto it = m.find(f.name);
      mapped.insert(it == m.end() ? f.name : it->second);
    }
    int n = 0;
    for (const auto& f : to.features()) n += mapped.count(f.name) > 0;
    return n;
  };
  const int want_fwd = overlap(src, tgt, forward);
  const int want_back = overlap(tgt, src, {{"tgt07", "lab08"}});

  Table res(path("c8/out/results.csv"));
  std::map<std::string, std::string> scratch_hash;
  std::string detail;
  for (std::size_t r = 0; r < res.size(); ++r) {
    const auto arm = res.at(r, "arm");
    const auto dir = res.at(r, "direction");
    out.require(res.at(r, "status") == "ok", dir + "/" + arm + " failed");
    if (arm == "transfer") {
      const int want = dir == "source_to_target" ? want_fwd : want_back;
      const int got = static_cast<int>(res.num(r, "overwritten_rows"));
      out.require(got == want, dir + ": overwrote " + std::to_string(got) + " rows, expected " + std::to_string(want));
      out.require(res.at(r, "freeze_ok") == "1", dir + ": transferred rows moved during warm-up");
      detail += dir + " overwrote " + std::to_string(got) + " rows; ";
    }
    if (arm == "scratch") scratch_hash[dir] = res.at(r, "params_hash");
  }
  out.require(scratch_hash.size() == 2, "missing scratch rows");

  // Standalone training on the same data and seed must give the same parameters.
  for (const auto& [dir, hash] : scratch_hash) {
    const std::string data = dir == "source_to_target" ? "c8/target_data" : "c8/source_data";
    const std::string ckpt = path("c8/standalone_" + dir + ".ckpt");
    if (cli({"--seed", "1", "train", "--data", path(data), "--config", path("c8/transfer.ini"), "--out", ckpt}) != 0) {
      out.require(false, "standalone train failed");
      continue;
    }
    const auto model = load_checkpoint<float>(ckpt);
    out.require(params_hash(model.params) == hash, dir + ": scratch arm differs from standalone train");
  }
  if (out.pass) detail += "freeze held; scratch arms equal standalone train bit for bit";
  out.detail = out.detail.empty() ? detail : out.detail;
  return out;
}

// ---- 9. time fusion ----------------------------------------------------------------

Outcome criterion_9() {
  Outcome out;
  write("c9/timefusion.ini", "[experiment]\nkind = timefusion\nseeds = 1\n[grid]\nmodes = add, multiply\n"
                             "trace_dims = 6\ntrace_points = 481\n[data]\nseed = 7\n[cohort]\nentities = 1000\n" +
                                 std::string(kModel) + train_section(3, 3) + "[eval]\nn_bootstrap = 100\n");
  if (cli({"timefusion", "--spec", path("c9/timefusion.ini"), "--out", path("c9/out")}) != 0) {
    out.require(false, "timefusion command failed");
    return out;
  }
  const auto w = time_wavelengths(32, 1.0, 10000.0);
  Table tr(path("c9/out/time_traces.csv"));
  long long add_exact = 0, add_rows = 0, mul_rows = 0, sinus_bad = 0, mul_bad = 0, sub_exact = 0;
  double sub_worst = 0.0;
  // dim -> (content, min fused, max fused) for each mode
  std::map<std::pair<std::string, int>, std::array<double, 3>> span;
  for (std::size_t r = 0; r < tr.size(); ++r) {
    const std::string mode = tr.at(r, "mode");
    const int dim = static_cast<int>(tr.num(r, "dim"));
    const double t = tr.num(r, "t"), c = tr.num(r, "content"), p = tr.num(r, "time_value"),
                 f = tr.num(r, "fused");
    const double w_i = w[static_cast<std::size_t>(dim / 2)];
    sinus_bad += p != (dim % 2 == 0 ? std::sin(t / w_i) : std::cos(t / w_i));
    if (mode == "add") {
      ++add_rows;
      add_exact += f == c + p;
      sub_exact += (f - c) == p;
      sub_worst = std::max(sub_worst, std::abs((f - c) - p));
    } else {
      ++mul_rows;
      mul_bad += std::abs(f - c / (1.0 + std::exp(-p))) > 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(c));
    }
    auto key = std::make_pair(mode, dim);
    auto it = span.find(key);
    if (it == span.end()) {
      span[key] = {c, f, f};
    } else {
      it->second[1] = std::min(it->second[1], f);
      it->second[2] = std::max(it->second[2], f);
    }
  }
  out.require(add_rows > 0 && mul_rows > 0, "trace file lacks a mode");
  out.require(sinus_bad == 0, std::to_string(sinus_bad) + " time values differ from the raw sinusoid");
  out.require(add_exact == add_rows, "additive trace is not content + sinusoid");
  // fused - content recovers the sinusoid up to the rounding of the sum.
  out.require(sub_worst <= 4.0 * std::numeric_limits<double>::epsilon(),
              "additive trace minus content off by " + sci(sub_worst));
  out.require(mul_bad == 0, std::to_string(mul_bad) + " multiplicative values off the closed form");

  // Amplitude: content-free under add, proportional to |content| under multiply.
  std::set<double> mul_ratio_bad;
  double add_amp_spread = 0.0;
  for (const auto& [key, s] : span) {
    const double amp = s[2] - s[1];
    if (key.first == "add") {
      // Under add the amplitude equals the sinusoid's own range.
      double lo = 1e300, hi = -1e300;
      for (std::size_t r = 0; r < tr.size(); ++r) {
        if (tr.at(r, "mode") != "add" || static_cast<int>(tr.num(r, "dim")) != key.second) continue;
        lo = std::min(lo, tr.num(r, "time_value"));
        hi = std::max(hi, tr.num(r, "time_value"));
      }
      add_amp_spread = std::max(add_amp_spread, std::abs(amp - (hi - lo)));
    } else {
      double lo = 1e300, hi = -1e300;
      for (std::size_t r = 0; r < tr.size(); ++r) {
        if (tr.at(r, "mode") != "multiply" || static_cast<int>(tr.num(r, "dim")) != key.second) continue;
        const double g = 1.0 / (1.0 + std::exp(-tr.num(r, "time_value")));
        lo = std::min(lo, g);
        hi = std::max(hi, g);
      }
      const double want = std::abs(s[0]) * (hi - lo);
      if (std::abs(amp - want) > 1e-12) mul_ratio_bad.insert(s[0]);
    }
  }
  out.require(add_amp_spread <= 1e-12, "additive amplitude depends on content");
  out.require(mul_ratio_bad.empty(), "multiplicative amplitude is not |content| times the gate range");
  std::set<double> contents;
  for (const auto& [key, s] : span) {
    if (key.first == "multiply") contents.insert(std::abs(s[0]));
  }
  out.require(contents.size() > 1, "trace dims share one content value; amplitude check is vacuous");
  if (out.pass) {
    out.detail = std::to_string(add_rows) + " add rows exact (fused = content + p; fused - content within " +
                 sci(sub_worst) + ", " + std::to_string(sub_exact) + " bitwise); " +
                 std::to_string(mul_rows) + " multiply rows on closed form";
  }
  return out;
}

// ---- 10. determinism via manifests -------------------------------------------------

// Compares every recorded non-volatile output of `manifest` with the replayed copy.
void check_replay(Outcome& out, const fs::path& manifest, const fs::path& new_out, int& files) {
  const auto m = nlohmann::json::parse(io::read_file(manifest));
  const std::string cmd = m["command"];
  const int code = cli({"replay", "--manifest", manifest.string(), "--out", new_out.string()});
  if (code != 0) {
    out.require(false, cmd + ": replay exit " + std::to_string(code));
    return;
  }
  const bool dir = m["output_kind"] == "directory";
  const fs::path old_base = dir ? fs::path(m["out"].get<std::string>()) : fs::path(m["out"].get<std::string>()).parent_path();
  const fs::path new_base = dir ? new_out : new_out.parent_path();
  const auto replayed = nlohmann::json::parse(io::read_file(cli::manifest_path_for(new_out, dir)));
  // Replays keep the output file name, so relative output names line up.
  std::map<std::string, std::string> a, b;
  for (const auto& [name, hash] : m["outputs"].items()) a[name] = hash;
  for (const auto& [name, hash] : replayed["outputs"].items()) b[name] = hash;
  out.require(a == b, cmd + ": recorded output hashes differ after replay");
  for (const auto& [name, hash] : a) {
    const bool equal = io::read_file(old_base / name) == io::read_file(new_base / name);
    out.require(equal, cmd + ": " + name + " differs after replay");
    ++files;
  }
}

Outcome criterion_10() {
  Outcome out;
  const fs::path d = g_work / "c10";
  write("c10/cohort.ini", "[cohort]\nseed = 3\nentities = 200\nnumeric_features = 4\ncategorical_features = 1\n"
                          "window_length = 12\np_min = 0.2\nevent_times = true\n");
  write("c10/tokenize.ini", "[window]\nwindow_length = 12\nbin_width = 2\n[split]\nseed = 5\n");
  const std::string small_model =
      "[fusion]\nd = 8\nk = 2\nprojector_hidden = 4\nd_c = 3\n[encoder]\nff_dim = 8\nnum_layers = 1\n"
      "num_heads = 2\ndropout = 0.1\n";
  const std::string small_train = "[train]\nlearning_rate = 1e-2\nbatch_size = 16\nmax_epochs = 3\npatience = 2\n";
  write("c10/train.ini", small_model + small_train);
  const std::string data_block = "[data]\nseed = 3\n[cohort]\nentities = 150\nnumeric_features = 3\n"
                                 "categorical_features = 1\nwindow_length = 12\np_min = 0.2\n";
  write("c10/ablate.ini", "[experiment]\nkind = ablation\nseeds = 1, 2\n" + data_block + small_model + small_train +
                              "[eval]\nn_bootstrap = 50\n");
  write("c10/ksweep.ini", "[experiment]\nkind = ksweep\nseeds = 1\n[grid]\nk = all\n" + data_block + small_model +
                              small_train + "[eval]\nn_bootstrap = 50\n");
  write("c10/timefusion.ini", "[experiment]\nkind = timefusion\nseeds = 1\n[grid]\ntrace_dims = 4\ntrace_points = 50\n" +
                                  data_block + small_model + small_train + "[eval]\nn_bootstrap = 50\n");
  write("c10/transfer.ini",
        "[experiment]\nkind = transfer\nseeds = 1\n[transfer]\nfreeze_epochs = 1\nsubsample_arm = true\n"
        "[source]\nseed = 4\n[source_cohort]\nentities = 200\nnumeric_features = 3\nwindow_length = 12\n"
        "[target]\nseed = 5\n[target_cohort]\nentities = 100\nnumeric_features = 2\nwindow_length = 12\n" +
            small_model + small_train + "[eval]\nn_bootstrap = 50\n");

  const std::string t = "1";
  struct Run {
    std::vector<std::string> args;
    fs::path out;
    bool dir;
  };
  const std::vector<Run> runs = {
      {{"synth", "--spec", (d / "cohort.ini").string(), "--out", (d / "raw").string()}, d / "raw", true},
      {{"tokenize", "--events", (d / "raw/events.csv").string(), "--labels", (d / "raw/labels.csv").string(),
        "--config", (d / "tokenize.ini").string(), "--out", (d / "data").string()},
       d / "data", true},
      {{"--seed", "5", "train", "--data", (d / "data").string(), "--config", (d / "train.ini").string(), "--out",
        (d / "model/m.ckpt").string()},
       d / "model/m.ckpt", false},
      {{"evaluate", "--ckpt", (d / "model/m.ckpt").string(), "--data", (d / "data").string(), "--bootstrap", "200",
        "--out", (d / "eval/report.csv").string()},
       d / "eval/report.csv", false},
      {{"gradcheck", "--config", (d / "train.ini").string(), "--all-kinds", "--out", (d / "gc").string()}, d / "gc", true},
      {{"dump-embeddings", "--ckpt", (d / "model/m.ckpt").string(), "--data", (d / "data").string(), "--limit", "5",
        "--out", (d / "dump/emb.csv").string()},
       d / "dump/emb.csv", false},
      {{"ablate", "--spec", (d / "ablate.ini").string(), "--out", (d / "ablate").string()}, d / "ablate", true},
      {{"ksweep", "--spec", (d / "ksweep.ini").string(), "--out", (d / "ksweep").string()}, d / "ksweep", true},
      {{"transfer", "--spec", (d / "transfer.ini").string(), "--out", (d / "transfer").string()}, d / "transfer", true},
      {{"timefusion", "--spec", (d / "timefusion.ini").string(), "--out", (d / "timefusion").string()},
       d / "timefusion", true},
  };
  int files = 0;
  std::set<std::string> covered;
  for (const auto& run : runs) {
    std::vector<std::string> args = {"--threads", t};
    args.insert(args.end(), run.args.begin(), run.args.end());
    const int code = cli(args);
    const std::string cmd = run.args[0] == "--seed" ? run.args[2] : run.args[0];
    if (code != 0) {
      out.require(false, cmd + " exit " + std::to_string(code));
      continue;
    }
    fs::path replay_out = run.dir ? fs::path(run.out.string() + "_replay")
                                  : run.out.parent_path().parent_path() / (run.out.parent_path().filename().string() +
                                                                          "_replay") / run.out.filename();
    check_replay(out, cli::manifest_path_for(run.out, run.dir), replay_out, files);
    covered.insert(cmd);
  }
  out.require(covered.size() == 10, "only " + std::to_string(covered.size()) + " of 10 commands replayed");
  if (out.pass) out.detail = "10 commands replayed, " + std::to_string(files) + " output files byte-identical";
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "medfuse_acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    } else {
      std::cerr << "usage: acceptance [--work DIR] [--only 1,2,...]\n";
      return 2;
    }
  }
  fs::remove_all(work);
  fs::create_directories(work);
  g_work = fs::absolute(work);
  spdlog::set_level(spdlog::level::warn);

  const std::vector<std::pair<int, Outcome (*)()>> criteria = {
      {1, criterion_1}, {2, criterion_2}, {3, criterion_3}, {4, criterion_4}, {5, criterion_5},
      {6, criterion_6}, {7, criterion_7}, {8, criterion_8}, {9, criterion_9}, {10, criterion_10},
  };
  bool all = true;
  for (const auto& [n, fn] : criteria) {
    if (!only.empty() && !only.count(n)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    // The CLI installs its own logger; keep the acceptance output readable.
    spdlog::set_level(spdlog::level::warn);
    all = all && o.pass;
    std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << " ["
              << fixed(seconds_since(t0), 1) << " s]" << std::endl;
  }
  return all ? 0 : 1;
}
