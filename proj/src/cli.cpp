#include "medfuse/cli.hpp"

#include "medfuse/experiments.hpp"
#include "medfuse/io.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <optional>

namespace medfuse::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kManifestName = "manifest.json";

struct Globals {
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::optional<int> precision;
  std::string log_level = "info";
};

// Files written by one command. Unless commit() is called, everything the
// command created is removed again when the guard goes out of scope.
class OutputGuard {
 public:
  OutputGuard(fs::path root, bool directory) : root_(std::move(root)), directory_(directory) {
    if (directory_) {
      created_root_ = !fs::exists(root_);
      fs::create_directories(root_);
    } else {
      fs::path parent = root_.parent_path();
      if (!parent.empty() && !fs::exists(parent)) {
        fs::create_directories(parent);
        created_parent_ = parent;
      }
    }
  }
  OutputGuard(const OutputGuard&) = delete;
  OutputGuard& operator=(const OutputGuard&) = delete;

  ~OutputGuard() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& p : written_) fs::remove(p, ec);
    if (directory_ && created_root_) fs::remove_all(root_, ec);
    if (!created_parent_.empty()) fs::remove_all(created_parent_, ec);
  }

  // Directory against which output names are recorded.
  fs::path base() const { return directory_ ? root_ : root_.parent_path(); }

  void write(const fs::path& path, const std::string& content, bool is_volatile = false) {
    io::write_file(path, content);
    written_.push_back(path);
    const std::string rel = fs::relative(path, base().empty() ? fs::path(".") : base()).generic_string();
    if (is_volatile) {
      volatile_.push_back(rel);
    } else {
      outputs_[rel] = io::content_hash(content);
    }
  }

  const json& outputs() const { return outputs_; }
  const std::vector<std::string>& volatile_files() const { return volatile_; }
  void commit() { committed_ = true; }

 private:
  fs::path root_;
  bool directory_;
  bool created_root_ = false;
  fs::path created_parent_;
  bool committed_ = false;
  std::vector<fs::path> written_;
  json outputs_ = json::object();
  std::vector<std::string> volatile_;
};

struct RunContext {
  std::string command;
  std::vector<std::string> argv;
  Globals globals;
  std::vector<std::string> replay_args;  // canonical, absolute paths
  json inputs = json::object();
  json config = json::object();
  std::uint64_t seed = 0;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void arg(const std::string& flag, const std::string& value) {
    replay_args.push_back(flag);
    replay_args.push_back(value);
  }

  void input(const fs::path& path) {
    if (fs::is_directory(path)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(path)) {
        if (e.is_regular_file()) files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      for (const auto& f : files) inputs[fs::absolute(f).lexically_normal().string()] = io::file_hash(f);
    } else {
      inputs[fs::absolute(path).lexically_normal().string()] = io::file_hash(path);
    }
  }

  void config_file(const fs::path& path, const KeyValueConfig& resolved) {
    input(path);
    config["path"] = fs::absolute(path).lexically_normal().string();
    config["text"] = io::read_file(path);
    config["resolved"] = resolved.dump();
  }
};

fs::path abs_path(const fs::path& p) { return fs::absolute(p).lexically_normal(); }

// --out values are resolved against MEDFUSE_OUTPUT_ROOT when relative.
fs::path resolve_out(const std::string& out) {
  fs::path p(out);
  if (p.is_relative()) {
    if (const char* root = std::getenv("MEDFUSE_OUTPUT_ROOT"); root && *root) p = fs::path(root) / p;
  }
  return abs_path(p);
}

void write_manifest(const RunContext& ctx, OutputGuard& guard, const fs::path& out, bool directory) {
  json m;
  m["tool_version"] = kToolVersion;
  m["command"] = ctx.command;
  m["argv"] = ctx.argv;
  std::vector<std::string> replay_argv = {"medfuse"};
  if (ctx.globals.seed) {
    replay_argv.push_back("--seed");
    replay_argv.push_back(std::to_string(*ctx.globals.seed));
  }
  replay_argv.push_back("--threads");
  replay_argv.push_back(std::to_string(ctx.globals.threads));
  if (ctx.globals.precision) {
    replay_argv.push_back("--precision");
    replay_argv.push_back(std::to_string(*ctx.globals.precision));
  }
  replay_argv.push_back(ctx.command);
  replay_argv.insert(replay_argv.end(), ctx.replay_args.begin(), ctx.replay_args.end());
  m["replay_argv"] = replay_argv;
  m["out"] = out.string();
  m["output_kind"] = directory ? "directory" : "file";
  m["seed"] = ctx.seed;
  m["threads"] = ctx.globals.threads;
  m["precision"] = ctx.globals.precision ? *ctx.globals.precision : 0;
  m["config"] = ctx.config;
  m["inputs"] = ctx.inputs;
  m["outputs"] = guard.outputs();
  std::vector<std::string> vol = guard.volatile_files();
  vol.push_back(manifest_path_for(out, directory).filename().string());
  m["volatile"] = vol;
  m["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count();
  io::write_file(manifest_path_for(out, directory), m.dump(2) + "\n");
}

Precision choose_precision(const Globals& g, Precision from_config) {
  if (!g.precision) return from_config;
  return *g.precision == 64 ? Precision::kFloat64 : Precision::kFloat32;
}

template <class F>
decltype(auto) with_precision(Precision p, F&& f) {
  if (p == Precision::kFloat64) return f(double{});
  return f(float{});
}

Precision checkpoint_precision(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
  std::istringstream in(io::read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("precision ", 0) == 0) return line.substr(10) == "64" ? Precision::kFloat64 : Precision::kFloat32;
    if (line.rfind("tensor ", 0) == 0) break;
  }
  throw ConfigError(path.string() + ": checkpoint has no precision header");
}

std::span<const TokenSequence> pick_split(const TokenizedDataset& data, const std::string& split) {
  if (split == "train") return data.train;
  if (split == "val") return data.val;
  if (split == "test") return data.test;
  throw ConfigError("unknown split '" + split + "' (expected train|val|test)");
}

// ---- commands -----------------------------------------------------------------------

struct SynthArgs {
  std::string spec, out;
};

void cmd_synth(RunContext& ctx, const SynthArgs& a) {
  const auto cfg = KeyValueConfig::load(a.spec);
  const auto spec = SyntheticSpec::from_config(cfg, "cohort");
  ctx.seed = ctx.globals.seed.value_or(static_cast<std::uint64_t>(cfg.get_int("cohort.seed", 7)));
  const fs::path out = resolve_out(a.out);
  ctx.config_file(a.spec, cfg);
  ctx.arg("--spec", abs_path(a.spec).string());
  ctx.arg("--out", out.string());

  const Cohort cohort = generate_synthetic(spec, ctx.seed);
  OutputGuard guard(out, true);
  guard.write(out / "events.csv", events_to_csv(cohort));
  guard.write(out / "labels.csv", labels_to_csv(cohort));
  const SummarizationConfig window{spec.window_length, spec.bin_width, spec.horizon};
  spdlog::info("synth: {} entities, {} records, missing fraction {:.4f}", cohort.labels.size(), cohort.records.size(),
               missing_fraction(cohort, window));
  write_manifest(ctx, guard, out, true);
  guard.commit();
}

struct TokenizeArgs {
  std::string events, labels, config, out;
};

void cmd_tokenize(RunContext& ctx, const TokenizeArgs& a) {
  const auto cfg = KeyValueConfig::load(a.config);
  SummarizationConfig window;
  window.window_length = cfg.get_double("window.window_length", window.window_length);
  window.bin_width = cfg.get_double("window.bin_width", window.bin_width);
  window.horizon = cfg.get_double("window.horizon", window.horizon);
  window.validate();
  SplitConfig split;
  split.train = cfg.get_double("split.train", split.train);
  split.val = cfg.get_double("split.val", split.val);
  split.seed = static_cast<std::uint64_t>(cfg.get_int("split.seed", static_cast<long long>(split.seed)));
  if (ctx.globals.seed) split.seed = *ctx.globals.seed;
  ctx.seed = split.seed;
  const fs::path out = resolve_out(a.out);
  ctx.config_file(a.config, cfg);
  ctx.input(a.events);
  ctx.input(a.labels);
  ctx.arg("--events", abs_path(a.events).string());
  ctx.arg("--labels", abs_path(a.labels).string());
  ctx.arg("--config", abs_path(a.config).string());
  ctx.arg("--out", out.string());

  const Cohort cohort = read_cohort(a.events, a.labels);
  const TokenizedDataset data = tokenize_cohort(cohort, window, split);
  OutputGuard guard(out, true);
  guard.write(out / "schema.txt", data.schema.serialize());
  guard.write(out / "train.csv", tokens_to_csv(data.train));
  guard.write(out / "val.csv", tokens_to_csv(data.val));
  guard.write(out / "test.csv", tokens_to_csv(data.test));
  spdlog::info("tokenize: {} train / {} val / {} test sequences, {} features", data.train.size(), data.val.size(),
               data.test.size(), data.schema.size());
  write_manifest(ctx, guard, out, true);
  guard.commit();
}

struct TrainArgs {
  std::string data, config, out;
};

void cmd_train(RunContext& ctx, const TrainArgs& a) {
  const auto cfg = KeyValueConfig::load(a.config);
  const ModelConfig model_cfg = ModelConfig::from_config(cfg);
  TrainConfig tc = TrainConfig::from_config(cfg);
  if (ctx.globals.seed) tc.seed = *ctx.globals.seed;
  tc.precision = choose_precision(ctx.globals, tc.precision);
  ctx.seed = tc.seed;
  const fs::path out = resolve_out(a.out);
  ctx.config_file(a.config, cfg);
  ctx.input(a.data);
  ctx.arg("--data", abs_path(a.data).string());
  ctx.arg("--config", abs_path(a.config).string());
  ctx.arg("--out", out.string());

  const TokenizedDataset data = read_tokenized(a.data);
  OutputGuard guard(out, false);
  const fs::path trace_path = out.string() + ".trace.csv";
  with_precision(tc.precision, [&](auto tag) {
    using T = decltype(tag);
    try {
      auto res = train_model<T>(model_cfg, data, tc);
      res.model.meta["best_epoch"] = std::to_string(res.trace.best_epoch);
      res.model.meta["train_seed"] = std::to_string(tc.seed);
      guard.write(out, serialize_checkpoint(res.model));
      guard.write(trace_path, res.trace.to_csv(false));
      guard.write(out.string() + ".timing.csv", res.trace.to_csv(true), true);
      spdlog::info("train: best epoch {} of {}, val AUPRC {:.4f}", res.trace.best_epoch, res.trace.epochs.size(),
                   res.trace.best_val_auprc);
    } catch (const TrainingDiverged& e) {
      // The trace survives the abort; the checkpoint does not exist.
      io::write_file(trace_path, e.trace().to_csv(true));
      spdlog::error("training diverged; partial trace kept at {}", trace_path.string());
      throw;
    }
    return 0;
  });
  write_manifest(ctx, guard, out, false);
  guard.commit();
}

struct EvaluateArgs {
  std::string ckpt, data, out, split = "test";
  int bootstrap = 1000;
  double threshold = 0.5;
  double level = 0.95;
};

void cmd_evaluate(RunContext& ctx, const EvaluateArgs& a) {
  ctx.seed = ctx.globals.seed.value_or(0);
  const fs::path out = resolve_out(a.out);
  ctx.input(a.ckpt);
  ctx.input(a.data);
  ctx.arg("--ckpt", abs_path(a.ckpt).string());
  ctx.arg("--data", abs_path(a.data).string());
  ctx.arg("--split", a.split);
  ctx.arg("--bootstrap", std::to_string(a.bootstrap));
  ctx.arg("--threshold", io::format_double(a.threshold));
  ctx.arg("--level", io::format_double(a.level));
  ctx.arg("--out", out.string());

  const TokenizedDataset data = read_tokenized(a.data);
  const auto seqs = pick_split(data, a.split);
  OutputGuard guard(out, false);
  with_precision(checkpoint_precision(a.ckpt), [&](auto tag) {
    using T = decltype(tag);
    const Model<T> model = load_checkpoint<T>(a.ckpt);
    if (model.schema.hash() != data.schema.hash()) {
      throw SchemaError("checkpoint was trained against a different feature schema than " + a.data);
    }
    auto scores = predict<T>(model, seqs, ctx.globals.threads);
    std::string per_entity = "entity_id,label,score,event_time,event\n";
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      per_entity += io::csv_escape(seqs[i].entity_id) + "," + std::to_string(seqs[i].label) + "," +
                    io::format_double(scores[i]) + "," +
                    (seqs[i].event_time ? io::format_double(*seqs[i].event_time) : "") + "," +
                    (seqs[i].event ? "1" : "0") + "\n";
    }
    EvalOptions eo;
    eo.n_bootstrap = a.bootstrap;
    eo.threshold = a.threshold;
    eo.level = a.level;
    eo.seed = ctx.seed;
    eo.threads = ctx.globals.threads;
    const EvalReport rep = evaluate_scores(scored_rows(seqs, scores), eo);
    guard.write(out, report_to_csv(rep));
    fs::path scores_path = out;
    scores_path.replace_extension(".scores.csv");
    guard.write(scores_path, per_entity);
    spdlog::info("evaluate: AUPRC {:.4f} [{:.4f}, {:.4f}], AUROC {:.4f} [{:.4f}, {:.4f}]", rep.auprc.point,
                 rep.auprc.ci_low, rep.auprc.ci_high, rep.auroc.point, rep.auroc.ci_low, rep.auroc.ci_high);
    return 0;
  });
  write_manifest(ctx, guard, out, false);
  guard.commit();
}

struct GradcheckArgs {
  std::string config, out;
  double tolerance = 1e-4;
  bool all_kinds = false;
};

// Toy dataset for gradient checks: a handful of short synthetic sequences.
std::vector<TokenSequence> gradcheck_batch(const KeyValueConfig& cfg, std::uint64_t seed, FeatureSchema& schema) {
  SyntheticSpec spec = SyntheticSpec::from_config(cfg, "cohort");
  if (!cfg.has("cohort.entities")) spec.n_entities = 24;
  if (!cfg.has("cohort.window_length")) spec.window_length = 8.0;
  if (!cfg.has("cohort.label_rule")) spec.label_rule = LabelRule::kUShaped;
  spec.p_min = std::max(spec.p_min, 0.3);
  const Cohort cohort = generate_synthetic(spec, seed);
  const SummarizationConfig window{spec.window_length, spec.bin_width, spec.horizon};
  TokenizedDataset data = tokenize_cohort(cohort, window, SplitConfig{0.7, 0.15, seed});
  schema = data.schema;
  const int n = static_cast<int>(cfg.get_int("gradcheck.batch", 4));
  std::vector<TokenSequence> batch(data.train.begin(), data.train.begin() + std::min<std::size_t>(n, data.train.size()));
  return batch;
}

ModelConfig kind_variant(ModelConfig m, FusionKind kind) {
  auto& f = m.fusion;
  f.kind = kind;
  switch (kind) {
    case FusionKind::kMuFuse:
      if (f.k == 1 || f.k == f.d) f.k = f.d % 2 == 0 ? 2 : 1;
      f.d_prime = f.d / f.k;
      break;
    case FusionKind::kScane:
      f.d_prime = 1;
      f.k = f.d;
      break;
    case FusionKind::kAdditive:
      f.d_prime = f.d;
      f.k = 1;
      break;
    case FusionKind::kConcat:
      f.k = 1;
      break;
  }
  m.validate();
  return m;
}

int cmd_gradcheck(RunContext& ctx, const GradcheckArgs& a) {
  const auto cfg = KeyValueConfig::load(a.config);
  ModelConfig base = ModelConfig::from_config(cfg);
  base.encoder.dropout = 0.0;
  ctx.seed = ctx.globals.seed.value_or(static_cast<std::uint64_t>(cfg.get_int("train.seed", 1)));
  ctx.config_file(a.config, cfg);
  ctx.arg("--config", abs_path(a.config).string());
  ctx.arg("--tolerance", io::format_double(a.tolerance));
  if (a.all_kinds) ctx.replay_args.push_back("--all-kinds");

  FeatureSchema schema;
  const auto batch_storage = gradcheck_batch(cfg, ctx.seed, schema);
  std::vector<const TokenSequence*> batch;
  for (const auto& s : batch_storage) batch.push_back(&s);

  std::vector<FusionKind> kinds = {base.fusion.kind};
  if (a.all_kinds) kinds = {FusionKind::kMuFuse, FusionKind::kAdditive, FusionKind::kConcat, FusionKind::kScane};
  std::string csv = "fusion,tensor,entries,max_rel_error,max_abs_grad,pass\n";
  bool pass = true;
  for (auto kind : kinds) {
    const ModelConfig mc = a.all_kinds ? kind_variant(base, kind) : base;
    GradCheckOptions opts;
    opts.tolerance = a.tolerance;
    const auto rep = grad_check(make_model<double>(mc, schema, ctx.seed), batch, opts);
    std::istringstream lines(rep.to_csv());
    std::string line;
    std::getline(lines, line);
    while (std::getline(lines, line)) csv += to_string(mc.fusion.kind) + "," + line + "\n";
    double worst = 0.0;
    for (const auto& t : rep.tensors) worst = std::max(worst, t.max_rel_error);
    std::cout << to_string(mc.fusion.kind) << ": " << (rep.pass() ? "PASS" : "FAIL") << " (max relative error "
              << io::format_double(worst) << ", tolerance " << io::format_double(a.tolerance) << ")\n";
    for (const auto& t : rep.tensors) {
      if (!t.pass) std::cout << "  failing tensor " << t.tensor << ": " << io::format_double(t.max_rel_error) << "\n";
    }
    pass = pass && rep.pass();
  }
  if (!a.out.empty()) {
    const fs::path out = resolve_out(a.out);
    ctx.arg("--out", out.string());
    OutputGuard guard(out, true);
    guard.write(out / "gradcheck.csv", csv);
    write_manifest(ctx, guard, out, true);
    guard.commit();
  } else {
    std::cout << csv;
  }
  return pass ? 0 : 1;
}

struct ExperimentArgs {
  std::string spec, out;
};

void cmd_experiment(RunContext& ctx, ExperimentKind kind, const ExperimentArgs& a) {
  const auto cfg = KeyValueConfig::load(a.spec);
  ExperimentSpec spec = ExperimentSpec::from_config(cfg, abs_path(a.spec).parent_path());
  if (spec.kind != kind) {
    throw ConfigError(a.spec + ": experiment.kind is '" + to_string(spec.kind) + "' but the command is '" +
                      ctx.command + "'");
  }
  if (ctx.globals.seed) spec.seeds = {*ctx.globals.seed};
  spec.threads = ctx.globals.threads;
  spec.train.precision = choose_precision(ctx.globals, spec.train.precision);
  ctx.seed = spec.seeds.front();
  const fs::path out = resolve_out(a.out);
  ctx.config_file(a.spec, cfg);
  for (const auto* src : {&spec.data, &spec.source, &spec.target}) {
    if (src->dir) ctx.input(*src->dir);
  }
  if (cfg.has("transfer.name_map")) {
    fs::path p = cfg.get_string("transfer.name_map");
    ctx.input(p.is_absolute() ? p : abs_path(a.spec).parent_path() / p);
  }
  ctx.arg("--spec", abs_path(a.spec).string());
  ctx.arg("--out", out.string());

  OutputGuard guard(out, true);
  const ExperimentResult res = run_experiment(spec);
  for (const auto& [name, content] : res.files) guard.write(out / name, content);
  std::string timing = "arm,seed,epoch,seconds\n";
  for (const auto& r : res.rows) {
    for (const auto& e : r.trace.epochs) {
      timing += r.arm + "," + std::to_string(r.seed) + "," + std::to_string(e.epoch) + "," +
                io::format_double(e.seconds) + "\n";
    }
  }
  guard.write(out / "timing.csv", timing, true);
  write_manifest(ctx, guard, out, true);
  guard.commit();
}

struct DumpArgs {
  std::string ckpt, data, out, split = "test";
  int limit = 0;
};

void cmd_dump(RunContext& ctx, const DumpArgs& a) {
  const fs::path out = resolve_out(a.out);
  ctx.input(a.ckpt);
  ctx.input(a.data);
  ctx.arg("--ckpt", abs_path(a.ckpt).string());
  ctx.arg("--data", abs_path(a.data).string());
  ctx.arg("--split", a.split);
  ctx.arg("--limit", std::to_string(a.limit));
  ctx.arg("--out", out.string());
  const TokenizedDataset data = read_tokenized(a.data);
  auto seqs = pick_split(data, a.split);
  if (a.limit > 0 && static_cast<std::size_t>(a.limit) < seqs.size()) seqs = seqs.first(static_cast<std::size_t>(a.limit));
  OutputGuard guard(out, false);
  with_precision(checkpoint_precision(a.ckpt), [&](auto tag) {
    using T = decltype(tag);
    const Model<T> model = load_checkpoint<T>(a.ckpt);
    if (model.schema.hash() != data.schema.hash()) {
      throw SchemaError("checkpoint was trained against a different feature schema than " + a.data);
    }
    guard.write(out, dump_embeddings<T>(model, seqs));
    return 0;
  });
  write_manifest(ctx, guard, out, false);
  guard.commit();
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

void setup_logging(const std::string& level) {
  auto logger = spdlog::get("medfuse");
  if (!logger) {
    logger = spdlog::stderr_color_mt("medfuse");
    spdlog::set_default_logger(logger);
  }
  auto lvl = spdlog::level::from_str(level);
  if (lvl == spdlog::level::off && level != "off") throw ConfigError("unknown log level '" + level + "'");
  spdlog::set_level(lvl);
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"synth",    "tokenize", "train",    "evaluate",   "gradcheck",
                                                 "ablate",   "ksweep",   "transfer", "timefusion", "dump-embeddings",
                                                 "replay"};
  return names;
}

std::string suggest_command(const std::string& typo) {
  std::string best;
  std::size_t best_d = std::string::npos;
  for (const auto& c : command_names()) {
    std::size_t d = edit_distance(typo, c);
    if (c.rfind(typo, 0) == 0 && !typo.empty()) d = std::min<std::size_t>(d, 1);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best_d <= std::max<std::size_t>(2, typo.size() / 2) ? best : "";
}

fs::path manifest_path_for(const fs::path& out, bool directory_output) {
  if (directory_output) return out / kManifestName;
  return fs::path(out.string() + ".manifest.json");
}

int run(const std::vector<std::string>& args) {
  // Unknown commands get a suggestion before CLI11 sees them.
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "--seed" || a == "--threads" || a == "--precision" || a == "--log-level") {
      ++i;
      continue;
    }
    if (!a.empty() && a[0] == '-') continue;
    const auto& names = command_names();
    if (std::find(names.begin(), names.end(), a) == names.end()) {
      std::cerr << "medfuse: unknown command '" << a << "'\n";
      if (auto s = suggest_command(a); !s.empty()) std::cerr << "Did you mean '" << s << "'?\n";
      std::cerr << "Run 'medfuse --help' for the list of commands.\n";
      return 2;
    }
    break;
  }

  CLI::App app{"medfuse: imputation-free token models for irregular time series"};
  app.name("medfuse");
  app.require_subcommand(0, 1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  int precision = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Run seed (overrides the config)");
  app.add_option("--threads", g.threads, "Worker threads; 1 is the deterministic reference mode")
      ->check(CLI::PositiveNumber);
  auto* prec_opt = app.add_option("--precision", precision, "Floating point width")->check(CLI::IsMember({32, 64}));
  app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off");
  app.set_version_flag("--version", kToolVersion);

  RunContext ctx;
  ctx.argv = args;
  int exit_code = 0;
  std::function<void()> action;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort (events.csv, labels.csv)");
  SynthArgs synth_a;
  synth->add_option("--spec", synth_a.spec, "Cohort spec file")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", synth_a.out, "Output directory")->required();
  synth->callback([&] { action = [&] { cmd_synth(ctx, synth_a); }; });

  auto* tok = app.add_subcommand("tokenize", "Summarize raw events into token sequences");
  TokenizeArgs tok_a;
  tok->add_option("--events", tok_a.events)->required()->check(CLI::ExistingFile);
  tok->add_option("--labels", tok_a.labels)->required()->check(CLI::ExistingFile);
  tok->add_option("--config", tok_a.config)->required()->check(CLI::ExistingFile);
  tok->add_option("--out", tok_a.out, "Output dataset directory")->required();
  tok->callback([&] { action = [&] { cmd_tokenize(ctx, tok_a); }; });

  auto* tr = app.add_subcommand("train", "Train a model and write a checkpoint");
  TrainArgs tr_a;
  tr->add_option("--data", tr_a.data, "Tokenized dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--config", tr_a.config)->required()->check(CLI::ExistingFile);
  tr->add_option("--out", tr_a.out, "Checkpoint path")->required();
  tr->callback([&] { action = [&] { cmd_train(ctx, tr_a); }; });

  auto* ev = app.add_subcommand("evaluate", "Score a split and write an evaluation report");
  EvaluateArgs ev_a;
  ev->add_option("--ckpt", ev_a.ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_a.data)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--out", ev_a.out, "Report CSV")->required();
  ev->add_option("--split", ev_a.split)->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--bootstrap", ev_a.bootstrap, "Bootstrap replicates (0 disables)")->check(CLI::NonNegativeNumber);
  ev->add_option("--threshold", ev_a.threshold);
  ev->add_option("--level", ev_a.level);
  ev->callback([&] { action = [&] { cmd_evaluate(ctx, ev_a); }; });

  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  GradcheckArgs gc_a;
  gc->add_option("--config", gc_a.config)->required()->check(CLI::ExistingFile);
  gc->add_option("--tolerance", gc_a.tolerance);
  gc->add_flag("--all-kinds", gc_a.all_kinds, "Check mufuse, additive, concat and scane");
  gc->add_option("--out", gc_a.out, "Optional output directory");
  gc->callback([&] { action = [&] { exit_code = cmd_gradcheck(ctx, gc_a); }; });

  ExperimentArgs exp_a;
  auto add_experiment = [&](const char* name, const char* help, ExperimentKind kind) {
    auto* sc = app.add_subcommand(name, help);
    sc->add_option("--spec", exp_a.spec, "Experiment spec file")->required()->check(CLI::ExistingFile);
    sc->add_option("--out", exp_a.out, "Output directory")->required();
    sc->callback([&, kind] { action = [&, kind] { cmd_experiment(ctx, kind, exp_a); }; });
  };
  add_experiment("ablate", "Fusion ablation (mufuse / additive / concat)", ExperimentKind::kAblation);
  add_experiment("ksweep", "Partition-factor sweep over divisors of d", ExperimentKind::kKSweep);
  add_experiment("transfer", "Cross-cohort feature-embedding transfer", ExperimentKind::kTransfer);
  add_experiment("timefusion", "Additive vs multiplicative time injection", ExperimentKind::kTimeFusion);

  auto* dump = app.add_subcommand("dump-embeddings", "Per-token embeddings after fusion and after layer 1");
  DumpArgs dump_a;
  dump->add_option("--ckpt", dump_a.ckpt)->required()->check(CLI::ExistingFile);
  dump->add_option("--data", dump_a.data)->required()->check(CLI::ExistingDirectory);
  dump->add_option("--out", dump_a.out, "Output CSV")->required();
  dump->add_option("--split", dump_a.split)->check(CLI::IsMember({"train", "val", "test"}));
  dump->add_option("--limit", dump_a.limit, "Only the first N sequences (0 = all)");
  dump->callback([&] { action = [&] { cmd_dump(ctx, dump_a); }; });

  auto* rp = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  std::string rp_manifest, rp_out;
  rp->add_option("--manifest", rp_manifest)->required()->check(CLI::ExistingFile);
  rp->add_option("--out", rp_out, "New output location")->required();
  rp->callback([&] { action = [&] { exit_code = replay(rp_manifest, rp_out); }; });

  std::vector<const char*> cargs;
  for (const auto& a : args) cargs.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  if (!action) {
    std::cerr << app.help();
    return 2;
  }
  if (seed_opt->count()) g.seed = seed;
  if (prec_opt->count()) g.precision = precision;
  ctx.globals = g;
  for (auto* sc : app.get_subcommands()) ctx.command = sc->get_name();

  try {
    setup_logging(g.log_level);
    action();
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return exit_code;
}

int replay(const fs::path& manifest, const fs::path& new_out) {
  json m;
  try {
    m = json::parse(io::read_file(manifest));
  } catch (const json::exception& e) {
    throw ConfigError(manifest.string() + ": not a run manifest (" + e.what() + ")");
  }
  for (const auto& [path, hash] : m.at("inputs").items()) {
    if (!fs::exists(path)) throw ConfigError("replay: input " + path + " no longer exists");
    if (io::file_hash(path) != hash.get<std::string>()) {
      throw ConfigError("replay: input " + path + " changed since the recorded run");
    }
  }
  std::vector<std::string> argv = m.at("replay_argv").get<std::vector<std::string>>();
  bool replaced = false;
  for (std::size_t i = 0; i + 1 < argv.size(); ++i) {
    if (argv[i] == "--out") {
      argv[i + 1] = abs_path(new_out).string();
      replaced = true;
    }
  }
  if (!replaced) throw ConfigError("replay: the recorded command has no --out");
  spdlog::info("replaying '{}' into {}", m.at("command").get<std::string>(), abs_path(new_out).string());
  return run(argv);
}

}  // namespace medfuse::cli
