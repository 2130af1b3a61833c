#include "medfuse/experiments.hpp"

#include "medfuse/io.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace medfuse {

// ---- data -----------------------------------------------------------------------

DataSource DataSource::from_config(const KeyValueConfig& cfg, const std::string& section,
                                   const std::string& cohort_section,
                                   const std::filesystem::path& base_dir) {
  DataSource src;
  auto key = [&](const char* k) { return section + "." + k; };
  if (cfg.has(key("dir"))) {
    std::filesystem::path p = cfg.get_string(key("dir"));
    src.dir = p.is_absolute() ? p : base_dir / p;
  }
  src.synthetic = SyntheticSpec::from_config(cfg, cohort_section);
  src.synthetic_seed = static_cast<std::uint64_t>(cfg.get_int(key("seed"), 7));
  src.split.train = cfg.get_double(key("train_fraction"), src.split.train);
  src.split.val = cfg.get_double(key("val_fraction"), src.split.val);
  src.split.seed = static_cast<std::uint64_t>(cfg.get_int(key("split_seed"), static_cast<long long>(src.split.seed)));
  if (!(src.split.train > 0.0 && src.split.val > 0.0 && src.split.train + src.split.val < 1.0)) {
    throw ConfigError(cfg.origin() + ": [" + section + "] split fractions must be positive and sum below 1");
  }
  return src;
}

TokenizedDataset DataSource::load() const {
  if (dir) return read_tokenized(*dir);
  const Cohort cohort = generate_synthetic(synthetic, synthetic_seed);
  const SummarizationConfig window{synthetic.window_length, synthetic.bin_width, synthetic.horizon};
  return tokenize_cohort(cohort, window, split);
}

template <class T>
TrainResult<T> train_model(const ModelConfig& cfg, const TokenizedDataset& data, const TrainConfig& train_cfg,
                           const TrainOptions<T>& opts, const Model<T>* initial) {
  Model<T> model = initial ? *initial : make_model<T>(cfg, data.schema, train_cfg.seed);
  return train<T>(std::move(model), data.train, data.val, train_cfg, opts);
}

ScoredRows scored_rows(std::span<const TokenSequence> seqs, std::vector<double> scores) {
  ScoredRows rows;
  rows.scores = std::move(scores);
  bool all_times = !seqs.empty();
  for (const auto& s : seqs) {
    rows.labels.push_back(s.label);
    all_times = all_times && s.event_time.has_value();
  }
  if (all_times) {
    for (const auto& s : seqs) {
      rows.times.push_back(*s.event_time);
      rows.events.push_back(s.event ? 1 : 0);
    }
  }
  return rows;
}

// ---- spec ---------------------------------------------------------------------------

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::kAblation:
      return "ablation";
    case ExperimentKind::kKSweep:
      return "ksweep";
    case ExperimentKind::kTransfer:
      return "transfer";
    case ExperimentKind::kTimeFusion:
      return "timefusion";
  }
  return "?";
}

ExperimentKind parse_experiment_kind(const std::string& text) {
  if (text == "ablation") return ExperimentKind::kAblation;
  if (text == "ksweep") return ExperimentKind::kKSweep;
  if (text == "transfer") return ExperimentKind::kTransfer;
  if (text == "timefusion") return ExperimentKind::kTimeFusion;
  throw ConfigError("unknown experiment kind '" + text + "' (expected ablation|ksweep|transfer|timefusion)");
}

std::vector<int> divisors(int d) {
  std::vector<int> out;
  for (int k = 1; k <= d; ++k) {
    if (d % k == 0) out.push_back(k);
  }
  return out;
}

void check_k_grid(const std::vector<int>& ks, int d) {
  std::string bad;
  for (int k : ks) {
    if (k <= 0 || d % k != 0) bad += (bad.empty() ? "" : ", ") + std::to_string(k);
  }
  if (!bad.empty()) {
    throw ConfigError("k-sweep: k values {" + bad + "} do not divide d=" + std::to_string(d));
  }
}

ExperimentSpec ExperimentSpec::from_config(const KeyValueConfig& cfg, const std::filesystem::path& base_dir) {
  ExperimentSpec s;
  s.kind = parse_experiment_kind(cfg.get_string("experiment.kind"));
  if (cfg.has("experiment.seeds")) {
    s.seeds.clear();
    for (long long v : cfg.get_int_list("experiment.seeds")) s.seeds.push_back(static_cast<std::uint64_t>(v));
    if (s.seeds.empty()) throw ConfigError(cfg.origin() + ": experiment.seeds is empty");
  }
  s.threads = static_cast<int>(cfg.get_int("experiment.threads", 1));
  s.model = ModelConfig::from_config(cfg);
  s.train = TrainConfig::from_config(cfg);
  s.eval.n_bootstrap = static_cast<int>(cfg.get_int("eval.n_bootstrap", s.eval.n_bootstrap));
  s.eval.level = cfg.get_double("eval.level", s.eval.level);
  s.eval.threshold = cfg.get_double("eval.threshold", s.eval.threshold);
  s.eval.seed = static_cast<std::uint64_t>(cfg.get_int("eval.seed", 0));

  if (s.kind != ExperimentKind::kTransfer) s.data = DataSource::from_config(cfg, "data", "cohort", base_dir);

  if (cfg.has("grid.arms")) {
    s.arms.clear();
    for (const auto& a : cfg.get_string_list("grid.arms")) {
      auto kind = parse_fusion_kind(a);
      if (kind == FusionKind::kScane) throw ConfigError(cfg.origin() + ": ablation arms are mufuse, additive, concat");
      s.arms.push_back(kind);
    }
  }
  if (cfg.has("grid.k") && cfg.get_string("grid.k") != "all") {
    for (long long k : cfg.get_int_list("grid.k")) s.k_values.push_back(static_cast<int>(k));
  }
  if (s.kind == ExperimentKind::kKSweep) check_k_grid(s.k_values, s.model.fusion.d);
  if (cfg.has("grid.modes")) {
    s.modes.clear();
    for (const auto& m : cfg.get_string_list("grid.modes")) s.modes.push_back(parse_time_mode(m));
  }
  s.trace_dims = static_cast<int>(cfg.get_int("grid.trace_dims", s.trace_dims));
  s.trace_points = static_cast<int>(cfg.get_int("grid.trace_points", s.trace_points));
  if (s.trace_dims < 1 || s.trace_dims > s.model.fusion.d || s.trace_points < 2) {
    throw ConfigError(cfg.origin() + ": grid.trace_dims must be in [1, d] and grid.trace_points >= 2");
  }

  if (s.kind == ExperimentKind::kTransfer) {
    s.source = DataSource::from_config(cfg, "source", "source_cohort", base_dir);
    s.target = DataSource::from_config(cfg, "target", "target_cohort", base_dir);
    if (cfg.has("transfer.directions")) s.directions = cfg.get_string_list("transfer.directions");
    for (const auto& d : s.directions) {
      if (d != "source_to_target" && d != "target_to_source") {
        throw ConfigError(cfg.origin() + ": unknown transfer direction '" + d + "'");
      }
    }
    s.freeze_epochs = static_cast<int>(cfg.get_int("transfer.freeze_epochs", s.freeze_epochs));
    if (s.freeze_epochs < 0) throw ConfigError(cfg.origin() + ": transfer.freeze_epochs must be >= 0");
    s.subsample_arm = cfg.get_bool("transfer.subsample_arm", false);
    if (cfg.has("transfer.name_map")) {
      std::filesystem::path p = cfg.get_string("transfer.name_map");
      s.name_map = load_name_map(p.is_absolute() ? p : base_dir / p);
    }
    for (const auto& [k, v] : cfg.entries("name_map")) s.name_map[k] = v;
  }
  return s;
}

// ---- fingerprints ------------------------------------------------------------------

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

bool arm_dependent(const std::string& name) {
  return name == names::kProjW2 || name == names::kProjB2 || name == names::kGamma ||
         name == names::kBeta || name == names::kConcatProj;
}

}  // namespace

std::string shared_stream_fingerprint(std::uint64_t seed, const EncoderConfig& enc) {
  std::vector<std::string> streams = {"train.shuffle", "train.dropout"};
  for (const char* n : {names::kFeatureTable, names::kProjW1, names::kProjB1, names::kCatTable, names::kWCat}) {
    streams.push_back(std::string("init.") + n);
  }
  for (int l = 0; l < enc.num_layers; ++l) {
    for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo", "ff.w1", "ff.w2"}) {
      streams.push_back("init.encoder." + std::to_string(l) + "." + w);
    }
  }
  streams.push_back("init.head.w");
  std::uint64_t h = 0;
  for (const auto& s : streams) h = mix64(h ^ stream_fingerprint(seed, s));
  return hex64(h);
}

template <class T>
std::string shape_invariant_init_hash(const ParamStore<T>& params) {
  ParamStore<T> shared;
  for (const auto& p : params.all()) {
    if (!arm_dependent(p.name)) shared.add(p.name, p.value);
  }
  return params_hash(shared);
}

// ---- arms ---------------------------------------------------------------------------

namespace {

template <class F>
void parallel_for(std::size_t n, int threads, F&& body) {
  const int n_threads = std::max(1, std::min<int>(threads, static_cast<int>(n)));
  if (n_threads == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_threads));
  std::vector<std::thread> pool;
  for (int t = 0; t < n_threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = next++; i < n; i = next++) body(i);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

template <class F>
decltype(auto) with_precision(Precision p, F&& f) {
  if (p == Precision::kFloat64) return f(double{});
  return f(float{});
}

struct ArmJob {
  std::string arm;
  std::uint64_t seed = 0;
  ModelConfig model;
  std::map<std::string, std::string> extra;
};

// Trains one arm and evaluates it on the test split. Divergence marks the row
// failed instead of aborting the experiment.
template <class T>
ArmRow run_arm(const std::string& experiment, const ArmJob& job, const TokenizedDataset& data,
               const ExperimentSpec& spec, const TrainOptions<T>& opts = {}, const Model<T>* initial = nullptr,
               Model<T>* trained = nullptr) {
  ArmRow row;
  row.experiment = experiment;
  row.arm = job.arm;
  row.seed = job.seed;
  row.extra = job.extra;
  TrainConfig tc = spec.train;
  tc.seed = job.seed;
  Model<T> init = initial ? *initial : make_model<T>(job.model, data.schema, job.seed);
  row.init_hash = shape_invariant_init_hash(init.params);
  row.rng_fingerprint = shared_stream_fingerprint(job.seed, job.model.encoder);
  try {
    auto res = train_model<T>(job.model, data, tc, opts, &init);
    row.trace = res.trace;
    row.best_epoch = res.trace.best_epoch;
    row.epochs_run = static_cast<int>(res.trace.epochs.size());
    row.params_hash = params_hash(res.model.params);
    auto scores = predict<T>(res.model, data.test, 1);
    EvalOptions eo = spec.eval;
    eo.seed = derive_seed(spec.eval.seed ^ job.seed, "eval");
    eo.threads = 1;
    row.report = evaluate_scores(scored_rows(data.test, std::move(scores)), eo);
    row.ok = true;
    if (trained) *trained = std::move(res.model);
  } catch (const TrainingDiverged& e) {
    row.ok = false;
    row.error = e.what();
    row.trace = e.trace();
    row.epochs_run = static_cast<int>(e.trace().epochs.size());
    spdlog::warn("{} arm {} seed {} diverged: {}", experiment, job.arm, job.seed, e.what());
  }
  if (row.ok) {
    spdlog::info("{} arm {} seed {}: test AUPRC {:.4f} AUROC {:.4f} (best epoch {})", experiment, job.arm, job.seed,
                 row.report.auprc.point, row.report.auroc.point, row.best_epoch);
  }
  return row;
}

std::vector<ArmRow> run_jobs(const std::string& experiment, const std::vector<ArmJob>& jobs,
                             const TokenizedDataset& data, const ExperimentSpec& spec) {
  std::vector<ArmRow> rows(jobs.size());
  parallel_for(jobs.size(), spec.threads, [&](std::size_t i) {
    rows[i] = with_precision(spec.train.precision, [&](auto tag) {
      using T = decltype(tag);
      return run_arm<T>(experiment, jobs[i], data, spec);
    });
  });
  return rows;
}

std::string num(double v) { return io::format_double(v); }

std::vector<int> category_counts(const FeatureSchema& schema) {
  std::vector<int> out;
  for (const auto& f : schema.features()) out.push_back(f.n_categories);
  return out;
}

}  // namespace

std::string rows_to_csv(std::vector<ArmRow> rows, const std::vector<std::string>& extra_columns) {
  std::sort(rows.begin(), rows.end(), [](const ArmRow& a, const ArmRow& b) {
    return std::tie(a.arm, a.seed, a.extra) < std::tie(b.arm, b.seed, b.extra);
  });
  std::string out = "experiment,arm,seed";
  for (const auto& c : extra_columns) out += "," + c;
  out += ",status,auprc,auprc_low,auprc_high,auroc,auroc_low,auroc_high,accuracy,accuracy_low,accuracy_high,"
         "c_index,c_index_low,c_index_high,n_bootstrap,best_epoch,epochs_run,init_hash,rng_fingerprint,"
         "params_hash\n";
  for (const auto& r : rows) {
    out += io::csv_escape(r.experiment) + "," + io::csv_escape(r.arm) + "," + std::to_string(r.seed);
    for (const auto& c : extra_columns) {
      auto it = r.extra.find(c);
      out += "," + io::csv_escape(it == r.extra.end() ? "" : it->second);
    }
    out += r.ok ? ",ok" : ",failed";
    for (const auto* m : {&r.report.auprc, &r.report.auroc, &r.report.accuracy, &r.report.c_index}) {
      if (r.ok) {
        out += "," + num(m->point) + "," + num(m->ci_low) + "," + num(m->ci_high);
      } else {
        out += ",,,";
      }
    }
    out += "," + std::to_string(r.report.n_bootstrap) + "," + std::to_string(r.best_epoch) + "," +
           std::to_string(r.epochs_run) + "," + r.init_hash + "," + r.rng_fingerprint + "," + r.params_hash + "\n";
  }
  return out;
}

namespace {

void add_traces(ExperimentResult& result, const std::vector<ArmRow>& rows) {
  for (const auto& r : rows) {
    std::string name = "traces/" + r.arm + "_seed" + std::to_string(r.seed);
    for (const auto& [k, v] : r.extra) {
      if (k == "direction") name += "_" + v;
    }
    result.files[name + ".csv"] = r.trace.to_csv(false);
  }
}

}  // namespace

ExperimentResult run_ablation(const ExperimentSpec& spec) {
  for (auto kind : spec.arms) {
    if (kind == FusionKind::kScane) throw ConfigError("ablation arms are mufuse, additive, concat");
  }
  const TokenizedDataset data = spec.data.load();
  std::vector<ArmJob> jobs;
  for (auto seed : spec.seeds) {
    for (auto kind : spec.arms) {
      ArmJob job;
      job.arm = to_string(kind);
      job.seed = seed;
      job.model = spec.model;
      FusionConfig& f = job.model.fusion;
      const int base_dp = spec.model.fusion.d_prime;
      f.kind = kind;
      if (kind == FusionKind::kAdditive) {
        f.d_prime = f.d;
        f.k = 1;
      } else if (kind == FusionKind::kConcat) {
        f.d_prime = base_dp;
        f.k = 1;
      } else {
        f.d_prime = base_dp;
        f.k = f.d / base_dp;
      }
      job.model.validate();
      job.extra["d_prime"] = std::to_string(f.d_prime);
      jobs.push_back(std::move(job));
    }
  }
  ExperimentResult result;
  result.rows = run_jobs("ablation", jobs, data, spec);
  result.files["results.csv"] = rows_to_csv(result.rows, {"d_prime"});
  add_traces(result, result.rows);
  return result;
}

ExperimentResult run_ksweep(const ExperimentSpec& spec) {
  const int d = spec.model.fusion.d;
  std::vector<int> ks = spec.k_values.empty() ? divisors(d) : spec.k_values;
  check_k_grid(ks, d);  // before any data is generated or trained

  std::vector<ArmJob> jobs;
  for (auto seed : spec.seeds) {
    for (int k : ks) {
      ArmJob job;
      job.seed = seed;
      job.model = spec.model;
      FusionConfig f = spec.model.fusion;
      f.kind = FusionKind::kMuFuse;
      f.k = k;
      f.d_prime = d / k;
      f = f.normalized();
      job.model.fusion = f;
      job.model.validate();
      char arm[16];
      std::snprintf(arm, sizeof arm, "k%03d", k);
      job.arm = arm;
      job.extra["k"] = std::to_string(k);
      job.extra["d_prime"] = std::to_string(f.d_prime);
      job.extra["kind"] = to_string(f.kind);
      jobs.push_back(std::move(job));
    }
  }
  const TokenizedDataset data = spec.data.load();
  ExperimentResult result;
  result.rows = run_jobs("ksweep", jobs, data, spec);
  result.files["results.csv"] = rows_to_csv(result.rows, {"k", "d_prime", "kind"});

  // Long format for plotting: one line per (k, seed, metric).
  auto rows = result.rows;
  std::sort(rows.begin(), rows.end(), [](const ArmRow& a, const ArmRow& b) {
    return std::make_pair(std::stoi(a.extra.at("k")), a.seed) < std::make_pair(std::stoi(b.extra.at("k")), b.seed);
  });
  std::string long_csv = "k,d_prime,kind,seed,metric,value,ci_low,ci_high\n";
  for (const auto& r : rows) {
    if (!r.ok) continue;
    const std::string head = r.extra.at("k") + "," + r.extra.at("d_prime") + "," + r.extra.at("kind") + "," +
                             std::to_string(r.seed) + ",";
    long_csv += head + "auprc," + num(r.report.auprc.point) + "," + num(r.report.auprc.ci_low) + "," +
                num(r.report.auprc.ci_high) + "\n";
    long_csv += head + "auroc," + num(r.report.auroc.point) + "," + num(r.report.auroc.ci_low) + "," +
                num(r.report.auroc.ci_high) + "\n";
  }
  result.files["ksweep_long.csv"] = long_csv;
  add_traces(result, result.rows);
  return result;
}

// ---- transfer ------------------------------------------------------------------------

ExperimentResult run_transfer(const ExperimentSpec& spec) {
  const TokenizedDataset source = spec.source.load();
  const TokenizedDataset target = spec.target.load();
  ExperimentResult result;

  for (const auto& direction : spec.directions) {
    const bool forward = direction == "source_to_target";
    const TokenizedDataset& from = forward ? source : target;
    const TokenizedDataset& to = forward ? target : source;
    std::map<std::string, std::string> name_map = spec.name_map;
    if (!forward) {
      name_map.clear();
      for (const auto& [s, t] : spec.name_map) name_map[t] = s;
    }
    TokenizedDataset from_small;
    if (spec.subsample_arm) {
      from_small = from;
      if (from_small.train.size() > to.train.size()) from_small.train.resize(to.train.size());
    }

    std::vector<ArmRow> rows(spec.seeds.size() * (spec.subsample_arm ? 5 : 3));
    parallel_for(spec.seeds.size(), spec.threads, [&](std::size_t si) {
      const auto seed = spec.seeds[si];
      with_precision(spec.train.precision, [&](auto tag) {
        using T = decltype(tag);
        ArmJob job;
        job.seed = seed;
        job.model = spec.model;
        job.extra["direction"] = direction;
        std::size_t slot = si * (spec.subsample_arm ? 5 : 3);

        // Source pretraining, evaluated on the source test split.
        job.arm = "source";
        Model<T> src_model;
        rows[slot++] = run_arm<T>("transfer", job, from, spec, {}, nullptr, &src_model);

        job.arm = "scratch";
        rows[slot++] = run_arm<T>("transfer", job, to, spec);

        auto transfer_arm = [&](const std::string& arm, const Model<T>& src) {
          Model<T> init = make_model<T>(spec.model, to.schema, seed);
          const std::vector<int> moved = import_embeddings(init, export_embeddings(src), name_map);
          const Matrix<T> table0 = init.params.at(names::kFeatureTable).value;
          std::set<int> moved_set(moved.begin(), moved.end());
          bool freeze_ok = true, others_moved = false;
          TrainOptions<T> opts;
          opts.frozen_rows[names::kFeatureTable] = moved;
          opts.freeze_epochs = spec.freeze_epochs;
          opts.on_epoch_end = [&](int epoch, const ParamStore<T>& params) {
            if (epoch > spec.freeze_epochs) return;
            const auto& table = params.at(names::kFeatureTable).value;
            for (Eigen::Index r = 0; r < table.rows(); ++r) {
              const bool same = table.row(r) == table0.row(r);
              if (moved_set.count(static_cast<int>(r))) {
                freeze_ok = freeze_ok && same;
              } else {
                others_moved = others_moved || !same;
              }
            }
          };
          ArmJob tj = job;
          tj.arm = arm;
          tj.extra["overwritten_rows"] = std::to_string(moved.size());
          ArmRow row = run_arm<T>("transfer", tj, to, spec, opts, &init);
          row.extra["freeze_ok"] = spec.freeze_epochs > 0 ? (freeze_ok ? "1" : "0") : "";
          row.extra["unfrozen_rows_moved"] = spec.freeze_epochs > 0 ? (others_moved ? "1" : "0") : "";
          return row;
        };
        if (rows[slot - 2].ok) {
          rows[slot++] = transfer_arm("transfer", src_model);
        } else {
          rows[slot] = rows[slot - 2];
          rows[slot++].arm = "transfer";
        }
        if (spec.subsample_arm) {
          job.arm = "source_subsample";
          Model<T> small_model;
          rows[slot++] = run_arm<T>("transfer", job, from_small, spec, {}, nullptr, &small_model);
          if (rows[slot - 1].ok) {
            rows[slot++] = transfer_arm("transfer_subsample", small_model);
          } else {
            rows[slot] = rows[slot - 1];
            rows[slot++].arm = "transfer_subsample";
          }
        }
        return 0;
      });
    });
    result.rows.insert(result.rows.end(), rows.begin(), rows.end());
  }
  result.files["results.csv"] =
      rows_to_csv(result.rows, {"direction", "overwritten_rows", "freeze_ok", "unfrozen_rows_moved"});
  add_traces(result, result.rows);
  return result;
}

// ---- time fusion ----------------------------------------------------------------------

std::string time_trace_csv(const std::vector<double>& content, const std::vector<double>& wavelengths,
                           TimeMode mode, int dims, int points, double t_max) {
  const int d = static_cast<int>(wavelengths.size()) * 2;
  if (static_cast<int>(content.size()) != d) throw ShapeError("time trace: content width differs from d");
  if (dims < 1 || dims > d || points < 2) throw ConfigError("time trace: bad grid");
  std::string out = "mode,dim,t,content,time_value,fused\n";
  for (int i = 0; i < dims; ++i) {
    for (int j = 0; j < points; ++j) {
      const double t = t_max * static_cast<double>(j) / static_cast<double>(points - 1);
      Vector<double> p = time_encoding<double>(t, d, wavelengths);
      Vector<double> c = Eigen::Map<const Vector<double>>(content.data(), d);
      Vector<double> fused = inject_time<double>(c, p, mode);
      out += to_string(mode) + "," + std::to_string(i) + "," + num(t) + "," + num(content[i]) + "," + num(p(i)) +
             "," + num(fused(i)) + "\n";
    }
  }
  return out;
}

ExperimentResult run_timefusion(const ExperimentSpec& spec) {
  const TokenizedDataset data = spec.data.load();
  ExperimentResult result;
  std::vector<ArmJob> jobs;
  for (auto seed : spec.seeds) {
    for (auto mode : spec.modes) {
      ArmJob job;
      job.arm = to_string(mode);
      job.seed = seed;
      job.model = spec.model;
      job.model.time.mode = mode;
      jobs.push_back(std::move(job));
    }
  }
  std::vector<ArmRow> rows(jobs.size());
  std::vector<std::vector<double>> contents(jobs.size());
  parallel_for(jobs.size(), spec.threads, [&](std::size_t i) {
    with_precision(spec.train.precision, [&](auto tag) {
      using T = decltype(tag);
      Model<T> trained;
      rows[i] = run_arm<T>("timefusion", jobs[i], data, spec, {}, nullptr, &trained);
      if (rows[i].ok) {
        // Content of a reference token: feature 0 at its training mean.
        Vector<T> c = data.schema.at(0).kind == FeatureKind::kNumeric
                          ? fuse_value_token<T>(0, 0.0, trained.params, trained.config.fusion)
                          : embed_categorical<T>(0, 0, trained.params, trained.category_offsets, category_counts(trained.schema));
        contents[i].assign(c.data(), c.data() + c.size());
        for (auto& v : contents[i]) v = static_cast<double>(static_cast<T>(v));
      }
      return 0;
    });
  });
  result.rows = rows;
  result.files["results.csv"] = rows_to_csv(result.rows, {});

  const double t_max = spec.data.dir ? 48.0 : spec.data.synthetic.window_length;
  const auto wavelengths = time_wavelengths(spec.model.fusion.d, spec.model.time.omega_min, spec.model.time.omega_max);
  std::string traces = "seed,mode,dim,t,content,time_value,fused\n";
  std::vector<std::size_t> order(jobs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) {
    return std::make_pair(jobs[a].seed, jobs[a].arm) < std::make_pair(jobs[b].seed, jobs[b].arm);
  });
  for (auto i : order) {
    if (!rows[i].ok) continue;
    std::string block = time_trace_csv(contents[i], wavelengths, jobs[i].model.time.mode, spec.trace_dims,
                                       spec.trace_points, t_max);
    std::istringstream in(block);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) traces += std::to_string(jobs[i].seed) + "," + line + "\n";
  }
  result.files["time_traces.csv"] = traces;
  add_traces(result, result.rows);
  return result;
}

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  switch (spec.kind) {
    case ExperimentKind::kAblation:
      return run_ablation(spec);
    case ExperimentKind::kKSweep:
      return run_ksweep(spec);
    case ExperimentKind::kTransfer:
      return run_transfer(spec);
    case ExperimentKind::kTimeFusion:
      return run_timefusion(spec);
  }
  throw ConfigError("unknown experiment kind");
}

// ---- embedding bundles -----------------------------------------------------------------

namespace {

std::string hexfloat(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::hex);
  return std::string(buf, res.ptr);
}

std::string row_text(const Matrix<double>& m, Eigen::Index r) {
  std::string out;
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    if (c) out += ' ';
    out += hexfloat(m(r, c));
  }
  return out;
}

void parse_row(const std::string& line, Matrix<double>& m, Eigen::Index r) {
  std::istringstream in(line);
  std::string tok;
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    if (!(in >> tok)) throw ConfigError("embedding bundle: short row");
    double v = 0;
    auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v, std::chars_format::hex);
    if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
      throw ConfigError("embedding bundle: bad value '" + tok + "'");
    }
    m(r, c) = v;
  }
}

}  // namespace

std::string EmbeddingBundle::serialize() const {
  std::string out = "medfuse-embeddings 1\n";
  out += "d " + std::to_string(d) + "\nd_prime " + std::to_string(d_prime) + "\n";
  out += "source " + source_fingerprint + "\n";
  out += "count " + std::to_string(names.size()) + "\n";
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out += "name " + names[i] + "\n";
    out += row_text(feature_rows, r) + "\n" + row_text(gamma_rows, r) + "\n" + row_text(beta_rows, r) + "\n";
  }
  return out;
}

EmbeddingBundle EmbeddingBundle::deserialize(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  auto next = [&]() -> std::string& {
    if (!std::getline(in, line)) throw ConfigError("embedding bundle: truncated");
    return line;
  };
  if (next() != "medfuse-embeddings 1") throw ConfigError("not an embedding bundle");
  EmbeddingBundle b;
  std::size_t count = 0;
  auto field = [&](const char* key) {
    std::string& l = next();
    const std::string prefix = std::string(key) + " ";
    if (l.rfind(prefix, 0) != 0) throw ConfigError(std::string("embedding bundle: expected ") + key);
    return l.substr(prefix.size());
  };
  b.d = static_cast<int>(io::parse_int(field("d")));
  b.d_prime = static_cast<int>(io::parse_int(field("d_prime")));
  b.source_fingerprint = field("source");
  count = static_cast<std::size_t>(io::parse_int(field("count")));
  const auto n = static_cast<Eigen::Index>(count);
  b.feature_rows.resize(n, b.d);
  b.gamma_rows.resize(n, b.d_prime);
  b.beta_rows.resize(n, b.d_prime);
  for (Eigen::Index i = 0; i < n; ++i) {
    b.names.push_back(field("name"));
    parse_row(next(), b.feature_rows, i);
    parse_row(next(), b.gamma_rows, i);
    parse_row(next(), b.beta_rows, i);
  }
  return b;
}

template <class T>
EmbeddingBundle export_embeddings(const Model<T>& model) {
  EmbeddingBundle b;
  b.d = model.config.fusion.d;
  b.d_prime = model.config.fusion.d_prime;
  b.source_fingerprint = model.schema.hash() + ":" + params_hash(model.params);
  b.feature_rows = model.params.at(names::kFeatureTable).value.template cast<double>();
  b.gamma_rows = model.params.at(names::kGamma).value.template cast<double>();
  b.beta_rows = model.params.at(names::kBeta).value.template cast<double>();
  for (const auto& f : model.schema.features()) b.names.push_back(f.name);
  return b;
}

template <class T>
std::vector<int> import_embeddings(Model<T>& model, const EmbeddingBundle& bundle,
                                   const std::map<std::string, std::string>& name_map) {
  if (bundle.d != model.config.fusion.d) {
    throw ConfigError("embedding import: bundle d=" + std::to_string(bundle.d) + " but model d=" +
                      std::to_string(model.config.fusion.d));
  }
  std::vector<std::pair<int, std::size_t>> moves;
  std::set<int> targets;
  for (std::size_t i = 0; i < bundle.names.size(); ++i) {
    auto it = name_map.find(bundle.names[i]);
    const std::string& name = it == name_map.end() ? bundle.names[i] : it->second;
    auto f = model.schema.find(name);
    if (!f) continue;
    if (!targets.insert(*f).second) throw ConfigError("embedding import: two source features map to " + name);
    moves.emplace_back(*f, i);
  }
  if (moves.empty()) {
    std::string src, dst;
    for (const auto& n : bundle.names) src += (src.empty() ? "" : ", ") + n;
    for (const auto& f : model.schema.features()) dst += (dst.empty() ? "" : ", ") + f.name;
    throw ConfigError("embedding import: no overlapping features\n  source: " + src + "\n  target: " + dst);
  }
  auto& table = model.params.at(names::kFeatureTable).value;
  std::string moved_names;
  for (auto [row, i] : moves) {
    table.row(row) = bundle.feature_rows.row(static_cast<Eigen::Index>(i)).template cast<T>();
    moved_names += (moved_names.empty() ? "" : ", ") + model.schema.at(row).name;
  }
  spdlog::info("imported {} feature embeddings: {}", moves.size(), moved_names);
  std::vector<int> rows(targets.begin(), targets.end());
  return rows;
}

std::map<std::string, std::string> load_name_map(const std::filesystem::path& path) {
  auto cfg = KeyValueConfig::load(path);
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : cfg.entries("names")) out[k] = v;
  return out;
}

// ---- dumps ---------------------------------------------------------------------------

template <class T>
std::string dump_embeddings(const Model<T>& model, std::span<const TokenSequence> seqs) {
  const int d = model.config.fusion.d;
  std::string out = "token_id,feature,stage";
  for (int j = 0; j < d; ++j) out += ",e" + std::to_string(j);
  out += "\n";
  for (const auto& seq : seqs) {
    if (seq.tokens.empty()) continue;
    auto stages = token_stages<T>(model, seq);
    for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
      const std::string id = io::csv_escape(seq.entity_id + ":" + std::to_string(i));
      const std::string feat = io::csv_escape(model.schema.at(seq.tokens[i].feature_id).name);
      for (const auto* stage : {&stages.post_fusion, &stages.post_layer1}) {
        out += id + "," + feat + "," + (stage == &stages.post_fusion ? "post-fusion" : "post-layer-1");
        for (int j = 0; j < d; ++j) {
          out += "," + num(static_cast<double>((*stage)(static_cast<Eigen::Index>(i), j)));
        }
        out += "\n";
      }
    }
  }
  return out;
}

#define MEDFUSE_INSTANTIATE(T)                                                                          \
  template TrainResult<T> train_model<T>(const ModelConfig&, const TokenizedDataset&, const TrainConfig&, \
                                         const TrainOptions<T>&, const Model<T>*);                       \
  template std::string shape_invariant_init_hash<T>(const ParamStore<T>&);                               \
  template EmbeddingBundle export_embeddings<T>(const Model<T>&);                                        \
  template std::vector<int> import_embeddings<T>(Model<T>&, const EmbeddingBundle&,                      \
                                                 const std::map<std::string, std::string>&);             \
  template std::string dump_embeddings<T>(const Model<T>&, std::span<const TokenSequence>);

MEDFUSE_INSTANTIATE(float)
MEDFUSE_INSTANTIATE(double)

#undef MEDFUSE_INSTANTIATE

}  // namespace medfuse
