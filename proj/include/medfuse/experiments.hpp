#pragma once

#include "medfuse/metrics.hpp"
#include "medfuse/training.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace medfuse {

// Where an experiment's data comes from: a tokenized dataset directory, or a
// synthetic cohort generated and tokenized on the fly.
struct DataSource {
  std::optional<std::filesystem::path> dir;
  SyntheticSpec synthetic;
  std::uint64_t synthetic_seed = 7;
  SplitConfig split;

  // Keys under [<section>]: dir, seed, train_fraction, val_fraction,
  // split_seed. The synthetic cohort is read from [<cohort_section>].
  static DataSource from_config(const KeyValueConfig& cfg, const std::string& section,
                                const std::string& cohort_section,
                                const std::filesystem::path& base_dir);
  TokenizedDataset load() const;
};

// Builds a model from `cfg` and `train_cfg.seed`, then trains it. Both the
// train command and every experiment arm go through here, so identical inputs
// give identical parameters regardless of the caller.
template <class T>
TrainResult<T> train_model(const ModelConfig& cfg, const TokenizedDataset& data,
                           const TrainConfig& train_cfg, const TrainOptions<T>& opts = {},
                           const Model<T>* initial = nullptr);

// ScoredRows for a split (labels plus event times when every row has one).
ScoredRows scored_rows(std::span<const TokenSequence> seqs, std::vector<double> scores);

enum class ExperimentKind { kAblation, kKSweep, kTransfer, kTimeFusion };

std::string to_string(ExperimentKind kind);
ExperimentKind parse_experiment_kind(const std::string& text);

struct ExperimentSpec {
  ExperimentKind kind = ExperimentKind::kAblation;
  std::vector<std::uint64_t> seeds{1};
  ModelConfig model;
  TrainConfig train;
  EvalOptions eval;
  int threads = 1;  // concurrent arms

  DataSource data;  // ablation, ksweep, timefusion

  std::vector<FusionKind> arms{FusionKind::kMuFuse, FusionKind::kAdditive, FusionKind::kConcat};
  std::vector<int> k_values;  // empty: every divisor of d
  std::vector<TimeMode> modes{TimeMode::kAdd, TimeMode::kMultiply};
  int trace_dims = 5;
  int trace_points = 481;

  // transfer
  DataSource source;
  DataSource target;
  std::vector<std::string> directions{"source_to_target"};
  int freeze_epochs = 5;
  std::map<std::string, std::string> name_map;  // source name -> target name
  bool subsample_arm = false;

  static ExperimentSpec from_config(const KeyValueConfig& cfg, const std::filesystem::path& base_dir);
};

// One trained arm. Rows are keyed by (arm, seed) and written sorted.
struct ArmRow {
  std::string experiment;
  std::string arm;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> extra;  // kind-specific columns
  bool ok = false;
  std::string error;
  EvalReport report;
  int best_epoch = 0;
  int epochs_run = 0;
  std::string init_hash;        // tensors whose shape does not depend on the arm
  std::string rng_fingerprint;  // streams shared by all arms
  std::string params_hash;      // trained parameters
  TrainTrace trace;
};

struct ExperimentResult {
  std::vector<ArmRow> rows;
  // Additional CSV outputs keyed by file name (e.g. time traces).
  std::map<std::string, std::string> files;
};

std::string rows_to_csv(std::vector<ArmRow> rows, const std::vector<std::string>& extra_columns);

// Divisors of d in increasing order.
std::vector<int> divisors(int d);

// Throws ConfigError naming every k that does not divide d.
void check_k_grid(const std::vector<int>& ks, int d);

// Hash of the RNG streams every arm shares for a seed, and of the initial
// tensors whose shapes are independent of the fusion kind and k.
std::string shared_stream_fingerprint(std::uint64_t seed, const EncoderConfig& enc);
template <class T>
std::string shape_invariant_init_hash(const ParamStore<T>& params);

ExperimentResult run_ablation(const ExperimentSpec& spec);
ExperimentResult run_ksweep(const ExperimentSpec& spec);
ExperimentResult run_transfer(const ExperimentSpec& spec);
ExperimentResult run_timefusion(const ExperimentSpec& spec);
ExperimentResult run_experiment(const ExperimentSpec& spec);

// ---- embedding transfer ------------------------------------------------------------

struct EmbeddingBundle {
  int d = 0;
  int d_prime = 0;
  std::vector<std::string> names;
  Matrix<double> feature_rows;  // names.size() x d
  Matrix<double> gamma_rows;    // names.size() x d'
  Matrix<double> beta_rows;
  std::string source_fingerprint;

  std::string serialize() const;
  static EmbeddingBundle deserialize(const std::string& text);
};

template <class T>
EmbeddingBundle export_embeddings(const Model<T>& model);

// Overwrites feature_table rows of `model` for every bundle name that maps
// (through name_map, identity by default) to a feature of the model's
// schema. Returns the overwritten target row indices in ascending order.
template <class T>
std::vector<int> import_embeddings(Model<T>& model, const EmbeddingBundle& bundle,
                                   const std::map<std::string, std::string>& name_map = {});

std::map<std::string, std::string> load_name_map(const std::filesystem::path& path);

// ---- time-fusion traces and embedding dumps -----------------------------------------

// Fused value of content c under each time mode on a grid of t in [0, t_max],
// first `dims` dimensions. Columns: mode,dim,t,content,time_value,fused.
std::string time_trace_csv(const std::vector<double>& content, const std::vector<double>& wavelengths,
                           TimeMode mode, int dims, int points, double t_max);

// token_id,feature,stage then d columns; two rows per token.
template <class T>
std::string dump_embeddings(const Model<T>& model, std::span<const TokenSequence> seqs);

}  // namespace medfuse
