#pragma once

#include "medfuse/common.hpp"
#include "medfuse/config.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace medfuse {

enum class FeatureKind { kNumeric, kCategorical };

std::string to_string(FeatureKind kind);
FeatureKind parse_feature_kind(const std::string& text);

// One raw observation. Exactly one of value/category is meaningful, chosen
// by `kind`; timestamps are elapsed time since the entity's window origin.
struct EventRecord {
  std::string entity_id;
  int feature_id = 0;
  FeatureKind kind = FeatureKind::kNumeric;
  double value = 0.0;
  int category = 0;
  double timestamp = 0.0;
};

struct SummarizationConfig {
  double window_length = 48.0;
  double bin_width = 2.0;
  double horizon = 0.0;  // labeling semantics only

  int bin_count() const;
  void validate() const;
};

struct Token {
  int feature_id = 0;
  FeatureKind kind = FeatureKind::kNumeric;
  double value = 0.0;  // z-normalized
  int category = 0;
  double time = 0.0;  // bin center

  bool operator==(const Token&) const = default;
};

// Observed tokens of one entity, sorted by (time, feature_id). A token exists
// for (feature, bin) exactly when that cell was observed.
struct TokenSequence {
  std::string entity_id;
  std::vector<Token> tokens;
  int label = 0;
  std::optional<double> event_time;
  bool event = false;

  std::size_t length() const { return tokens.size(); }
};

struct FeatureInfo {
  std::string name;
  FeatureKind kind = FeatureKind::kNumeric;
  int n_categories = 0;
  double mean = 0.0;
  double std = 1.0;
  bool constant = false;
  long long observed_count = 0;
};

class FeatureSchema {
 public:
  FeatureSchema() = default;
  explicit FeatureSchema(std::vector<FeatureInfo> features);

  int size() const { return static_cast<int>(features_.size()); }
  const FeatureInfo& at(int feature_id) const;
  const std::vector<FeatureInfo>& features() const { return features_; }
  std::optional<int> find(const std::string& name) const;

  double normalize(int feature_id, double raw) const;
  double denormalize(int feature_id, double normalized) const;

  // Row offsets of each categorical feature inside a stacked class table;
  // -1 for numeric features.
  std::vector<int> category_offsets() const;
  int total_categories() const;

  std::string serialize() const;
  static FeatureSchema deserialize(const std::string& text);
  std::string hash() const;

 private:
  std::vector<FeatureInfo> features_;
  std::map<std::string, int> by_name_;
};

struct FeatureDecl {
  std::string name;
  FeatureKind kind = FeatureKind::kNumeric;
};

// Per-feature statistics from the training split only. Categorical
// vocabularies are sized by the largest class index seen. Numeric std is the
// population std; zero std flags the feature constant.
FeatureSchema fit_schema(std::span<const FeatureDecl> features,
                         std::span<const EventRecord> train_records);

// Tokenizes one entity's records (median for numeric, smallest modal class for
// categorical, one token per observed (feature, bin), time = bin center).
TokenSequence summarize(std::span<const EventRecord> records, const SummarizationConfig& cfg,
                        const FeatureSchema& schema);

double median_of(std::vector<double> values);
int mode_of(std::span<const int> categories);

// Inverse of summarize at bin granularity: one record per token at the bin
// center with the denormalized value.
std::vector<EventRecord> tokens_to_records(const TokenSequence& seq, const FeatureSchema& schema);

// ---- synthetic cohorts -------------------------------------------------------

enum class LabelRule { kUShaped, kLinear, kNone };

struct SyntheticSpec {
  int n_entities = 1000;
  int n_numeric = 9;
  int n_categorical = 1;
  int categories = 3;
  std::vector<std::string> feature_names;  // optional, n_numeric + n_categorical
  std::string name_prefix = "f";
  double observation_rate = 0.3;  // per (feature, bin) cell
  int max_records_per_bin = 3;
  double window_length = 48.0;
  double bin_width = 2.0;
  LabelRule label_rule = LabelRule::kUShaped;
  int designated_feature = 0;
  double p_min = 0.02;
  double p_max = 0.95;
  double ramp_low = 1.0;   // |latent| where risk starts rising
  double ramp_high = 1.6;  // |latent| where risk saturates
  double noise_sd = 0.3;   // per-record noise in latent units
  bool with_event_times = false;
  double horizon = 5.0;
  std::uint64_t universe_seed = 20240601;  // feature units keyed by name

  void validate() const;
  static SyntheticSpec from_config(const KeyValueConfig& cfg, const std::string& section = "cohort");
};

struct LabelRecord {
  std::string entity_id;
  int label = 0;
  std::optional<double> event_time;
  bool event = false;
};

struct Cohort {
  std::vector<FeatureDecl> features;
  std::vector<EventRecord> records;
  std::vector<LabelRecord> labels;
};

// Probability of label 1 as a function of the designated feature's latent
// level (standard units). U-shaped: p_min inside the ramp, rising linearly to
// p_max for |z| >= ramp_high.
double label_probability(const SyntheticSpec& spec, double latent);

Cohort generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

// Fraction of (entity, feature, bin) cells with no observation.
double missing_fraction(const Cohort& cohort, const SummarizationConfig& cfg);

// ---- splits and tokenized datasets ---------------------------------------

struct SplitConfig {
  double train = 0.7;
  double val = 0.15;
  std::uint64_t seed = 7;
};

struct TokenizedDataset {
  FeatureSchema schema;
  std::vector<TokenSequence> train;
  std::vector<TokenSequence> val;
  std::vector<TokenSequence> test;
  int dropped_empty = 0;
};

TokenizedDataset tokenize_cohort(const Cohort& cohort, const SummarizationConfig& cfg,
                                 const SplitConfig& split);

// ---- file formats --------------------------------------------------------------

std::string events_to_csv(const Cohort& cohort);
std::string labels_to_csv(const Cohort& cohort);
Cohort read_cohort(const std::filesystem::path& events, const std::filesystem::path& labels);

std::string tokens_to_csv(std::span<const TokenSequence> seqs);
std::vector<TokenSequence> tokens_from_csv(const std::filesystem::path& path);

void write_tokenized(const TokenizedDataset& data, const std::filesystem::path& dir);
TokenizedDataset read_tokenized(const std::filesystem::path& dir);

}  // namespace medfuse
