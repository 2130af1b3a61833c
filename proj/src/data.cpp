#include "medfuse/data.hpp"

#include "medfuse/io.hpp"
#include "medfuse/rng.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace medfuse {

std::string to_string(FeatureKind kind) {
  return kind == FeatureKind::kNumeric ? "numeric" : "categorical";
}

FeatureKind parse_feature_kind(const std::string& text) {
  if (text == "numeric") return FeatureKind::kNumeric;
  if (text == "categorical") return FeatureKind::kCategorical;
  throw SchemaError("unknown feature kind '" + text + "'");
}

int SummarizationConfig::bin_count() const {
  return static_cast<int>(std::llround(window_length / bin_width));
}

void SummarizationConfig::validate() const {
  if (!(window_length > 0.0) || !(bin_width > 0.0)) {
    throw ConfigError("window_length and bin_width must be positive");
  }
  double bins = window_length / bin_width;
  if (std::abs(bins - std::round(bins)) > 1e-9 * std::max(1.0, bins)) {
    throw ConfigError("bin_width must divide window_length into an integer number of bins");
  }
}

// ---- schema ---------------------------------------------------------------------

FeatureSchema::FeatureSchema(std::vector<FeatureInfo> features) : features_(std::move(features)) {
  for (int i = 0; i < size(); ++i) {
    auto [it, inserted] = by_name_.emplace(features_[i].name, i);
    if (!inserted) throw SchemaError("duplicate feature name '" + features_[i].name + "'");
  }
}

const FeatureInfo& FeatureSchema::at(int feature_id) const {
  if (feature_id < 0 || feature_id >= size()) {
    throw SchemaError("unknown feature_id " + std::to_string(feature_id));
  }
  return features_[feature_id];
}

std::optional<int> FeatureSchema::find(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) return std::nullopt;
  return it->second;
}

double FeatureSchema::normalize(int feature_id, double raw) const {
  const auto& f = at(feature_id);
  if (f.constant) return 0.0;
  return (raw - f.mean) / f.std;
}

double FeatureSchema::denormalize(int feature_id, double normalized) const {
  const auto& f = at(feature_id);
  if (f.constant) return f.mean;
  return normalized * f.std + f.mean;
}

std::vector<int> FeatureSchema::category_offsets() const {
  std::vector<int> offsets(features_.size(), -1);
  int next = 0;
  for (std::size_t i = 0; i < features_.size(); ++i) {
    if (features_[i].kind == FeatureKind::kCategorical) {
      offsets[i] = next;
      next += features_[i].n_categories;
    }
  }
  return offsets;
}

int FeatureSchema::total_categories() const {
  int n = 0;
  for (const auto& f : features_) {
    if (f.kind == FeatureKind::kCategorical) n += f.n_categories;
  }
  return n;
}

std::string FeatureSchema::serialize() const {
  std::ostringstream out;
  out << "[schema]\nformat = medfuse-schema-1\nfeatures = " << features_.size() << "\n";
  for (std::size_t i = 0; i < features_.size(); ++i) {
    const auto& f = features_[i];
    out << "\n[feature_" << i << "]\n";
    out << "name = " << f.name << "\n";
    out << "kind = " << to_string(f.kind) << "\n";
    out << "categories = " << f.n_categories << "\n";
    out << "mean = " << io::format_double(f.mean) << "\n";
    out << "std = " << io::format_double(f.std) << "\n";
    out << "constant = " << (f.constant ? "true" : "false") << "\n";
    out << "observed = " << f.observed_count << "\n";
  }
  return out.str();
}

FeatureSchema FeatureSchema::deserialize(const std::string& text) {
  auto cfg = KeyValueConfig::parse(text, "<schema>");
  if (cfg.get_string("schema.format", "") != "medfuse-schema-1") {
    throw SchemaError("not a medfuse schema document");
  }
  auto n = cfg.get_int("schema.features");
  std::vector<FeatureInfo> features;
  for (long long i = 0; i < n; ++i) {
    std::string s = "feature_" + std::to_string(i) + ".";
    FeatureInfo f;
    f.name = cfg.get_string(s + "name");
    f.kind = parse_feature_kind(cfg.get_string(s + "kind"));
    f.n_categories = static_cast<int>(cfg.get_int(s + "categories"));
    f.mean = cfg.get_double(s + "mean");
    f.std = cfg.get_double(s + "std");
    f.constant = cfg.get_bool(s + "constant", false);
    f.observed_count = cfg.get_int(s + "observed", 0);
    features.push_back(std::move(f));
  }
  return FeatureSchema(std::move(features));
}

std::string FeatureSchema::hash() const { return io::content_hash(serialize()); }

FeatureSchema fit_schema(std::span<const FeatureDecl> decls,
                         std::span<const EventRecord> train_records) {
  if (train_records.empty()) throw ConfigError("fit_schema: empty training split");
  const std::size_t n = decls.size();
  std::vector<double> sum(n, 0.0);
  std::vector<long long> count(n, 0);
  std::vector<int> max_category(n, -1);
  for (const auto& r : train_records) {
    if (r.feature_id < 0 || static_cast<std::size_t>(r.feature_id) >= n) {
      throw SchemaError("unknown feature_id " + std::to_string(r.feature_id));
    }
    if (r.kind != decls[r.feature_id].kind) {
      throw SchemaError("kind mismatch for feature '" + decls[r.feature_id].name + "'");
    }
    ++count[r.feature_id];
    if (r.kind == FeatureKind::kNumeric) {
      sum[r.feature_id] += r.value;
    } else {
      max_category[r.feature_id] = std::max(max_category[r.feature_id], r.category);
    }
  }
  std::vector<double> mean(n, 0.0), sq(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (count[i] > 0) mean[i] = sum[i] / static_cast<double>(count[i]);
  }
  for (const auto& r : train_records) {
    if (r.kind == FeatureKind::kNumeric) {
      double dv = r.value - mean[r.feature_id];
      sq[r.feature_id] += dv * dv;
    }
  }
  std::vector<FeatureInfo> features;
  for (std::size_t i = 0; i < n; ++i) {
    FeatureInfo f;
    f.name = decls[i].name;
    f.kind = decls[i].kind;
    f.observed_count = count[i];
    if (count[i] == 0) {
      spdlog::warn("feature '{}' never observed in the training split", f.name);
    }
    if (f.kind == FeatureKind::kNumeric) {
      f.mean = mean[i];
      f.std = count[i] > 0 ? std::sqrt(sq[i] / static_cast<double>(count[i])) : 0.0;
      f.constant = !(f.std > 0.0);
      if (f.constant) f.std = 0.0;
    } else {
      f.n_categories = max_category[i] + 1;
      f.mean = 0.0;
      f.std = 1.0;
    }
    features.push_back(std::move(f));
  }
  return FeatureSchema(std::move(features));
}

// ---- summarization ----------------------------------------------------------------

double median_of(std::vector<double> values) {
  if (values.empty()) throw ContractError("median of empty set");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + mid, values.end());
  double upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  double lower = *std::max_element(values.begin(), values.begin() + mid);
  return lower + (upper - lower) / 2.0;
}

int mode_of(std::span<const int> categories) {
  if (categories.empty()) throw ContractError("mode of empty set");
  std::map<int, int> counts;
  for (int c : categories) ++counts[c];
  int best = counts.begin()->first;
  int best_count = 0;
  for (auto [c, n] : counts) {  // ascending class index: ties keep the smallest
    if (n > best_count) {
      best = c;
      best_count = n;
    }
  }
  return best;
}

TokenSequence summarize(std::span<const EventRecord> records, const SummarizationConfig& cfg,
                        const FeatureSchema& schema) {
  cfg.validate();
  const int bins = cfg.bin_count();
  TokenSequence seq;
  if (!records.empty()) seq.entity_id = records.front().entity_id;

  struct Cell {
    std::vector<double> values;
    std::vector<int> categories;
  };
  std::map<std::pair<int, int>, Cell> cells;  // (bin, feature)
  for (const auto& r : records) {
    if (r.entity_id != seq.entity_id) {
      throw ContractError("summarize: records from more than one entity");
    }
    if (!(r.timestamp >= 0.0) || !(r.timestamp < cfg.window_length)) {
      throw WindowError("record of entity '" + r.entity_id + "' at t=" +
                        io::format_double(r.timestamp) + " lies outside the window [0, " +
                        io::format_double(cfg.window_length) + ")");
    }
    const auto& info = schema.at(r.feature_id);
    if (info.kind != r.kind) {
      throw SchemaError("kind mismatch for feature '" + info.name + "'");
    }
    int bin = std::min(static_cast<int>(std::floor(r.timestamp / cfg.bin_width)), bins - 1);
    auto& cell = cells[{bin, r.feature_id}];
    if (r.kind == FeatureKind::kNumeric) {
      if (!std::isfinite(r.value)) throw SchemaError("non-finite value for '" + info.name + "'");
      cell.values.push_back(r.value);
    } else {
      if (r.category < 0 || r.category >= info.n_categories) {
        throw SchemaError("class " + std::to_string(r.category) + " out of vocabulary for '" +
                          info.name + "'");
      }
      cell.categories.push_back(r.category);
    }
  }
  // Map order is (bin, feature) ascending, which is the token order.
  seq.tokens.reserve(cells.size());
  for (auto& [key, cell] : cells) {
    Token tok;
    tok.feature_id = key.second;
    tok.time = (key.first + 0.5) * cfg.bin_width;
    if (!cell.values.empty()) {
      tok.kind = FeatureKind::kNumeric;
      tok.value = schema.normalize(key.second, median_of(std::move(cell.values)));
    } else {
      tok.kind = FeatureKind::kCategorical;
      tok.category = mode_of(cell.categories);
    }
    seq.tokens.push_back(tok);
  }
  return seq;
}

std::vector<EventRecord> tokens_to_records(const TokenSequence& seq, const FeatureSchema& schema) {
  std::vector<EventRecord> out;
  out.reserve(seq.tokens.size());
  for (const auto& tok : seq.tokens) {
    EventRecord r;
    r.entity_id = seq.entity_id;
    r.feature_id = tok.feature_id;
    r.kind = tok.kind;
    r.timestamp = tok.time;
    if (tok.kind == FeatureKind::kNumeric) {
      r.value = schema.denormalize(tok.feature_id, tok.value);
    } else {
      r.category = tok.category;
    }
    out.push_back(r);
  }
  return out;
}

// ---- synthetic cohorts ------------------------------------------------------------

void SyntheticSpec::validate() const {
  if (n_entities <= 0) throw ConfigError("synthetic: n_entities must be positive");
  if (n_numeric < 1) throw ConfigError("synthetic: at least one numeric feature required");
  if (n_categorical < 0) throw ConfigError("synthetic: n_categorical must be >= 0");
  if (n_categorical > 0 && categories < 1) throw ConfigError("synthetic: categories must be >= 1");
  if (!(observation_rate > 0.0 && observation_rate <= 1.0)) {
    throw ConfigError("synthetic: observation rate must lie in (0, 1]");
  }
  if (max_records_per_bin < 1) throw ConfigError("synthetic: max_records_per_bin must be >= 1");
  SummarizationConfig{window_length, bin_width, horizon}.validate();
  if (designated_feature < 0 || designated_feature >= n_numeric) {
    throw ConfigError("synthetic: designated feature must be a numeric feature index");
  }
  if (!(p_min >= 0.0 && p_min <= p_max && p_max <= 1.0)) {
    throw ConfigError("synthetic: need 0 <= p_min <= p_max <= 1");
  }
  if (!(ramp_high > ramp_low)) throw ConfigError("synthetic: ramp_high must exceed ramp_low");
  if (!feature_names.empty() &&
      feature_names.size() != static_cast<std::size_t>(n_numeric + n_categorical)) {
    throw ConfigError("synthetic: feature_names must list every feature");
  }
}

SyntheticSpec SyntheticSpec::from_config(const KeyValueConfig& cfg, const std::string& section) {
  SyntheticSpec s;
  auto key = [&](const char* k) { return section + "." + k; };
  s.n_entities = static_cast<int>(cfg.get_int(key("entities"), s.n_entities));
  s.n_numeric = static_cast<int>(cfg.get_int(key("numeric_features"), s.n_numeric));
  s.n_categorical = static_cast<int>(cfg.get_int(key("categorical_features"), s.n_categorical));
  s.categories = static_cast<int>(cfg.get_int(key("categories"), s.categories));
  s.feature_names = cfg.get_string_list(key("feature_names"));
  s.name_prefix = cfg.get_string(key("name_prefix"), s.name_prefix);
  if (cfg.has(key("missing_rate"))) {
    s.observation_rate = 1.0 - cfg.get_double(key("missing_rate"));
  }
  s.observation_rate = cfg.get_double(key("observation_rate"), s.observation_rate);
  s.max_records_per_bin = static_cast<int>(cfg.get_int(key("max_records_per_bin"), s.max_records_per_bin));
  s.window_length = cfg.get_double(key("window_length"), s.window_length);
  s.bin_width = cfg.get_double(key("bin_width"), s.bin_width);
  auto rule = cfg.get_string(key("label_rule"), "u_shaped");
  if (rule == "u_shaped") {
    s.label_rule = LabelRule::kUShaped;
  } else if (rule == "linear") {
    s.label_rule = LabelRule::kLinear;
  } else if (rule == "none") {
    s.label_rule = LabelRule::kNone;
  } else {
    throw ConfigError(cfg.origin() + ": unknown label_rule '" + rule + "'");
  }
  s.designated_feature = static_cast<int>(cfg.get_int(key("designated_feature"), s.designated_feature));
  s.p_min = cfg.get_double(key("p_min"), s.p_min);
  s.p_max = cfg.get_double(key("p_max"), s.p_max);
  s.ramp_low = cfg.get_double(key("ramp_low"), s.ramp_low);
  s.ramp_high = cfg.get_double(key("ramp_high"), s.ramp_high);
  s.noise_sd = cfg.get_double(key("noise_sd"), s.noise_sd);
  s.with_event_times = cfg.get_bool(key("event_times"), s.with_event_times);
  s.horizon = cfg.get_double(key("horizon"), s.horizon);
  s.universe_seed = static_cast<std::uint64_t>(cfg.get_int(key("universe_seed"),
                                                           static_cast<long long>(s.universe_seed)));
  s.validate();
  return s;
}

double label_probability(const SyntheticSpec& spec, double latent) {
  double ramp = 0.0;
  switch (spec.label_rule) {
    case LabelRule::kUShaped:
      ramp = (std::abs(latent) - spec.ramp_low) / (spec.ramp_high - spec.ramp_low);
      break;
    case LabelRule::kLinear:
      ramp = (latent - spec.ramp_low) / (spec.ramp_high - spec.ramp_low);
      break;
    case LabelRule::kNone:
      ramp = 0.0;
      break;
  }
  ramp = std::clamp(ramp, 0.0, 1.0);
  return spec.p_min + (spec.p_max - spec.p_min) * ramp;
}

Cohort generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  Cohort cohort;
  const int n_features = spec.n_numeric + spec.n_categorical;
  for (int i = 0; i < n_features; ++i) {
    FeatureDecl decl;
    if (!spec.feature_names.empty()) {
      decl.name = spec.feature_names[i];
    } else {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%s%02d", spec.name_prefix.c_str(), i);
      decl.name = buf;
    }
    decl.kind = i < spec.n_numeric ? FeatureKind::kNumeric : FeatureKind::kCategorical;
    cohort.features.push_back(std::move(decl));
  }

  // Native units depend only on the feature name, so cohorts that share a
  // name share its semantics.
  std::vector<double> unit_mean(n_features), unit_sd(n_features);
  for (int i = 0; i < n_features; ++i) {
    Rng u = make_stream(spec.universe_seed, "units:" + cohort.features[i].name);
    unit_mean[i] = std::uniform_real_distribution<double>(20.0, 120.0)(u);
    unit_sd[i] = std::uniform_real_distribution<double>(2.0, 15.0)(u);
  }

  const SummarizationConfig window{spec.window_length, spec.bin_width, spec.horizon};
  const int bins = window.bin_count();
  Rng rng = make_stream(seed, "synthetic.entities");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> extra_records(0, spec.max_records_per_bin - 1);
  std::uniform_int_distribution<int> category(0, std::max(0, spec.categories - 1));

  for (int e = 0; e < spec.n_entities; ++e) {
    char id[32];
    std::snprintf(id, sizeof(id), "p%06d", e);
    std::vector<double> latent(n_features);
    for (auto& z : latent) z = normal(rng);
    for (int f = 0; f < n_features; ++f) {
      for (int b = 0; b < bins; ++b) {
        if (unit(rng) >= spec.observation_rate) continue;
        int n_rec = 1 + extra_records(rng);
        for (int r = 0; r < n_rec; ++r) {
          EventRecord rec;
          rec.entity_id = id;
          rec.feature_id = f;
          rec.kind = cohort.features[f].kind;
          double lo = b * spec.bin_width;
          double hi = (b + 1) * spec.bin_width;
          rec.timestamp = lo + unit(rng) * spec.bin_width;
          if (rec.timestamp >= hi) rec.timestamp = std::nextafter(hi, lo);
          if (rec.kind == FeatureKind::kNumeric) {
            rec.value = unit_mean[f] + unit_sd[f] * (latent[f] + spec.noise_sd * normal(rng));
          } else {
            rec.category = category(rng);
          }
          cohort.records.push_back(std::move(rec));
        }
      }
    }
    LabelRecord label;
    label.entity_id = id;
    double p = label_probability(spec, latent[spec.designated_feature]);
    label.label = unit(rng) < p ? 1 : 0;
    if (spec.with_event_times) {
      double u = unit(rng);
      if (label.label == 1) {
        label.event_time = spec.horizon * (0.05 + 0.95 * u) * (1.0 - 0.5 * p);
        label.event = true;
      } else {
        label.event_time = spec.horizon;
        label.event = false;
      }
    }
    cohort.labels.push_back(std::move(label));
  }
  return cohort;
}

double missing_fraction(const Cohort& cohort, const SummarizationConfig& cfg) {
  std::set<std::tuple<std::string, int, int>> observed;
  const int bins = cfg.bin_count();
  for (const auto& r : cohort.records) {
    int bin = std::min(static_cast<int>(std::floor(r.timestamp / cfg.bin_width)), bins - 1);
    observed.emplace(r.entity_id, r.feature_id, bin);
  }
  double cells = static_cast<double>(cohort.labels.size()) *
                 static_cast<double>(cohort.features.size()) * bins;
  return 1.0 - static_cast<double>(observed.size()) / cells;
}

// ---- splits --------------------------------------------------------------------------

TokenizedDataset tokenize_cohort(const Cohort& cohort, const SummarizationConfig& cfg,
                                 const SplitConfig& split) {
  cfg.validate();
  if (split.train <= 0.0 || split.val <= 0.0 || split.train + split.val >= 1.0 + 1e-12) {
    throw ConfigError("split fractions must be positive with train + val <= 1");
  }
  std::map<std::string, std::vector<EventRecord>> by_entity;
  for (const auto& r : cohort.records) by_entity[r.entity_id].push_back(r);
  std::map<std::string, const LabelRecord*> labels;
  for (const auto& l : cohort.labels) labels[l.entity_id] = &l;
  for (const auto& [id, recs] : by_entity) {
    if (!labels.count(id)) throw SchemaError("entity '" + id + "' has events but no label");
  }

  std::vector<std::string> ids;
  for (const auto& [id, l] : labels) ids.push_back(id);
  Rng rng = make_stream(split.seed, "split");
  std::shuffle(ids.begin(), ids.end(), rng);
  const std::size_t n_train = static_cast<std::size_t>(std::llround(split.train * ids.size()));
  const std::size_t n_val = static_cast<std::size_t>(std::llround(split.val * ids.size()));
  if (n_train == 0 || n_val == 0 || n_train + n_val > ids.size()) {
    throw ConfigError("cohort too small for the requested split");
  }

  std::vector<EventRecord> train_records;
  for (std::size_t i = 0; i < n_train; ++i) {
    auto it = by_entity.find(ids[i]);
    if (it != by_entity.end()) {
      train_records.insert(train_records.end(), it->second.begin(), it->second.end());
    }
  }
  TokenizedDataset data;
  data.schema = fit_schema(cohort.features, train_records);

  auto build = [&](std::size_t begin, std::size_t end, std::vector<TokenSequence>& out) {
    std::vector<std::string> part(ids.begin() + begin, ids.begin() + end);
    std::sort(part.begin(), part.end());
    for (const auto& id : part) {
      auto it = by_entity.find(id);
      if (it == by_entity.end()) {
        ++data.dropped_empty;
        continue;
      }
      TokenSequence seq = summarize(it->second, cfg, data.schema);
      const auto* l = labels.at(id);
      seq.label = l->label;
      seq.event_time = l->event_time;
      seq.event = l->event;
      if (seq.tokens.empty()) {
        ++data.dropped_empty;
        continue;
      }
      out.push_back(std::move(seq));
    }
  };
  build(0, n_train, data.train);
  build(n_train, n_train + n_val, data.val);
  build(n_train + n_val, ids.size(), data.test);
  if (data.dropped_empty > 0) {
    spdlog::warn("dropped {} entities without observed tokens", data.dropped_empty);
  }
  return data;
}

// ---- file formats -------------------------------------------------------------------

std::string events_to_csv(const Cohort& cohort) {
  std::string out = "entity_id,feature_name,kind,value,category,timestamp\n";
  for (const auto& r : cohort.records) {
    out += io::csv_escape(r.entity_id);
    out += ',';
    out += io::csv_escape(cohort.features.at(r.feature_id).name);
    out += ',';
    out += to_string(r.kind);
    out += ',';
    if (r.kind == FeatureKind::kNumeric) out += io::format_double(r.value);
    out += ',';
    if (r.kind == FeatureKind::kCategorical) out += std::to_string(r.category);
    out += ',';
    out += io::format_double(r.timestamp);
    out += '\n';
  }
  return out;
}

std::string labels_to_csv(const Cohort& cohort) {
  std::string out = "entity_id,label,event_time,event\n";
  for (const auto& l : cohort.labels) {
    out += io::csv_escape(l.entity_id) + "," + std::to_string(l.label) + ",";
    if (l.event_time) out += io::format_double(*l.event_time);
    out += ",";
    out += l.event ? "1" : "0";
    out += "\n";
  }
  return out;
}

namespace {

int require_column(const io::CsvTable& t, const std::string& name, const std::string& file) {
  int c = t.column(name);
  if (c < 0) throw ConfigError(file + ": missing column '" + name + "'");
  return c;
}

}  // namespace

Cohort read_cohort(const std::filesystem::path& events_path,
                   const std::filesystem::path& labels_path) {
  const auto events = io::read_csv(events_path);
  const std::string ef = events_path.string();
  const int c_id = require_column(events, "entity_id", ef);
  const int c_name = require_column(events, "feature_name", ef);
  const int c_kind = require_column(events, "kind", ef);
  const int c_value = require_column(events, "value", ef);
  const int c_cat = require_column(events, "category", ef);
  const int c_time = require_column(events, "timestamp", ef);

  std::map<std::string, FeatureKind> kinds;
  for (std::size_t i = 0; i < events.rows.size(); ++i) {
    const auto& row = events.rows[i];
    auto kind = parse_feature_kind(row[c_kind]);
    auto [it, inserted] = kinds.emplace(row[c_name], kind);
    if (!inserted && it->second != kind) {
      throw SchemaError(ef + ":" + std::to_string(events.line_numbers[i]) + ": feature '" +
                        row[c_name] + "' appears with two kinds");
    }
  }
  Cohort cohort;
  std::map<std::string, int> index;
  for (const auto& [name, kind] : kinds) {  // sorted by name
    index[name] = static_cast<int>(cohort.features.size());
    cohort.features.push_back({name, kind});
  }
  for (std::size_t i = 0; i < events.rows.size(); ++i) {
    const auto& row = events.rows[i];
    try {
      EventRecord r;
      r.entity_id = row[c_id];
      r.feature_id = index.at(row[c_name]);
      r.kind = cohort.features[r.feature_id].kind;
      if (r.kind == FeatureKind::kNumeric) {
        r.value = io::parse_double(row[c_value]);
      } else {
        r.category = static_cast<int>(io::parse_int(row[c_cat]));
      }
      r.timestamp = io::parse_double(row[c_time]);
      cohort.records.push_back(std::move(r));
    } catch (const ConfigError& e) {
      throw ConfigError(ef + ":" + std::to_string(events.line_numbers[i]) + ": " + e.what());
    }
  }

  const auto labels = io::read_csv(labels_path);
  const std::string lf = labels_path.string();
  const int l_id = require_column(labels, "entity_id", lf);
  const int l_label = require_column(labels, "label", lf);
  const int l_time = labels.column("event_time");
  const int l_event = labels.column("event");
  for (std::size_t i = 0; i < labels.rows.size(); ++i) {
    const auto& row = labels.rows[i];
    try {
      LabelRecord l;
      l.entity_id = row[l_id];
      l.label = static_cast<int>(io::parse_int(row[l_label]));
      if (l.label != 0 && l.label != 1) throw ConfigError("label must be 0 or 1");
      if (l_time >= 0 && !row[l_time].empty()) l.event_time = io::parse_double(row[l_time]);
      if (l_event >= 0 && !row[l_event].empty()) l.event = io::parse_int(row[l_event]) != 0;
      cohort.labels.push_back(std::move(l));
    } catch (const ConfigError& e) {
      throw ConfigError(lf + ":" + std::to_string(labels.line_numbers[i]) + ": " + e.what());
    }
  }
  return cohort;
}

std::string tokens_to_csv(std::span<const TokenSequence> seqs) {
  std::string out = "entity_id,label,event_time,event,feature_id,kind,value,category,time\n";
  for (const auto& s : seqs) {
    std::string prefix = io::csv_escape(s.entity_id) + "," + std::to_string(s.label) + "," +
                         (s.event_time ? io::format_double(*s.event_time) : std::string()) + "," +
                         (s.event ? "1" : "0") + ",";
    for (const auto& t : s.tokens) {
      out += prefix;
      out += std::to_string(t.feature_id);
      out += ',';
      out += to_string(t.kind);
      out += ',';
      out += t.kind == FeatureKind::kNumeric ? io::format_double(t.value) : std::string();
      out += ',';
      out += t.kind == FeatureKind::kCategorical ? std::to_string(t.category) : std::string();
      out += ',';
      out += io::format_double(t.time);
      out += '\n';
    }
  }
  return out;
}

std::vector<TokenSequence> tokens_from_csv(const std::filesystem::path& path) {
  const auto t = io::read_csv(path);
  const std::string f = path.string();
  const int c_id = require_column(t, "entity_id", f);
  const int c_label = require_column(t, "label", f);
  const int c_etime = require_column(t, "event_time", f);
  const int c_event = require_column(t, "event", f);
  const int c_feat = require_column(t, "feature_id", f);
  const int c_kind = require_column(t, "kind", f);
  const int c_value = require_column(t, "value", f);
  const int c_cat = require_column(t, "category", f);
  const int c_time = require_column(t, "time", f);
  std::vector<TokenSequence> out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& row = t.rows[i];
    try {
      if (out.empty() || out.back().entity_id != row[c_id]) {
        TokenSequence s;
        s.entity_id = row[c_id];
        s.label = static_cast<int>(io::parse_int(row[c_label]));
        if (!row[c_etime].empty()) s.event_time = io::parse_double(row[c_etime]);
        s.event = io::parse_int(row[c_event]) != 0;
        out.push_back(std::move(s));
      }
      Token tok;
      tok.feature_id = static_cast<int>(io::parse_int(row[c_feat]));
      tok.kind = parse_feature_kind(row[c_kind]);
      if (tok.kind == FeatureKind::kNumeric) {
        tok.value = io::parse_double(row[c_value]);
      } else {
        tok.category = static_cast<int>(io::parse_int(row[c_cat]));
      }
      tok.time = io::parse_double(row[c_time]);
      out.back().tokens.push_back(tok);
    } catch (const ConfigError& e) {
      throw ConfigError(f + ":" + std::to_string(t.line_numbers[i]) + ": " + e.what());
    }
  }
  return out;
}

void write_tokenized(const TokenizedDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_file(dir / "schema.txt", data.schema.serialize());
  io::write_file(dir / "train.csv", tokens_to_csv(data.train));
  io::write_file(dir / "val.csv", tokens_to_csv(data.val));
  io::write_file(dir / "test.csv", tokens_to_csv(data.test));
}

TokenizedDataset read_tokenized(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "schema.txt")) {
    throw ConfigError(dir.string() + ": not a tokenized dataset (schema.txt missing)");
  }
  TokenizedDataset data;
  data.schema = FeatureSchema::deserialize(io::read_file(dir / "schema.txt"));
  data.train = tokens_from_csv(dir / "train.csv");
  data.val = tokens_from_csv(dir / "val.csv");
  data.test = tokens_from_csv(dir / "test.csv");
  return data;
}

}  // namespace medfuse
