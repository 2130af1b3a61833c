#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace medfuse {

// Area under the precision-recall step curve. Rows with equal scores form a
// single threshold. Throws UndefinedMetricError unless both classes occur.
double auprc(std::span<const double> scores, std::span<const int> labels);

// Mann-Whitney form: P(s+ > s-) + P(s+ == s-) / 2.
double auroc(std::span<const double> scores, std::span<const int> labels);

// Fraction of rows where (score >= threshold) matches the label.
double accuracy_at(std::span<const double> scores, std::span<const int> labels,
                   double threshold = 0.5);

// Harrell's concordance. A pair (i, j) is comparable when t_i < t_j and i had
// an event; it is concordant when score_i > score_j, and score ties count 1/2.
double c_index(std::span<const double> scores, std::span<const double> event_times,
               std::span<const int> events);

// Rows resampled jointly by the bootstrap.
struct ScoredRows {
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<double> times;  // empty when no survival data
  std::vector<int> events;

  std::size_t size() const { return scores.size(); }
  bool has_survival() const { return !times.empty(); }
  void validate() const;
};

using MetricFn = std::function<double(const ScoredRows&)>;

struct BootstrapResult {
  double low = 0.0;
  double high = 0.0;
  int replicates = 0;
  int redraws = 0;  // resamples rejected because the metric was undefined
};

// Percentile interval over `n` resamples with replacement. Replicate r draws
// from its own seed, derived from (seed, r), after the rows are put in a
// canonical order, so the interval depends neither on `threads` nor on the
// input row order. Undefined resamples are redrawn; if more draws were
// undefined than defined the call aborts.
BootstrapResult bootstrap_ci(const MetricFn& metric, const ScoredRows& rows, int n = 1000,
                             double level = 0.95, std::uint64_t seed = 0, int threads = 1);

struct MetricEstimate {
  double point = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  bool defined = false;
};

struct EvalReport {
  MetricEstimate auprc;
  MetricEstimate auroc;
  MetricEstimate accuracy;
  MetricEstimate c_index;
  int n_bootstrap = 0;
  double level = 0.95;
  double threshold = 0.5;
  int n_rows = 0;
  int n_positive = 0;
  int redraws = 0;
};

struct EvalOptions {
  int n_bootstrap = 1000;
  double level = 0.95;
  double threshold = 0.5;
  std::uint64_t seed = 0;
  int threads = 1;
};

EvalReport evaluate_scores(const ScoredRows& rows, const EvalOptions& opts);

// Long-format CSV: metric,point,ci_low,ci_high plus n_bootstrap and threshold.
std::string report_to_csv(const EvalReport& report);

}  // namespace medfuse
