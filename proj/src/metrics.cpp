#include "medfuse/metrics.hpp"

#include "medfuse/common.hpp"
#include "medfuse/io.hpp"
#include "medfuse/rng.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>
#include <tuple>

namespace medfuse {

namespace {

void check_binary(std::span<const double> scores, std::span<const int> labels, const char* who) {
  if (scores.size() != labels.size()) throw ShapeError(std::string(who) + ": scores and labels differ in length");
  for (int y : labels) {
    if (y != 0 && y != 1) throw ContractError(std::string(who) + ": labels must be 0 or 1");
  }
  for (double s : scores) {
    if (std::isnan(s)) throw ContractError(std::string(who) + ": NaN score");
  }
}

std::pair<long long, long long> class_counts(std::span<const int> labels) {
  long long pos = std::count(labels.begin(), labels.end(), 1);
  return {pos, static_cast<long long>(labels.size()) - pos};
}

std::vector<std::size_t> order_by_score_desc(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace

double auprc(std::span<const double> scores, std::span<const int> labels) {
  check_binary(scores, labels, "auprc");
  auto [pos, neg] = class_counts(labels);
  if (pos == 0 || neg == 0) throw UndefinedMetricError("auprc: needs both classes");
  auto idx = order_by_score_desc(scores);
  double area = 0.0;
  long long tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    long long group_pos = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      if (labels[idx[j]]) {
        ++group_pos;
      } else {
        ++fp;
      }
      ++j;
    }
    tp += group_pos;
    if (group_pos > 0) {
      area += static_cast<double>(tp) / static_cast<double>(tp + fp) * static_cast<double>(group_pos) /
              static_cast<double>(pos);
    }
    i = j;
  }
  return area;
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  check_binary(scores, labels, "auroc");
  auto [pos, neg] = class_counts(labels);
  if (pos == 0 || neg == 0) throw UndefinedMetricError("auroc: needs both classes");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  // Sum of positive midranks (1-based), kept doubled to stay in integers.
  long long rank_sum2 = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    long long group_pos = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) group_pos += labels[idx[j++]];
    const long long mid2 = static_cast<long long>(i + 1 + j);  // 2 * average of ranks i+1..j
    rank_sum2 += group_pos * mid2;
    i = j;
  }
  const double u = (static_cast<double>(rank_sum2) - static_cast<double>(pos * (pos + 1))) / 2.0;
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

double accuracy_at(std::span<const double> scores, std::span<const int> labels, double threshold) {
  check_binary(scores, labels, "accuracy");
  if (scores.empty()) throw UndefinedMetricError("accuracy: no rows");
  long long hits = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) hits += (scores[i] >= threshold) == (labels[i] == 1);
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

double c_index(std::span<const double> scores, std::span<const double> times, std::span<const int> events) {
  const std::size_t n = scores.size();
  if (times.size() != n || events.size() != n) throw ShapeError("c_index: input lengths differ");
  for (std::size_t i = 0; i < n; ++i) {
    if (std::isnan(scores[i]) || std::isnan(times[i])) throw ContractError("c_index: NaN input");
  }
  // Score ranks for the Fenwick tree (equal scores share a rank).
  std::vector<double> uniq(scores.begin(), scores.end());
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  const std::size_t m = uniq.size();
  std::vector<long long> tree(m + 1, 0);
  auto add = [&](std::size_t r) {
    for (++r; r <= m; r += r & (~r + 1)) ++tree[r];
  };
  auto prefix = [&](std::size_t r) {  // count with rank < r
    long long s = 0;
    for (; r > 0; r -= r & (~r + 1)) s += tree[r];
    return s;
  };
  auto rank_of = [&](double s) {
    return static_cast<std::size_t>(std::lower_bound(uniq.begin(), uniq.end(), s) - uniq.begin());
  };

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return times[a] > times[b]; });
  long long comparable = 0;
  double concordant = 0.0;
  long long inserted = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && times[idx[j]] == times[idx[i]]) ++j;
    // Everything already inserted has a strictly later time.
    for (std::size_t a = i; a < j; ++a) {
      const std::size_t s = idx[a];
      if (!events[s]) continue;
      const std::size_t r = rank_of(scores[s]);
      const long long below = prefix(r);
      const long long tied = prefix(r + 1) - below;
      comparable += inserted;
      concordant += static_cast<double>(below) + 0.5 * static_cast<double>(tied);
    }
    for (std::size_t a = i; a < j; ++a) add(rank_of(scores[idx[a]]));
    inserted += static_cast<long long>(j - i);
    i = j;
  }
  if (comparable == 0) throw UndefinedMetricError("c_index: no comparable pairs");
  return concordant / static_cast<double>(comparable);
}

void ScoredRows::validate() const {
  if (labels.size() != scores.size()) throw ShapeError("rows: scores and labels differ in length");
  if (!times.empty() && (times.size() != scores.size() || events.size() != scores.size())) {
    throw ShapeError("rows: survival columns differ in length");
  }
}

namespace {

ScoredRows canonical(const ScoredRows& rows) {
  std::vector<std::size_t> idx(rows.size());
  std::iota(idx.begin(), idx.end(), 0);
  const bool surv = rows.has_survival();
  auto key = [&](std::size_t i) {
    return std::make_tuple(rows.scores[i], rows.labels[i], surv ? rows.times[i] : 0.0,
                           surv ? rows.events[i] : 0);
  };
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return key(a) < key(b); });
  ScoredRows out;
  for (auto i : idx) {
    out.scores.push_back(rows.scores[i]);
    out.labels.push_back(rows.labels[i]);
    if (surv) {
      out.times.push_back(rows.times[i]);
      out.events.push_back(rows.events[i]);
    }
  }
  return out;
}

double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

}  // namespace

BootstrapResult bootstrap_ci(const MetricFn& metric, const ScoredRows& input, int n, double level,
                             std::uint64_t seed, int threads) {
  input.validate();
  if (n <= 0) throw ConfigError("bootstrap: replicate count must be positive");
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("bootstrap: level must lie in (0, 1)");
  if (input.size() == 0) throw UndefinedMetricError("bootstrap: no rows");
  const ScoredRows rows = canonical(input);
  metric(rows);  // must be defined on the full sample

  const std::size_t m = rows.size();
  const bool surv = rows.has_survival();
  std::vector<double> values(static_cast<std::size_t>(n));
  std::atomic<long long> undefined{0};
  std::atomic<bool> abort{false};
  std::atomic<int> next{0};

  auto worker = [&] {
    ScoredRows sample;
    sample.scores.resize(m);
    sample.labels.resize(m);
    if (surv) {
      sample.times.resize(m);
      sample.events.resize(m);
    }
    for (int r = next++; r < n && !abort; r = next++) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
      std::uniform_int_distribution<std::size_t> pick(0, m - 1);
      while (!abort) {
        for (std::size_t i = 0; i < m; ++i) {
          const std::size_t s = pick(rng);
          sample.scores[i] = rows.scores[s];
          sample.labels[i] = rows.labels[s];
          if (surv) {
            sample.times[i] = rows.times[s];
            sample.events[i] = rows.events[s];
          }
        }
        try {
          values[static_cast<std::size_t>(r)] = metric(sample);
          break;
        } catch (const UndefinedMetricError&) {
          if (++undefined > n) abort = true;
        }
      }
    }
  };

  const int n_threads = std::max(1, std::min(threads, n));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (abort) {
    long long pos = std::count(rows.labels.begin(), rows.labels.end(), 1);
    throw UndefinedMetricError("bootstrap: more than half of the resamples were undefined (" +
                               std::to_string(pos) + " positives in " + std::to_string(m) +
                               " rows); the sample is too imbalanced for a bootstrap interval");
  }
  std::sort(values.begin(), values.end());
  BootstrapResult out;
  out.low = quantile(values, (1.0 - level) / 2.0);
  out.high = quantile(values, 1.0 - (1.0 - level) / 2.0);
  out.replicates = n;
  out.redraws = static_cast<int>(undefined.load());
  return out;
}

EvalReport evaluate_scores(const ScoredRows& rows, const EvalOptions& opts) {
  rows.validate();
  EvalReport rep;
  rep.n_bootstrap = opts.n_bootstrap;
  rep.level = opts.level;
  rep.threshold = opts.threshold;
  rep.n_rows = static_cast<int>(rows.size());
  rep.n_positive = static_cast<int>(std::count(rows.labels.begin(), rows.labels.end(), 1));

  auto estimate = [&](MetricEstimate& est, const MetricFn& fn, std::uint64_t stream) {
    try {
      est.point = fn(rows);
    } catch (const UndefinedMetricError&) {
      est.defined = false;
      est.point = est.ci_low = est.ci_high = std::nan("");
      return;
    }
    est.defined = true;
    if (opts.n_bootstrap > 0) {
      auto ci = bootstrap_ci(fn, rows, opts.n_bootstrap, opts.level, derive_seed(opts.seed, stream),
                             opts.threads);
      est.ci_low = ci.low;
      est.ci_high = ci.high;
      rep.redraws += ci.redraws;
    } else {
      est.ci_low = est.ci_high = est.point;
    }
  };
  estimate(rep.auprc, [](const ScoredRows& r) { return auprc(r.scores, r.labels); }, 1);
  estimate(rep.auroc, [](const ScoredRows& r) { return auroc(r.scores, r.labels); }, 2);
  const double thr = opts.threshold;
  estimate(rep.accuracy, [thr](const ScoredRows& r) { return accuracy_at(r.scores, r.labels, thr); }, 3);
  if (rows.has_survival()) {
    estimate(rep.c_index, [](const ScoredRows& r) { return c_index(r.scores, r.times, r.events); }, 4);
  } else {
    rep.c_index.point = rep.c_index.ci_low = rep.c_index.ci_high = std::nan("");
  }
  return rep;
}

std::string report_to_csv(const EvalReport& r) {
  std::string out = "metric,point,ci_low,ci_high,defined\n";
  auto row = [&](const char* name, const MetricEstimate& e) {
    out += std::string(name) + "," + io::format_double(e.point) + "," + io::format_double(e.ci_low) +
           "," + io::format_double(e.ci_high) + "," + (e.defined ? "1" : "0") + "\n";
  };
  row("auprc", r.auprc);
  row("auroc", r.auroc);
  row("accuracy", r.accuracy);
  row("c_index", r.c_index);
  out += "n_bootstrap," + std::to_string(r.n_bootstrap) + ",,,\n";
  out += "level," + io::format_double(r.level) + ",,,\n";
  out += "threshold," + io::format_double(r.threshold) + ",,,\n";
  out += "n_rows," + std::to_string(r.n_rows) + ",,,\n";
  out += "n_positive," + std::to_string(r.n_positive) + ",,,\n";
  out += "redraws," + std::to_string(r.redraws) + ",,,\n";
  return out;
}

}  // namespace medfuse
