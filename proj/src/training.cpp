#include "medfuse/training.hpp"

#include "medfuse/io.hpp"
#include "medfuse/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <set>

namespace medfuse {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("train: learning_rate must be finite and >= 0");
  }
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (max_epochs < 0) throw ConfigError("train: max_epochs must be >= 0");
  if (patience < 1) throw ConfigError("train: patience must be >= 1");
}

TrainConfig TrainConfig::from_config(const KeyValueConfig& cfg) {
  TrainConfig t;
  t.learning_rate = cfg.get_double("train.learning_rate", t.learning_rate);
  t.batch_size = static_cast<int>(cfg.get_int("train.batch_size", t.batch_size));
  t.max_epochs = static_cast<int>(cfg.get_int("train.max_epochs", t.max_epochs));
  t.patience = static_cast<int>(cfg.get_int("train.patience", t.patience));
  t.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", static_cast<long long>(t.seed)));
  const long long bits = cfg.get_int("train.precision", 32);
  if (bits != 32 && bits != 64) throw ConfigError(cfg.origin() + ": train.precision must be 32 or 64");
  t.precision = bits == 64 ? Precision::kFloat64 : Precision::kFloat32;
  t.validate();
  return t;
}

std::string TrainTrace::to_csv(bool with_timing) const {
  std::string out = with_timing ? "epoch,loss,val_auprc,val_auroc,seconds,clamped\n"
                                : "epoch,loss,val_auprc,val_auroc,clamped\n";
  for (const auto& e : epochs) {
    out += std::to_string(e.epoch) + "," + io::format_double(e.loss) + "," +
           io::format_double(e.val_auprc) + "," + io::format_double(e.val_auroc) + ",";
    if (with_timing) out += io::format_double(e.seconds) + ",";
    out += std::to_string(e.clamped) + "\n";
  }
  return out;
}

double cross_entropy_loss(const Matrix<double>& probs, std::span<const int> labels, double eps,
                          int* clamped) {
  Tape<double> tape;
  auto p = tape.constant(probs);
  auto l = tape.cross_entropy(p, std::vector<int>(labels.begin(), labels.end()), eps, clamped);
  return tape.value(l)(0, 0);
}

// ---- Adam -------------------------------------------------------------------------

template <class T>
void Adam<T>::step(ParamStore<T>& params) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, t_);
  const double c2 = 1.0 - std::pow(b2_, t_);
  const T b1 = static_cast<T>(b1_), b2 = static_cast<T>(b2_);
  for (auto& p : params.all()) {
    auto& m = m_[p.name];
    auto& v = v_[p.name];
    if (m.size() == 0) {
      m = Matrix<T>::Zero(p.value.rows(), p.value.cols());
      v = Matrix<T>::Zero(p.value.rows(), p.value.cols());
    }
    auto fit = frozen_.find(p.name);
    const std::vector<int>* frozen = fit == frozen_.end() ? nullptr : &fit->second;
    Matrix<T> keep_value, keep_m, keep_v;
    if (frozen) {
      keep_value = p.value;
      keep_m = m;
      keep_v = v;
    }
    m = b1 * m + (T(1) - b1) * p.grad;
    v = b2 * v + (T(1) - b2) * p.grad.cwiseProduct(p.grad);
    const T step = static_cast<T>(lr_ / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(eps_);
    p.value.array() -= step * m.array() / ((v.array() * inv_c2).sqrt() + eps);
    if (frozen) {
      for (int r : *frozen) {
        p.value.row(r) = keep_value.row(r);
        m.row(r) = keep_m.row(r);
        v.row(r) = keep_v.row(r);
      }
    }
  }
}

template <class T>
void Adam<T>::reset() {
  t_ = 0;
  m_.clear();
  v_.clear();
}

template <class T>
void Adam<T>::freeze_rows(const std::string& tensor, std::vector<int> rows) {
  frozen_[tensor] = std::move(rows);
}

template <class T>
void Adam<T>::unfreeze_all() {
  frozen_.clear();
}

// ---- training ---------------------------------------------------------------------

namespace {

template <class T>
void check_gradients(const ParamStore<T>& params, const std::string& where, const TrainTrace& trace) {
  for (const auto& p : params.all()) {
    if (!p.grad.allFinite()) {
      throw TrainingDiverged("non-finite gradient in tensor '" + p.name + "' " + where, trace);
    }
  }
}

std::vector<int> labels_of(std::span<const TokenSequence* const> batch) {
  std::vector<int> y;
  y.reserve(batch.size());
  for (const auto* s : batch) y.push_back(s->label);
  return y;
}

}  // namespace

template <class T>
double loss_and_grad(Model<T>& model, std::span<const TokenSequence* const> batch, double clamp_eps) {
  model.params.zero_grad();
  Tape<T> tape;
  ParamBinder<T> binder(tape, model.params);
  auto probs = forward<T>(binder, model, batch, nullptr);
  auto loss = tape.cross_entropy(probs, labels_of(batch), static_cast<T>(clamp_eps));
  tape.backward(loss);
  return static_cast<double>(tape.value(loss)(0, 0));
}

template <class T>
TrainResult<T> train(Model<T> model, std::span<const TokenSequence> train_set,
                     std::span<const TokenSequence> val_set, const TrainConfig& cfg,
                     const TrainOptions<T>& opts) {
  cfg.validate();
  if (train_set.empty()) throw ContractError("train: empty training split");
  if (val_set.empty()) throw ContractError("train: empty validation split");
  {
    std::set<std::string> ids;
    for (const auto& s : train_set) ids.insert(s.entity_id);
    for (const auto& s : val_set) {
      if (ids.count(s.entity_id)) throw ContractError("train: entity " + s.entity_id + " is in both splits");
    }
  }
  std::vector<int> val_labels;
  for (const auto& s : val_set) val_labels.push_back(s.label);

  Adam<T> adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
  Rng shuffle_rng = make_stream(cfg.seed, "train.shuffle");
  Rng dropout_rng = make_stream(cfg.seed, "train.dropout");
  Rng* dropout = model.config.encoder.dropout > 0.0 ? &dropout_rng : nullptr;

  TrainResult<T> result;
  TrainTrace& trace = result.trace;
  ParamStore<T> best = model.params;
  double best_auprc = -1.0;
  int since_best = 0;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (epoch == 1 && opts.freeze_epochs > 0) {
      for (const auto& [tensor, rows] : opts.frozen_rows) adam.freeze_rows(tensor, rows);
    }
    if (opts.freeze_epochs > 0 && epoch == opts.freeze_epochs + 1) {
      adam.unfreeze_all();
      adam.reset();
    }
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0.0;
    for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const TokenSequence*> batch;
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(&train_set[order[i]]);

      model.params.zero_grad();
      Tape<T> tape;
      ParamBinder<T> binder(tape, model.params);
      auto probs = forward<T>(binder, model, batch, dropout);
      auto loss = tape.cross_entropy(probs, labels_of(batch), static_cast<T>(cfg.clamp_eps), &rec.clamped);
      const double value = static_cast<double>(tape.value(loss)(0, 0));
      if (!std::isfinite(value)) {
        throw TrainingDiverged("loss became non-finite in epoch " + std::to_string(epoch), trace);
      }
      tape.backward(loss);
      check_gradients(model.params, "in epoch " + std::to_string(epoch), trace);
      adam.step(model.params);
      loss_sum += value * static_cast<double>(batch.size());
    }
    rec.loss = loss_sum / static_cast<double>(order.size());

    auto scores = predict<T>(model, val_set, 1);
    rec.val_auprc = auprc(scores, val_labels);
    rec.val_auroc = auroc(scores, val_labels);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    trace.epochs.push_back(rec);
    if (opts.on_epoch_end) opts.on_epoch_end(epoch, model.params);

    if (rec.val_auprc > best_auprc) {
      best_auprc = rec.val_auprc;
      best = model.params;
      trace.best_epoch = epoch;
      trace.best_val_auprc = rec.val_auprc;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      trace.stopped_early = true;
      break;
    }
  }
  model.params = std::move(best);
  model.params.zero_grad();
  result.model = std::move(model);
  return result;
}

// ---- gradient check ---------------------------------------------------------------

bool GradCheckReport::pass() const {
  return std::all_of(tensors.begin(), tensors.end(), [](const TensorCheck& t) { return t.pass; });
}

std::string GradCheckReport::to_csv() const {
  std::string out = "tensor,entries,max_rel_error,max_abs_grad,pass\n";
  for (const auto& t : tensors) {
    out += t.tensor + "," + std::to_string(t.checked) + "," + io::format_double(t.max_rel_error) + "," +
           io::format_double(t.max_abs_grad) + "," + (t.pass ? "1" : "0") + "\n";
  }
  return out;
}

GradCheckReport grad_check(Model<double> model, std::span<const TokenSequence* const> batch,
                           const GradCheckOptions& opts) {
  loss_and_grad<double>(model, batch);
  ParamStore<double> analytic = model.params;
  if (opts.corrupt) opts.corrupt(analytic);
  const auto labels = labels_of(batch);

  auto loss_at = [&] {
    Tape<double> tape;
    ParamBinder<double> binder(tape, std::as_const(model.params));
    auto probs = forward<double>(binder, model, batch, nullptr);
    return tape.value(tape.cross_entropy(probs, labels, 1e-12))(0, 0);
  };

  GradCheckReport report;
  report.tolerance = opts.tolerance;
  for (auto& p : model.params.all()) {
    TensorCheck tc;
    tc.tensor = p.name;
    const auto& g = analytic.at(p.name).grad;
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      double& x = p.value.data()[i];
      const double saved = x;
      x = saved + opts.step;
      const double lp = loss_at();
      x = saved - opts.step;
      const double lm = loss_at();
      x = saved;
      const double numeric = (lp - lm) / (2.0 * opts.step);
      const double a = g.data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.floor});
      tc.max_rel_error = std::max(tc.max_rel_error, std::abs(a - numeric) / denom);
      tc.max_abs_grad = std::max(tc.max_abs_grad, std::abs(a));
      ++tc.checked;
    }
    tc.pass = tc.max_rel_error < opts.tolerance;
    report.tensors.push_back(tc);
  }
  return report;
}

template class Adam<float>;
template class Adam<double>;

#define MEDFUSE_INSTANTIATE(T)                                                                     \
  template double loss_and_grad<T>(Model<T>&, std::span<const TokenSequence* const>, double);      \
  template TrainResult<T> train<T>(Model<T>, std::span<const TokenSequence>,                       \
                                   std::span<const TokenSequence>, const TrainConfig&,             \
                                   const TrainOptions<T>&);

MEDFUSE_INSTANTIATE(float)
MEDFUSE_INSTANTIATE(double)

#undef MEDFUSE_INSTANTIATE

}  // namespace medfuse
