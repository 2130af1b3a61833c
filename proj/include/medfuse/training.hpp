#pragma once

#include "medfuse/model.hpp"

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace medfuse {

struct TrainConfig {
  double learning_rate = 3e-5;
  int batch_size = 32;
  int max_epochs = 50;
  int patience = 5;
  std::uint64_t seed = 1;
  Precision precision = Precision::kFloat32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clamp_eps = 1e-12;

  void validate() const;
  static TrainConfig from_config(const KeyValueConfig& cfg);
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double loss = 0.0;
  double val_auprc = 0.0;
  double val_auroc = 0.0;
  double seconds = 0.0;
  int clamped = 0;  // rows whose true-class probability hit the clamp
};

struct TrainTrace {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // 0 when no epoch ran
  double best_val_auprc = 0.0;
  bool stopped_early = false;

  // epoch,loss,val_auprc,val_auroc,seconds,clamped
  std::string to_csv(bool with_timing = true) const;
};

class TrainingDiverged : public DivergenceError {
 public:
  TrainingDiverged(const std::string& what, TrainTrace trace)
      : DivergenceError(what), trace_(std::move(trace)) {}
  const TrainTrace& trace() const { return trace_; }

 private:
  TrainTrace trace_;
};

// Mean two-class cross-entropy with probabilities clamped at eps.
double cross_entropy_loss(const Matrix<double>& probs, std::span<const int> labels, double eps = 1e-12,
                          int* clamped = nullptr);

// Adam with per-row freezing. Frozen rows get no moment and no value update.
template <class T>
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamStore<T>& params);
  void reset();  // drops moments and the step counter
  void freeze_rows(const std::string& tensor, std::vector<int> rows);
  void unfreeze_all();
  int steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
  std::map<std::string, Matrix<T>> m_, v_;
  std::map<std::string, std::vector<int>> frozen_;
};

template <class T>
struct TrainOptions {
  // Rows held fixed for the first `freeze_epochs` epochs. Adam moments are
  // reset when the freeze ends.
  std::map<std::string, std::vector<int>> frozen_rows;
  int freeze_epochs = 0;
  // Called after each epoch with the current (not best) parameters.
  std::function<void(int epoch, const ParamStore<T>& params)> on_epoch_end;
};

template <class T>
struct TrainResult {
  Model<T> model;  // parameters of the best validation epoch
  TrainTrace trace;
};

// Shuffled mini-batch Adam, early stopping on validation AUPRC. Throws
// TrainingDiverged (carrying the trace so far) on a non-finite loss and
// DivergenceError naming the tensor on a non-finite gradient.
template <class T>
TrainResult<T> train(Model<T> model, std::span<const TokenSequence> train_set,
                     std::span<const TokenSequence> val_set, const TrainConfig& cfg,
                     const TrainOptions<T>& opts = {});

// Loss and gradients for one batch with dropout disabled.
template <class T>
double loss_and_grad(Model<T>& model, std::span<const TokenSequence* const> batch, double clamp_eps = 1e-12);

struct TensorCheck {
  std::string tensor;
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
  long long checked = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double tolerance = 1e-4;
  bool pass() const;
  std::string to_csv() const;
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  double floor = 1e-6;  // denominator floor for the relative error
  // Applied to the analytic gradients before comparison (negative controls).
  std::function<void(ParamStore<double>&)> corrupt;
};

// Central-difference check of every tensor of a 64-bit model (dropout off).
GradCheckReport grad_check(Model<double> model, std::span<const TokenSequence* const> batch,
                           const GradCheckOptions& opts = {});

}  // namespace medfuse
