#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "finegates/model.h"

namespace finegates::train {

enum class Schedule { Constant, WarmupCosine };

std::string to_string(Schedule s);
Schedule parse_schedule(const std::string& s);

struct TrainConfig {
  double lr_gates = 1e-3;
  double lr_bias_head = 1e-4;
  /// Learning rate for low-rank factors; unset means lr_bias_head.
  std::optional<double> lr_lowrank;
  double lambda = 0.0;
  double target_sparsity = 0.0;
  /// Per-layer keep-target overrides, keyed by layer name.
  std::map<std::string, double> layer_targets;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  Schedule schedule = Schedule::Constant;
  std::size_t warmup_steps = 0;
  /// WarmupCosine decays to this fraction of the peak rate.
  double floor_frac = 0.1;
  double weight_decay = 0.0;
  bool kurtosis_weighting = false;
  /// Recompute kurtosis weights every this many optimizer steps.
  std::size_t kurtosis_every = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Append one record per epoch to this file when set.
  std::optional<std::filesystem::path> metrics_log;

  void validate() const;
  double lowrank_lr() const { return lr_lowrank.value_or(lr_bias_head); }
  gates::SparsityObjective objective() const { return {lambda, target_sparsity, kurtosis_weighting}; }
};

struct Split {
  model::Batch train;
  model::Batch val;
};

/// Rows `idx` of a batch (whole sequences for token batches).
model::Batch subset(const model::Batch& b, std::span<const std::size_t> idx, std::size_t seq_len);

/// Detached softmax(-kurtosis) weights per gated layer; empty for ungated layers.
struct KurtosisWeights {
  std::vector<Vector> rows;
  std::vector<Vector> cols;
};

/// Weights from the layer inputs and realized gates recorded in `tape`.
KurtosisWeights kurtosis_weights(const model::GatedModel& m, const model::Tape& tape);

struct LossBreakdown {
  double total = 0.0;
  double task = 0.0;
  double sparsity = 0.0;
};

struct LossResult {
  LossBreakdown loss;
  model::ParamGrads grads;
  model::Tape tape;
  std::optional<KurtosisWeights> kurtosis;
};

/// Mean cross-entropy or mean squared error; writes dLoss/dlogits when asked.
double task_loss(model::TaskKind task, const Matrix& logits, const model::Batch& batch, Matrix* dlogits = nullptr);

/// Keep floor for one layer, honoring per-layer overrides.
double layer_floor(const TrainConfig& cfg, const std::string& layer);

/// lambda / L * sum over gated layers of the row and column hinges. The
/// expectation is taken analytically from mu.
double sparsity_term(const model::GatedModel& m, const TrainConfig& cfg, const KurtosisWeights* kw);

/// Adds d(sparsity_term)/d(mu) into grads.
void add_sparsity_grads(const model::GatedModel& m, const TrainConfig& cfg, const KurtosisWeights* kw,
                        model::ParamGrads& grads);

/// Task loss plus the sparsity term at explicit gate values. When kurtosis
/// weighting is on and `fixed_kurtosis` is null the weights are computed from
/// this forward pass.
LossResult total_loss(const model::GatedModel& m, const model::Batch& batch, const model::GateSet& gates,
                      const TrainConfig& cfg, bool want_grads = true, const KurtosisWeights* fixed_kurtosis = nullptr);

/// Samples one noise draw per gate vector from `rng`, then evaluates.
LossResult total_loss(const model::GatedModel& m, const model::Batch& batch, RngStream& rng, const TrainConfig& cfg);

struct AdamMoments {
  Vector m;
  Vector v;
};

struct AdamHyper {
  double lr;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// One AdamW update at step t (1-based). Decay p -= lr*wd*p comes before the
/// Adam delta.
void adamw_step(std::span<double> params, std::span<const double> grads, AdamMoments& state, std::size_t t,
                const AdamHyper& h);

/// Multiplier on the base learning rate at a 0-based step.
double lr_scale(const TrainConfig& cfg, std::size_t step, std::size_t total_steps);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double task_loss = 0.0;
  double sparsity_loss = 0.0;
  /// Accuracy for classification, mean squared error for regression.
  double val_metric = 0.0;
  /// Expected open fraction per layer (rows, columns).
  std::vector<double> open_rows;
  std::vector<double> open_cols;
  /// Mean gradient norm over the epoch's steps.
  double grad_norm = 0.0;
  double elapsed_ms = 0.0;
};

/// Gate means after an epoch; epoch 0 is the initial state.
struct GateSnapshot {
  std::size_t epoch = 0;
  std::vector<Vector> mu_r;
  std::vector<Vector> mu_c;
};

struct TrainRun {
  std::vector<EpochRecord> records;
  std::vector<GateSnapshot> snapshots;
  std::vector<std::string> layer_names;
  model::GatedModel model;
  double wall_ms = 0.0;
};

/// Raised when the loss or a gradient turns non-finite. Carries the model as
/// it was before the failing step.
class Diverged : public Error {
 public:
  Diverged(std::size_t step, model::GatedModel last_good);
  std::size_t step() const { return step_; }
  const model::GatedModel& last_good() const { return last_good_; }

 private:
  std::size_t step_;
  model::GatedModel last_good_;
};

/// Accuracy (classification) or mean squared error (regression) of logits.
double logits_metric(model::TaskKind task, const Matrix& logits, const model::Batch& batch);
double evaluate_metric(const model::GatedModel& m, const model::Batch& val);

TrainRun train(model::GatedModel m, const Split& data, const TrainConfig& cfg);

/// One key=value line; elapsed_ms is the only wall-clock field.
std::string format_record(const EpochRecord& r, const std::vector<std::string>& layer_names, bool with_elapsed = true);

// Flat views used by the gradient check and full-batch descent.
Vector pack_parameters(model::GatedModel& m);
void unpack_parameters(model::GatedModel& m, const Vector& flat);
Vector pack_grads(const model::GatedModel& m, const model::ParamGrads& g);

struct TensorCheck {
  std::string name;
  double rel_err = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double max_rel_err = 0.0;
  std::string worst_tensor;
  bool passed = false;
};

/// Analytic gradients of total_loss against central differences with one
/// frozen noise draw and frozen kurtosis weights. Per tensor the error is
/// max|analytic - numeric| / max(max|numeric|, max|analytic|, abs_floor) over
/// the checked coordinates, so tensors whose gradient is below `abs_floor`
/// (a key bias under softmax is exactly zero) are judged on absolute error.
/// Gate coordinates within `exclusion` of a clamp boundary, and gate vectors
/// within `exclusion` of their hinge kink, are skipped.
GradCheckReport grad_check(const model::GatedModel& m, const model::Batch& batch, const TrainConfig& cfg, double h,
                           double tolerance, double abs_floor = 1e-3, double exclusion = 1e-3);

}  // namespace finegates::train
