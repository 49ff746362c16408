#pragma once

#include <functional>
#include <string>
#include <vector>

#include "finegates/train.h"

namespace finegates::landscape {

/// Jacobian of vec(diag(omega_r) W0 diag(omega_c)) with respect to
/// (omega_r, omega_c), and its Gram matrix.
struct JacobianReport {
  std::size_t m = 0;
  std::size_t n = 0;
  /// mn x (m + n), row index i * n + j.
  Matrix j;
  /// Assembled from the diagonal blocks g_r, g_c and the cross block H.
  Matrix gram;
  double gram_min_eig = 0.0;
  double sigma_min_j = 0.0;
  /// min(m, n) * w0^2 * alpha^2, the diagonal estimate.
  double diag_bound = 0.0;
  double min_diag = 0.0;
  /// max |block-assembled G - J^T J|.
  double block_identity_error = 0.0;
  /// ||J (omega_r, -omega_c)||: the rescaling direction (t omega_r, omega_c / t).
  double scaling_residual = 0.0;
  /// Smallest Gram eigenvalue on the complement of that direction.
  double reduced_min_eig = 0.0;
  double alpha = 0.0;
  double w0 = 0.0;
};

/// Dense analysis for m, n <= 16 (TooLarge otherwise).
JacobianReport gates_jacobian(const Matrix& w0, const Vector& omega_r, const Vector& omega_c);

/// Random instances with m, n in [2, max_dim], |W0_ij| in [0.1, 1] and gates in
/// [0.1, 1]. An instance counts as positive when its smallest Gram eigenvalue
/// exceeds `rel_threshold` times the Gram Frobenius norm.
struct JacobianSweep {
  std::vector<JacobianReport> reports;
  double rel_threshold = 1e-12;
  std::size_t positive = 0;
  double max_block_error = 0.0;
  double min_gram_eig = 0.0;
  double max_scaling_residual = 0.0;
  double min_reduced_eig = 0.0;
  /// Instances where the smallest Gram diagonal entry is below diag_bound.
  std::size_t diag_bound_failures = 0;

  bool all_positive() const { return positive == reports.size(); }
  /// One line per instance, then summary key=value lines.
  std::string to_text() const;
};

JacobianSweep jacobian_sweep(std::size_t instances, std::uint64_t seed, std::size_t max_dim = 8,
                             double rel_threshold = 1e-12);

struct PLStep {
  std::size_t step = 0;
  double loss = 0.0;
  double gap = 0.0;
  double grad_sq = 0.0;
  /// ||grad F||^2 / (2 (F - F*)).
  double ratio = 0.0;
};

struct PLTrace {
  std::vector<PLStep> steps;
  double f_star = 0.0;
  /// Infimum of the ratio over steps with gap > 1e-14.
  double inf_ratio = 0.0;
};

/// F(omega_r, omega_c) = 1/2 ||diag(omega_r) W0 diag(omega_c) - W*||^2.
struct GatesQuadratic {
  Matrix w0;
  Matrix w_star;
  double loss(const Vector& r, const Vector& c) const;
  /// Gradient packed as (d/d omega_r, d/d omega_c).
  Vector grad(const Vector& r, const Vector& c) const;
};

/// F(A, B) = 1/2 ||W0 + A B^T - W*||^2, A: m x r, B: n x r.
struct LoRAQuadratic {
  Matrix w0;
  Matrix w_star;
  std::size_t rank = 1;
  double loss(const Matrix& a, const Matrix& b) const;
  std::pair<Matrix, Matrix> grad(const Matrix& a, const Matrix& b) const;
  /// Half the squared tail of the singular values of W* - W0 past the rank.
  double f_star() const;
};

/// Lowest value from alternating exact minimization over omega_r and omega_c
/// (each sweep a closed-form 1-D least squares per coordinate), started from
/// every point in `starts`, iterated until the change drops below `tol`.
double gates_f_star(const GatesQuadratic& p, const std::vector<std::pair<Vector, Vector>>& starts, double tol = 1e-12,
                    std::size_t max_sweeps = 200000);

/// Gradient descent on the gates quadratic. Throws AssumptionViolated when W0
/// has a zero entry and Diverged on a non-finite loss. When `f_star` is not
/// given it is the minimum of gates_f_star over the start, the all-ones point
/// and the descent endpoint.
PLTrace pl_trace(const GatesQuadratic& p, Vector omega_r, Vector omega_c, std::size_t steps, double lr,
                 std::optional<double> f_star = std::nullopt);

/// Gradient descent on the LoRA quadratic with F* from the truncated SVD.
PLTrace pl_trace(const LoRAQuadratic& p, Matrix a, Matrix b, std::size_t steps, double lr);

/// Eigenvalues of the LoRA Hessian at (A, B) = (0, 0), ascending.
Vector lora_origin_hessian(const LoRAQuadratic& p);

/// LoRA quadratic at the origin for one random instance.
struct SaddleInstance {
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t rank = 0;
  /// ||grad F(0, 0)||.
  double grad_norm = 0.0;
  /// F(0, 0) - F*.
  double gap = 0.0;
  /// 1/2 ||W0 - W*||^2 - F*, with F* from the truncated SVD.
  double bound = 0.0;
  /// ||grad F||^2 / (2 (F - F*)) at the origin.
  double pl_ratio = 0.0;
  double hessian_min_eig = 0.0;
  double hessian_max_eig = 0.0;
};

struct SaddleSweep {
  std::vector<SaddleInstance> instances;
  double max_grad_norm = 0.0;
  double min_gap = 0.0;
  double max_pl_ratio = 0.0;
  std::string to_text() const;
};

/// LoRA at (A, B) = (0, 0) on random W0 != W*, m, n in [rank + 1, max_dim].
SaddleSweep lora_saddle_sweep(std::size_t instances, std::size_t rank, std::uint64_t seed, std::size_t max_dim = 6);

/// Full-batch objective over a flat parameter vector.
struct FullBatchObjective {
  std::function<double(const Vector&)> loss;
  std::function<Vector(const Vector&)> grad;
};

/// Deterministic (eps = 0) total loss of a model on one batch.
FullBatchObjective model_objective(const model::GatedModel& m, const model::Batch& batch, const train::TrainConfig& cfg);

/// Same loss as a function of the gate means alone; every other trainable
/// parameter stays at its value in `m`.
FullBatchObjective gate_objective(const model::GatedModel& m, const model::Batch& batch, const train::TrainConfig& cfg);
/// Gate means of `m` in gate_objective order.
Vector pack_gate_means(const model::GatedModel& m);

/// Largest-magnitude Hessian eigenvalue by power iteration on central-difference
/// Hessian-vector products.
double estimate_smoothness(const FullBatchObjective& f, const Vector& z, std::size_t iters = 100, double h = 1e-5,
                           std::uint64_t seed = 0);

struct ConvergenceStep {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  /// L(z+) - L(z) + eta (1 - eta L/2) ||grad||^2.
  double descent_residual = 0.0;
};

struct ConvergenceTrace {
  double smoothness = 0.0;
  double eta = 0.0;
  std::vector<ConvergenceStep> steps;
  double final_grad_norm = 0.0;
  double max_residual = 0.0;
  std::size_t violations = 0;
  bool reached_tolerance = false;
};

struct ConvergenceOptions {
  std::size_t max_steps = 5000;
  /// eta = eta_factor / L_hat.
  double eta_factor = 0.5;
  double grad_tol = 1e-5;
  double residual_tol = 1e-10;
  std::size_t power_iters = 100;
  /// Use this smoothness instead of estimating it.
  std::optional<double> smoothness;
  /// Descend on the gate means only (head, biases and low-rank factors fixed).
  bool gates_only = true;
};

/// Plain gradient descent (no optimizer state) from z0 with the descent-lemma
/// residual recorded per step. Stops early once the gradient norm is below
/// the tolerance.
ConvergenceTrace gradient_descent(const FullBatchObjective& f, Vector z0, const ConvergenceOptions& opt);

ConvergenceTrace convergence_experiment(const model::GatedModel& m, const model::Batch& batch,
                                        const train::TrainConfig& cfg, const ConvergenceOptions& opt);

struct ComparisonConfig {
  train::TrainConfig train;
  /// Learning rate shared by the gates (FineGates) and the low-rank factors (LoRA).
  double adapter_lr = 1e-3;
  std::size_t lora_rank = 4;
  std::vector<std::uint64_t> seeds;
};

struct MethodSeries {
  std::string method;
  /// [seed][epoch] validation metric.
  std::vector<std::vector<double>> curves;
  /// Per seed: first epoch reaching 90% of that run's final metric.
  std::vector<std::size_t> epochs_to_90;
  double median_epochs_to_90 = 0.0;
  std::size_t optimizer_steps = 0;
};

struct Comparison {
  std::vector<std::uint64_t> seeds;
  std::size_t epochs = 0;
  MethodSeries gates;
  MethodSeries lora;

  /// method, epoch, mean, std, then one column per seed.
  std::string to_table() const;
};

/// First 1-based epoch whose metric reaches `frac` of the final one (0 when empty).
std::size_t epochs_to_fraction(const std::vector<double>& curve, double frac = 0.9);

Comparison compare_gates_vs_lora(const model::GatedModel& base, const train::Split& data, const ComparisonConfig& cfg);

}  // namespace finegates::landscape
