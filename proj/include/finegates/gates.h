#pragma once

#include <optional>
#include <span>
#include <utility>

#include "finegates/numerics.h"

namespace finegates::gates {

enum class Axis { Row, Column };

inline constexpr double kDefaultSigma = 0.5;
/// Initial mean: 0.5 + mu = 1, so every deterministic gate starts open.
inline constexpr double kInitialMu = 0.5;
/// Kurtosis assigned to zero-variance activation channels before the softmax.
inline constexpr double kKurtosisCap = 30.0;

/// Gaussian-relaxed Bernoulli gates over one axis of a weight matrix:
/// omega = clamp(0.5 + mu + eps, 0, 1), eps ~ N(0, sigma^2), sigma fixed.
struct StochasticGateVector {
  Vector mu;
  double sigma = kDefaultSigma;
  Axis axis = Axis::Row;

  static StochasticGateVector initial(std::size_t d, Axis axis, double sigma = kDefaultSigma) {
    return {Vector(d, kInitialMu), sigma, axis};
  }
  std::size_t size() const { return mu.size(); }
};

struct SparsityObjective {
  double lambda = 0.0;
  double target_sparsity = 0.0;
  bool kurtosis_weighting = false;

  /// Hinge floor on the expected open fraction (keep ratio).
  double keep_floor() const { return 1.0 - target_sparsity; }
};

struct GateSample {
  Vector omega;
  Vector eps;
};

/// One relaxed draw; eps is returned so the backward pass reuses it.
GateSample sample_gates(const StochasticGateVector& g, RngStream& rng);

/// omega for a given noise vector (eps.size() == mu.size()).
Vector relaxed_gates(const StochasticGateVector& g, std::span<const double> eps);

/// The eps = 0 realization used for evaluation.
Vector deterministic_gates(const StochasticGateVector& g);

/// Pre-clamp value 0.5 + mu + eps.
inline double pre_clamp(double mu, double eps) { return 0.5 + mu + eps; }
inline double clamp01(double v) { return std::max(0.0, std::min(1.0, v)); }
/// Derivative of the clamp: 1 strictly inside (0, 1), else 0.
inline double clamp_indicator(double pre) { return (pre > 0.0 && pre < 1.0) ? 1.0 : 0.0; }

/// P(omega_j > 0) = Phi((mu_j + 0.5) / sigma).
double open_probability(double mu, double sigma);

/// (1/d) sum_j P(omega_j > 0).
double expected_l0(const StochasticGateVector& g);

/// (1/d) sum_j k_j P(omega_j > 0); k must be nonnegative and sum to one.
double weighted_expected_l0(const StochasticGateVector& g, std::span<const double> k);

/// max(E, floor).
inline double hinged_sparsity_loss(double expected, double floor) { return std::max(expected, floor); }

/// d/dmu of hinge(E(mu), floor); zero when E <= floor. `k` selects the
/// weighted expectation.
Vector sparsity_loss_grad(const StochasticGateVector& g, std::optional<std::span<const double>> k, double floor);

/// O = [omega_r . W . omega_c] . x' where x' is the row mean of `x`
/// (batch and sequence already flattened into rows).
Matrix activation_matrix(const Matrix& w, std::span<const double> omega_r, std::span<const double> omega_c,
                         const Matrix& x);

struct KurtosisScores {
  Vector cols;
  Vector rows;
};

/// softmax(-kurtosis) over the columns of O and over its rows.
KurtosisScores kurtosis_scores(const Matrix& o);

/// softmax(-values), max-subtracted.
Vector softmax_neg(std::span<const double> values);

}  // namespace finegates::gates
