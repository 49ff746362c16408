#include "finegates/gates.h"

#include <cmath>
#include <numbers>

namespace finegates::gates {

GateSample sample_gates(const StochasticGateVector& g, RngStream& rng) {
  GateSample s;
  s.eps = gauss_sample(rng, g.size(), g.sigma);
  s.omega = relaxed_gates(g, s.eps);
  return s;
}

Vector relaxed_gates(const StochasticGateVector& g, std::span<const double> eps) {
  if (eps.size() != g.size()) throw Error(ErrorKind::ShapeMismatch, "noise length differs from gate length");
  Vector omega(g.size());
  for (std::size_t j = 0; j < g.size(); ++j) omega[j] = clamp01(pre_clamp(g.mu[j], eps[j]));
  return omega;
}

Vector deterministic_gates(const StochasticGateVector& g) {
  Vector omega(g.size());
  for (std::size_t j = 0; j < g.size(); ++j) omega[j] = clamp01(pre_clamp(g.mu[j], 0.0));
  return omega;
}

double open_probability(double mu, double sigma) {
  return 0.5 + 0.5 * finegates::erf((mu + 0.5) / (std::numbers::sqrt2 * sigma));
}

double expected_l0(const StochasticGateVector& g) {
  if (g.size() == 0) return 0.0;
  double s = 0.0;
  for (double mu : g.mu) s += open_probability(mu, g.sigma);
  return s / static_cast<double>(g.size());
}

namespace {

void check_weights(const StochasticGateVector& g, std::span<const double> k) {
  if (k.size() != g.size()) throw Error(ErrorKind::ShapeMismatch, "weight length differs from gate length");
  double total = 0.0;
  for (double v : k) {
    if (v < 0.0) throw Error(ErrorKind::WeightsNotNormalized, "negative weight");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error(ErrorKind::WeightsNotNormalized, "weights do not sum to one");
}

}  // namespace

double weighted_expected_l0(const StochasticGateVector& g, std::span<const double> k) {
  check_weights(g, k);
  if (g.size() == 0) return 0.0;
  double s = 0.0;
  for (std::size_t j = 0; j < g.size(); ++j) s += k[j] * open_probability(g.mu[j], g.sigma);
  return s / static_cast<double>(g.size());
}

Vector sparsity_loss_grad(const StochasticGateVector& g, std::optional<std::span<const double>> k, double floor) {
  Vector grad(g.size(), 0.0);
  if (g.size() == 0) return grad;
  const double expected = k ? weighted_expected_l0(g, *k) : expected_l0(g);
  if (expected <= floor) return grad;
  const double d = static_cast<double>(g.size());
  const double norm = 1.0 / (std::sqrt(2.0 * std::numbers::pi) * g.sigma);
  for (std::size_t j = 0; j < g.size(); ++j) {
    const double z = (g.mu[j] + 0.5) / g.sigma;
    const double weight = k ? (*k)[j] : 1.0;
    grad[j] = weight / d * norm * std::exp(-0.5 * z * z);
  }
  return grad;
}

Matrix activation_matrix(const Matrix& w, std::span<const double> omega_r, std::span<const double> omega_c,
                         const Matrix& x) {
  if (omega_r.size() != w.rows() || omega_c.size() != w.cols() || x.cols() != w.cols() || x.rows() == 0) {
    throw Error(ErrorKind::ShapeMismatch, "activation_matrix: inconsistent shapes");
  }
  Vector mean(x.cols(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) mean[c] += x(r, c);
  }
  for (double& m : mean) m /= static_cast<double>(x.rows());
  Matrix o(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) o(i, j) = omega_r[i] * w(i, j) * omega_c[j] * mean[j];
  }
  return o;
}

Vector softmax_neg(std::span<const double> values) {
  Vector out(values.size());
  if (values.empty()) return out;
  double lo = values[0];
  for (double v : values) lo = std::min(lo, v);
  double total = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = std::exp(-(values[i] - lo));
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

namespace {

double kurtosis_or_cap(std::span<const double> v) {
  try {
    return pearson_kurtosis(v);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::DegenerateVariance) throw;
    return kKurtosisCap;
  }
}

}  // namespace

KurtosisScores kurtosis_scores(const Matrix& o) {
  if (o.rows() < 2 || o.cols() < 2) throw Error(ErrorKind::ShapeMismatch, "kurtosis_scores needs a 2x2 or larger matrix");
  Vector col_kurt(o.cols());
  Vector column(o.rows());
  for (std::size_t j = 0; j < o.cols(); ++j) {
    for (std::size_t i = 0; i < o.rows(); ++i) column[i] = o(i, j);
    col_kurt[j] = kurtosis_or_cap(column);
  }
  Vector row_kurt(o.rows());
  for (std::size_t i = 0; i < o.rows(); ++i) row_kurt[i] = kurtosis_or_cap(o.row(i));
  return {softmax_neg(col_kurt), softmax_neg(row_kurt)};
}

}  // namespace finegates::gates
