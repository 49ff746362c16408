#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "finegates/gates.h"

using namespace finegates;
using namespace finegates::gates;

namespace {

// Phi(2) from the Maclaurin series of erf at sqrt(2), summed in long double.
double phi_oracle(long double z) {
  const long double x = z / std::sqrt(2.0L);
  long double term = x, sum = x;
  for (int n = 1; n < 300; ++n) {
    term *= -x * x / n;
    sum += term / (2 * n + 1);
  }
  return static_cast<double>(0.5L + sum / std::sqrt(std::numbers::pi_v<long double>));
}

StochasticGateVector gate(Vector mu, double sigma = 0.5) { return {std::move(mu), sigma, Axis::Row}; }

}  // namespace

TEST_CASE("initial gates are open") {
  const auto g = StochasticGateVector::initial(5, Axis::Column);
  for (double m : g.mu) CHECK(m == kInitialMu);
  for (double w : deterministic_gates(g)) CHECK(w == 1.0);
  CHECK(g.sigma == 0.5);
  const SparsityObjective obj{0.1, 0.37, false};
  CHECK(obj.keep_floor() + obj.target_sparsity == 1.0);
}

TEST_CASE("relaxed gate values") {
  CHECK(relaxed_gates(gate({0.5}), std::vector<double>{0.0})[0] == 1.0);
  CHECK(relaxed_gates(gate({-1.0}), std::vector<double>{0.0})[0] == 0.0);
  CHECK(relaxed_gates(gate({0.0}), std::vector<double>{0.2})[0] == doctest::Approx(0.7));
  CHECK(deterministic_gates(gate({0.5}))[0] == 1.0);
  CHECK(deterministic_gates(gate({-0.5}))[0] == 0.0);
  CHECK(deterministic_gates(gate({-0.1}))[0] == doctest::Approx(0.4));
  CHECK(clamp_indicator(0.0) == 0.0);
  CHECK(clamp_indicator(1.0) == 0.0);
  CHECK(clamp_indicator(0.5) == 1.0);
}

TEST_CASE("sampled gates stay in the unit interval and replay from eps") {
  RngStream rng(13);
  Vector mu(2000);
  for (auto& m : mu) m = 2.0 * rng.next_uniform() - 1.0;
  const auto g = gate(mu);
  const GateSample s = sample_gates(g, rng);
  REQUIRE(s.omega.size() == mu.size());
  for (double w : s.omega) {
    CHECK(w >= 0.0);
    CHECK(w <= 1.0);
  }
  CHECK(relaxed_gates(g, s.eps) == s.omega);
  double var = 0.0;
  for (double e : s.eps) var += e * e;
  CHECK(std::sqrt(var / static_cast<double>(s.eps.size())) == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("expected l0") {
  const double phi2 = phi_oracle(2.0L);
  CHECK(phi2 == doctest::Approx(0.9772499).epsilon(1e-7));
  CHECK(expected_l0(gate({-0.5, -0.5, -0.5})) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(expected_l0(gate({0.5, 0.5})) == doctest::Approx(phi2).epsilon(1e-14));
  CHECK(expected_l0(gate({-0.5, 0.5})) == doctest::Approx((0.5 + phi2) / 2.0).epsilon(1e-14));
  CHECK(expected_l0(gate({-0.5, 0.5})) == doctest::Approx(0.7386250).epsilon(1e-7));
  CHECK(open_probability(0.5, 0.5) == doctest::Approx(phi2).epsilon(1e-14));
}

TEST_CASE("weighted expected l0") {
  CHECK(weighted_expected_l0(gate({-0.5}), std::vector<double>{1.0}) == doctest::Approx(0.5));
  CHECK(weighted_expected_l0(gate({0.5, -5.0}), std::vector<double>{1.0, 0.0}) ==
        doctest::Approx(0.5 * phi_oracle(2.0L)).epsilon(1e-14));
  const auto g = gate({0.3, -0.2, 0.1, -0.7});
  const std::vector<double> uniform(4, 0.25);
  CHECK(weighted_expected_l0(g, uniform) == doctest::Approx(expected_l0(g) / 4.0).epsilon(1e-14));
  CHECK_THROWS_AS(weighted_expected_l0(g, std::vector<double>{0.5, 0.5, 0.5, 0.5}), Error);
  CHECK_THROWS_AS(weighted_expected_l0(g, std::vector<double>{1.0}), Error);
}

TEST_CASE("hinge") {
  CHECK(hinged_sparsity_loss(0.3, 0.5) == 0.5);
  CHECK(hinged_sparsity_loss(0.8, 0.5) == 0.8);
  CHECK(hinged_sparsity_loss(0.5, 0.5) == 0.5);
}

TEST_CASE("sparsity gradient") {
  // Active hinge at mu = -0.5: phi(0) / sigma.
  const Vector g = sparsity_loss_grad(gate({-0.5}), std::nullopt, 0.4);
  CHECK(g[0] == doctest::Approx(0.7978846).epsilon(1e-7));
  CHECK(g[0] == doctest::Approx(1.0 / (0.5 * std::sqrt(2.0 * std::numbers::pi))).epsilon(1e-14));
  for (double v : sparsity_loss_grad(gate({-0.5, -0.4}), std::nullopt, 0.9)) CHECK(v == 0.0);

  RngStream rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    Vector mu(6);
    for (auto& m : mu) m = 2.0 * rng.next_uniform() - 1.0;
    Vector k(6);
    double ks = 0.0;
    for (auto& v : k) ks += (v = rng.next_uniform());
    for (auto& v : k) v /= ks;
    const double u = rng.next_uniform();
    for (bool weighted : {false, true}) {
      const double floor = weighted ? 0.05 * u : 0.3 * u;
      auto loss = [&](const Vector& m) {
        const auto gg = gate(m);
        return hinged_sparsity_loss(weighted ? weighted_expected_l0(gg, k) : expected_l0(gg), floor);
      };
      const auto gg = gate(mu);
      const double e = weighted ? weighted_expected_l0(gg, k) : expected_l0(gg);
      if (std::abs(e - floor) <= 1e-3) continue;
      const Vector fd = central_diff_grad(loss, mu, 1e-6);
      const Vector an = weighted ? sparsity_loss_grad(gg, std::span<const double>(k), floor)
                                 : sparsity_loss_grad(gg, std::nullopt, floor);
      double diff = 0.0, scale = 0.0;
      for (std::size_t i = 0; i < mu.size(); ++i) {
        diff = std::max(diff, std::abs(fd[i] - an[i]));
        scale = std::max(scale, std::abs(an[i]));
      }
      if (e > floor) {
        CHECK(diff / scale < 1e-6);
      } else {
        CHECK(scale == 0.0);
        CHECK(diff < 1e-10);
      }
    }
  }
}

TEST_CASE("activation matrix") {
  Matrix w(2, 2, {1.0, 2.0, 3.0, 4.0});
  const std::vector<double> r{1.0, 0.5}, c{0.5, 1.0};
  const Matrix ones(3, 2, 1.0);
  const Matrix o = activation_matrix(w, r, c, ones);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) CHECK(o(i, j) == r[i] * w(i, j) * c[j]);
  const Matrix z = activation_matrix(Matrix(2, 2), r, c, ones);
  for (double v : z.values()) CHECK(v == 0.0);
  // One sample, x = [1, 3]: O_ij = r_i W_ij c_j x_j.
  const Matrix x(1, 2, {1.0, 3.0});
  const Matrix h = activation_matrix(w, r, c, x);
  CHECK(h(0, 0) == 0.5);
  CHECK(h(0, 1) == 6.0);
  CHECK(h(1, 0) == 0.75);
  CHECK(h(1, 1) == 6.0);
}

TEST_CASE("kurtosis scores") {
  // Columns 0 and 1 hold the same multiset.
  Matrix same(4, 2, {1.0, -2.0, -1.0, 3.0, 3.0, 1.0, -2.0, -1.0});
  const auto s = kurtosis_scores(same);
  CHECK(s.cols[0] == doctest::Approx(0.5));
  CHECK(s.cols[1] == doctest::Approx(0.5));

  // Column 0 has one outlier (high kurtosis), column 1 is two-valued (kurtosis 1).
  Matrix mixed(6, 2, {0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 10.0, -1.0});
  const auto m = kurtosis_scores(mixed);
  CHECK(m.cols[0] < m.cols[1]);
  CHECK(m.cols[0] + m.cols[1] == doctest::Approx(1.0));

  Matrix with_const(4, 3, {5.0, 1.0, 2.0, 5.0, -1.0, 0.0, 5.0, 2.0, -2.0, 5.0, -2.0, 1.0});
  const auto c = kurtosis_scores(with_const);
  CHECK(c.cols[0] < c.cols[1]);
  CHECK(c.cols[0] < c.cols[2]);

  const Vector sm = softmax_neg(std::vector<double>{1.0, 2.0});
  CHECK(sm[0] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
}
