#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "finegates/numerics.h"

using namespace finegates;

namespace {

// Maclaurin series in long double; converges quickly for |x| <= 3.
long double erf_series(long double x) {
  long double term = x, sum = x;
  for (int n = 1; n < 200; ++n) {
    term *= -x * x / n;
    const long double add = term / (2 * n + 1);
    sum += add;
    if (std::fabs(add) < 1e-30L) break;
  }
  return sum * 2.0L / std::sqrt(std::numbers::pi_v<long double>);
}

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(p, j);
      out(i, j) = s;
    }
  return out;
}

Matrix random_matrix(RngStream& rng, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (auto& v : m.values()) v = rng.next_normal();
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a.values()[i] - b.values()[i]));
  return d;
}

// Characteristic polynomial by Faddeev-LeVerrier, roots by bisection on a grid.
std::vector<double> eig_oracle(const Matrix& a) {
  const std::size_t n = a.rows();
  std::vector<long double> coeff(n + 1, 0.0L);  // coeff[k] multiplies lambda^(n-k)
  coeff[0] = 1.0L;
  std::vector<long double> m(n * n, 0.0L), am(n * n);
  for (std::size_t k = 1; k <= n; ++k) {
    for (std::size_t i = 0; i < n; ++i) m[i * n + i] += coeff[k - 1];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        long double s = 0.0L;
        for (std::size_t p = 0; p < n; ++p) s += a(i, p) * m[p * n + j];
        am[i * n + j] = s;
      }
    long double tr = 0.0L;
    for (std::size_t i = 0; i < n; ++i) tr += am[i * n + i];
    coeff[k] = -tr / static_cast<long double>(k);
    m = am;
  }
  auto p = [&](long double x) {
    long double v = 0.0L;
    for (auto c : coeff) v = v * x + c;
    return v;
  };
  long double bound = 0.0L;
  for (auto v : a.values()) bound += std::fabs(v);
  std::vector<double> roots;
  const int grid = 200000;
  long double lo = -bound - 1.0L, step = (2.0L * bound + 2.0L) / grid;
  for (int g = 0; g < grid; ++g) {
    long double x0 = lo + step * g, x1 = x0 + step;
    if ((p(x0) < 0) != (p(x1) < 0)) {
      for (int it = 0; it < 200; ++it) {
        const long double mid = 0.5L * (x0 + x1);
        if ((p(x0) < 0) != (p(mid) < 0)) x1 = mid; else x0 = mid;
      }
      roots.push_back(static_cast<double>(0.5L * (x0 + x1)));
    }
  }
  return roots;
}

}  // namespace

TEST_CASE("erf values and symmetry") {
  CHECK(finegates::erf(0.0) == 0.0);
  CHECK(finegates::erf(1.4142135) == doctest::Approx(0.9544997).epsilon(1e-7));
  for (double x = -3.0; x <= 3.0; x += 0.125) {
    CHECK(std::abs(finegates::erf(x) - static_cast<double>(erf_series(x))) < 2e-15);
  }
  RngStream rng(11);
  for (int i = 0; i < 100; ++i) {
    const double x = 8.0 * (rng.next_uniform() - 0.5);
    CHECK(finegates::erf(-x) == -finegates::erf(x));
  }
  CHECK(finegates::erf(10.0) == 1.0);
  CHECK(normal_cdf(2.0) == doctest::Approx(0.9772498680518208).epsilon(1e-15));
}

TEST_CASE("pearson kurtosis") {
  const std::vector<double> alt{1, -1, 1, -1};
  CHECK(pearson_kurtosis(alt) == doctest::Approx(1.0));
  const std::vector<double> ramp{1, 2, 3, 4};
  CHECK(pearson_kurtosis(ramp) == doctest::Approx(2.5625 / 1.5625));
  const std::vector<double> flat(5, 3.0);
  try {
    pearson_kurtosis(flat);
    FAIL("expected DegenerateVariance");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::DegenerateVariance);
  }
  RngStream rng(3);
  const Vector big = gauss_sample(rng, 1000000, 1.0);
  CHECK(std::abs(pearson_kurtosis(big) - 3.0) < 0.05);
}

TEST_CASE("gaussian sampling") {
  RngStream a(7), b(7);
  CHECK(gauss_sample(a, 3, 1.0) == gauss_sample(b, 3, 1.0));
  RngStream c(1);
  CHECK(gauss_sample(c, 0, 1.0).empty());
  RngStream d(5);
  const Vector v = gauss_sample(d, 1000000, 0.5);
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(v.size()));
  CHECK(sd >= 0.498);
  CHECK(sd <= 0.502);
}

TEST_CASE("rng stream is counter based") {
  RngStream a(42, 10), b(42, 10);
  CHECK(a.next_u64() == b.next_u64());
  RngStream c(42);
  for (int i = 0; i < 10; ++i) c.next_u64();
  RngStream e(42, 10);
  CHECK(c.next_u64() == e.next_u64());
  CHECK(RngStream(42).fork(1).next_u64() != RngStream(42).fork(2).next_u64());
  RngStream u(9);
  for (int i = 0; i < 10000; ++i) {
    const double x = u.next_uniform();
    CHECK(x > 0.0);
    CHECK(x < 1.0);
    CHECK(u.next_below(7) < 7u);
  }
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  RngStream s(4);
  shuffle_indices(idx, s);
  std::vector<std::size_t> sorted = idx;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7});
}

TEST_CASE("matrix products match the naive triple loop") {
  RngStream rng(21);
  const Matrix a = random_matrix(rng, 5, 70), b = random_matrix(rng, 70, 300), c = random_matrix(rng, 4, 70);
  const Matrix ref = naive_matmul(a, b);
  CHECK(max_abs_diff(matmul(a, b), ref) < 1e-12);
  Matrix out;
  matmul_into(a, b, out);
  CHECK(max_abs_diff(out, ref) < 1e-12);
  CHECK(max_abs_diff(matmul_nt(a, c), naive_matmul(a, c.transposed())) < 1e-12);
  const Matrix d = random_matrix(rng, 5, 3);
  CHECK(max_abs_diff(matmul_tn(a, d), naive_matmul(a.transposed(), d)) < 1e-12);
  CHECK_THROWS_AS(matmul(a, a), Error);
  CHECK_THROWS_AS(Matrix(2, 2, std::vector<double>(3)), Error);
}

TEST_CASE("symmetric eigenvalues") {
  Matrix eye(3, 3);
  for (std::size_t i = 0; i < 3; ++i) eye(i, i) = 1.0;
  CHECK(min_eig_sym(eye) == doctest::Approx(1.0));
  Matrix dg(2, 2);
  dg(0, 0) = 2.0;
  dg(1, 1) = 0.5;
  CHECK(min_eig_sym(dg) == doctest::Approx(0.5));
  RngStream rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix a = random_matrix(rng, 4, 4);
    const Matrix m = matmul_tn(a, a);
    const auto oracle = eig_oracle(m);
    const Vector got = eig_sym(m);
    REQUIRE(oracle.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(got[i] == doctest::Approx(oracle[i]).epsilon(1e-8));
    CHECK(min_eig_sym(m) == doctest::Approx(oracle[0]).epsilon(1e-8));
  }
  Matrix asym(2, 2);
  asym(0, 1) = 1.0;
  CHECK_THROWS_AS(min_eig_sym(asym), Error);
}

TEST_CASE("singular values and truncated svd") {
  Matrix d(3, 2);
  d(0, 0) = -3.0;
  d(1, 1) = 2.0;
  const Vector s = singular_values(d);
  CHECK(s[0] == doctest::Approx(3.0));
  CHECK(s[1] == doctest::Approx(2.0));
  RngStream rng(2);
  const Matrix m = random_matrix(rng, 5, 4);
  const Vector sv = singular_values(m);
  const Matrix r2 = truncated_svd(m, 2);
  double tail = 0.0;
  for (std::size_t i = 2; i < sv.size(); ++i) tail += sv[i] * sv[i];
  CHECK(frobenius_sq(subtract(m, r2)) == doctest::Approx(tail).epsilon(1e-10));
  CHECK(singular_values(r2)[2] < 1e-10);
}

TEST_CASE("central differences") {
  auto sq = [](const Vector& x) { return x[0] * x[0] + x[1] * x[1]; };
  const Vector g = central_diff_grad(sq, {1.0, 2.0}, 1e-5);
  CHECK(std::abs(g[0] - 2.0) < 1e-8);
  CHECK(std::abs(g[1] - 4.0) < 1e-8);
  const Vector z = central_diff_grad([](const Vector&) { return 3.0; }, {1.0, 2.0, 3.0}, 1e-5);
  for (double v : z) CHECK(v == 0.0);
}

TEST_CASE("gelu") {
  CHECK(gelu(0.0) == 0.0);
  CHECK(gelu(1.0) == doctest::Approx(0.8413447460685429));
  for (double x = -3.0; x <= 3.0; x += 0.5) {
    const double fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
    CHECK(std::abs(gelu_grad(x) - fd) < 1e-8);
  }
}

TEST_CASE("finite checks") {
  CHECK(all_finite(std::vector<double>{1.0, 2.0}));
  CHECK_FALSE(all_finite(std::vector<double>{1.0, std::nan("")}));
  CHECK(norm2(std::vector<double>{3.0, 4.0}) == 5.0);
}
