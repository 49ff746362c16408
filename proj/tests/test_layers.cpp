#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "finegates/layers.h"

using namespace finegates;
using namespace finegates::layers;

namespace {

Matrix random_matrix(RngStream& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (auto& v : m.values()) v = scale * rng.next_normal();
  return m;
}

Vector random_vector(RngStream& rng, std::size_t n, double lo, double hi) {
  Vector v(n);
  for (auto& x : v) x = lo + (hi - lo) * rng.next_uniform();
  return v;
}

// Loss 1/2 ||H - T||^2 so that dL/dH = H - T.
double half_sq(const Matrix& h, const Matrix& t) { return 0.5 * frobenius_sq(subtract(h, t)); }

double rel_err(const Vector& a, const Vector& b) {
  double d = 0.0, s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d = std::max(d, std::abs(a[i] - b[i]));
    s = std::max({s, std::abs(a[i]), std::abs(b[i])});
  }
  return s == 0.0 ? d : d / s;
}

}  // namespace

TEST_CASE("open gates reproduce a plain linear layer") {
  RngStream rng(1);
  const auto layer = GatedLinear::make("l", random_matrix(rng, 4, 3), random_vector(rng, 4, -1, 1));
  const Matrix x = random_matrix(rng, 5, 3);
  const Matrix h = gated_forward(layer, x, layer.realize_ones());
  CHECK(h == linear_forward(layer.w0, layer.bias, x));
  CHECK(gated_forward(layer, x, layer.realize_eval()) == h);
}

TEST_CASE("closed row gates silence the bias too") {
  RngStream rng(2);
  const auto layer = GatedLinear::make("l", random_matrix(rng, 3, 2), random_vector(rng, 3, 0.5, 1));
  const Matrix h = gated_forward(layer, random_matrix(rng, 4, 2), layer.realize_binary(Vector(3, 0.0), Vector(2, 1.0)));
  for (double v : h.values()) CHECK(v == 0.0);
}

TEST_CASE("hand-computed forward") {
  auto layer = GatedLinear::make("l", Matrix(2, 2, {1.0, 2.0, 3.0, 4.0}), Vector(2, 0.0));
  const Matrix x(1, 2, {1.0, 1.0});
  const Matrix h = gated_forward(layer, x, layer.realize_binary({1.0, 0.0}, {0.5, 1.0}));
  CHECK(h(0, 0) == 2.5);
  CHECK(h(0, 1) == 0.0);
}

TEST_CASE("backward matches central differences with frozen noise") {
  RngStream rng(3);
  for (bool with_lowrank : {false, true}) {
    auto layer = GatedLinear::make("l", random_matrix(rng, 4, 3), random_vector(rng, 4, -1, 1));
    layer.gate_r.mu = random_vector(rng, 4, -0.3, 0.1);
    layer.gate_c.mu = random_vector(rng, 3, -0.3, 0.1);
    if (with_lowrank) layer.lowrank = LowRank{random_matrix(rng, 4, 2, 0.3), random_matrix(rng, 3, 2, 0.3)};
    const Vector eps_r = random_vector(rng, 4, -0.05, 0.05), eps_c = random_vector(rng, 3, -0.05, 0.05);
    const Matrix x = random_matrix(rng, 6, 3), t = random_matrix(rng, 6, 4);

    LinearCache cache;
    const Matrix h = gated_forward(layer, x, layer.realize_noise(eps_r, eps_c), &cache);
    const LinearGrads g = gated_backward(layer, cache, subtract(h, t));

    auto probe = [&](auto setter) {
      return [&, setter](const Vector& v) {
        GatedLinear l = layer;
        Matrix xx = x;
        setter(l, xx, v);
        return half_sq(gated_forward(l, xx, l.realize_noise(eps_r, eps_c)), t);
      };
    };
    const double h_fd = 1e-6;
    CHECK(rel_err(g.mu_r, central_diff_grad(probe([](GatedLinear& l, Matrix&, const Vector& v) { l.gate_r.mu = v; }),
                                            layer.gate_r.mu, h_fd)) < 1e-8);
    CHECK(rel_err(g.mu_c, central_diff_grad(probe([](GatedLinear& l, Matrix&, const Vector& v) { l.gate_c.mu = v; }),
                                            layer.gate_c.mu, h_fd)) < 1e-8);
    CHECK(rel_err(g.bias, central_diff_grad(probe([](GatedLinear& l, Matrix&, const Vector& v) { l.bias = v; }),
                                            layer.bias, h_fd)) < 1e-8);
    CHECK(rel_err(g.dx.values(),
                  central_diff_grad(probe([](GatedLinear&, Matrix& xx, const Vector& v) { xx.values() = v; }),
                                    x.values(), h_fd)) < 1e-8);
    if (with_lowrank) {
      CHECK(rel_err(g.a.values(),
                    central_diff_grad(probe([](GatedLinear& l, Matrix&, const Vector& v) { l.lowrank->a.values() = v; }),
                                      layer.lowrank->a.values(), h_fd)) < 1e-8);
      CHECK(rel_err(g.b.values(),
                    central_diff_grad(probe([](GatedLinear& l, Matrix&, const Vector& v) { l.lowrank->b.values() = v; }),
                                      layer.lowrank->b.values(), h_fd)) < 1e-8);
    }
  }
}

TEST_CASE("scalar chain rule") {
  // W0 = 2, b = 0, x = 1, gates at 0.75: H = 2 * 0.75^2, dL/dH = H - 1.
  auto layer = GatedLinear::make("l", Matrix(1, 1, {2.0}), Vector{0.0});
  layer.gate_r.mu = {0.25};
  layer.gate_c.mu = {0.25};
  LinearCache cache;
  const Matrix h = gated_forward(layer, Matrix(1, 1, {1.0}), layer.realize_eval(), &cache);
  CHECK(h(0, 0) == doctest::Approx(1.125));
  const LinearGrads g = gated_backward(layer, cache, Matrix(1, 1, {h(0, 0) - 1.0}));
  CHECK(g.mu_r[0] == doctest::Approx(0.125 * 2.0 * 0.75).epsilon(1e-14));
  CHECK(g.mu_c[0] == doctest::Approx(0.125 * 2.0 * 0.75).epsilon(1e-14));
}

TEST_CASE("zero upstream gradient and clamped gates") {
  RngStream rng(4);
  auto layer = GatedLinear::make("l", random_matrix(rng, 3, 3), random_vector(rng, 3, -1, 1));
  layer.gate_r.mu = {0.9, -1.2, 0.0};
  layer.gate_c.mu = {0.0, 0.7, -0.8};
  LinearCache cache;
  const Matrix x = random_matrix(rng, 2, 3);
  gated_forward(layer, x, layer.realize_eval(), &cache);
  const LinearGrads zero = gated_backward(layer, cache, Matrix(2, 3));
  for (double v : zero.mu_r) CHECK(v == 0.0);
  for (double v : zero.mu_c) CHECK(v == 0.0);
  for (double v : zero.bias) CHECK(v == 0.0);
  for (double v : zero.dx.values()) CHECK(v == 0.0);

  const LinearGrads g = gated_backward(layer, cache, random_matrix(rng, 2, 3));
  CHECK(g.mu_r[0] == 0.0);
  CHECK(g.mu_r[1] == 0.0);
  CHECK(g.mu_r[2] != 0.0);
  CHECK(g.mu_c[1] == 0.0);
  CHECK(g.mu_c[2] == 0.0);
  CHECK(g.mu_c[0] != 0.0);
}

TEST_CASE("gate gradients equal the directly assembled products") {
  RngStream rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + rng.next_below(6), d = 1 + rng.next_below(6), n = 1 + rng.next_below(5);
    auto layer = GatedLinear::make("l", random_matrix(rng, k, d), Vector(k, 0.0));
    const Vector r = random_vector(rng, k, 0.1, 0.9), c = random_vector(rng, d, 0.1, 0.9);
    const Matrix x = random_matrix(rng, n, d), go = random_matrix(rng, n, k);
    LinearCache cache;
    gated_forward(layer, x, layer.realize_noise(Vector(k), Vector(d)), &cache);
    cache.gates.omega_r = r;
    cache.gates.omega_c = c;
    const LinearGrads g = gated_backward(layer, cache, go);
    // G = go^T x (k x d); d omega_r = (G . W) omega_c, d omega_c = (G . W)^T omega_r.
    for (std::size_t i = 0; i < k; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        double gij = 0.0;
        for (std::size_t b = 0; b < n; ++b) gij += go(b, i) * x(b, j);
        s += gij * layer.w0(i, j) * c[j];
      }
      CHECK(std::abs(g.omega_r[i] - s) <= 1e-12);
    }
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        double gij = 0.0;
        for (std::size_t b = 0; b < n; ++b) gij += go(b, i) * x(b, j);
        s += gij * layer.w0(i, j) * r[i];
      }
      CHECK(std::abs(g.omega_c[j] - s) <= 1e-12);
    }
  }
}

TEST_CASE("backward leaves W0 untouched and rejects a foreign cache") {
  RngStream rng(6);
  const auto layer = GatedLinear::make("l", random_matrix(rng, 3, 2), Vector(3, 0.1));
  const Matrix before = layer.w0;
  auto [h, cache] = gated_forward(layer, random_matrix(rng, 4, 2), EvalMode{});
  gated_backward(layer, cache, h);
  CHECK(layer.w0 == before);
  CHECK_THROWS_AS(gated_backward(layer, cache, Matrix(4, 5)), Error);
}

TEST_CASE("lora forward") {
  RngStream rng(7);
  const Matrix w0 = random_matrix(rng, 3, 2), x = random_matrix(rng, 4, 2);
  LoRALinear zero{w0, Matrix(3, 1), Matrix(2, 1)};
  CHECK(lora_forward(zero, x) == matmul_nt(x, w0));

  // Rank 2 = min(m, n): A = -W0, B = I gives A B^T = -W0.
  LoRALinear cancel{w0, Matrix(3, 2), Matrix(2, 2, {1.0, 0.0, 0.0, 1.0})};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) cancel.a(i, j) = -w0(i, j);
  const Matrix silent = lora_forward(cancel, x);
  for (double v : silent.values()) CHECK(v == 0.0);

  LoRALinear r{w0, random_matrix(rng, 3, 2), random_matrix(rng, 2, 2)};
  Matrix dense = w0;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t p = 0; p < 2; ++p) dense(i, j) += r.a(i, p) * r.b(j, p);
  const Matrix h = lora_forward(r, x);
  const Matrix ref = matmul_nt(x, dense);
  for (std::size_t i = 0; i < h.size(); ++i) CHECK(h.values()[i] == doctest::Approx(ref.values()[i]).epsilon(1e-14));
}

TEST_CASE("lora backward") {
  RngStream rng(8);
  const Matrix w0 = random_matrix(rng, 3, 4), x = random_matrix(rng, 5, 4), t = random_matrix(rng, 5, 3);
  LoRALinear origin{w0, Matrix(3, 2), Matrix(4, 2)};
  LoRACache c0;
  const Matrix h0 = lora_forward(origin, x, &c0);
  const LoRAGrads g0 = lora_backward(origin, c0, subtract(h0, t));
  for (double v : g0.a.values()) CHECK(v == 0.0);
  for (double v : g0.b.values()) CHECK(v == 0.0);

  LoRALinear l{w0, random_matrix(rng, 3, 2), random_matrix(rng, 4, 2)};
  LoRACache c;
  const Matrix h = lora_forward(l, x, &c);
  const LoRAGrads zero = lora_backward(l, c, Matrix(5, 3));
  for (double v : zero.a.values()) CHECK(v == 0.0);
  for (double v : zero.b.values()) CHECK(v == 0.0);

  const LoRAGrads g = lora_backward(l, c, subtract(h, t));
  auto fa = [&](const Vector& v) {
    LoRALinear p = l;
    p.a.values() = v;
    return half_sq(lora_forward(p, x), t);
  };
  auto fb = [&](const Vector& v) {
    LoRALinear p = l;
    p.b.values() = v;
    return half_sq(lora_forward(p, x), t);
  };
  CHECK(rel_err(g.a.values(), central_diff_grad(fa, l.a.values(), 1e-6)) < 1e-8);
  CHECK(rel_err(g.b.values(), central_diff_grad(fb, l.b.values(), 1e-6)) < 1e-8);
}
