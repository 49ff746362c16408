#include "finegates/layers.h"

namespace finegates::layers {

GatedLinear GatedLinear::make(std::string name, Matrix w0, Vector bias, double sigma) {
  if (bias.size() != w0.rows()) throw Error(ErrorKind::ShapeMismatch, "bias length differs from output width");
  GatedLinear l;
  l.name = std::move(name);
  l.gate_r = gates::StochasticGateVector::initial(w0.rows(), gates::Axis::Row, sigma);
  l.gate_c = gates::StochasticGateVector::initial(w0.cols(), gates::Axis::Column, sigma);
  l.w0 = std::move(w0);
  l.bias = std::move(bias);
  return l;
}

GateValues GatedLinear::realize_ones() const {
  GateValues g;
  g.omega_r.assign(out_features(), 1.0);
  g.omega_c.assign(in_features(), 1.0);
  g.slope_r.assign(out_features(), 0.0);
  g.slope_c.assign(in_features(), 0.0);
  g.eps_r.assign(out_features(), 0.0);
  g.eps_c.assign(in_features(), 0.0);
  return g;
}

GateValues GatedLinear::realize_noise(const Vector& eps_r, const Vector& eps_c) const {
  if (!gated) return realize_ones();
  if (eps_r.size() != out_features() || eps_c.size() != in_features()) {
    throw Error(ErrorKind::ShapeMismatch, name + ": noise shape differs from gate shape");
  }
  GateValues g;
  g.eps_r = eps_r;
  g.eps_c = eps_c;
  g.omega_r.resize(out_features());
  g.slope_r.resize(out_features());
  for (std::size_t i = 0; i < out_features(); ++i) {
    const double pre = gates::pre_clamp(gate_r.mu[i], eps_r[i]);
    g.omega_r[i] = gates::clamp01(pre);
    g.slope_r[i] = gates::clamp_indicator(pre);
  }
  g.omega_c.resize(in_features());
  g.slope_c.resize(in_features());
  for (std::size_t j = 0; j < in_features(); ++j) {
    const double pre = gates::pre_clamp(gate_c.mu[j], eps_c[j]);
    g.omega_c[j] = gates::clamp01(pre);
    g.slope_c[j] = gates::clamp_indicator(pre);
  }
  return g;
}

GateValues GatedLinear::realize_eval() const {
  return realize_noise(Vector(out_features(), 0.0), Vector(in_features(), 0.0));
}

GateValues GatedLinear::realize_sampled(RngStream& rng) const {
  if (!gated) return realize_ones();
  // Rows first, then columns; one fresh draw per gate vector per pass.
  Vector eps_r = gauss_sample(rng, out_features(), gate_r.sigma);
  Vector eps_c = gauss_sample(rng, in_features(), gate_c.sigma);
  return realize_noise(eps_r, eps_c);
}

GateValues GatedLinear::realize_binary(const Vector& mask_r, const Vector& mask_c) const {
  if (mask_r.size() != out_features() || mask_c.size() != in_features()) {
    throw Error(ErrorKind::ShapeMismatch, name + ": mask shape differs from gate shape");
  }
  GateValues g = realize_ones();
  g.omega_r = mask_r;
  g.omega_c = mask_c;
  return g;
}

Matrix GatedLinear::effective_weight(const GateValues& g) const {
  Matrix w(out_features(), in_features());
  for (std::size_t i = 0; i < out_features(); ++i) {
    for (std::size_t j = 0; j < in_features(); ++j) w(i, j) = g.omega_r[i] * w0(i, j) * g.omega_c[j];
  }
  if (lowrank) w = add(w, matmul_nt(lowrank->a, lowrank->b));
  return w;
}

GateValues realize(const GatedLinear& layer, const ForwardMode& mode) {
  if (const auto* t = std::get_if<TrainMode>(&mode)) return layer.realize_sampled(*t->rng);
  if (const auto* b = std::get_if<BinaryMode>(&mode)) return layer.realize_binary(b->rows, b->cols);
  return layer.gated ? layer.realize_eval() : layer.realize_ones();
}

Matrix linear_forward(const Matrix& w, const Vector& bias, const Matrix& x) {
  if (x.cols() != w.cols()) throw Error(ErrorKind::ShapeMismatch, "linear: input width differs from weight columns");
  Matrix h = matmul_nt(x, w);
  for (std::size_t r = 0; r < h.rows(); ++r) {
    for (std::size_t i = 0; i < h.cols(); ++i) h(r, i) += bias[i];
  }
  return h;
}

Matrix gated_forward(const GatedLinear& layer, const Matrix& x, const GateValues& g, LinearCache* cache) {
  if (x.cols() != layer.in_features()) {
    throw Error(ErrorKind::ShapeMismatch,
                layer.name + ": input has " + std::to_string(x.cols()) + " columns, expected " +
                    std::to_string(layer.in_features()));
  }
  Vector gated_bias(layer.out_features());
  for (std::size_t i = 0; i < gated_bias.size(); ++i) gated_bias[i] = g.omega_r[i] * layer.bias[i];
  Matrix h = linear_forward(layer.effective_weight(g), gated_bias, x);
  if (cache) {
    cache->x = x;
    cache->gates = g;
    cache->out_features = layer.out_features();
  }
  return h;
}

std::pair<Matrix, LinearCache> gated_forward(const GatedLinear& layer, const Matrix& x, const ForwardMode& mode) {
  LinearCache cache;
  Matrix h = gated_forward(layer, x, realize(layer, mode), &cache);
  return {std::move(h), std::move(cache)};
}

std::pair<Matrix, Matrix> lowrank_grads(const Matrix& g, const Matrix& a, const Matrix& b) {
  return {matmul(g, b), matmul_tn(g, a)};
}

LinearGrads gated_backward(const GatedLinear& layer, const LinearCache& cache, const Matrix& g_out) {
  const std::size_t k = layer.out_features();
  const std::size_t d = layer.in_features();
  if (cache.out_features != k || cache.x.cols() != d || g_out.rows() != cache.x.rows() || g_out.cols() != k ||
      cache.gates.omega_r.size() != k || cache.gates.omega_c.size() != d) {
    throw Error(ErrorKind::CacheMismatch, layer.name + ": cache does not match layer or upstream gradient");
  }
  const GateValues& gv = cache.gates;
  const Matrix g = matmul_tn(g_out, cache.x);  // dLoss/dW_eff, k x d

  Vector out_sum(k, 0.0);
  for (std::size_t r = 0; r < g_out.rows(); ++r) {
    for (std::size_t i = 0; i < k; ++i) out_sum[i] += g_out(r, i);
  }

  LinearGrads grads;
  grads.omega_r.assign(k, 0.0);
  grads.omega_c.assign(d, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double gw = g(i, j) * layer.w0(i, j);
      acc += gw * gv.omega_c[j];
      grads.omega_c[j] += gw * gv.omega_r[i];
    }
    grads.omega_r[i] = acc + out_sum[i] * layer.bias[i];
  }
  grads.mu_r.resize(k);
  grads.mu_c.resize(d);
  for (std::size_t i = 0; i < k; ++i) grads.mu_r[i] = layer.gated ? grads.omega_r[i] * gv.slope_r[i] : 0.0;
  for (std::size_t j = 0; j < d; ++j) grads.mu_c[j] = layer.gated ? grads.omega_c[j] * gv.slope_c[j] : 0.0;

  grads.bias.assign(k, 0.0);
  if (layer.train_bias) {
    for (std::size_t i = 0; i < k; ++i) grads.bias[i] = gv.omega_r[i] * out_sum[i];
  }
  if (layer.lowrank) std::tie(grads.a, grads.b) = lowrank_grads(g, layer.lowrank->a, layer.lowrank->b);
  grads.dx = matmul(g_out, layer.effective_weight(gv));
  return grads;
}

Matrix LoRALinear::effective_weight() const { return add(w0, matmul_nt(a, b)); }

Matrix lora_forward(const LoRALinear& layer, const Matrix& x, LoRACache* cache) {
  if (layer.a.rows() != layer.w0.rows() || layer.b.rows() != layer.w0.cols() || layer.a.cols() != layer.b.cols() ||
      x.cols() != layer.w0.cols()) {
    throw Error(ErrorKind::ShapeMismatch, "lora_forward: inconsistent shapes");
  }
  if (cache) cache->x = x;
  return matmul_nt(x, layer.effective_weight());
}

LoRAGrads lora_backward(const LoRALinear& layer, const LoRACache& cache, const Matrix& g_out) {
  if (cache.x.cols() != layer.w0.cols() || g_out.rows() != cache.x.rows() || g_out.cols() != layer.w0.rows()) {
    throw Error(ErrorKind::CacheMismatch, "lora_backward: cache does not match layer or upstream gradient");
  }
  const Matrix g = matmul_tn(g_out, cache.x);
  LoRAGrads grads;
  std::tie(grads.a, grads.b) = lowrank_grads(g, layer.a, layer.b);
  grads.dx = matmul(g_out, layer.effective_weight());
  return grads;
}

}  // namespace finegates::layers
