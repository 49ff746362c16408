#pragma once

#include <optional>
#include <string>
#include <variant>

#include "finegates/gates.h"
#include "finegates/numerics.h"

namespace finegates::layers {

/// Trainable low-rank update A * B^T, A: out x r, B: in x r.
struct LowRank {
  Matrix a;
  Matrix b;
  std::size_t rank() const { return a.cols(); }
};

/// Realized gate values for one forward pass plus d(omega)/d(mu).
struct GateValues {
  Vector omega_r;
  Vector omega_c;
  Vector slope_r;
  Vector slope_c;
  Vector eps_r;
  Vector eps_c;
};

/// Frozen W0 with row/column gates, a gated bias and an optional low-rank term.
/// Forward: H = X [omega_r . W0 . omega_c + A B^T]^T + omega_r . b.
struct GatedLinear {
  std::string name;
  Matrix w0;
  Vector bias;
  gates::StochasticGateVector gate_r;
  gates::StochasticGateVector gate_c;
  /// When false the gates are fixed at one and receive no gradient.
  bool gated = true;
  bool train_bias = true;
  std::optional<LowRank> lowrank;

  std::size_t out_features() const { return w0.rows(); }
  std::size_t in_features() const { return w0.cols(); }

  static GatedLinear make(std::string name, Matrix w0, Vector bias, double sigma = gates::kDefaultSigma);

  GateValues realize_ones() const;
  GateValues realize_eval() const;
  GateValues realize_noise(const Vector& eps_r, const Vector& eps_c) const;
  GateValues realize_sampled(RngStream& rng) const;
  GateValues realize_binary(const Vector& mask_r, const Vector& mask_c) const;

  Matrix effective_weight(const GateValues& g) const;
};

struct TrainMode {
  RngStream* rng;
};
struct EvalMode {};
struct BinaryMode {
  Vector rows;
  Vector cols;
};
using ForwardMode = std::variant<TrainMode, EvalMode, BinaryMode>;

GateValues realize(const GatedLinear& layer, const ForwardMode& mode);

struct LinearCache {
  Matrix x;
  GateValues gates;
  std::size_t out_features = 0;
};

struct LinearGrads {
  Vector omega_r;
  Vector omega_c;
  Vector mu_r;
  Vector mu_c;
  Vector bias;
  Matrix a;
  Matrix b;
  Matrix dx;
};

Matrix gated_forward(const GatedLinear& layer, const Matrix& x, const GateValues& g, LinearCache* cache = nullptr);
std::pair<Matrix, LinearCache> gated_forward(const GatedLinear& layer, const Matrix& x, const ForwardMode& mode);

LinearGrads gated_backward(const GatedLinear& layer, const LinearCache& cache, const Matrix& g_out);

/// Plain dense layer X W^T + b (classifier head and reference paths).
Matrix linear_forward(const Matrix& w, const Vector& bias, const Matrix& x);

/// W0 + A B^T with W0 frozen.
struct LoRALinear {
  Matrix w0;
  Matrix a;
  Matrix b;

  Matrix effective_weight() const;
};

struct LoRACache {
  Matrix x;
};

struct LoRAGrads {
  Matrix a;
  Matrix b;
  Matrix dx;
};

Matrix lora_forward(const LoRALinear& layer, const Matrix& x, LoRACache* cache = nullptr);
LoRAGrads lora_backward(const LoRALinear& layer, const LoRACache& cache, const Matrix& g_out);

/// dA = G B, dB = G^T A for G = dLoss/dW (shared by LoRALinear and the
/// low-rank extension of GatedLinear).
std::pair<Matrix, Matrix> lowrank_grads(const Matrix& g, const Matrix& a, const Matrix& b);

}  // namespace finegates::layers
