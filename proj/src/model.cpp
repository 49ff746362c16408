#include "finegates/model.h"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace finegates::model {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr std::size_t kNoLinear = std::numeric_limits<std::size_t>::max();

const char* kBlockNames[GatedModel::kPerBlock] = {"q", "k", "v", "o", "mlp_i", "mlp_o"};

std::vector<std::size_t> parse_widths(const std::string& s) {
  std::vector<std::size_t> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const auto next = s.find(',', pos);
    const std::string item = s.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
    if (item.empty()) throw Error(ErrorKind::BadConfig, "empty entry in widths '" + s + "'");
    out.push_back(std::stoull(item));
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  return out;
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw Error(ErrorKind::BadConfig, "expected boolean, got '" + s + "'");
}

Matrix random_matrix(RngStream& rng, std::size_t rows, std::size_t cols, double std) {
  Matrix m(rows, cols);
  for (auto& v : m.values()) v = std * rng.next_normal();
  return m;
}

Vector random_vector(RngStream& rng, std::size_t n, double std) {
  Vector v(n);
  for (auto& x : v) x = std * rng.next_normal();
  return v;
}

bool is_mlp_projection(std::size_t index_in_block) { return index_in_block >= 4; }

void configure_linear(layers::GatedLinear& l, const ModelConfig& c, bool ffn_projection, RngStream& rng) {
  l.train_bias = c.train_bias;
  switch (c.method) {
    case Method::Gates:
      l.gated = !(ffn_projection && !c.gate_mlp);
      break;
    case Method::Lora:
    case Method::Ungated:
      l.gated = false;
      break;
  }
  const bool want_lowrank = c.method == Method::Lora || (c.method == Method::Gates && c.lowrank_rank > 0);
  if (want_lowrank) {
    // A starts at zero so A B^T = 0 at init; B is random so dA is nonzero.
    layers::LowRank lr;
    lr.a = Matrix(l.out_features(), c.lowrank_rank);
    lr.b = random_matrix(rng, l.in_features(), c.lowrank_rank, 1.0 / std::sqrt(static_cast<double>(l.in_features())));
    l.lowrank = std::move(lr);
  }
}

void layer_norm_forward(const Matrix& x, const LayerNorm& ln, Matrix& out, Matrix& xhat, Vector& rstd) {
  const std::size_t n = x.rows(), d = x.cols();
  out = Matrix(n, d);
  xhat = Matrix(n, d);
  rstd.assign(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += x(r, c);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat(r, c) = (x(r, c) - mean) * rstd[r];
      out(r, c) = ln.gamma[c] * xhat(r, c) + ln.beta[c];
    }
  }
}

Matrix layer_norm_backward(const Matrix& dy, const LayerNorm& ln, const Matrix& xhat, const Vector& rstd) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Matrix dx(n, d);
  Vector dxhat(d);
  for (std::size_t r = 0; r < n; ++r) {
    double mean_d = 0.0, mean_dx = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      dxhat[c] = dy(r, c) * ln.gamma[c];
      mean_d += dxhat[c];
      mean_dx += dxhat[c] * xhat(r, c);
    }
    mean_d /= static_cast<double>(d);
    mean_dx /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) dx(r, c) = rstd[r] * (dxhat[c] - mean_d - xhat(r, c) * mean_dx);
  }
  return dx;
}

Matrix gelu_matrix(const Matrix& z) {
  Matrix a(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.size(); ++i) a.values()[i] = gelu(z.values()[i]);
  return a;
}

void add_inplace(Matrix& a, const Matrix& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a.values()[i] += b.values()[i];
}

/// Scaled dot-product attention over every (sequence, head) pair.
Matrix attention_forward(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t batch, std::size_t seq,
                         std::size_t heads, std::vector<Matrix>* probs_out) {
  const std::size_t d = q.cols();
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix ctx(q.rows(), d);
  if (probs_out) probs_out->clear();
  Matrix p(seq, seq);
  for (std::size_t s = 0; s < batch; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < seq; ++i) {
        double hi = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) acc += q(s * seq + i, c0 + c) * k(s * seq + j, c0 + c);
          p(i, j) = acc * scale;
          hi = std::max(hi, p(i, j));
        }
        double total = 0.0;
        for (std::size_t j = 0; j < seq; ++j) {
          p(i, j) = std::exp(p(i, j) - hi);
          total += p(i, j);
        }
        for (std::size_t j = 0; j < seq; ++j) p(i, j) /= total;
        for (std::size_t j = 0; j < seq; ++j) {
          const double w = p(i, j);
          for (std::size_t c = 0; c < dh; ++c) ctx(s * seq + i, c0 + c) += w * v(s * seq + j, c0 + c);
        }
      }
      if (probs_out) probs_out->push_back(p);
    }
  }
  return ctx;
}

void attention_backward(const Matrix& dctx, const Matrix& q, const Matrix& k, const Matrix& v,
                        const std::vector<Matrix>& probs, std::size_t batch, std::size_t seq, std::size_t heads,
                        Matrix& dq, Matrix& dk, Matrix& dv) {
  const std::size_t d = q.cols();
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  dq = Matrix(q.rows(), d);
  dk = Matrix(k.rows(), d);
  dv = Matrix(v.rows(), d);
  Matrix dp(seq, seq);
  for (std::size_t s = 0; s < batch; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      const Matrix& p = probs[s * heads + h];
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < seq; ++i) {
        for (std::size_t j = 0; j < seq; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) acc += dctx(s * seq + i, c0 + c) * v(s * seq + j, c0 + c);
          dp(i, j) = acc;
          for (std::size_t c = 0; c < dh; ++c) dv(s * seq + j, c0 + c) += p(i, j) * dctx(s * seq + i, c0 + c);
        }
      }
      for (std::size_t i = 0; i < seq; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < seq; ++j) row += dp(i, j) * p(i, j);
        for (std::size_t j = 0; j < seq; ++j) {
          const double ds = p(i, j) * (dp(i, j) - row) * scale;
          if (ds == 0.0) continue;
          for (std::size_t c = 0; c < dh; ++c) {
            dq(s * seq + i, c0 + c) += ds * k(s * seq + j, c0 + c);
            dk(s * seq + j, c0 + c) += ds * q(s * seq + i, c0 + c);
          }
        }
      }
    }
  }
}

}  // namespace

std::string to_string(ArchKind a) { return a == ArchKind::Mlp ? "mlp" : "transformer"; }
std::string to_string(TaskKind t) { return t == TaskKind::Classification ? "classification" : "regression"; }
std::string to_string(Method m) {
  switch (m) {
    case Method::Gates: return "gates";
    case Method::Lora: return "lora";
    case Method::Ungated: return "ungated";
  }
  return "gates";
}

ArchKind parse_arch(const std::string& s) {
  if (s == "mlp") return ArchKind::Mlp;
  if (s == "transformer") return ArchKind::Transformer;
  throw Error(ErrorKind::BadConfig, "unknown arch '" + s + "'");
}

TaskKind parse_task(const std::string& s) {
  if (s == "classification") return TaskKind::Classification;
  if (s == "regression") return TaskKind::Regression;
  throw Error(ErrorKind::BadConfig, "unknown task '" + s + "'");
}

Method parse_method(const std::string& s) {
  if (s == "gates") return Method::Gates;
  if (s == "lora") return Method::Lora;
  if (s == "ungated") return Method::Ungated;
  throw Error(ErrorKind::BadConfig, "unknown method '" + s + "'");
}

void ModelConfig::validate() const {
  if (num_outputs < 1) throw Error(ErrorKind::BadConfig, "num_outputs must be >= 1");
  if (!(sigma > 0.0)) throw Error(ErrorKind::BadConfig, "sigma must be positive");
  if (method == Method::Lora && lowrank_rank < 1) throw Error(ErrorKind::BadConfig, "lora needs lowrank_rank >= 1");
  if (arch == ArchKind::Mlp) {
    if (widths.size() < 2) throw Error(ErrorKind::BadConfig, "mlp widths need an input and at least one layer");
    for (auto w : widths) {
      if (w < 1) throw Error(ErrorKind::BadConfig, "mlp widths must be >= 1");
    }
  } else {
    if (d_model < 1 || n_heads < 1 || d_ff < 1 || n_blocks < 1 || seq_len < 1 || vocab < 1) {
      throw Error(ErrorKind::BadConfig, "transformer dimensions must be >= 1");
    }
    if (d_model % n_heads != 0) throw Error(ErrorKind::BadConfig, "d_model must be divisible by n_heads");
    if (n_blocks > 2) throw Error(ErrorKind::BadConfig, "at most 2 transformer blocks are supported");
  }
}

std::map<std::string, std::string> ModelConfig::to_map() const {
  std::map<std::string, std::string> m;
  m["arch"] = to_string(arch);
  m["widths"] = fmt::format("{}", fmt::join(widths, ","));
  m["d_model"] = std::to_string(d_model);
  m["n_heads"] = std::to_string(n_heads);
  m["d_ff"] = std::to_string(d_ff);
  m["n_blocks"] = std::to_string(n_blocks);
  m["seq_len"] = std::to_string(seq_len);
  m["vocab"] = std::to_string(vocab);
  m["num_outputs"] = std::to_string(num_outputs);
  m["task"] = to_string(task);
  m["method"] = to_string(method);
  m["gate_mlp"] = gate_mlp ? "true" : "false";
  m["lowrank_rank"] = std::to_string(lowrank_rank);
  m["sigma"] = fmt::format("{}", sigma);
  m["train_bias"] = train_bias ? "true" : "false";
  m["seed"] = std::to_string(seed);
  return m;
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& m) {
  ModelConfig c;
  auto get = [&](const char* key) -> const std::string& {
    auto it = m.find(key);
    if (it == m.end()) throw Error(ErrorKind::BadConfig, std::string("missing model key '") + key + "'");
    return it->second;
  };
  c.arch = parse_arch(get("arch"));
  c.widths = parse_widths(get("widths"));
  c.d_model = std::stoull(get("d_model"));
  c.n_heads = std::stoull(get("n_heads"));
  c.d_ff = std::stoull(get("d_ff"));
  c.n_blocks = std::stoull(get("n_blocks"));
  c.seq_len = std::stoull(get("seq_len"));
  c.vocab = std::stoull(get("vocab"));
  c.num_outputs = std::stoull(get("num_outputs"));
  c.task = parse_task(get("task"));
  c.method = parse_method(get("method"));
  c.gate_mlp = parse_bool(get("gate_mlp"));
  c.lowrank_rank = std::stoull(get("lowrank_rank"));
  c.sigma = std::stod(get("sigma"));
  c.train_bias = parse_bool(get("train_bias"));
  c.seed = std::stoull(get("seed"));
  return c;
}

std::size_t GatedModel::num_gated() const {
  return static_cast<std::size_t>(std::count_if(linears.begin(), linears.end(), [](const auto& l) { return l.gated; }));
}

std::size_t GatedModel::frozen_parameter_count() const {
  std::size_t n = token_embedding.size() + position_embedding.size();
  for (const auto& l : linears) n += l.w0.size();
  for (const auto& ln : norms) n += ln.gamma.size() + ln.beta.size();
  for (const auto& l : linears) {
    if (!l.train_bias) n += l.bias.size();
  }
  return n;
}

std::size_t GatedModel::trainable_parameter_count() const {
  std::size_t n = head.w.size() + head.b.size();
  for (const auto& l : linears) {
    if (l.gated) n += l.gate_r.size() + l.gate_c.size();
    if (l.train_bias) n += l.bias.size();
    if (l.lowrank) n += l.lowrank->a.size() + l.lowrank->b.size();
  }
  return n;
}

GatedModel build_model(const ModelConfig& config) {
  config.validate();
  GatedModel m;
  m.config = config;
  RngStream rng(config.seed);
  RngStream lowrank_rng = rng.fork(7);
  auto he = [](std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };
  if (config.arch == ArchKind::Mlp) {
    for (std::size_t i = 0; i + 1 < config.widths.size(); ++i) {
      const std::size_t in = config.widths[i], out = config.widths[i + 1];
      auto l = layers::GatedLinear::make(fmt::format("mlp.{}", i), random_matrix(rng, out, in, he(in)),
                                         random_vector(rng, out, 0.1), config.sigma);
      configure_linear(l, config, false, lowrank_rng);
      m.linears.push_back(std::move(l));
    }
  } else {
    const std::size_t d = config.d_model, ff = config.d_ff;
    m.token_embedding = random_matrix(rng, config.vocab, d, 1.0);
    m.position_embedding = random_matrix(rng, config.seq_len, d, 0.5);
    for (std::size_t b = 0; b < config.n_blocks; ++b) {
      for (std::size_t p = 0; p < GatedModel::kPerBlock; ++p) {
        const std::size_t out = p == 4 ? ff : d;
        const std::size_t in = p == 5 ? ff : d;
        auto l = layers::GatedLinear::make(fmt::format("block{}.{}", b, kBlockNames[p]), random_matrix(rng, out, in, he(in)),
                                           random_vector(rng, out, 0.1), config.sigma);
        configure_linear(l, config, is_mlp_projection(p), lowrank_rng);
        m.linears.push_back(std::move(l));
      }
    }
    for (std::size_t i = 0; i < 2 * config.n_blocks + 1; ++i) m.norms.push_back({Vector(d, 1.0), Vector(d, 0.0)});
  }
  const std::size_t feat = config.arch == ArchKind::Mlp ? config.widths.back() : config.d_model;
  m.head.w = random_matrix(rng, config.num_outputs, feat, 1.0 / std::sqrt(static_cast<double>(feat)));
  m.head.b = Vector(config.num_outputs, 0.0);
  return m;
}

GatedModel build_model(const ModelConfig& config, const FrozenMlpWeights& frozen) {
  if (config.arch != ArchKind::Mlp) throw Error(ErrorKind::BadConfig, "frozen MLP weights need an mlp arch");
  GatedModel m = build_model(config);
  if (frozen.weights.size() != m.linears.size() || frozen.biases.size() != m.linears.size()) {
    throw Error(ErrorKind::ShapeMismatch, "frozen weight count differs from layer count");
  }
  for (std::size_t i = 0; i < m.linears.size(); ++i) {
    auto& l = m.linears[i];
    if (frozen.weights[i].rows() != l.w0.rows() || frozen.weights[i].cols() != l.w0.cols() ||
        frozen.biases[i].size() != l.bias.size()) {
      throw Error(ErrorKind::ShapeMismatch, l.name + ": frozen tensor shape differs");
    }
    l.w0 = frozen.weights[i];
    l.bias = frozen.biases[i];
  }
  if (frozen.head.w.rows() != m.head.w.rows() || frozen.head.w.cols() != m.head.w.cols()) {
    throw Error(ErrorKind::ShapeMismatch, "frozen head shape differs");
  }
  m.head = frozen.head;
  return m;
}

GatedModel with_method(const GatedModel& base, Method method, std::size_t rank, std::uint64_t seed) {
  ModelConfig cfg = base.config;
  cfg.method = method;
  cfg.lowrank_rank = method == Method::Ungated ? 0 : rank;
  cfg.seed = seed;
  GatedModel m = build_model(cfg);
  for (std::size_t i = 0; i < m.linears.size(); ++i) {
    m.linears[i].w0 = base.linears[i].w0;
    m.linears[i].bias = base.linears[i].bias;
  }
  m.token_embedding = base.token_embedding;
  m.position_embedding = base.position_embedding;
  m.norms = base.norms;
  m.head = base.head;
  return m;
}

std::size_t Batch::size() const { return x.rows() > 0 ? x.rows() : labels.size() > 0 ? labels.size() : targets.rows(); }

GateSet realize_train(const GatedModel& m, RngStream& rng) {
  GateSet out;
  out.reserve(m.linears.size());
  for (const auto& l : m.linears) out.push_back(l.realize_sampled(rng));
  return out;
}

GateSet realize_eval(const GatedModel& m) {
  GateSet out;
  for (const auto& l : m.linears) out.push_back(l.gated ? l.realize_eval() : l.realize_ones());
  return out;
}

GateSet realize_binary(const GatedModel& m, const MaskSet& masks) {
  if (masks.size() != m.linears.size()) throw Error(ErrorKind::ShapeMismatch, "mask count differs from layer count");
  GateSet out;
  for (std::size_t i = 0; i < m.linears.size(); ++i) out.push_back(m.linears[i].realize_binary(masks[i].rows, masks[i].cols));
  return out;
}

GateSet realize_noise(const GatedModel& m, const GateSet& noise) {
  if (noise.size() != m.linears.size()) throw Error(ErrorKind::ShapeMismatch, "noise count differs from layer count");
  GateSet out;
  for (std::size_t i = 0; i < m.linears.size(); ++i) out.push_back(m.linears[i].realize_noise(noise[i].eps_r, noise[i].eps_c));
  return out;
}

Matrix forward(const GatedModel& m, const Batch& batch, const GateSet& gates, Tape* tape) {
  if (gates.size() != m.linears.size()) throw Error(ErrorKind::ShapeMismatch, "gate set size differs from layer count");
  Tape local;
  Tape& t = tape ? *tape : local;
  t = Tape{};
  t.linear.resize(m.linears.size());
  const auto& c = m.config;

  if (c.arch == ArchKind::Mlp) {
    if (batch.x.cols() != c.widths.front()) {
      throw Error(ErrorKind::ShapeMismatch,
                  fmt::format("batch has {} features, model expects {}", batch.x.cols(), c.widths.front()));
    }
    t.batch = batch.x.rows();
    Matrix x = batch.x;
    for (std::size_t i = 0; i < m.linears.size(); ++i) {
      Matrix z = layers::gated_forward(m.linears[i], x, gates[i], &t.linear[i]);
      x = gelu_matrix(z);
      t.mlp_pre.push_back(std::move(z));
    }
    t.features = std::move(x);
  } else {
    const std::size_t seq = c.seq_len, d = c.d_model;
    if (batch.tokens.empty() || batch.tokens.size() % seq != 0) {
      throw Error(ErrorKind::ShapeMismatch, fmt::format("token batch is not a multiple of seq_len {}", seq));
    }
    const std::size_t nb = batch.tokens.size() / seq;
    t.batch = nb;
    Matrix x(nb * seq, d);
    for (std::size_t r = 0; r < nb * seq; ++r) {
      const auto tok = batch.tokens[r];
      if (tok < 0 || static_cast<std::size_t>(tok) >= c.vocab) {
        throw Error(ErrorKind::ShapeMismatch, fmt::format("token id {} outside vocab {}", tok, c.vocab));
      }
      for (std::size_t j = 0; j < d; ++j) x(r, j) = m.token_embedding(tok, j) + m.position_embedding(r % seq, j);
    }
    for (std::size_t b = 0; b < c.n_blocks; ++b) {
      BlockTape bt;
      const std::size_t base = b * GatedModel::kPerBlock;
      bt.x_in = x;
      Matrix h1;
      layer_norm_forward(x, m.norms[2 * b], h1, bt.xhat1, bt.rstd1);
      bt.q = layers::gated_forward(m.linears[base + 0], h1, gates[base + 0], &t.linear[base + 0]);
      bt.k = layers::gated_forward(m.linears[base + 1], h1, gates[base + 1], &t.linear[base + 1]);
      bt.v = layers::gated_forward(m.linears[base + 2], h1, gates[base + 2], &t.linear[base + 2]);
      bt.ctx = attention_forward(bt.q, bt.k, bt.v, nb, seq, c.n_heads, &bt.probs);
      add_inplace(x, layers::gated_forward(m.linears[base + 3], bt.ctx, gates[base + 3], &t.linear[base + 3]));
      bt.x_mid = x;
      Matrix h2;
      layer_norm_forward(x, m.norms[2 * b + 1], h2, bt.xhat2, bt.rstd2);
      bt.u = layers::gated_forward(m.linears[base + 4], h2, gates[base + 4], &t.linear[base + 4]);
      bt.a = gelu_matrix(bt.u);
      add_inplace(x, layers::gated_forward(m.linears[base + 5], bt.a, gates[base + 5], &t.linear[base + 5]));
      t.blocks.push_back(std::move(bt));
    }
    Matrix xf;
    layer_norm_forward(x, m.norms.back(), xf, t.xhat_final, t.rstd_final);
    t.features = Matrix(nb, d);
    const double inv = 1.0 / static_cast<double>(seq);
    for (std::size_t s = 0; s < nb; ++s) {
      for (std::size_t p = 0; p < seq; ++p) {
        for (std::size_t j = 0; j < d; ++j) t.features(s, j) += xf(s * seq + p, j) * inv;
      }
    }
  }
  t.logits = layers::linear_forward(m.head.w, m.head.b, t.features);
  return t.logits;
}

Matrix model_forward(const GatedModel& m, const Batch& batch, Mode mode, RngStream* rng, const MaskSet* masks) {
  switch (mode) {
    case Mode::Train:
      if (!rng) throw Error(ErrorKind::BadConfig, "train mode needs an rng");
      return forward(m, batch, realize_train(m, *rng));
    case Mode::Binary:
      if (!masks) throw Error(ErrorKind::BadConfig, "binary mode needs masks");
      return forward(m, batch, realize_binary(m, *masks));
    case Mode::Eval:
      break;
  }
  return forward(m, batch, realize_eval(m));
}

ParamGrads backward(const GatedModel& m, const Tape& tape, const Matrix& dlogits) {
  const auto& c = m.config;
  if (dlogits.rows() != tape.features.rows() || dlogits.cols() != m.head.w.rows()) {
    throw Error(ErrorKind::CacheMismatch, "upstream gradient does not match the recorded forward");
  }
  ParamGrads g;
  g.linear.resize(m.linears.size());
  g.head_w = matmul_tn(dlogits, tape.features);
  g.head_b.assign(m.head.b.size(), 0.0);
  for (std::size_t r = 0; r < dlogits.rows(); ++r) {
    for (std::size_t i = 0; i < dlogits.cols(); ++i) g.head_b[i] += dlogits(r, i);
  }
  Matrix dfeat = matmul(dlogits, m.head.w);

  if (c.arch == ArchKind::Mlp) {
    Matrix dx = std::move(dfeat);
    for (std::size_t i = m.linears.size(); i-- > 0;) {
      const Matrix& z = tape.mlp_pre[i];
      for (std::size_t e = 0; e < dx.size(); ++e) dx.values()[e] *= gelu_grad(z.values()[e]);
      g.linear[i] = layers::gated_backward(m.linears[i], tape.linear[i], dx);
      dx = g.linear[i].dx;
    }
    return g;
  }

  const std::size_t seq = c.seq_len, d = c.d_model, nb = tape.batch;
  Matrix dxf(nb * seq, d);
  const double inv = 1.0 / static_cast<double>(seq);
  for (std::size_t s = 0; s < nb; ++s) {
    for (std::size_t p = 0; p < seq; ++p) {
      for (std::size_t j = 0; j < d; ++j) dxf(s * seq + p, j) = dfeat(s, j) * inv;
    }
  }
  Matrix dx = layer_norm_backward(dxf, m.norms.back(), tape.xhat_final, tape.rstd_final);
  for (std::size_t b = c.n_blocks; b-- > 0;) {
    const BlockTape& bt = tape.blocks[b];
    const std::size_t base = b * GatedModel::kPerBlock;
    // FFN branch.
    g.linear[base + 5] = layers::gated_backward(m.linears[base + 5], tape.linear[base + 5], dx);
    Matrix du = g.linear[base + 5].dx;
    for (std::size_t e = 0; e < du.size(); ++e) du.values()[e] *= gelu_grad(bt.u.values()[e]);
    g.linear[base + 4] = layers::gated_backward(m.linears[base + 4], tape.linear[base + 4], du);
    add_inplace(dx, layer_norm_backward(g.linear[base + 4].dx, m.norms[2 * b + 1], bt.xhat2, bt.rstd2));
    // Attention branch.
    g.linear[base + 3] = layers::gated_backward(m.linears[base + 3], tape.linear[base + 3], dx);
    Matrix dq, dk, dv;
    attention_backward(g.linear[base + 3].dx, bt.q, bt.k, bt.v, bt.probs, nb, seq, c.n_heads, dq, dk, dv);
    g.linear[base + 0] = layers::gated_backward(m.linears[base + 0], tape.linear[base + 0], dq);
    g.linear[base + 1] = layers::gated_backward(m.linears[base + 1], tape.linear[base + 1], dk);
    g.linear[base + 2] = layers::gated_backward(m.linears[base + 2], tape.linear[base + 2], dv);
    Matrix dh1 = g.linear[base + 0].dx;
    add_inplace(dh1, g.linear[base + 1].dx);
    add_inplace(dh1, g.linear[base + 2].dx);
    add_inplace(dx, layer_norm_backward(dh1, m.norms[2 * b], bt.xhat1, bt.rstd1));
  }
  return g;
}

std::vector<ParamRef> trainable_parameters(GatedModel& m) {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < m.linears.size(); ++i) {
    auto& l = m.linears[i];
    if (l.gated) {
      out.push_back({l.name + ".mu_r", l.gate_r.mu, ParamGroup::Gates, i});
      out.push_back({l.name + ".mu_c", l.gate_c.mu, ParamGroup::Gates, i});
    }
    if (l.train_bias) out.push_back({l.name + ".bias", l.bias, ParamGroup::BiasHead, i});
    if (l.lowrank) {
      out.push_back({l.name + ".lowrank_a", l.lowrank->a.values(), ParamGroup::LowRank, i});
      out.push_back({l.name + ".lowrank_b", l.lowrank->b.values(), ParamGroup::LowRank, i});
    }
  }
  out.push_back({"head.w", m.head.w.values(), ParamGroup::BiasHead, kNoLinear});
  out.push_back({"head.b", m.head.b, ParamGroup::BiasHead, kNoLinear});
  return out;
}

std::vector<Vector> flatten_grads(const GatedModel& m, const ParamGrads& g) {
  std::vector<Vector> out;
  for (std::size_t i = 0; i < m.linears.size(); ++i) {
    const auto& l = m.linears[i];
    const auto& lg = g.linear[i];
    if (l.gated) {
      out.push_back(lg.mu_r);
      out.push_back(lg.mu_c);
    }
    if (l.train_bias) out.push_back(lg.bias);
    if (l.lowrank) {
      out.push_back(lg.a.values());
      out.push_back(lg.b.values());
    }
  }
  out.push_back(g.head_w.values());
  out.push_back(g.head_b);
  return out;
}

std::uint64_t frozen_hash(const GatedModel& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](std::span<const double> values) {
    for (double v : values) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
      }
    }
  };
  for (const auto& l : m.linears) feed(l.w0.values());
  feed(m.token_embedding.values());
  feed(m.position_embedding.values());
  for (const auto& ln : m.norms) {
    feed(ln.gamma);
    feed(ln.beta);
  }
  return h;
}

}  // namespace finegates::model
