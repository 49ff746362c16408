#include "finegates/compact.h"

#include <fmt/format.h>

#include <cmath>
#include <limits>
#include <numeric>

namespace finegates::compact {

using model::ArchKind;
using model::GatedModel;
using model::MaskSet;

std::string to_string(Policy p) { return p == Policy::Tau ? "tau" : "support"; }

Policy parse_policy(const std::string& s) {
  if (s == "tau") return Policy::Tau;
  if (s == "support") return Policy::Support;
  throw Error(ErrorKind::BadConfig, "unknown compaction policy '" + s + "'");
}

Binarization binarize(const GatedModel& m, Policy policy, double tau) {
  Binarization b;
  auto mask_of = [&](const gates::StochasticGateVector& g, bool gated) {
    Vector mask(g.size(), 1.0);
    if (!gated) return mask;
    const Vector omega = gates::deterministic_gates(g);
    for (std::size_t j = 0; j < omega.size(); ++j) {
      mask[j] = policy == Policy::Tau ? (omega[j] > tau ? 1.0 : 0.0) : (omega[j] > 0.0 ? 1.0 : 0.0);
      if (omega[j] > 0.05 && omega[j] < 0.95) ++b.ambiguity_mass;
    }
    return mask;
  };
  for (const auto& l : m.linears) b.masks.push_back({mask_of(l.gate_r, l.gated), mask_of(l.gate_c, l.gated)});
  return b;
}

namespace {

using Index = std::vector<std::size_t>;

template <typename T>
T gelu_t(T x) {
  return static_cast<T>(gelu(static_cast<double>(x)));
}

template <typename T>
BasicMatrix<T> gather_cols(const BasicMatrix<T>& x, const Index& idx) {
  BasicMatrix<T> out(x.rows(), idx.size());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T* src = x.data() + r * x.cols();
    T* dst = out.data() + r * idx.size();
    for (std::size_t j = 0; j < idx.size(); ++j) dst[j] = src[idx[j]];
  }
  return out;
}

template <typename T>
void scatter_add(BasicMatrix<T>& x, const BasicMatrix<T>& y, const Index& idx) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    T* dst = x.data() + r * x.cols();
    const T* src = y.data() + r * idx.size();
    for (std::size_t j = 0; j < idx.size(); ++j) dst[idx[j]] += src[j];
  }
}

template <typename T>
BasicMatrix<T> apply(const CompactLayer<T>& l, const BasicMatrix<T>& full_input) {
  if (l.in_index.size() == l.in_full) return l.forward(full_input);
  return l.forward(gather_cols(full_input, l.in_index));
}

template <typename T>
BasicMatrix<T> layer_norm(const BasicMatrix<T>& x, const std::vector<T>& gamma, const std::vector<T>& beta) {
  const std::size_t d = x.cols();
  BasicMatrix<T> out(x.rows(), d);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T* xr = x.data() + r * d;
    T mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<T>(d);
    const T rstd = T{1} / std::sqrt(var + static_cast<T>(1e-5));
    T* o = out.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) o[c] = gamma[c] * ((xr[c] - mean) * rstd) + beta[c];
  }
  return out;
}

template <typename T>
BasicMatrix<T> attention(const BasicMatrix<T>& q, const BasicMatrix<T>& k, const BasicMatrix<T>& v, const HeadLayout& hl,
                         std::size_t batch, std::size_t seq, T scale) {
  const std::size_t heads = hl.qk_offsets.size() - 1;
  BasicMatrix<T> ctx(q.rows(), v.cols());
  std::vector<T> p(seq);
  for (std::size_t s = 0; s < batch; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t q0 = hl.qk_offsets[h], q1 = hl.qk_offsets[h + 1];
      const std::size_t v0 = hl.vo_offsets[h], v1 = hl.vo_offsets[h + 1];
      for (std::size_t i = 0; i < seq; ++i) {
        T hi = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          T acc = 0;
          for (std::size_t c = q0; c < q1; ++c) acc += q(s * seq + i, c) * k(s * seq + j, c);
          p[j] = acc * scale;
          hi = std::max(hi, p[j]);
        }
        T total = 0;
        for (std::size_t j = 0; j < seq; ++j) {
          p[j] = std::exp(p[j] - hi);
          total += p[j];
        }
        for (std::size_t j = 0; j < seq; ++j) p[j] /= total;
        for (std::size_t j = 0; j < seq; ++j) {
          for (std::size_t c = v0; c < v1; ++c) ctx(s * seq + i, c) += p[j] * v(s * seq + j, c);
        }
      }
    }
  }
  return ctx;
}

Index iota_index(std::size_t n) {
  Index idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

Index select(std::size_t n, const std::function<bool(std::size_t)>& keep) {
  Index idx;
  for (std::size_t j = 0; j < n; ++j) {
    if (keep(j)) idx.push_back(j);
  }
  return idx;
}

bool row_is_zero(const Matrix& m, std::size_t r) {
  for (double v : m.row(r)) {
    if (v != 0.0) return false;
  }
  return true;
}

/// A row (column) survives when its mask is on or the ungated low-rank term
/// still writes (reads) it.
bool row_alive(const layers::GatedLinear& l, const model::LayerMask& mask, std::size_t r) {
  return mask.rows[r] != 0.0 || (l.lowrank && !row_is_zero(l.lowrank->a, r));
}

bool col_alive(const layers::GatedLinear& l, const model::LayerMask& mask, std::size_t c) {
  return mask.cols[c] != 0.0 || (l.lowrank && !row_is_zero(l.lowrank->b, c));
}

struct KeepPlan {
  std::vector<Index> rows;
  std::vector<Index> cols;
  Index head_in;
};

KeepPlan plan_keep_all(const GatedModel& m) {
  KeepPlan p;
  for (const auto& l : m.linears) {
    p.rows.push_back(iota_index(l.out_features()));
    p.cols.push_back(iota_index(l.in_features()));
  }
  p.head_in = iota_index(m.head.w.cols());
  return p;
}

KeepPlan plan_pruned(const GatedModel& m, const MaskSet& masks) {
  KeepPlan p;
  const std::size_t n = m.linears.size();
  p.rows.resize(n);
  p.cols.resize(n);
  auto rows_of = [&](std::size_t i) {
    return select(m.linears[i].out_features(), [&](std::size_t r) { return row_alive(m.linears[i], masks[i], r); });
  };
  auto cols_of = [&](std::size_t i) {
    return select(m.linears[i].in_features(), [&](std::size_t c) { return col_alive(m.linears[i], masks[i], c); });
  };
  // A hidden unit survives only if its producer row and its consumer column both do.
  auto paired = [&](std::size_t producer, std::size_t consumer, bool consumer_is_row) {
    return select(m.linears[producer].out_features(), [&](std::size_t j) {
      const bool other = consumer_is_row ? row_alive(m.linears[consumer], masks[consumer], j)
                                         : col_alive(m.linears[consumer], masks[consumer], j);
      return row_alive(m.linears[producer], masks[producer], j) && other;
    });
  };
  if (m.config.arch == ArchKind::Mlp) {
    p.cols[0] = cols_of(0);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      p.rows[i] = paired(i, i + 1, false);
      p.cols[i + 1] = p.rows[i];
    }
    p.rows[n - 1] = rows_of(n - 1);
    p.head_in = p.rows[n - 1];
    return p;
  }
  for (std::size_t b = 0; b < m.config.n_blocks; ++b) {
    const std::size_t q = b * GatedModel::kPerBlock, k = q + 1, v = q + 2, o = q + 3, mi = q + 4, mo = q + 5;
    for (auto i : {q, k, v, mi}) p.cols[i] = cols_of(i);
    for (auto i : {o, mo}) p.rows[i] = rows_of(i);
    p.rows[q] = paired(q, k, true);
    p.rows[k] = p.rows[q];
    p.rows[v] = paired(v, o, false);
    p.cols[o] = p.rows[v];
    p.rows[mi] = paired(mi, mo, false);
    p.cols[mo] = p.rows[mi];
  }
  p.head_in = iota_index(m.head.w.cols());
  return p;
}

HeadLayout layout_for(const Index& qk, const Index& vo, std::size_t heads, std::size_t dh) {
  HeadLayout hl;
  for (std::size_t h = 0; h <= heads; ++h) {
    const std::size_t limit = h * dh;
    hl.qk_offsets.push_back(static_cast<std::size_t>(std::lower_bound(qk.begin(), qk.end(), limit) - qk.begin()));
    hl.vo_offsets.push_back(static_cast<std::size_t>(std::lower_bound(vo.begin(), vo.end(), limit) - vo.begin()));
  }
  return hl;
}

CompactLayer<double> make_layer(std::string name, const Matrix& w_eff, const Vector& bias, const Index& rows,
                                const Index& cols) {
  CompactLayer<double> l;
  l.name = std::move(name);
  l.in_index = cols;
  l.out_index = rows;
  l.in_full = w_eff.cols();
  l.out_full = w_eff.rows();
  l.weight_t = Matrix(cols.size(), rows.size());
  for (std::size_t a = 0; a < rows.size(); ++a) {
    for (std::size_t c = 0; c < cols.size(); ++c) l.weight_t(c, a) = w_eff(rows[a], cols[c]);
  }
  for (auto r : rows) l.bias.push_back(bias[r]);
  return l;
}

CompactModel<double> build(const GatedModel& m, const MaskSet& masks, const KeepPlan& plan) {
  if (masks.size() != m.linears.size()) throw Error(ErrorKind::ShapeMismatch, "mask count differs from layer count");
  CompactModel<double> cm;
  cm.config = m.config;
  cm.masks = masks;
  for (std::size_t i = 0; i < m.linears.size(); ++i) {
    const auto& l = m.linears[i];
    if (masks[i].rows.size() != l.out_features() || masks[i].cols.size() != l.in_features()) {
      throw Error(ErrorKind::ShapeMismatch, l.name + ": mask shape differs from layer shape");
    }
    if (plan.rows[i].empty() || plan.cols[i].empty()) {
      throw Error(ErrorKind::EmptyLayer, fmt::format("layer '{}' would keep {} rows and {} columns", l.name,
                                                     plan.rows[i].size(), plan.cols[i].size()));
    }
    const auto gv = l.realize_binary(masks[i].rows, masks[i].cols);
    Vector bias(l.out_features());
    for (std::size_t r = 0; r < bias.size(); ++r) bias[r] = gv.omega_r[r] * l.bias[r];
    cm.layers.push_back(make_layer(l.name, l.effective_weight(gv), bias, plan.rows[i], plan.cols[i]));
  }
  cm.head = make_layer("head", m.head.w, m.head.b, iota_index(m.head.w.rows()), plan.head_in);
  if (m.config.arch == ArchKind::Transformer) {
    cm.token_embedding = m.token_embedding;
    cm.position_embedding = m.position_embedding;
    for (const auto& ln : m.norms) {
      cm.norm_gamma.push_back(ln.gamma);
      cm.norm_beta.push_back(ln.beta);
    }
    const std::size_t dh = m.config.d_model / m.config.n_heads;
    for (std::size_t b = 0; b < m.config.n_blocks; ++b) {
      const std::size_t base = b * GatedModel::kPerBlock;
      cm.heads.push_back(layout_for(plan.rows[base], plan.rows[base + 2], m.config.n_heads, dh));
    }
  }
  return cm;
}

template <typename U>
BasicMatrix<U> cast_matrix(const Matrix& m) {
  return m.cast<U>();
}

template <typename U, typename T>
std::vector<U> cast_vector(const std::vector<T>& v) {
  return std::vector<U>(v.begin(), v.end());
}

}  // namespace

template <typename T>
BasicMatrix<T> CompactLayer<T>::forward(const BasicMatrix<T>& x_kept) const {
  BasicMatrix<T> out;
  matmul_into(x_kept, weight_t, out);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    T* o = out.data() + r * out.cols();
    for (std::size_t j = 0; j < bias.size(); ++j) o[j] += bias[j];
  }
  return out;
}

template <typename T>
BasicMatrix<T> CompactModel<T>::forward(const model::Batch& batch) const {
  if (config.arch == ArchKind::Mlp) {
    if (batch.x.cols() != config.widths.front()) throw Error(ErrorKind::ShapeMismatch, "batch width differs from model input");
    BasicMatrix<T> x = batch.x.template cast<T>();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = i == 0 ? apply(layers[0], x) : layers[i].forward(x);
      for (auto& v : x.values()) v = gelu_t(v);
    }
    return head.forward(x);
  }
  const std::size_t seq = config.seq_len, d = config.d_model;
  if (batch.tokens.empty() || batch.tokens.size() % seq != 0) {
    throw Error(ErrorKind::ShapeMismatch, "token batch is not a multiple of seq_len");
  }
  const std::size_t nb = batch.tokens.size() / seq;
  BasicMatrix<T> x(nb * seq, d);
  for (std::size_t r = 0; r < nb * seq; ++r) {
    const auto tok = static_cast<std::size_t>(batch.tokens[r]);
    if (tok >= config.vocab) throw Error(ErrorKind::ShapeMismatch, "token id outside vocab");
    for (std::size_t j = 0; j < d; ++j) x(r, j) = token_embedding(tok, j) + position_embedding(r % seq, j);
  }
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d / config.n_heads)));
  for (std::size_t b = 0; b < config.n_blocks; ++b) {
    const auto* l = &layers[b * model::GatedModel::kPerBlock];
    const BasicMatrix<T> h1 = layer_norm(x, norm_gamma[2 * b], norm_beta[2 * b]);
    const BasicMatrix<T> ctx = attention(apply(l[0], h1), apply(l[1], h1), apply(l[2], h1), heads[b], nb, seq, scale);
    scatter_add(x, l[3].forward(ctx), l[3].out_index);
    const BasicMatrix<T> h2 = layer_norm(x, norm_gamma[2 * b + 1], norm_beta[2 * b + 1]);
    BasicMatrix<T> u = apply(l[4], h2);
    for (auto& v : u.values()) v = gelu_t(v);
    scatter_add(x, l[5].forward(u), l[5].out_index);
  }
  const BasicMatrix<T> xf = layer_norm(x, norm_gamma.back(), norm_beta.back());
  BasicMatrix<T> pooled(nb, d);
  const T inv = static_cast<T>(1.0 / static_cast<double>(seq));
  for (std::size_t s = 0; s < nb; ++s) {
    for (std::size_t p = 0; p < seq; ++p) {
      for (std::size_t j = 0; j < d; ++j) pooled(s, j) += xf(s * seq + p, j) * inv;
    }
  }
  return apply(head, pooled);
}

template <typename T>
template <typename U>
CompactModel<U> CompactModel<T>::cast() const {
  CompactModel<U> out;
  out.config = config;
  auto cast_layer = [](const CompactLayer<T>& l) {
    CompactLayer<U> c;
    c.name = l.name;
    c.weight_t = l.weight_t.template cast<U>();
    c.bias = cast_vector<U>(l.bias);
    c.in_index = l.in_index;
    c.out_index = l.out_index;
    c.in_full = l.in_full;
    c.out_full = l.out_full;
    return c;
  };
  for (const auto& l : layers) out.layers.push_back(cast_layer(l));
  out.head = cast_layer(head);
  out.token_embedding = token_embedding.template cast<U>();
  out.position_embedding = position_embedding.template cast<U>();
  for (const auto& g : norm_gamma) out.norm_gamma.push_back(cast_vector<U>(g));
  for (const auto& b : norm_beta) out.norm_beta.push_back(cast_vector<U>(b));
  out.heads = heads;
  out.masks = masks;
  return out;
}

template struct CompactLayer<double>;
template struct CompactLayer<float>;
template class CompactModel<double>;
template class CompactModel<float>;
template CompactModel<float> CompactModel<double>::cast<float>() const;
template CompactModel<double> CompactModel<double>::cast<double>() const;

Compaction compact_model(const GatedModel& m, const MaskSet& masks) {
  if (masks.size() != m.linears.size()) throw Error(ErrorKind::ShapeMismatch, "mask count differs from layer count");
  const KeepPlan plan = plan_pruned(m, masks);
  Compaction out{build(m, masks, plan), {}};
  auto& rep = out.report;
  for (std::size_t i = 0; i < m.linears.size(); ++i) {
    const auto& l = m.linears[i];
    LayerReport lr;
    lr.name = l.name;
    lr.rows_total = l.out_features();
    lr.cols_total = l.in_features();
    lr.rows_kept = plan.rows[i].size();
    lr.cols_kept = plan.cols[i].size();
    lr.params_total = l.w0.size() + l.bias.size();
    lr.params_kept = out.model.layers[i].kept_params();
    lr.kept_rows = plan.rows[i];
    lr.kept_cols = plan.cols[i];
    rep.params_total += lr.params_total;
    rep.params_removed += lr.params_total - lr.params_kept;
    rep.layers.push_back(std::move(lr));
  }
  rep.removed_fraction = rep.params_total ? static_cast<double>(rep.params_removed) / static_cast<double>(rep.params_total) : 0.0;
  rep.head_cols_total = m.head.w.cols();
  rep.head_cols_kept = plan.head_in.size();
  return out;
}

template <typename T>
CompactModel<T> masked_dense(const GatedModel& m, const MaskSet& masks) {
  return build(m, masks, plan_keep_all(m)).template cast<T>();
}

template CompactModel<double> masked_dense<double>(const GatedModel&, const MaskSet&);
template CompactModel<float> masked_dense<float>(const GatedModel&, const MaskSet&);

model::Batch random_batch(const model::ModelConfig& c, std::size_t n, std::uint64_t seed) {
  RngStream rng = RngStream(seed).fork(0x6571);
  model::Batch b;
  if (c.arch == ArchKind::Mlp) {
    b.x = Matrix(n, c.widths.front());
    for (auto& v : b.x.values()) v = rng.next_normal();
  } else {
    b.tokens.resize(n * c.seq_len);
    for (auto& t : b.tokens) t = static_cast<std::int32_t>(rng.next_below(c.vocab));
  }
  return b;
}

namespace {

template <typename T>
double deviation(const GatedModel& m, const CompactModel<T>& cm, std::size_t n_samples, std::uint64_t seed) {
  const model::Batch batch = random_batch(m.config, n_samples, seed);
  const Matrix ref = model::forward(m, batch, model::realize_binary(m, cm.masks));
  const BasicMatrix<T> got = cm.forward(batch);
  if (got.rows() != ref.rows() || got.cols() != ref.cols()) return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double e = std::abs(ref.values()[i] - static_cast<double>(got.values()[i]));
    if (!(e <= worst)) worst = e;  // NaN propagates as the worst case
  }
  return worst;
}

}  // namespace

double verify_equivalence(const GatedModel& m, const CompactModel<double>& cm, std::size_t n_samples, std::uint64_t seed) {
  return deviation(m, cm, n_samples, seed);
}

double verify_equivalence(const GatedModel& m, const CompactModel<float>& cm, std::size_t n_samples, std::uint64_t seed) {
  return deviation(m, cm, n_samples, seed);
}

GatedModel densify(const CompactModel<double>& cm) {
  model::ModelConfig cfg = cm.config;
  cfg.method = model::Method::Gates;
  cfg.lowrank_rank = 0;
  cfg.gate_mlp = true;
  GatedModel m = model::build_model(cfg);
  for (std::size_t i = 0; i < m.linears.size(); ++i) {
    auto& l = m.linears[i];
    const auto& c = cm.layers[i];
    l.w0.fill(0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
    std::fill(l.gate_r.mu.begin(), l.gate_r.mu.end(), -1.0);
    std::fill(l.gate_c.mu.begin(), l.gate_c.mu.end(), -1.0);
    for (std::size_t a = 0; a < c.out_index.size(); ++a) {
      l.bias[c.out_index[a]] = c.bias[a];
      l.gate_r.mu[c.out_index[a]] = gates::kInitialMu;
      for (std::size_t b = 0; b < c.in_index.size(); ++b) l.w0(c.out_index[a], c.in_index[b]) = c.weight_t(b, a);
    }
    for (auto j : c.in_index) l.gate_c.mu[j] = gates::kInitialMu;
  }
  m.head.w.fill(0.0);
  for (std::size_t a = 0; a < cm.head.out_index.size(); ++a) {
    m.head.b[a] = cm.head.bias[a];
    for (std::size_t b = 0; b < cm.head.in_index.size(); ++b) m.head.w(a, cm.head.in_index[b]) = cm.head.weight_t(b, a);
  }
  if (cfg.arch == ArchKind::Transformer) {
    m.token_embedding = cm.token_embedding;
    m.position_embedding = cm.position_embedding;
    for (std::size_t i = 0; i < m.norms.size(); ++i) m.norms[i] = {cm.norm_gamma[i], cm.norm_beta[i]};
  }
  return m;
}

namespace {

std::string join(const Index& idx) { return fmt::format("{}", fmt::join(idx, ",")); }

}  // namespace

std::string CompactionReport::to_text() const {
  std::string s;
  s += fmt::format("policy={}\ntau={}\nambiguity_mass={}\n", to_string(policy), tau, ambiguity_mass);
  s += fmt::format("params_total={}\nparams_removed={}\nremoved_fraction={:.17g}\n", params_total, params_removed,
                   removed_fraction);
  s += fmt::format("head_cols_kept={}\nhead_cols_total={}\n", head_cols_kept, head_cols_total);
  if (equivalence_error >= 0.0) s += fmt::format("equivalence_error={:.17g}\n", equivalence_error);
  for (const auto& l : layers) {
    s += fmt::format("layer.{}.rows={}/{}\n", l.name, l.rows_kept, l.rows_total);
    s += fmt::format("layer.{}.cols={}/{}\n", l.name, l.cols_kept, l.cols_total);
    s += fmt::format("layer.{}.params={}/{}\n", l.name, l.params_kept, l.params_total);
    s += fmt::format("layer.{}.kept_rows={}\n", l.name, join(l.kept_rows));
    s += fmt::format("layer.{}.kept_cols={}\n", l.name, join(l.kept_cols));
  }
  return s;
}

std::string CompactionReport::to_table() const {
  std::string s = fmt::format("{:<14} {:>11} {:>11} {:>17}\n", "layer", "rows", "cols", "params");
  for (const auto& l : layers) {
    s += fmt::format("{:<14} {:>11} {:>11} {:>17}\n", l.name, fmt::format("{}/{}", l.rows_kept, l.rows_total),
                     fmt::format("{}/{}", l.cols_kept, l.cols_total), fmt::format("{}/{}", l.params_kept, l.params_total));
  }
  s += fmt::format("removed {} of {} parameters ({:.2f}%), head columns kept {}/{}\n", params_removed, params_total,
                   100.0 * removed_fraction, head_cols_kept, head_cols_total);
  if (equivalence_error >= 0.0) s += fmt::format("equivalence error {:.3e}\n", equivalence_error);
  return s;
}

GateStatistics gate_statistics(const train::TrainRun& run) {
  if (run.snapshots.empty()) throw Error(ErrorKind::SnapshotsMissing, "run has no gate snapshots");
  GateStatistics st;
  auto mean_gate = [](const Vector& mu) {
    double s = 0.0;
    for (double v : mu) s += gates::clamp01(gates::pre_clamp(v, 0.0));
    return mu.empty() ? 0.0 : s / static_cast<double>(mu.size());
  };
  for (const auto& snap : run.snapshots) st.epochs.push_back(snap.epoch);
  for (std::size_t i = 0; i < run.model.linears.size(); ++i) {
    if (!run.model.linears[i].gated) continue;
    st.layers.push_back(run.layer_names[i]);
    std::vector<double> rows, cols;
    for (const auto& snap : run.snapshots) {
      rows.push_back(mean_gate(snap.mu_r[i]));
      cols.push_back(mean_gate(snap.mu_c[i]));
    }
    st.row_means.push_back(std::move(rows));
    st.col_means.push_back(std::move(cols));
  }
  return st;
}

std::string GateStatistics::to_table() const {
  std::string s = fmt::format("{:<6}", "epoch");
  for (const auto& l : layers) s += fmt::format(" {:>14} {:>14}", l + ".r", l + ".c");
  s += "\n";
  for (std::size_t e = 0; e < epochs.size(); ++e) {
    s += fmt::format("{:<6}", epochs[e]);
    for (std::size_t i = 0; i < layers.size(); ++i) s += fmt::format(" {:>14.6f} {:>14.6f}", row_means[i][e], col_means[i][e]);
    s += "\n";
  }
  return s;
}

namespace {

std::vector<std::int64_t> to_i64(const Index& idx) { return {idx.begin(), idx.end()}; }

Index to_index(const std::vector<std::int64_t>& v) {
  Index out;
  for (auto x : v) {
    if (x < 0) throw Error(ErrorKind::IoError, "negative index in compact checkpoint");
    out.push_back(static_cast<std::size_t>(x));
  }
  return out;
}

void put_layer(model::Container& c, const CompactLayer<double>& l) {
  c.tensors.push_back(model::f64_tensor(l.name + ".weight_t", {l.weight_t.rows(), l.weight_t.cols()}, l.weight_t.values()));
  c.tensors.push_back(model::f64_tensor(l.name + ".bias", {l.bias.size()}, l.bias));
  c.tensors.push_back(model::i64_tensor(l.name + ".in_index", to_i64(l.in_index)));
  c.tensors.push_back(model::i64_tensor(l.name + ".out_index", to_i64(l.out_index)));
  c.meta["layer." + l.name + ".in_full"] = std::to_string(l.in_full);
  c.meta["layer." + l.name + ".out_full"] = std::to_string(l.out_full);
}

CompactLayer<double> get_layer(const model::Container& c, const std::string& name) {
  CompactLayer<double> l;
  l.name = name;
  l.in_index = to_index(model::as_i64(c.tensor(name + ".in_index")));
  l.out_index = to_index(model::as_i64(c.tensor(name + ".out_index")));
  const auto& w = c.tensor(name + ".weight_t");
  if (w.shape.size() != 2 || w.shape[0] != l.in_index.size() || w.shape[1] != l.out_index.size()) {
    throw Error(ErrorKind::ShapeMismatch, name + ": weight shape disagrees with index maps");
  }
  l.weight_t = Matrix(w.shape[0], w.shape[1], model::as_f64(w));
  l.bias = model::as_f64(c.tensor(name + ".bias"));
  if (l.bias.size() != l.out_index.size()) throw Error(ErrorKind::ShapeMismatch, name + ": bias length disagrees with index map");
  auto meta = [&](const std::string& key) {
    auto it = c.meta.find(key);
    if (it == c.meta.end()) throw Error(ErrorKind::CheckpointMissing, "meta key '" + key + "' missing");
    return std::stoull(it->second);
  };
  l.in_full = meta("layer." + name + ".in_full");
  l.out_full = meta("layer." + name + ".out_full");
  return l;
}

}  // namespace

void save_compact(const CompactModel<double>& cm, const CompactionReport& report, const std::filesystem::path& path) {
  model::Container c;
  c.kind = "compact";
  for (const auto& [k, v] : cm.config.to_map()) c.meta["config." + k] = v;
  c.meta["report.policy"] = to_string(report.policy);
  c.meta["report.tau"] = fmt::format("{}", report.tau);
  c.meta["report.params_removed"] = std::to_string(report.params_removed);
  c.meta["report.params_total"] = std::to_string(report.params_total);
  for (std::size_t i = 0; i < cm.layers.size(); ++i) {
    put_layer(c, cm.layers[i]);
    c.tensors.push_back(model::f64_tensor(cm.layers[i].name + ".mask_r", {cm.masks[i].rows.size()}, cm.masks[i].rows));
    c.tensors.push_back(model::f64_tensor(cm.layers[i].name + ".mask_c", {cm.masks[i].cols.size()}, cm.masks[i].cols));
  }
  put_layer(c, cm.head);
  if (cm.config.arch == ArchKind::Transformer) {
    c.tensors.push_back(model::f64_tensor("embed.token", {cm.token_embedding.rows(), cm.token_embedding.cols()},
                                          cm.token_embedding.values()));
    c.tensors.push_back(model::f64_tensor("embed.position", {cm.position_embedding.rows(), cm.position_embedding.cols()},
                                          cm.position_embedding.values()));
    for (std::size_t i = 0; i < cm.norm_gamma.size(); ++i) {
      c.tensors.push_back(model::f64_tensor(fmt::format("norm.{}.gamma", i), {cm.norm_gamma[i].size()}, cm.norm_gamma[i]));
      c.tensors.push_back(model::f64_tensor(fmt::format("norm.{}.beta", i), {cm.norm_beta[i].size()}, cm.norm_beta[i]));
    }
    for (std::size_t b = 0; b < cm.heads.size(); ++b) {
      c.tensors.push_back(model::i64_tensor(fmt::format("block{}.qk_offsets", b), to_i64(cm.heads[b].qk_offsets)));
      c.tensors.push_back(model::i64_tensor(fmt::format("block{}.vo_offsets", b), to_i64(cm.heads[b].vo_offsets)));
    }
  }
  model::write_container(c, path);
}

CompactModel<double> load_compact(const std::filesystem::path& path) {
  const model::Container c = model::read_container(path);
  if (c.kind != "compact") throw Error(ErrorKind::IoError, path.string() + ": container kind '" + c.kind + "' is not compact");
  std::map<std::string, std::string> cfg;
  for (const auto& [k, v] : c.meta) {
    if (k.rfind("config.", 0) == 0) cfg[k.substr(7)] = v;
  }
  CompactModel<double> cm;
  cm.config = model::ModelConfig::from_map(cfg);
  const GatedModel shape = model::build_model(cm.config);
  for (const auto& l : shape.linears) {
    cm.layers.push_back(get_layer(c, l.name));
    cm.masks.push_back({model::as_f64(c.tensor(l.name + ".mask_r")), model::as_f64(c.tensor(l.name + ".mask_c"))});
  }
  cm.head = get_layer(c, "head");
  if (cm.config.arch == ArchKind::Transformer) {
    const auto& te = c.tensor("embed.token");
    const auto& pe = c.tensor("embed.position");
    cm.token_embedding = Matrix(te.shape.at(0), te.shape.at(1), model::as_f64(te));
    cm.position_embedding = Matrix(pe.shape.at(0), pe.shape.at(1), model::as_f64(pe));
    for (std::size_t i = 0; i < shape.norms.size(); ++i) {
      cm.norm_gamma.push_back(model::as_f64(c.tensor(fmt::format("norm.{}.gamma", i))));
      cm.norm_beta.push_back(model::as_f64(c.tensor(fmt::format("norm.{}.beta", i))));
    }
    for (std::size_t b = 0; b < cm.config.n_blocks; ++b) {
      cm.heads.push_back({to_index(model::as_i64(c.tensor(fmt::format("block{}.qk_offsets", b)))),
                          to_index(model::as_i64(c.tensor(fmt::format("block{}.vo_offsets", b))))});
    }
  }
  return cm;
}

}  // namespace finegates::compact
