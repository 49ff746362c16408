#include "finegates/landscape.h"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace finegates::landscape {

namespace {

constexpr double kGapFloor = 1e-14;
constexpr std::size_t kMaxJacobianDim = 16;

double min_abs(const Matrix& m) {
  double lo = std::numeric_limits<double>::infinity();
  for (double v : m.values()) lo = std::min(lo, std::abs(v));
  return lo;
}

double min_of(const Vector& v) {
  double lo = std::numeric_limits<double>::infinity();
  for (double x : v) lo = std::min(lo, x);
  return lo;
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void finalize_ratios(PLTrace& t) {
  t.inf_ratio = std::numeric_limits<double>::infinity();
  for (auto& s : t.steps) {
    s.gap = s.loss - t.f_star;
    if (s.gap > kGapFloor) {
      s.ratio = s.grad_sq / (2.0 * s.gap);
      t.inf_ratio = std::min(t.inf_ratio, s.ratio);
    } else {
      s.ratio = std::numeric_limits<double>::quiet_NaN();
    }
  }
  if (t.inf_ratio == std::numeric_limits<double>::infinity()) t.inf_ratio = 0.0;
}

}  // namespace

JacobianReport gates_jacobian(const Matrix& w0, const Vector& omega_r, const Vector& omega_c) {
  const std::size_t m = w0.rows(), n = w0.cols();
  if (m > kMaxJacobianDim || n > kMaxJacobianDim) {
    throw Error(ErrorKind::TooLarge, fmt::format("jacobian analysis is limited to {}x{}", kMaxJacobianDim, kMaxJacobianDim));
  }
  if (omega_r.size() != m || omega_c.size() != n) throw Error(ErrorKind::ShapeMismatch, "gate lengths differ from W0");
  JacobianReport r;
  r.m = m;
  r.n = n;
  r.j = Matrix(m * n, m + n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      r.j(i * n + j, i) = w0(i, j) * omega_c[j];
      r.j(i * n + j, m + j) = omega_r[i] * w0(i, j);
    }
  }
  // Block form: diag(g_r), diag(g_c) and H_ij = W0_ij^2 omega_r_i omega_c_j.
  r.gram = Matrix(m + n, m + n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double a = w0(i, j) * omega_c[j];
      const double b = omega_r[i] * w0(i, j);
      r.gram(i, i) += a * a;
      r.gram(m + j, m + j) += b * b;
      r.gram(i, m + j) = a * b;
      r.gram(m + j, i) = a * b;
    }
  }
  const Matrix direct = matmul_tn(r.j, r.j);
  for (std::size_t e = 0; e < direct.size(); ++e) {
    r.block_identity_error = std::max(r.block_identity_error, std::abs(direct.values()[e] - r.gram.values()[e]));
  }
  r.gram_min_eig = min_eig_sym(r.gram);
  const Vector sv = singular_values(r.j);
  r.sigma_min_j = r.j.rows() >= r.j.cols() && !sv.empty() ? sv.back() : 0.0;
  r.alpha = std::min(min_of(omega_r), min_of(omega_c));
  r.w0 = min_abs(w0);
  r.diag_bound = static_cast<double>(std::min(m, n)) * r.w0 * r.w0 * r.alpha * r.alpha;
  r.min_diag = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < m + n; ++i) r.min_diag = std::min(r.min_diag, r.gram(i, i));

  Vector v(m + n);
  for (std::size_t i = 0; i < m; ++i) v[i] = omega_r[i];
  for (std::size_t j = 0; j < n; ++j) v[m + j] = -omega_c[j];
  double residual = 0.0;
  for (std::size_t row = 0; row < r.j.rows(); ++row) {
    const double y = dot(r.j.row(row), v);
    residual += y * y;
  }
  r.scaling_residual = std::sqrt(residual);
  const double vn = norm2(v);
  if (vn > 0.0) {
    double trace = 0.0;
    for (std::size_t i = 0; i < m + n; ++i) trace += r.gram(i, i);
    Matrix lifted = r.gram;
    for (std::size_t a = 0; a < m + n; ++a) {
      for (std::size_t b = 0; b < m + n; ++b) lifted(a, b) += trace * v[a] * v[b] / (vn * vn);
    }
    r.reduced_min_eig = min_eig_sym(lifted);
  }
  return r;
}

JacobianSweep jacobian_sweep(std::size_t instances, std::uint64_t seed, std::size_t max_dim, double rel_threshold) {
  if (max_dim < 2) throw Error(ErrorKind::BadConfig, "max_dim must be at least 2");
  RngStream rng = RngStream(seed).fork(0x6a6c);
  JacobianSweep sweep;
  sweep.rel_threshold = rel_threshold;
  sweep.min_gram_eig = std::numeric_limits<double>::infinity();
  sweep.min_reduced_eig = std::numeric_limits<double>::infinity();
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * rng.next_uniform(); };
  for (std::size_t k = 0; k < instances; ++k) {
    const std::size_t m = 2 + rng.next_below(max_dim - 1), n = 2 + rng.next_below(max_dim - 1);
    Matrix w0(m, n);
    for (auto& v : w0.values()) v = (rng.next_uniform() < 0.5 ? -1.0 : 1.0) * uniform(0.1, 1.0);
    Vector r(m), c(n);
    for (auto& v : r) v = uniform(0.1, 1.0);
    for (auto& v : c) v = uniform(0.1, 1.0);
    JacobianReport rep = gates_jacobian(w0, r, c);
    const double scale = std::sqrt(frobenius_sq(rep.gram));
    if (rep.gram_min_eig > rel_threshold * scale) ++sweep.positive;
    if (rep.min_diag < rep.diag_bound) ++sweep.diag_bound_failures;
    sweep.max_block_error = std::max(sweep.max_block_error, rep.block_identity_error);
    sweep.min_gram_eig = std::min(sweep.min_gram_eig, rep.gram_min_eig);
    sweep.max_scaling_residual = std::max(sweep.max_scaling_residual, rep.scaling_residual);
    sweep.min_reduced_eig = std::min(sweep.min_reduced_eig, rep.reduced_min_eig);
    sweep.reports.push_back(std::move(rep));
  }
  return sweep;
}

std::string JacobianSweep::to_text() const {
  std::string s = "instance\tm\tn\tgram_min_eig\tgram_frobenius\tmin_diag\tdiag_bound\tblock_error\tscaling_residual\treduced_min_eig\n";
  for (std::size_t k = 0; k < reports.size(); ++k) {
    const auto& r = reports[k];
    s += fmt::format("{}\t{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.3e}\t{:.3e}\t{:.6e}\n", k, r.m, r.n, r.gram_min_eig,
                     std::sqrt(frobenius_sq(r.gram)), r.min_diag, r.diag_bound, r.block_identity_error, r.scaling_residual,
                     r.reduced_min_eig);
  }
  s += fmt::format("instances={}\npositive={}\nrel_threshold={:.1e}\nmin_gram_eig={:.6e}\nmax_block_error={:.3e}\n"
                   "max_scaling_residual={:.3e}\nmin_reduced_eig={:.6e}\ndiag_bound_failures={}\n",
                   reports.size(), positive, rel_threshold, min_gram_eig, max_block_error, max_scaling_residual,
                   min_reduced_eig, diag_bound_failures);
  return s;
}

double GatesQuadratic::loss(const Vector& r, const Vector& c) const {
  double s = 0.0;
  for (std::size_t i = 0; i < w0.rows(); ++i) {
    for (std::size_t j = 0; j < w0.cols(); ++j) {
      const double e = r[i] * w0(i, j) * c[j] - w_star(i, j);
      s += e * e;
    }
  }
  return 0.5 * s;
}

Vector GatesQuadratic::grad(const Vector& r, const Vector& c) const {
  const std::size_t m = w0.rows(), n = w0.cols();
  Vector g(m + n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double e = r[i] * w0(i, j) * c[j] - w_star(i, j);
      g[i] += e * w0(i, j) * c[j];
      g[m + j] += e * r[i] * w0(i, j);
    }
  }
  return g;
}

double LoRAQuadratic::loss(const Matrix& a, const Matrix& b) const {
  return 0.5 * frobenius_sq(subtract(add(w0, matmul_nt(a, b)), w_star));
}

std::pair<Matrix, Matrix> LoRAQuadratic::grad(const Matrix& a, const Matrix& b) const {
  const Matrix r = subtract(add(w0, matmul_nt(a, b)), w_star);
  return layers::lowrank_grads(r, a, b);
}

double LoRAQuadratic::f_star() const {
  const Vector sv = singular_values(subtract(w_star, w0));
  double tail = 0.0;
  for (std::size_t i = rank; i < sv.size(); ++i) tail += sv[i] * sv[i];
  return 0.5 * tail;
}

double gates_f_star(const GatesQuadratic& p, const std::vector<std::pair<Vector, Vector>>& starts, double tol,
                    std::size_t max_sweeps) {
  const std::size_t m = p.w0.rows(), n = p.w0.cols();
  double best = std::numeric_limits<double>::infinity();
  for (auto [r, c] : starts) {
    double prev = p.loss(r, c);
    for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
      for (std::size_t i = 0; i < m; ++i) {
        double num = 0.0, den = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double a = p.w0(i, j) * c[j];
          num += a * p.w_star(i, j);
          den += a * a;
        }
        if (den > 0.0) r[i] = num / den;
      }
      for (std::size_t j = 0; j < n; ++j) {
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          const double a = r[i] * p.w0(i, j);
          num += a * p.w_star(i, j);
          den += a * a;
        }
        if (den > 0.0) c[j] = num / den;
      }
      const double f = p.loss(r, c);
      const bool done = prev - f < tol;
      prev = f;
      if (done) break;
    }
    best = std::min(best, prev);
  }
  return best;
}

PLTrace pl_trace(const GatesQuadratic& p, Vector omega_r, Vector omega_c, std::size_t steps, double lr,
                 std::optional<double> f_star) {
  if (p.w0.empty() || min_abs(p.w0) == 0.0) {
    throw Error(ErrorKind::AssumptionViolated, "W0 has a vanishing entry; the gates landscape bound does not apply");
  }
  const std::size_t m = p.w0.rows();
  const Vector r0 = omega_r, c0 = omega_c;
  PLTrace t;
  for (std::size_t s = 0; s <= steps; ++s) {
    const double f = p.loss(omega_r, omega_c);
    if (!std::isfinite(f)) throw Error(ErrorKind::Diverged, fmt::format("gates descent diverged at step {}", s));
    const Vector g = p.grad(omega_r, omega_c);
    t.steps.push_back({s, f, 0.0, dot(g, g), 0.0});
    if (s == steps) break;
    for (std::size_t i = 0; i < omega_r.size(); ++i) omega_r[i] -= lr * g[i];
    for (std::size_t j = 0; j < omega_c.size(); ++j) omega_c[j] -= lr * g[m + j];
  }
  if (f_star) {
    t.f_star = *f_star;
  } else {
    t.f_star = gates_f_star(p, {{r0, c0}, {Vector(r0.size(), 1.0), Vector(c0.size(), 1.0)}, {omega_r, omega_c}});
    for (const auto& s : t.steps) t.f_star = std::min(t.f_star, s.loss);
  }
  finalize_ratios(t);
  return t;
}

PLTrace pl_trace(const LoRAQuadratic& p, Matrix a, Matrix b, std::size_t steps, double lr) {
  PLTrace t;
  t.f_star = p.f_star();
  for (std::size_t s = 0; s <= steps; ++s) {
    const double f = p.loss(a, b);
    if (!std::isfinite(f)) throw Error(ErrorKind::Diverged, fmt::format("LoRA descent diverged at step {}", s));
    const auto [ga, gb] = p.grad(a, b);
    t.steps.push_back({s, f, 0.0, frobenius_sq(ga) + frobenius_sq(gb), 0.0});
    if (s == steps) break;
    for (std::size_t i = 0; i < a.size(); ++i) a.values()[i] -= lr * ga.values()[i];
    for (std::size_t i = 0; i < b.size(); ++i) b.values()[i] -= lr * gb.values()[i];
  }
  finalize_ratios(t);
  return t;
}

Vector lora_origin_hessian(const LoRAQuadratic& p) {
  const std::size_t m = p.w0.rows(), n = p.w0.cols(), r = p.rank;
  const std::size_t dim = (m + n) * r;
  if (dim > 64) throw Error(ErrorKind::TooLarge, "origin Hessian limited to 64 parameters");
  auto grad_at = [&](const Vector& z) {
    Matrix a(m, r, Vector(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(m * r)));
    Matrix b(n, r, Vector(z.begin() + static_cast<std::ptrdiff_t>(m * r), z.end()));
    auto [ga, gb] = p.grad(a, b);
    Vector g = ga.values();
    g.insert(g.end(), gb.values().begin(), gb.values().end());
    return g;
  };
  const double h = 1e-5;
  Matrix hess(dim, dim);
  Vector z(dim, 0.0);
  for (std::size_t k = 0; k < dim; ++k) {
    z[k] = h;
    const Vector gp = grad_at(z);
    z[k] = -h;
    const Vector gm = grad_at(z);
    z[k] = 0.0;
    for (std::size_t i = 0; i < dim; ++i) hess(i, k) = (gp[i] - gm[i]) / (2.0 * h);
  }
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t k = i + 1; k < dim; ++k) {
      const double s = 0.5 * (hess(i, k) + hess(k, i));
      hess(i, k) = s;
      hess(k, i) = s;
    }
  }
  return eig_sym(hess);
}

SaddleSweep lora_saddle_sweep(std::size_t instances, std::size_t rank, std::uint64_t seed, std::size_t max_dim) {
  if (rank == 0 || max_dim < rank + 1) throw Error(ErrorKind::BadConfig, "max_dim must exceed the rank");
  RngStream rng = RngStream(seed).fork(0x7361);
  SaddleSweep sweep;
  sweep.min_gap = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < instances; ++k) {
    const std::size_t m = rank + 1 + rng.next_below(max_dim - rank), n = rank + 1 + rng.next_below(max_dim - rank);
    LoRAQuadratic p{Matrix(m, n), Matrix(m, n), rank};
    for (auto& v : p.w0.values()) v = rng.next_normal();
    for (auto& v : p.w_star.values()) v = rng.next_normal();
    const Matrix a(m, rank), b(n, rank);
    SaddleInstance inst;
    inst.m = m;
    inst.n = n;
    inst.rank = rank;
    const auto [ga, gb] = p.grad(a, b);
    const double g_sq = frobenius_sq(ga) + frobenius_sq(gb);
    inst.grad_norm = std::sqrt(g_sq);
    const double f_star = p.f_star();
    inst.gap = p.loss(a, b) - f_star;
    inst.bound = 0.5 * frobenius_sq(subtract(p.w0, p.w_star)) - f_star;
    inst.pl_ratio = inst.gap > 0.0 ? g_sq / (2.0 * inst.gap) : std::numeric_limits<double>::quiet_NaN();
    const Vector eig = lora_origin_hessian(p);
    inst.hessian_min_eig = eig.front();
    inst.hessian_max_eig = eig.back();
    sweep.max_grad_norm = std::max(sweep.max_grad_norm, inst.grad_norm);
    sweep.min_gap = std::min(sweep.min_gap, inst.gap);
    sweep.max_pl_ratio = std::max(sweep.max_pl_ratio, inst.pl_ratio);
    sweep.instances.push_back(inst);
  }
  return sweep;
}

std::string SaddleSweep::to_text() const {
  std::string s = "instance\tm\tn\trank\tgrad_norm\tgap\tbound\tpl_ratio\thessian_min\thessian_max\n";
  for (std::size_t k = 0; k < instances.size(); ++k) {
    const auto& i = instances[k];
    s += fmt::format("{}\t{}\t{}\t{}\t{:.3e}\t{:.6e}\t{:.6e}\t{}\t{:.6e}\t{:.6e}\n", k, i.m, i.n, i.rank, i.grad_norm, i.gap,
                     i.bound, i.pl_ratio, i.hessian_min_eig, i.hessian_max_eig);
  }
  s += fmt::format("instances={}\nmax_grad_norm={:.3e}\nmin_gap={:.6e}\nmax_pl_ratio={}\n", instances.size(), max_grad_norm,
                   min_gap, max_pl_ratio);
  return s;
}

FullBatchObjective model_objective(const model::GatedModel& m, const model::Batch& batch, const train::TrainConfig& cfg) {
  auto work = std::make_shared<model::GatedModel>(m);
  auto eval = [work, batch, cfg](const Vector& z, bool want_grads) {
    train::unpack_parameters(*work, z);
    return train::total_loss(*work, batch, model::realize_eval(*work), cfg, want_grads);
  };
  FullBatchObjective f;
  f.loss = [eval](const Vector& z) { return eval(z, false).loss.total; };
  f.grad = [eval, work](const Vector& z) { return train::pack_grads(*work, eval(z, true).grads); };
  return f;
}

namespace {

std::vector<std::size_t> gate_offsets(model::GatedModel& m) {
  std::vector<std::size_t> idx;
  std::size_t off = 0;
  for (const auto& p : model::trainable_parameters(m)) {
    if (p.group == model::ParamGroup::Gates) {
      for (std::size_t i = 0; i < p.values.size(); ++i) idx.push_back(off + i);
    }
    off += p.values.size();
  }
  return idx;
}

}  // namespace

FullBatchObjective gate_objective(const model::GatedModel& m, const model::Batch& batch, const train::TrainConfig& cfg) {
  model::GatedModel work = m;
  auto idx = std::make_shared<const std::vector<std::size_t>>(gate_offsets(work));
  auto base = std::make_shared<const Vector>(train::pack_parameters(work));
  const FullBatchObjective full = model_objective(m, batch, cfg);
  auto expand = [idx, base](const Vector& g) {
    Vector z = *base;
    for (std::size_t i = 0; i < idx->size(); ++i) z[(*idx)[i]] = g[i];
    return z;
  };
  FullBatchObjective f;
  f.loss = [full, expand](const Vector& g) { return full.loss(expand(g)); };
  f.grad = [full, expand, idx](const Vector& g) {
    const Vector all = full.grad(expand(g));
    Vector out(idx->size());
    for (std::size_t i = 0; i < idx->size(); ++i) out[i] = all[(*idx)[i]];
    return out;
  };
  return f;
}

Vector pack_gate_means(const model::GatedModel& m) {
  model::GatedModel work = m;
  const auto idx = gate_offsets(work);
  const Vector all = train::pack_parameters(work);
  Vector out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = all[idx[i]];
  return out;
}

double estimate_smoothness(const FullBatchObjective& f, const Vector& z, std::size_t iters, double h, std::uint64_t seed) {
  RngStream rng = RngStream(seed).fork(0x4c);
  Vector v = gauss_sample(rng, z.size(), 1.0);
  double nv = norm2(v);
  for (auto& x : v) x /= nv;
  double lambda = 0.0;
  Vector zp(z.size()), zm(z.size());
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < z.size(); ++i) {
      zp[i] = z[i] + h * v[i];
      zm[i] = z[i] - h * v[i];
    }
    const Vector gp = f.grad(zp), gm = f.grad(zm);
    Vector hv(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) hv[i] = (gp[i] - gm[i]) / (2.0 * h);
    lambda = norm2(hv);
    if (lambda == 0.0) break;
    for (std::size_t i = 0; i < z.size(); ++i) v[i] = hv[i] / lambda;
  }
  return lambda;
}

ConvergenceTrace gradient_descent(const FullBatchObjective& f, Vector z, const ConvergenceOptions& opt) {
  ConvergenceTrace t;
  t.smoothness = opt.smoothness ? *opt.smoothness : estimate_smoothness(f, z, opt.power_iters);
  if (!(t.smoothness > 0.0)) throw Error(ErrorKind::AssumptionViolated, "smoothness estimate is not positive");
  t.eta = opt.eta_factor / t.smoothness;
  t.max_residual = -std::numeric_limits<double>::infinity();
  double loss = f.loss(z);
  for (std::size_t s = 0; s <= opt.max_steps; ++s) {
    const Vector g = f.grad(z);
    const double gn = norm2(g);
    t.final_grad_norm = gn;
    if (!std::isfinite(loss) || !std::isfinite(gn)) throw Error(ErrorKind::Diverged, fmt::format("descent diverged at step {}", s));
    if (gn < opt.grad_tol) {
      t.reached_tolerance = true;
      t.steps.push_back({s, loss, gn, 0.0});
      break;
    }
    if (s == opt.max_steps) {
      t.steps.push_back({s, loss, gn, 0.0});
      break;
    }
    for (std::size_t i = 0; i < z.size(); ++i) z[i] -= t.eta * g[i];
    const double next = f.loss(z);
    const double residual = next - loss + t.eta * (1.0 - t.eta * t.smoothness / 2.0) * gn * gn;
    t.steps.push_back({s, loss, gn, residual});
    t.max_residual = std::max(t.max_residual, residual);
    if (residual > opt.residual_tol) ++t.violations;
    loss = next;
  }
  return t;
}

ConvergenceTrace convergence_experiment(const model::GatedModel& m, const model::Batch& batch,
                                        const train::TrainConfig& cfg, const ConvergenceOptions& opt) {
  if (opt.gates_only) return gradient_descent(gate_objective(m, batch, cfg), pack_gate_means(m), opt);
  model::GatedModel work = m;
  return gradient_descent(model_objective(m, batch, cfg), train::pack_parameters(work), opt);
}

std::size_t epochs_to_fraction(const std::vector<double>& curve, double frac) {
  if (curve.empty()) return 0;
  const double target = frac * curve.back();
  for (std::size_t e = 0; e < curve.size(); ++e) {
    if (curve[e] >= target) return e + 1;
  }
  return curve.size();
}

Comparison compare_gates_vs_lora(const model::GatedModel& base, const train::Split& data, const ComparisonConfig& cfg) {
  Comparison out;
  out.seeds = cfg.seeds;
  out.epochs = cfg.train.epochs;
  out.gates.method = "gates";
  out.lora.method = "lora";
  const std::size_t steps_per_epoch = (data.train.size() + cfg.train.batch_size - 1) / cfg.train.batch_size;
  for (auto seed : cfg.seeds) {
    for (auto* series : {&out.gates, &out.lora}) {
      const bool lora = series == &out.lora;
      train::TrainConfig tc = cfg.train;
      tc.seed = seed;
      tc.metrics_log.reset();
      if (lora) {
        tc.lr_lowrank = cfg.adapter_lr;
      } else {
        tc.lr_gates = cfg.adapter_lr;
      }
      model::GatedModel m = model::with_method(base, lora ? model::Method::Lora : model::Method::Gates,
                                               lora ? cfg.lora_rank : 0, seed);
      const train::TrainRun run = train::train(std::move(m), data, tc);
      std::vector<double> curve;
      for (const auto& r : run.records) curve.push_back(r.val_metric);
      series->epochs_to_90.push_back(epochs_to_fraction(curve));
      series->curves.push_back(std::move(curve));
      series->optimizer_steps = steps_per_epoch * tc.epochs;
    }
  }
  for (auto* series : {&out.gates, &out.lora}) {
    series->median_epochs_to_90 = median(std::vector<double>(series->epochs_to_90.begin(), series->epochs_to_90.end()));
  }
  return out;
}

std::string Comparison::to_table() const {
  std::string s = "method\tepoch\tmean\tstd";
  for (auto seed : seeds) s += fmt::format("\tseed{}", seed);
  s += "\n";
  for (const auto* series : {&gates, &lora}) {
    for (std::size_t e = 0; e < epochs; ++e) {
      double mean = 0.0, sq = 0.0;
      for (const auto& c : series->curves) mean += c[e];
      mean /= static_cast<double>(series->curves.size());
      for (const auto& c : series->curves) sq += (c[e] - mean) * (c[e] - mean);
      const double std = series->curves.size() > 1 ? std::sqrt(sq / static_cast<double>(series->curves.size() - 1)) : 0.0;
      s += fmt::format("{}\t{}\t{:.6f}\t{:.6f}", series->method, e + 1, mean, std);
      for (const auto& c : series->curves) s += fmt::format("\t{:.6f}", c[e]);
      s += "\n";
    }
  }
  for (const auto* series : {&gates, &lora}) {
    s += fmt::format("# {} epochs_to_90 median={} steps={} per_seed={}\n", series->method, series->median_epochs_to_90,
                     series->optimizer_steps, fmt::join(series->epochs_to_90, ","));
  }
  return s;
}

}  // namespace finegates::landscape
