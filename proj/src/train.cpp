#include "finegates/train.h"

#include <fmt/format.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

namespace finegates::train {

using model::Batch;
using model::GatedModel;
using model::GateSet;
using model::ParamGrads;
using model::TaskKind;

std::string to_string(Schedule s) { return s == Schedule::Constant ? "constant" : "warmup_cosine"; }

Schedule parse_schedule(const std::string& s) {
  if (s == "constant") return Schedule::Constant;
  if (s == "warmup_cosine") return Schedule::WarmupCosine;
  throw Error(ErrorKind::BadConfig, "unknown schedule '" + s + "'");
}

void TrainConfig::validate() const {
  if (!(lr_gates > 0.0) || !(lr_bias_head > 0.0) || !(lowrank_lr() > 0.0)) {
    throw Error(ErrorKind::BadConfig, "learning rates must be positive");
  }
  if (!(target_sparsity >= 0.0 && target_sparsity < 1.0)) {
    throw Error(ErrorKind::BadConfig, "target_sparsity must lie in [0, 1)");
  }
  for (const auto& [name, t] : layer_targets) {
    if (!(t >= 0.0 && t < 1.0)) throw Error(ErrorKind::BadConfig, "target for layer '" + name + "' must lie in [0, 1)");
  }
  if (lambda < 0.0) throw Error(ErrorKind::BadConfig, "lambda must be nonnegative");
  if (batch_size < 1) throw Error(ErrorKind::BadConfig, "batch_size must be >= 1");
  if (kurtosis_every < 1) throw Error(ErrorKind::BadConfig, "kurtosis_every must be >= 1");
  if (!(floor_frac >= 0.0 && floor_frac <= 1.0)) throw Error(ErrorKind::BadConfig, "floor_frac must lie in [0, 1]");
  if (weight_decay < 0.0) throw Error(ErrorKind::BadConfig, "weight_decay must be nonnegative");
}

Batch subset(const Batch& b, std::span<const std::size_t> idx, std::size_t seq_len) {
  Batch out;
  if (b.x.rows() > 0) {
    out.x = Matrix(idx.size(), b.x.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) std::copy_n(b.x.row(idx[r]).begin(), b.x.cols(), out.x.row(r).begin());
  }
  if (!b.tokens.empty()) {
    out.tokens.reserve(idx.size() * seq_len);
    for (auto i : idx) out.tokens.insert(out.tokens.end(), b.tokens.begin() + i * seq_len, b.tokens.begin() + (i + 1) * seq_len);
  }
  if (!b.labels.empty()) {
    for (auto i : idx) out.labels.push_back(b.labels[i]);
  }
  if (b.targets.rows() > 0) {
    out.targets = Matrix(idx.size(), b.targets.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::copy_n(b.targets.row(idx[r]).begin(), b.targets.cols(), out.targets.row(r).begin());
    }
  }
  return out;
}

KurtosisWeights kurtosis_weights(const GatedModel& m, const model::Tape& tape) {
  KurtosisWeights kw;
  kw.rows.resize(m.linears.size());
  kw.cols.resize(m.linears.size());
  for (std::size_t i = 0; i < m.linears.size(); ++i) {
    const auto& l = m.linears[i];
    if (!l.gated) continue;
    if (l.out_features() < 2 || l.in_features() < 2) {
      kw.rows[i].assign(l.out_features(), 1.0 / static_cast<double>(l.out_features()));
      kw.cols[i].assign(l.in_features(), 1.0 / static_cast<double>(l.in_features()));
      continue;
    }
    const auto& cache = tape.linear[i];
    const Matrix o = gates::activation_matrix(l.w0, cache.gates.omega_r, cache.gates.omega_c, cache.x);
    auto scores = gates::kurtosis_scores(o);
    kw.rows[i] = std::move(scores.rows);
    kw.cols[i] = std::move(scores.cols);
  }
  return kw;
}

double task_loss(TaskKind task, const Matrix& logits, const Batch& batch, Matrix* dlogits) {
  const std::size_t n = logits.rows(), c = logits.cols();
  if (n == 0) throw Error(ErrorKind::ShapeMismatch, "empty batch");
  if (dlogits) *dlogits = Matrix(n, c);
  double total = 0.0;
  if (task == TaskKind::Classification) {
    if (batch.labels.size() != n) throw Error(ErrorKind::ShapeMismatch, "label count differs from batch size");
    for (std::size_t r = 0; r < n; ++r) {
      const auto y = batch.labels[r];
      if (y < 0 || static_cast<std::size_t>(y) >= c) {
        throw Error(ErrorKind::ShapeMismatch, fmt::format("label {} outside head width {}", y, c));
      }
      double hi = logits(r, 0);
      for (std::size_t k = 1; k < c; ++k) hi = std::max(hi, logits(r, k));
      double z = 0.0;
      for (std::size_t k = 0; k < c; ++k) z += std::exp(logits(r, k) - hi);
      const double lse = hi + std::log(z);
      total += lse - logits(r, y);
      if (dlogits) {
        for (std::size_t k = 0; k < c; ++k) {
          (*dlogits)(r, k) = (std::exp(logits(r, k) - lse) - (static_cast<std::size_t>(y) == k ? 1.0 : 0.0)) / static_cast<double>(n);
        }
      }
    }
    return total / static_cast<double>(n);
  }
  if (batch.targets.rows() != n || batch.targets.cols() != c) {
    throw Error(ErrorKind::ShapeMismatch, "regression targets do not match the head");
  }
  const double scale = 1.0 / static_cast<double>(n * c);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < c; ++k) {
      const double e = logits(r, k) - batch.targets(r, k);
      total += e * e;
      if (dlogits) (*dlogits)(r, k) = 2.0 * e * scale;
    }
  }
  return total * scale;
}

double layer_floor(const TrainConfig& cfg, const std::string& layer) {
  auto it = cfg.layer_targets.find(layer);
  return 1.0 - (it == cfg.layer_targets.end() ? cfg.target_sparsity : it->second);
}

namespace {

double gate_expectation(const gates::StochasticGateVector& g, const Vector* k) {
  return k ? gates::weighted_expected_l0(g, *k) : gates::expected_l0(g);
}

const Vector* weights_for(const KurtosisWeights* kw, bool rows, std::size_t i) {
  if (!kw) return nullptr;
  return rows ? &kw->rows[i] : &kw->cols[i];
}

std::optional<std::span<const double>> as_span(const Vector* v) {
  if (!v) return std::nullopt;
  return std::span<const double>(*v);
}

}  // namespace

double sparsity_term(const GatedModel& m, const TrainConfig& cfg, const KurtosisWeights* kw) {
  const std::size_t n_gated = m.num_gated();
  if (cfg.lambda == 0.0 || n_gated == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < m.linears.size(); ++i) {
    const auto& l = m.linears[i];
    if (!l.gated) continue;
    const double floor = layer_floor(cfg, l.name);
    sum += gates::hinged_sparsity_loss(gate_expectation(l.gate_r, weights_for(kw, true, i)), floor);
    sum += gates::hinged_sparsity_loss(gate_expectation(l.gate_c, weights_for(kw, false, i)), floor);
  }
  return cfg.lambda / static_cast<double>(n_gated) * sum;
}

void add_sparsity_grads(const GatedModel& m, const TrainConfig& cfg, const KurtosisWeights* kw, ParamGrads& grads) {
  const std::size_t n_gated = m.num_gated();
  if (cfg.lambda == 0.0 || n_gated == 0) return;
  const double scale = cfg.lambda / static_cast<double>(n_gated);
  for (std::size_t i = 0; i < m.linears.size(); ++i) {
    const auto& l = m.linears[i];
    if (!l.gated) continue;
    const double floor = layer_floor(cfg, l.name);
    const Vector gr = gates::sparsity_loss_grad(l.gate_r, as_span(weights_for(kw, true, i)), floor);
    const Vector gc = gates::sparsity_loss_grad(l.gate_c, as_span(weights_for(kw, false, i)), floor);
    for (std::size_t j = 0; j < gr.size(); ++j) grads.linear[i].mu_r[j] += scale * gr[j];
    for (std::size_t j = 0; j < gc.size(); ++j) grads.linear[i].mu_c[j] += scale * gc[j];
  }
}

LossResult total_loss(const GatedModel& m, const Batch& batch, const GateSet& gates, const TrainConfig& cfg,
                      bool want_grads, const KurtosisWeights* fixed_kurtosis) {
  LossResult r;
  const Matrix logits = model::forward(m, batch, gates, &r.tape);
  Matrix dlogits;
  r.loss.task = task_loss(m.config.task, logits, batch, want_grads ? &dlogits : nullptr);
  const KurtosisWeights* kw = nullptr;
  if (cfg.kurtosis_weighting) {
    if (fixed_kurtosis) {
      kw = fixed_kurtosis;
    } else {
      r.kurtosis = kurtosis_weights(m, r.tape);
      kw = &*r.kurtosis;
    }
  }
  r.loss.sparsity = sparsity_term(m, cfg, kw);
  r.loss.total = r.loss.task + r.loss.sparsity;
  if (want_grads) {
    r.grads = model::backward(m, r.tape, dlogits);
    add_sparsity_grads(m, cfg, kw, r.grads);
  }
  return r;
}

LossResult total_loss(const GatedModel& m, const Batch& batch, RngStream& rng, const TrainConfig& cfg) {
  return total_loss(m, batch, model::realize_train(m, rng), cfg);
}

void adamw_step(std::span<double> params, std::span<const double> grads, AdamMoments& state, std::size_t t,
                const AdamHyper& h) {
  if (params.size() != grads.size()) throw Error(ErrorKind::ShapeMismatch, "adamw: grads differ from params");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * grads[i];
    state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * grads[i] * grads[i];
    params[i] -= h.lr * h.weight_decay * params[i];
    params[i] -= h.lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + h.eps);
  }
}

double lr_scale(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  if (cfg.schedule == Schedule::Constant) return 1.0;
  if (step < cfg.warmup_steps) return static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  const std::size_t span = total_steps > cfg.warmup_steps ? total_steps - cfg.warmup_steps : 1;
  const double p = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span));
  return cfg.floor_frac + (1.0 - cfg.floor_frac) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

Diverged::Diverged(std::size_t step, GatedModel last_good)
    : Error(ErrorKind::Diverged, fmt::format("non-finite loss or gradient at step {}", step)),
      step_(step),
      last_good_(std::move(last_good)) {}

double logits_metric(TaskKind task, const Matrix& logits, const Batch& batch) {
  if (task == TaskKind::Regression) return task_loss(TaskKind::Regression, logits, batch);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    const auto best = static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
    hits += best == batch.labels[r] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

double evaluate_metric(const GatedModel& m, const Batch& val) {
  return logits_metric(m.config.task, model::model_forward(m, val, model::Mode::Eval), val);
}

std::string format_record(const EpochRecord& r, const std::vector<std::string>& layer_names, bool with_elapsed) {
  std::string s = fmt::format("epoch={} train_loss={:.17g} task_loss={:.17g} sparsity_loss={:.17g} val_metric={:.17g} grad_norm={:.17g}",
                              r.epoch, r.train_loss, r.task_loss, r.sparsity_loss, r.val_metric, r.grad_norm);
  for (std::size_t i = 0; i < layer_names.size(); ++i) {
    s += fmt::format(" open.{}.rows={:.17g} open.{}.cols={:.17g}", layer_names[i], r.open_rows[i], layer_names[i], r.open_cols[i]);
  }
  if (with_elapsed) s += fmt::format(" elapsed_ms={:.3f}", r.elapsed_ms);
  return s;
}

namespace {

GateSnapshot snapshot(const GatedModel& m, std::size_t epoch) {
  GateSnapshot s;
  s.epoch = epoch;
  for (const auto& l : m.linears) {
    s.mu_r.push_back(l.gate_r.mu);
    s.mu_c.push_back(l.gate_c.mu);
  }
  return s;
}

AdamHyper hyper_for(const TrainConfig& cfg, model::ParamGroup group, double scale) {
  AdamHyper h{cfg.lr_gates * scale, cfg.beta1, cfg.beta2, cfg.adam_eps, 0.0};
  switch (group) {
    case model::ParamGroup::Gates:
      break;
    case model::ParamGroup::BiasHead:
      h.lr = cfg.lr_bias_head * scale;
      h.weight_decay = cfg.weight_decay;
      break;
    case model::ParamGroup::LowRank:
      h.lr = cfg.lowrank_lr() * scale;
      h.weight_decay = cfg.weight_decay;
      break;
  }
  return h;
}

}  // namespace

TrainRun train(GatedModel m, const Split& data, const TrainConfig& cfg) {
  cfg.validate();
  using Clock = std::chrono::steady_clock;
  const auto t_start = Clock::now();
  TrainRun run;
  run.model = std::move(m);
  GatedModel& model = run.model;
  for (const auto& l : model.linears) run.layer_names.push_back(l.name);
  run.snapshots.push_back(snapshot(model, 0));

  const std::size_t n = data.train.size();
  if (cfg.epochs > 0 && n == 0) throw Error(ErrorKind::BadConfig, "empty training split");
  const std::size_t seq = model.config.seq_len;
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;

  RngStream root(cfg.seed);
  RngStream order_rng = root.fork(1);
  RngStream noise_rng = root.fork(2);

  auto params = model::trainable_parameters(model);
  std::vector<AdamMoments> moments(params.size());
  std::optional<KurtosisWeights> kurtosis;
  std::optional<std::ofstream> log;
  if (cfg.metrics_log) {
    log.emplace(*cfg.metrics_log, std::ios::app);
    if (!*log) throw Error(ErrorKind::IoError, "cannot open metrics log '" + cfg.metrics_log->string() + "'");
  }

  std::size_t step = 0;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t_epoch = Clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_indices(order, order_rng);
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t lo = s * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      const Batch b = subset(data.train, std::span(order).subspan(lo, hi - lo), seq);
      const GateSet gates = model::realize_train(model, noise_rng);
      const bool reuse = cfg.kurtosis_weighting && kurtosis && step % cfg.kurtosis_every != 0;
      LossResult res = total_loss(model, b, gates, cfg, true, reuse ? &*kurtosis : nullptr);
      if (res.kurtosis) kurtosis = std::move(res.kurtosis);

      const auto grads = model::flatten_grads(model, res.grads);
      bool finite = std::isfinite(res.loss.total);
      double sq = 0.0;
      for (const auto& g : grads) {
        finite = finite && all_finite(g);
        sq += dot(g, g);
      }
      if (!finite) throw Diverged(step, model);

      ++step;
      const double scale = lr_scale(cfg, step - 1, total_steps);
      for (std::size_t p = 0; p < params.size(); ++p) {
        adamw_step(params[p].values, grads[p], moments[p], step, hyper_for(cfg, params[p].group, scale));
      }
      rec.train_loss += res.loss.total;
      rec.task_loss += res.loss.task;
      rec.sparsity_loss += res.loss.sparsity;
      rec.grad_norm += std::sqrt(sq);
    }
    const double k = static_cast<double>(steps_per_epoch);
    rec.train_loss /= k;
    rec.task_loss /= k;
    rec.sparsity_loss /= k;
    rec.grad_norm /= k;
    rec.val_metric = data.val.size() > 0 ? evaluate_metric(model, data.val) : 0.0;
    for (const auto& l : model.linears) {
      rec.open_rows.push_back(gates::expected_l0(l.gate_r));
      rec.open_cols.push_back(gates::expected_l0(l.gate_c));
    }
    rec.elapsed_ms = std::chrono::duration<double, std::milli>(Clock::now() - t_epoch).count();
    if (log) *log << format_record(rec, run.layer_names) << "\n" << std::flush;
    run.records.push_back(std::move(rec));
    run.snapshots.push_back(snapshot(model, epoch));
  }
  run.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t_start).count();
  return run;
}

Vector pack_parameters(GatedModel& m) {
  Vector flat;
  for (const auto& p : model::trainable_parameters(m)) flat.insert(flat.end(), p.values.begin(), p.values.end());
  return flat;
}

void unpack_parameters(GatedModel& m, const Vector& flat) {
  std::size_t pos = 0;
  for (auto& p : model::trainable_parameters(m)) {
    if (pos + p.values.size() > flat.size()) throw Error(ErrorKind::ShapeMismatch, "flat parameter vector too short");
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(pos), p.values.size(), p.values.begin());
    pos += p.values.size();
  }
  if (pos != flat.size()) throw Error(ErrorKind::ShapeMismatch, "flat parameter vector too long");
}

Vector pack_grads(const GatedModel& m, const ParamGrads& g) {
  Vector flat;
  for (const auto& v : model::flatten_grads(m, g)) flat.insert(flat.end(), v.begin(), v.end());
  return flat;
}

GradCheckReport grad_check(const GatedModel& m, const Batch& batch, const TrainConfig& cfg, double h,
                           double tolerance, double abs_floor, double exclusion) {
  RngStream rng = RngStream(cfg.seed).fork(0x6763);
  const GateSet noise = model::realize_train(m, rng);
  const LossResult base = total_loss(m, batch, model::realize_noise(m, noise), cfg, true);
  const KurtosisWeights* kw = base.kurtosis ? &*base.kurtosis : nullptr;
  const auto analytic = model::flatten_grads(m, base.grads);

  GatedModel probe = m;
  auto params = model::trainable_parameters(probe);
  auto loss_at = [&]() { return total_loss(probe, batch, model::realize_noise(probe, noise), cfg, false, kw).loss.total; };

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& ref = params[p];
    TensorCheck tc;
    tc.name = ref.name;
    // Gate vectors: skip coordinates near a clamp boundary and whole vectors near the hinge kink.
    const bool is_gate = ref.group == model::ParamGroup::Gates;
    const bool rows = is_gate && ref.name.ends_with(".mu_r");
    std::vector<bool> skip(ref.values.size(), false);
    if (is_gate) {
      const auto& l = m.linears[ref.linear];
      const auto& gate = rows ? l.gate_r : l.gate_c;
      const Vector& eps = rows ? noise[ref.linear].eps_r : noise[ref.linear].eps_c;
      for (std::size_t j = 0; j < gate.size(); ++j) {
        const double pre = gates::pre_clamp(gate.mu[j], eps[j]);
        skip[j] = std::abs(pre) < exclusion || std::abs(pre - 1.0) < exclusion;
      }
      if (cfg.lambda > 0.0) {
        const double e = gate_expectation(gate, weights_for(kw, rows, ref.linear));
        if (std::abs(e - layer_floor(cfg, l.name)) < exclusion) skip.assign(skip.size(), true);
      }
    }
    double max_diff = 0.0, max_num = 0.0, max_ana = 0.0;
    for (std::size_t j = 0; j < ref.values.size(); ++j) {
      if (skip[j]) {
        ++tc.skipped;
        continue;
      }
      const double saved = ref.values[j];
      ref.values[j] = saved + h;
      const double fp = loss_at();
      ref.values[j] = saved - h;
      const double fm = loss_at();
      ref.values[j] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double diff = std::abs(numeric - analytic[p][j]);
      if (diff > max_diff) {
        max_diff = diff;
        tc.worst_index = j;
      }
      max_num = std::max(max_num, std::abs(numeric));
      max_ana = std::max(max_ana, std::abs(analytic[p][j]));
      ++tc.checked;
    }
    tc.rel_err = max_diff / std::max({max_num, max_ana, abs_floor});
    if (tc.rel_err >= report.max_rel_err) {
      report.max_rel_err = tc.rel_err;
      report.worst_tensor = tc.name;
    }
    report.tensors.push_back(std::move(tc));
  }
  report.passed = report.max_rel_err < tolerance;
  return report;
}

}  // namespace finegates::train
