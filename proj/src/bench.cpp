#include "finegates/bench.h"

#include <fmt/format.h>
#include <sched.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <cstring>

namespace finegates::bench {

std::string to_string(Variant v) { return v == Variant::MaskedDense ? "masked_dense" : "compacted"; }

namespace {

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename T>
std::string dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

std::string shape_of(const model::GatedModel& m, const model::Batch& b) {
  if (m.config.arch == model::ArchKind::Mlp) return fmt::format("{}x{}", b.x.rows(), b.x.cols());
  return fmt::format("{}x{}", b.tokens.size() / m.config.seq_len, m.config.seq_len);
}

template <typename T>
bool bitwise_equal(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

}  // namespace

TimingStats summarize(std::vector<double> samples_ns) {
  TimingStats s;
  s.repeats = samples_ns.size();
  if (samples_ns.empty()) return s;
  s.median_ns = median_of(samples_ns);
  double total = 0.0;
  for (double v : samples_ns) total += v;
  s.mean_ns = total / static_cast<double>(samples_ns.size());
  std::vector<double> dev;
  for (double v : samples_ns) dev.push_back(std::abs(v - s.median_ns));
  s.mad_ns = median_of(std::move(dev));
  return s;
}

void ensure_single_thread() {
  for (const char* var : {"OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "EIGEN_NUM_THREADS"}) {
    if (const char* v = std::getenv(var)) {
      if (std::atoi(v) > 1) throw Error(ErrorKind::BadConfig, fmt::format("{}={} requests a multi-threaded kernel", var, v));
    }
  }
  const int cpu = sched_getcpu();
  if (cpu >= 0) {
    cpu_set_t set;
    CPU_ZERO(&set);
    CPU_SET(cpu, &set);
    sched_setaffinity(0, sizeof set, &set);
  }
}

template <typename T>
TimingStats time_forward(Variant variant, const compact::CompactModel<T>& cm, const model::Batch& batch,
                         std::size_t repeats, std::size_t warmup, BasicMatrix<T>* last_output) {
  using Clock = std::chrono::steady_clock;
  BasicMatrix<T> out;
  for (std::size_t w = 0; w < warmup; ++w) out = cm.forward(batch);
  std::vector<double> samples;
  samples.reserve(repeats);
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto t0 = Clock::now();
    out = cm.forward(batch);
    samples.push_back(std::chrono::duration<double, std::nano>(Clock::now() - t0).count());
  }
  TimingStats s = summarize(std::move(samples));
  s.variant = to_string(variant);
  s.warmup_repeats = warmup;
  s.dtype = dtype_name<T>();
  if (last_output) *last_output = std::move(out);
  return s;
}

template TimingStats time_forward<float>(Variant, const compact::CompactModel<float>&, const model::Batch&, std::size_t,
                                         std::size_t, BasicMatrix<float>*);
template TimingStats time_forward<double>(Variant, const compact::CompactModel<double>&, const model::Batch&,
                                          std::size_t, std::size_t, BasicMatrix<double>*);

model::MaskSet structured_masks(const model::GatedModel& m, double level, std::uint64_t seed) {
  if (!(level >= 0.0 && level < 1.0)) throw Error(ErrorKind::BadConfig, "removal level must lie in [0, 1)");
  model::MaskSet masks;
  for (const auto& l : m.linears) masks.push_back({Vector(l.out_features(), 1.0), Vector(l.in_features(), 1.0)});
  RngStream rng = RngStream(seed).fork(0x6d61);
  // Kill ceil(level * width) entries chosen uniformly from [offset, offset + width).
  auto kill = [&](Vector& mask, std::size_t offset, std::size_t width) {
    const auto count = static_cast<std::size_t>(std::ceil(level * static_cast<double>(width) - 1e-9));
    std::vector<std::size_t> idx(width);
    for (std::size_t i = 0; i < width; ++i) idx[i] = offset + i;
    shuffle_indices(idx, rng);
    for (std::size_t i = 0; i < count; ++i) mask[idx[i]] = 0.0;
  };
  if (m.config.arch == model::ArchKind::Mlp) {
    for (auto& mk : masks) kill(mk.rows, 0, mk.rows.size());
    return masks;
  }
  const std::size_t dh = m.config.d_model / m.config.n_heads;
  for (std::size_t b = 0; b < m.config.n_blocks; ++b) {
    const std::size_t base = b * model::GatedModel::kPerBlock;
    for (std::size_t h = 0; h < m.config.n_heads; ++h) {
      kill(masks[base + 0].rows, h * dh, dh);
      kill(masks[base + 2].rows, h * dh, dh);
    }
    kill(masks[base + 4].rows, 0, m.config.d_ff);
  }
  return masks;
}

template <typename T>
SpeedupRow bench_masks(const model::GatedModel& m, const model::MaskSet& masks, const model::Batch& batch,
                       std::size_t repeats, std::size_t warmup, std::string label) {
  if (repeats < kMinRepeats) throw Error(ErrorKind::BadConfig, fmt::format("at least {} repeats are required", kMinRepeats));
  const auto compaction = compact::compact_model(m, masks);
  const compact::CompactModel<T> compacted = compaction.model.template cast<T>();
  const compact::CompactModel<T> dense = compact::masked_dense<T>(m, masks);

  SpeedupRow row;
  row.label = std::move(label);
  row.removed_fraction = compaction.report.removed_fraction;
  const BasicMatrix<T> ref_dense = dense.forward(batch);
  const BasicMatrix<T> ref_compact = compacted.forward(batch);
  for (std::size_t i = 0; i < ref_dense.size(); ++i) {
    row.equivalence_error = std::max(row.equivalence_error,
                                     std::abs(static_cast<double>(ref_dense.values()[i]) - static_cast<double>(ref_compact.values()[i])));
  }

  // Interleave single-sample runs so slow drift hits both variants alike.
  std::vector<double> t_dense, t_compact;
  BasicMatrix<T> out_dense, out_compact;
  for (std::size_t w = 0; w < warmup; ++w) {
    out_dense = dense.forward(batch);
    out_compact = compacted.forward(batch);
  }
  using Clock = std::chrono::steady_clock;
  bool stable = true;
  for (std::size_t r = 0; r < repeats; ++r) {
    auto t0 = Clock::now();
    out_dense = dense.forward(batch);
    t_dense.push_back(std::chrono::duration<double, std::nano>(Clock::now() - t0).count());
    t0 = Clock::now();
    out_compact = compacted.forward(batch);
    t_compact.push_back(std::chrono::duration<double, std::nano>(Clock::now() - t0).count());
    stable = stable && bitwise_equal(out_dense, ref_dense) && bitwise_equal(out_compact, ref_compact);
  }
  row.outputs_stable = stable;
  row.dense = summarize(std::move(t_dense));
  row.compact = summarize(std::move(t_compact));
  for (auto* s : {&row.dense, &row.compact}) {
    s->warmup_repeats = warmup;
    s->dtype = dtype_name<T>();
    s->shape = shape_of(m, batch);
  }
  row.dense.variant = to_string(Variant::MaskedDense);
  row.compact.variant = to_string(Variant::Compacted);
  row.reduction = (row.dense.median_ns - row.compact.median_ns) / row.dense.median_ns;
  row.noise_band = (row.dense.mad_ns + row.compact.mad_ns) / row.dense.median_ns;
  return row;
}

template SpeedupRow bench_masks<float>(const model::GatedModel&, const model::MaskSet&, const model::Batch&, std::size_t,
                                       std::size_t, std::string);
template SpeedupRow bench_masks<double>(const model::GatedModel&, const model::MaskSet&, const model::Batch&, std::size_t,
                                        std::size_t, std::string);

namespace {

void sort_rows(std::vector<SpeedupRow>& rows) {
  std::stable_sort(rows.begin(), rows.end(),
                   [](const SpeedupRow& a, const SpeedupRow& b) { return a.removed_fraction < b.removed_fraction; });
}

}  // namespace

std::string speedup_report(std::vector<SpeedupRow> rows) {
  sort_rows(rows);
  std::string s = fmt::format("{:<8} {:>9} {:>14} {:>12} {:>14} {:>12} {:>10} {:>8} {:>7} {:>6}\n", "label", "removed",
                              "dense_med_ns", "dense_mad", "compact_med_ns", "compact_mad", "reduction", "noise", "repeat",
                              "stable");
  for (const auto& r : rows) {
    s += fmt::format("{:<8} {:>8.2f}% {:>14.0f} {:>12.0f} {:>14.0f} {:>12.0f} {:>9.2f}% {:>7.2f}% {:>7} {:>6}\n", r.label,
                     100.0 * r.removed_fraction, r.dense.median_ns, r.dense.mad_ns, r.compact.median_ns, r.compact.mad_ns,
                     100.0 * r.reduction, 100.0 * r.noise_band, r.dense.repeats, r.outputs_stable ? "yes" : "no");
  }
  if (!rows.empty()) s += fmt::format("dtype={} shape={}\n", rows.front().dense.dtype, rows.front().dense.shape);
  return s;
}

std::string plot_data(std::vector<SpeedupRow> rows) {
  sort_rows(rows);
  std::string s = "removed_fraction\treduction_percent\n";
  for (const auto& r : rows) s += fmt::format("{:.6f}\t{:.4f}\n", r.removed_fraction, 100.0 * r.reduction);
  return s;
}

}  // namespace finegates::bench
