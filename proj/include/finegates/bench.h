#pragma once

#include <string>
#include <vector>

#include "finegates/compact.h"

namespace finegates::bench {

enum class Variant { MaskedDense, Compacted };
std::string to_string(Variant v);

struct TimingStats {
  std::string variant;
  double median_ns = 0.0;
  double mad_ns = 0.0;
  double mean_ns = 0.0;
  std::size_t repeats = 0;
  std::size_t warmup_repeats = 0;
  std::string shape;
  std::string dtype;
};

/// Median and median absolute deviation of raw samples.
TimingStats summarize(std::vector<double> samples_ns);

/// Throws BadConfig when a threading environment variable asks for more than
/// one thread, then pins the process to the CPU it is running on.
void ensure_single_thread();

inline constexpr std::size_t kMinRepeats = 30;

/// Timed forwards after `warmup` untimed ones. `last_output` receives the
/// logits of the final timed repeat.
template <typename T>
TimingStats time_forward(Variant variant, const compact::CompactModel<T>& cm, const model::Batch& batch,
                         std::size_t repeats, std::size_t warmup = 3, BasicMatrix<T>* last_output = nullptr);

/// Kill `level` of every head's q/k dims, v/o dims and of the FFN hidden units
/// (transformer), or of every hidden layer's rows (MLP). Chosen by a seeded
/// shuffle; counts round up.
model::MaskSet structured_masks(const model::GatedModel& m, double level, std::uint64_t seed);

struct SpeedupRow {
  std::string label;
  double removed_fraction = 0.0;
  TimingStats dense;
  TimingStats compact;
  /// (t_dense - t_compact) / t_dense on medians.
  double reduction = 0.0;
  /// (MAD_dense + MAD_compact) / t_dense.
  double noise_band = 0.0;
  /// Timed logits equal untimed logits bit for bit, for both variants.
  bool outputs_stable = false;
  double equivalence_error = 0.0;
};

/// Sorted by removed fraction.
std::string speedup_report(std::vector<SpeedupRow> rows);
/// Two tab-separated columns: removed fraction, reduction percent.
std::string plot_data(std::vector<SpeedupRow> rows);

/// Masked-dense vs compacted timing at one set of masks. Repeats interleave
/// the two variants.
template <typename T>
SpeedupRow bench_masks(const model::GatedModel& m, const model::MaskSet& masks, const model::Batch& batch,
                       std::size_t repeats, std::size_t warmup, std::string label);

}  // namespace finegates::bench
