#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "finegates/model.h"
#include "finegates/train.h"

namespace finegates::compact {

enum class Policy { Tau, Support };

std::string to_string(Policy p);
Policy parse_policy(const std::string& s);

struct Binarization {
  model::MaskSet masks;
  /// Deterministic gate values strictly inside (0.05, 0.95).
  std::size_t ambiguity_mass = 0;
};

/// mask = 1 iff the deterministic gate exceeds tau (Tau), or iff it is
/// nonzero, i.e. mu > -0.5 (Support). Ungated layers get all-ones masks.
Binarization binarize(const model::GatedModel& m, Policy policy = Policy::Tau, double tau = 0.5);

/// One pruned projection. `weight_t` is stored transposed (kept_in x kept_out)
/// so the forward is a single matmul_into.
template <typename T>
struct CompactLayer {
  std::string name;
  BasicMatrix<T> weight_t;
  std::vector<T> bias;
  /// Kept input feature ids in the producer's full width.
  std::vector<std::size_t> in_index;
  /// Kept output feature ids in this layer's full width.
  std::vector<std::size_t> out_index;
  std::size_t in_full = 0;
  std::size_t out_full = 0;

  std::size_t kept_params() const { return weight_t.size() + bias.size(); }
  BasicMatrix<T> forward(const BasicMatrix<T>& x_kept) const;
};

/// Per-head column offsets into a compacted q/k or v/ctx block.
struct HeadLayout {
  std::vector<std::size_t> qk_offsets;
  std::vector<std::size_t> vo_offsets;
};

/// Physically pruned model. The residual stream keeps full width; projections
/// gather from it and scatter back through their index maps.
template <typename T>
class CompactModel {
 public:
  model::ModelConfig config;
  /// Same order as GatedModel::linears.
  std::vector<CompactLayer<T>> layers;
  CompactLayer<T> head;
  BasicMatrix<T> token_embedding;
  BasicMatrix<T> position_embedding;
  std::vector<std::vector<T>> norm_gamma;
  std::vector<std::vector<T>> norm_beta;
  std::vector<HeadLayout> heads;
  /// Masks the model was compacted with.
  model::MaskSet masks;

  /// Logits for a batch (features or token sequences).
  BasicMatrix<T> forward(const model::Batch& batch) const;

  template <typename U>
  CompactModel<U> cast() const;
};

struct LayerReport {
  std::string name;
  std::size_t rows_kept = 0;
  std::size_t rows_total = 0;
  std::size_t cols_kept = 0;
  std::size_t cols_total = 0;
  std::size_t params_total = 0;
  std::size_t params_kept = 0;
  std::vector<std::size_t> kept_rows;
  std::vector<std::size_t> kept_cols;
};

struct CompactionReport {
  Policy policy = Policy::Tau;
  double tau = 0.5;
  std::size_t ambiguity_mass = 0;
  std::vector<LayerReport> layers;
  /// Frozen weights and biases of all projections.
  std::size_t params_total = 0;
  std::size_t params_removed = 0;
  double removed_fraction = 0.0;
  std::size_t head_cols_total = 0;
  std::size_t head_cols_kept = 0;
  /// Filled by verify_equivalence; negative until measured.
  double equivalence_error = -1.0;

  std::string to_text() const;
  std::string to_table() const;
};

struct Compaction {
  CompactModel<double> model;
  CompactionReport report;
};

/// Drop dead rows and columns, plus every column fed by a dead producer row
/// (and every row whose consumer column is dead). Throws EmptyLayer when a
/// projection would lose all rows or columns.
Compaction compact_model(const model::GatedModel& m, const model::MaskSet& masks);

/// Same forward code path with full index maps and masked weights.
template <typename T>
CompactModel<T> masked_dense(const model::GatedModel& m, const model::MaskSet& masks);

/// Random inputs for equivalence checks and timing.
model::Batch random_batch(const model::ModelConfig& c, std::size_t n, std::uint64_t seed);

/// max |masked Binary forward - compact forward| over `n_samples` random inputs.
double verify_equivalence(const model::GatedModel& m, const CompactModel<double>& cm, std::size_t n_samples,
                          std::uint64_t seed = 0);
/// 32-bit compact model against the 64-bit masked forward.
double verify_equivalence(const model::GatedModel& m, const CompactModel<float>& cm, std::size_t n_samples,
                          std::uint64_t seed = 0);

/// Full-width GatedModel whose dropped weights are zero and whose gates encode
/// the kept sets (mu = 0.5 kept, mu = -1 dropped).
model::GatedModel densify(const CompactModel<double>& cm);

struct GateStatistics {
  std::vector<std::string> layers;
  std::vector<std::size_t> epochs;
  /// [layer][epoch] mean deterministic gate value.
  std::vector<std::vector<double>> row_means;
  std::vector<std::vector<double>> col_means;

  std::string to_table() const;
};

GateStatistics gate_statistics(const train::TrainRun& run);

void save_compact(const CompactModel<double>& cm, const CompactionReport& report, const std::filesystem::path& path);
CompactModel<double> load_compact(const std::filesystem::path& path);

}  // namespace finegates::compact
