#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "finegates/train.h"

namespace finegates::data {

struct PlantedSpec {
  std::size_t d_in = 16;
  std::size_t hidden = 64;
  /// Fraction of teacher hidden rows (and input columns) that are nonzero.
  double keep_frac = 0.6;
  std::size_t n_samples = 2000;
  /// Classification: probability of replacing a label with another class.
  /// Regression: standard deviation of additive target noise.
  double noise = 0.0;
  std::size_t num_classes = 3;
  bool regression = false;
  double val_frac = 0.2;
  /// When set, the student's planted block is the teacher block divided by
  /// gate values drawn from [0.6, 0.9] per row and column, so the teacher is
  /// matched at interior gates instead of at gate value one.
  bool interior_gates = false;

  void validate() const;
};

struct Provenance {
  enum class Kind { Csv, Planted, Tokens };
  Kind kind = Kind::Planted;
  std::filesystem::path path;
  std::uint64_t seed = 0;
  PlantedSpec spec;
};

struct Dataset {
  /// Every sample; features in `x` or token ids in `tokens`.
  model::Batch samples;
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> val_idx;
  /// Classes for classification, target width for regression.
  std::size_t num_outputs = 0;
  model::TaskKind task = model::TaskKind::Classification;
  std::size_t seq_len = 0;
  std::size_t vocab = 0;
  Provenance provenance;

  /// Planted task only: teacher hidden rows and input columns that are nonzero.
  std::vector<std::size_t> planted_rows;
  std::vector<std::size_t> planted_cols;
  /// Gate values that reproduce the teacher (all ones unless interior_gates).
  Vector planted_gate_rows;
  Vector planted_gate_cols;
  /// Planted task only: frozen weights for the student. Planted rows copy the
  /// teacher; the other rows are random over the unplanted inputs. The head
  /// starts at the teacher head.
  std::optional<model::FrozenMlpWeights> student;

  std::size_t size() const { return samples.size(); }
  train::Split split() const;
  /// Throws BadConfig unless the head width matches the label cardinality.
  void check_head(const model::ModelConfig& c) const;
};

struct CsvSchema {
  std::string label_column = "label";
  /// Column holding space-separated token ids; all other columns are ignored.
  std::optional<std::string> token_column;
  bool regression = false;
  double val_frac = 0.2;
  std::uint64_t split_seed = 0;
};

/// Header row, then one sample per line. Classification labels are integers
/// remapped to 0..c-1 in ascending order.
Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema = {});

/// Samples from a frozen teacher MLP whose hidden layer has exactly
/// ceil(keep_frac * hidden) nonzero rows reading ceil(keep_frac * d_in) inputs.
Dataset generate_planted(std::uint64_t seed, const PlantedSpec& spec);

/// Token sequences labelled by (sum of ids) mod num_classes.
Dataset generate_tokens(std::uint64_t seed, std::size_t n_samples, std::size_t seq_len, std::size_t vocab,
                        std::size_t num_classes, double val_frac = 0.2);

/// Model shape for a planted or CSV feature dataset: widths {d_in, hidden...}.
model::ModelConfig mlp_config(const Dataset& d, std::vector<std::size_t> hidden);

struct SupportScore {
  std::size_t true_pos = 0;
  std::size_t false_pos = 0;
  std::size_t false_neg = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Kept entries of a 0/1 mask against the planted index set.
SupportScore support_f1(const std::vector<std::size_t>& planted, const Vector& kept);

}  // namespace finegates::data
