#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "finegates/compact.h"
#include "finegates/data.h"

namespace finegates::config {

enum class DataSource { Planted, Csv, Tokens };

struct DataConfig {
  DataSource source = DataSource::Planted;
  std::filesystem::path path;
  std::string label_column = "label";
  /// Empty: numeric feature columns.
  std::string token_column;
  std::uint64_t seed = 0;
  data::PlantedSpec planted;
  std::size_t seq_len = 8;
  std::size_t vocab = 16;
};

/// Flat key=value run description. Sections are dotted key prefixes
/// (run., data., model., train., compact., gradcheck., compare., bench.,
/// convergence.).
struct RunConfig {
  std::string mode = "train";
  std::filesystem::path out_dir = "out";
  DataConfig data;
  model::ModelConfig model;
  train::TrainConfig train;
  compact::Policy policy = compact::Policy::Tau;
  double tau = 0.5;
  double gradcheck_h = 1e-6;
  double gradcheck_tolerance = 1e-6;
  std::size_t gradcheck_batch = 8;
  /// Gradient magnitude below which the check compares absolute error.
  double gradcheck_abs_floor = 1e-3;
  double compare_adapter_lr = 1e-2;
  std::size_t compare_lora_rank = 4;
  std::vector<double> bench_levels{0.0, 0.2, 0.4};
  std::size_t bench_repeats = 30;
  std::size_t bench_warmup = 3;
  std::size_t bench_batch = 32;
  /// Full-batch descent: every gate mean starts here.
  double convergence_mu_init = 0.25;
  std::size_t convergence_max_steps = 5000;
  double convergence_eta_factor = 0.5;
  double convergence_grad_tol = 1e-5;
  std::size_t convergence_power_iters = 100;
  /// Descend on gate means only.
  bool convergence_gates_only = true;

  /// Keys present in the parsed text.
  std::set<std::string> explicit_keys;
};

/// Lines of `key = value`; '#' starts a comment. Unknown keys and malformed
/// values are BadConfig errors naming the key and line.
RunConfig parse_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_config(const std::filesystem::path& path);

/// Every key with its resolved value.
std::map<std::string, std::string> to_map(const RunConfig& c);
std::string to_text(const RunConfig& c);
/// Writes `resolved_config.txt` into `dir`.
void write_resolved(const RunConfig& c, const std::filesystem::path& dir);

data::Dataset load_data(const RunConfig& c);
/// Fill model shape keys the text left unset from the data (input width,
/// hidden width, outputs, task, sequence length, vocabulary), then check the
/// head width against the label cardinality.
void fit_to_data(RunConfig& c, const data::Dataset& d);
/// Planted data with the matching MLP shape installs the student weights;
/// everything else gets seeded random frozen weights.
model::GatedModel build_run_model(const RunConfig& c, const data::Dataset& d);

}  // namespace finegates::config
