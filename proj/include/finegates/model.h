#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "finegates/layers.h"

namespace finegates::model {

enum class ArchKind { Mlp, Transformer };
enum class TaskKind { Classification, Regression };
/// Gates: FineGates. Lora: gates fixed at one plus a trainable low-rank term.
/// Ungated: gates fixed at one, only biases and head train.
enum class Method { Gates, Lora, Ungated };

std::string to_string(ArchKind a);
std::string to_string(TaskKind t);
std::string to_string(Method m);
ArchKind parse_arch(const std::string& s);
TaskKind parse_task(const std::string& s);
Method parse_method(const std::string& s);

struct ModelConfig {
  ArchKind arch = ArchKind::Mlp;
  /// MLP only: input width followed by the output width of every gated layer.
  std::vector<std::size_t> widths{8, 16};
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t d_ff = 64;
  std::size_t n_blocks = 1;
  std::size_t seq_len = 8;
  std::size_t vocab = 16;
  /// Head width: number of classes, or regression outputs.
  std::size_t num_outputs = 2;
  TaskKind task = TaskKind::Classification;
  Method method = Method::Gates;
  /// False excludes the two FFN matrices from gating.
  bool gate_mlp = true;
  /// Rank of the low-rank term (FineGates extension, or the LoRA baseline).
  std::size_t lowrank_rank = 0;
  double sigma = gates::kDefaultSigma;
  bool train_bias = true;
  std::uint64_t seed = 0;

  void validate() const;
  std::map<std::string, std::string> to_map() const;
  static ModelConfig from_map(const std::map<std::string, std::string>& m);
};

struct LayerNorm {
  Vector gamma;
  Vector beta;
};

struct Head {
  Matrix w;
  Vector b;
};

/// A stack of gated projections plus an ungated classifier head. W0,
/// embeddings and layer norms are frozen.
class GatedModel {
 public:
  ModelConfig config;
  std::vector<layers::GatedLinear> linears;
  Matrix token_embedding;
  Matrix position_embedding;
  /// Transformer: (ln1, ln2) per block, then the final norm.
  std::vector<LayerNorm> norms;
  Head head;

  /// Matrices contributing sparsity terms (L).
  std::size_t num_gated() const;
  std::size_t frozen_parameter_count() const;
  std::size_t trainable_parameter_count() const;
  /// Index of a projection inside a transformer block (q, k, v, o, mlp_i, mlp_o).
  static constexpr std::size_t kPerBlock = 6;
};

/// Initialize frozen weights with seeded He-style draws; every mu = 0.5.
GatedModel build_model(const ModelConfig& config);

/// Install new frozen tensors (e.g. a pretrained or teacher network).
struct FrozenMlpWeights {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
  Head head;
};
GatedModel build_model(const ModelConfig& config, const FrozenMlpWeights& frozen);

/// Same frozen tensors and biases under another adaptation method. Gates
/// restart open; low-rank factors are drawn from `seed`.
GatedModel with_method(const GatedModel& base, Method method, std::size_t rank, std::uint64_t seed);

struct Batch {
  Matrix x;
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> labels;
  Matrix targets;
  std::size_t size() const;
};

struct LayerMask {
  Vector rows;
  Vector cols;
};
using MaskSet = std::vector<LayerMask>;

using GateSet = std::vector<layers::GateValues>;

GateSet realize_train(const GatedModel& m, RngStream& rng);
GateSet realize_eval(const GatedModel& m);
GateSet realize_binary(const GatedModel& m, const MaskSet& masks);
/// Noise laid out as for realize_train; used to freeze eps across evaluations.
GateSet realize_noise(const GatedModel& m, const GateSet& noise);

enum class Mode { Train, Eval, Binary };

struct BlockTape {
  Matrix x_in;
  Matrix xhat1;
  Vector rstd1;
  Matrix q, k, v;
  std::vector<Matrix> probs;
  Matrix ctx;
  Matrix x_mid;
  Matrix xhat2;
  Vector rstd2;
  Matrix u;
  Matrix a;
};

struct Tape {
  std::vector<layers::LinearCache> linear;
  std::vector<Matrix> mlp_pre;
  std::vector<BlockTape> blocks;
  Matrix xhat_final;
  Vector rstd_final;
  Matrix features;
  Matrix logits;
  std::size_t batch = 0;
};

/// Forward with explicit gate values; fills `tape` when given.
Matrix forward(const GatedModel& m, const Batch& batch, const GateSet& gates, Tape* tape = nullptr);

/// Convenience: realize gates according to mode, then forward.
Matrix model_forward(const GatedModel& m, const Batch& batch, Mode mode, RngStream* rng = nullptr,
                     const MaskSet* masks = nullptr);

struct ParamGrads {
  std::vector<layers::LinearGrads> linear;
  Matrix head_w;
  Vector head_b;
};

/// Backpropagate dLoss/dlogits through the tape.
ParamGrads backward(const GatedModel& m, const Tape& tape, const Matrix& dlogits);

enum class ParamGroup { Gates, BiasHead, LowRank };

/// Mutable view over one trainable tensor.
struct ParamRef {
  std::string name;
  std::span<double> values;
  ParamGroup group;
  /// Index into `linears`, or npos for the head.
  std::size_t linear;
};

std::vector<ParamRef> trainable_parameters(GatedModel& m);
/// Flatten grads into the order of trainable_parameters().
std::vector<Vector> flatten_grads(const GatedModel& m, const ParamGrads& g);

/// Frozen-tensor digest (FNV-1a over W0 bytes).
std::uint64_t frozen_hash(const GatedModel& m);

// Persistence.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  std::string dtype;  // "f64" or "i64"
  std::vector<std::size_t> shape;
  std::vector<std::uint8_t> bytes;
};

/// "FGCK", u32 version, u64 manifest length, text manifest, blob. Little-endian.
struct Container {
  std::string kind;
  std::map<std::string, std::string> meta;
  std::vector<TensorRecord> tensors;

  const TensorRecord& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

void write_container(const Container& c, const std::filesystem::path& path);
Container read_container(const std::filesystem::path& path);

TensorRecord f64_tensor(std::string name, std::vector<std::size_t> shape, std::span<const double> values);
TensorRecord i64_tensor(std::string name, std::span<const std::int64_t> values);
std::vector<double> as_f64(const TensorRecord& t);
std::vector<std::int64_t> as_i64(const TensorRecord& t);

void save_checkpoint(const GatedModel& m, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& extra_meta = {});
GatedModel load_checkpoint(const std::filesystem::path& path, std::map<std::string, std::string>* extra_meta = nullptr);

std::size_t expected_tensor_count(const ModelConfig& c);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

}  // namespace finegates::model
