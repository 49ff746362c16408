#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "finegates/compact.h"

using namespace finegates;
using namespace finegates::compact;
using model::GatedModel;
using model::MaskSet;

namespace {

MaskSet ones(const GatedModel& m) {
  MaskSet s;
  for (const auto& l : m.linears) s.push_back({Vector(l.out_features(), 1.0), Vector(l.in_features(), 1.0)});
  return s;
}

MaskSet random_masks(const GatedModel& m, RngStream& rng, double keep) {
  MaskSet s = ones(m);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!m.linears[i].gated) continue;
    for (auto& v : s[i].rows) v = rng.next_uniform() < keep ? 1.0 : 0.0;
    for (auto& v : s[i].cols) v = rng.next_uniform() < keep ? 1.0 : 0.0;
    s[i].rows[rng.next_below(s[i].rows.size())] = 1.0;
    s[i].cols[rng.next_below(s[i].cols.size())] = 1.0;
  }
  return s;
}

GatedModel mlp(std::vector<std::size_t> widths, std::uint64_t seed, std::size_t outputs = 3) {
  model::ModelConfig c;
  c.widths = std::move(widths);
  c.num_outputs = outputs;
  c.seed = seed;
  GatedModel m = model::build_model(c);
  RngStream rng(seed + 1);
  for (auto& l : m.linears)
    for (auto& b : l.bias) b = rng.next_normal();
  return m;
}

GatedModel transformer(std::uint64_t seed, std::size_t rank = 0) {
  model::ModelConfig c;
  c.arch = model::ArchKind::Transformer;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 24;
  c.n_blocks = 2;
  c.seq_len = 5;
  c.vocab = 11;
  c.num_outputs = 4;
  c.seed = seed;
  if (rank > 0) {
    c.lowrank_rank = rank;
  }
  GatedModel m = model::build_model(c);
  RngStream rng(seed + 1);
  for (auto& l : m.linears)
    for (auto& b : l.bias) b = 0.1 * rng.next_normal();
  return m;
}

// Hidden activations of a masked MLP computed directly from W0, masks and biases.
std::vector<Matrix> masked_hidden(const GatedModel& m, const MaskSet& masks, const Matrix& x) {
  std::vector<Matrix> out;
  Matrix cur = x;
  for (std::size_t i = 0; i < m.linears.size(); ++i) {
    const auto& l = m.linears[i];
    Matrix h(cur.rows(), l.out_features());
    for (std::size_t s = 0; s < cur.rows(); ++s)
      for (std::size_t r = 0; r < l.out_features(); ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < l.in_features(); ++c) acc += l.w0(r, c) * masks[i].cols[c] * cur(s, c);
        h(s, r) = gelu(masks[i].rows[r] * (acc + l.bias[r]));
      }
    out.push_back(h);
    cur = h;
  }
  return out;
}

}  // namespace

TEST_CASE("binarize thresholds and ambiguity") {
  GatedModel m = mlp({4, 5}, 1);
  auto& g = m.linears[0];
  g.gate_r.mu = {0.5, -1.0, 0.0, -0.2, 0.3};
  const auto b = binarize(m);
  CHECK(b.masks[0].rows == Vector{1.0, 0.0, 0.0, 0.0, 1.0});
  CHECK(b.ambiguity_mass == 3);
  const auto s = binarize(m, Policy::Support);
  CHECK(s.masks[0].rows == Vector{1.0, 0.0, 1.0, 1.0, 1.0});
  CHECK(parse_policy("support") == Policy::Support);
  CHECK_THROWS_AS(parse_policy("median"), Error);
}

TEST_CASE("converged gates: binary forward equals eval forward") {
  GatedModel m = mlp({6, 7, 5}, 2);
  RngStream rng(3);
  for (auto& l : m.linears) {
    for (auto& mu : l.gate_r.mu) mu = rng.next_uniform() < 0.6 ? 0.5 : -1.0;
    for (auto& mu : l.gate_c.mu) mu = rng.next_uniform() < 0.6 ? 0.9 : -0.7;
  }
  const auto bin = binarize(m);
  CHECK(bin.ambiguity_mass == 0);
  const model::Batch batch = random_batch(m.config, 8, 1);
  const MaskSet masks = bin.masks;
  CHECK(model::model_forward(m, batch, model::Mode::Binary, nullptr, &masks).values() ==
        model::model_forward(m, batch, model::Mode::Eval).values());
}

TEST_CASE("all-ones masks keep the dense model") {
  const GatedModel m = mlp({5, 6, 4}, 4);
  const auto c = compact_model(m, ones(m));
  CHECK(c.report.params_removed == 0);
  CHECK(c.report.removed_fraction == 0.0);
  CHECK(verify_equivalence(m, c.model, 16) == 0.0);
  const GatedModel t = transformer(5);
  const auto ct = compact_model(t, ones(t));
  CHECK(ct.report.removed_fraction == 0.0);
  CHECK(verify_equivalence(t, ct.model, 8) == 0.0);
}

TEST_CASE("structural count for 100-64-10 with 32 dead hidden rows") {
  const GatedModel m = mlp({100, 64, 10}, 6);
  MaskSet masks = ones(m);
  for (std::size_t r = 0; r < 64; r += 2) masks[0].rows[r] = 0.0;
  const auto c = compact_model(m, masks);
  CHECK(c.model.layers[0].weight_t.rows() == 100);
  CHECK(c.model.layers[0].weight_t.cols() == 32);
  CHECK(c.model.layers[1].weight_t.rows() == 32);
  CHECK(c.model.layers[1].weight_t.cols() == 10);
  CHECK(c.report.params_removed == 32 * 100 + 10 * 32 + 32);
  CHECK(c.report.params_total == 64 * 100 + 64 + 10 * 64 + 10);
  for (const auto& l : c.report.layers) CHECK(l.params_kept <= l.params_total);
  CHECK(verify_equivalence(m, c.model, 32) <= 1e-12);
}

TEST_CASE("zero propagation is sound on narrow networks") {
  RngStream rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const GatedModel m = mlp({3 + rng.next_below(6), 2 + rng.next_below(7), 2 + rng.next_below(7), 2 + rng.next_below(7)},
                             100 + trial);
    const MaskSet masks = random_masks(m, rng, 0.6);
    Compaction c;
    try {
      c = compact_model(m, masks);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::EmptyLayer);
      continue;
    }
    const model::Batch batch = random_batch(m.config, 64, trial);
    const auto hidden = masked_hidden(m, masks, batch.x);
    for (std::size_t i = 1; i < m.linears.size(); ++i) {
      const auto& kept = c.report.layers[i].kept_cols;
      for (std::size_t j = 0; j < m.linears[i].in_features(); ++j) {
        if (std::find(kept.begin(), kept.end(), j) != kept.end()) continue;
        if (masks[i].cols[j] == 0.0) continue;
        // Dropped although its own mask is on: the feature must be identically zero.
        for (std::size_t s = 0; s < batch.size(); ++s) CHECK(hidden[i - 1](s, j) == 0.0);
      }
    }
    CHECK(verify_equivalence(m, c.model, 32) <= 1e-12);
  }
}

TEST_CASE("dead mlp_i row removes the paired mlp_o column") {
  const GatedModel t = transformer(8);
  MaskSet masks = ones(t);
  masks[4].rows[3] = 0.0;
  const auto c = compact_model(t, masks);
  CHECK(masks[5].cols[3] == 1.0);
  const auto& kept = c.report.layers[5].kept_cols;
  CHECK(std::find(kept.begin(), kept.end(), 3u) == kept.end());
  CHECK(c.report.layers[5].cols_kept == 23);
  CHECK(verify_equivalence(t, c.model, 16) <= 1e-12);
}

TEST_CASE("random masks on random models are exact in 64-bit") {
  RngStream rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const GatedModel m = trial % 2 ? transformer(200 + trial, trial % 4 == 1 ? 2 : 0) : mlp({7, 9, 8}, 200 + trial);
    const MaskSet masks = random_masks(m, rng, 0.7);
    const auto c = compact_model(m, masks);
    CHECK(verify_equivalence(m, c.model, 16, trial) <= 1e-12);
    CHECK(verify_equivalence(m, c.model.cast<float>(), 16, trial) <= 1e-5);
    CHECK(c.report.removed_fraction >= 0.0);
    CHECK(c.report.removed_fraction <= 1.0);
    std::size_t kept = 0;
    for (const auto& l : c.model.layers) kept += l.kept_params();
    CHECK(kept + c.report.params_removed == c.report.params_total);
  }
}

TEST_CASE("masked dense matches the binary forward") {
  const GatedModel t = transformer(12);
  RngStream rng(12);
  const MaskSet masks = random_masks(t, rng, 0.5);
  CHECK(verify_equivalence(t, masked_dense<double>(t, masks), 8) <= 1e-12);
}

TEST_CASE("corrupted index map is detected") {
  const GatedModel m = mlp({6, 8, 5}, 13);
  RngStream rng(13);
  const MaskSet masks = random_masks(m, rng, 0.7);
  auto c = compact_model(m, masks);
  REQUIRE(c.model.layers[0].in_index.size() >= 2);
  std::swap(c.model.layers[0].in_index[0], c.model.layers[0].in_index[1]);
  CHECK(verify_equivalence(m, c.model, 16) > 1e-6);
}

TEST_CASE("empty layer is an error naming the layer") {
  const GatedModel m = mlp({4, 5, 3}, 14);
  MaskSet masks = ones(m);
  for (auto& v : masks[1].rows) v = 0.0;
  try {
    compact_model(m, masks);
    FAIL("expected EmptyLayer");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::EmptyLayer);
    CHECK(std::string(e.what()).find(m.linears[1].name) != std::string::npos);
  }
}

TEST_CASE("densify then compact reproduces the compact model") {
  const GatedModel t = transformer(15);
  RngStream rng(15);
  const auto c = compact_model(t, random_masks(t, rng, 0.6));
  const GatedModel d = densify(c.model);
  const auto again = compact_model(d, binarize(d).masks);
  REQUIRE(again.model.layers.size() == c.model.layers.size());
  for (std::size_t i = 0; i < c.model.layers.size(); ++i) {
    CHECK(again.model.layers[i].in_index == c.model.layers[i].in_index);
    CHECK(again.model.layers[i].out_index == c.model.layers[i].out_index);
    CHECK(again.model.layers[i].weight_t.values() == c.model.layers[i].weight_t.values());
    CHECK(again.model.layers[i].bias == c.model.layers[i].bias);
  }
  CHECK(again.model.head.weight_t.values() == c.model.head.weight_t.values());
}

TEST_CASE("compact save and load") {
  const GatedModel t = transformer(16);
  RngStream rng(16);
  auto c = compact_model(t, random_masks(t, rng, 0.6));
  c.report.equivalence_error = verify_equivalence(t, c.model, 8);
  const auto path = std::filesystem::temp_directory_path() / "fg_test_compact.fgck";
  save_compact(c.model, c.report, path);
  const auto back = load_compact(path);
  const auto batch = random_batch(t.config, 6, 3);
  CHECK(back.forward(batch).values() == c.model.forward(batch).values());
  CHECK(c.report.to_text().find("removed_fraction=") != std::string::npos);
  std::filesystem::remove(path);
}

TEST_CASE("gate statistics") {
  model::ModelConfig mc;
  mc.widths = {4, 6, 5};
  mc.num_outputs = 2;
  GatedModel m = model::build_model(mc);
  m.head.w.fill(0.0);  // no task signal reaches the gates
  RngStream rng(17);
  train::Split s;
  s.train = random_batch(mc, 32, 1);
  for (int i = 0; i < 32; ++i) s.train.labels.push_back(static_cast<std::int32_t>(rng.next_below(2)));
  s.val = s.train;
  train::TrainConfig cfg;
  cfg.epochs = 6;
  cfg.lambda = 5.0;
  cfg.target_sparsity = 0.9;
  cfg.lr_gates = 0.05;
  cfg.lr_bias_head = 1e-12;
  const auto run = train::train(m, s, cfg);
  const auto st = gate_statistics(run);
  CHECK(st.layers.size() == m.num_gated());
  for (std::size_t i = 0; i < st.layers.size(); ++i) {
    CHECK(st.row_means[i][0] == 1.0);
    CHECK(st.col_means[i][0] == 1.0);
    for (std::size_t e = 1; e < st.epochs.size(); ++e) {
      CHECK(st.row_means[i][e] <= st.row_means[i][e - 1]);
      CHECK(st.col_means[i][e] <= st.col_means[i][e - 1]);
    }
    CHECK(st.row_means[i].back() < 1.0);
  }
  train::TrainRun empty;
  CHECK_THROWS_AS(gate_statistics(empty), Error);
}
