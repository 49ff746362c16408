#include "finegates/data.h"

#include <fmt/format.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace finegates::data {

void PlantedSpec::validate() const {
  if (!(keep_frac > 0.0 && keep_frac <= 1.0)) throw Error(ErrorKind::BadSpec, "keep_frac must lie in (0, 1]");
  if (d_in == 0 || hidden == 0 || n_samples < 2) throw Error(ErrorKind::BadSpec, "d_in, hidden and n_samples must be positive");
  if (num_classes < (regression ? 1u : 2u)) throw Error(ErrorKind::BadSpec, "too few outputs");
  if (!(noise >= 0.0) || (!regression && noise >= 1.0)) throw Error(ErrorKind::BadSpec, "noise out of range");
  if (!(val_frac > 0.0 && val_frac < 1.0)) throw Error(ErrorKind::BadSpec, "val_frac must lie in (0, 1)");
}

train::Split Dataset::split() const {
  return {train::subset(samples, train_idx, seq_len), train::subset(samples, val_idx, seq_len)};
}

void Dataset::check_head(const model::ModelConfig& c) const {
  if (c.num_outputs != num_outputs) {
    throw Error(ErrorKind::BadConfig,
                fmt::format("model.num_outputs={} but the data has {} {}", c.num_outputs, num_outputs,
                            task == model::TaskKind::Classification ? "classes" : "targets"));
  }
  if (c.task != task) throw Error(ErrorKind::BadConfig, "model.task does not match the data");
}

namespace {

void seeded_split(Dataset& d, std::uint64_t seed, double val_frac) {
  const std::size_t n = d.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  RngStream rng = RngStream(seed).fork(0x73706c);
  shuffle_indices(order, rng);
  auto n_val = static_cast<std::size_t>(std::llround(val_frac * static_cast<double>(n)));
  n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  d.val_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  d.train_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(d.val_idx.begin(), d.val_idx.end());
  std::sort(d.train_idx.begin(), d.train_idx.end());
}

std::vector<std::string> split_cells(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
  return ec == std::errc() && ptr == t.data() + t.size();
}

std::size_t ceil_frac(double frac, std::size_t n) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(frac * static_cast<double>(n) - 1e-9)));
}

std::vector<std::size_t> choose(std::size_t n, std::size_t k, RngStream& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  shuffle_indices(idx, rng);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) {
      header = split_cells(line);
      break;
    }
  }
  if (header.empty()) throw Error(ErrorKind::EmptyFile, path.string() + " has no header row");
  for (auto& h : header) h = trim(h);

  auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(ErrorKind::MissingColumn, fmt::format("{}: no column '{}'", path.string(), name));
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t label_col = column(schema.label_column);
  const std::optional<std::size_t> token_col =
      schema.token_column ? std::optional<std::size_t>(column(*schema.token_column)) : std::nullopt;

  std::vector<double> features;
  std::vector<double> raw_labels;
  std::vector<std::int32_t> tokens;
  std::size_t n_features = 0, seq_len = 0, rows = 0;
  std::int32_t max_token = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_cells(line);
    if (cells.size() != header.size()) {
      throw Error(ErrorKind::MalformedRow,
                  fmt::format("{}:{}: expected {} cells, found {}", path.string(), line_no, header.size(), cells.size()));
    }
    double label = 0.0;
    if (!parse_number(cells[label_col], label) ||
        (!schema.regression && label != std::floor(label))) {
      throw Error(ErrorKind::MalformedRow, fmt::format("{}:{}: bad label '{}'", path.string(), line_no, cells[label_col]));
    }
    raw_labels.push_back(label);
    if (token_col) {
      std::istringstream ts(cells[*token_col]);
      std::string tok;
      std::size_t count = 0;
      while (ts >> tok) {
        std::int32_t id = 0;
        if (!parse_number(tok, id) || id < 0) {
          throw Error(ErrorKind::MalformedRow, fmt::format("{}:{}: bad token id '{}'", path.string(), line_no, tok));
        }
        tokens.push_back(id);
        max_token = std::max(max_token, id);
        ++count;
      }
      if (rows == 0) seq_len = count;
      if (count == 0 || count != seq_len) {
        throw Error(ErrorKind::MalformedRow, fmt::format("{}:{}: token sequence length {} (expected {})", path.string(),
                                                         line_no, count, seq_len));
      }
    } else {
      std::size_t count = 0;
      for (std::size_t c = 0; c < cells.size(); ++c) {
        if (c == label_col) continue;
        double v = 0.0;
        if (!parse_number(cells[c], v)) {
          throw Error(ErrorKind::MalformedRow,
                      fmt::format("{}:{}: non-numeric value '{}' in column '{}'", path.string(), line_no, cells[c], header[c]));
        }
        features.push_back(v);
        ++count;
      }
      n_features = count;
    }
    ++rows;
  }
  if (rows < 2) throw Error(ErrorKind::EmptyFile, path.string() + " needs at least two data rows");

  Dataset d;
  d.provenance.kind = Provenance::Kind::Csv;
  d.provenance.path = path;
  d.provenance.seed = schema.split_seed;
  if (token_col) {
    d.samples.tokens = std::move(tokens);
    d.seq_len = seq_len;
    d.vocab = static_cast<std::size_t>(max_token) + 1;
  } else {
    if (n_features == 0) throw Error(ErrorKind::MissingColumn, path.string() + " has no feature columns");
    d.samples.x = Matrix(rows, n_features, std::move(features));
  }
  if (schema.regression) {
    d.task = model::TaskKind::Regression;
    d.num_outputs = 1;
    d.samples.targets = Matrix(rows, 1, raw_labels);
  } else {
    const std::set<double> distinct(raw_labels.begin(), raw_labels.end());
    if (distinct.size() < 2) throw Error(ErrorKind::BadConfig, path.string() + ": label column has a single class");
    const std::vector<double> classes(distinct.begin(), distinct.end());
    for (double l : raw_labels) {
      d.samples.labels.push_back(
          static_cast<std::int32_t>(std::lower_bound(classes.begin(), classes.end(), l) - classes.begin()));
    }
    d.num_outputs = classes.size();
  }
  seeded_split(d, schema.split_seed, schema.val_frac);
  return d;
}

Dataset generate_planted(std::uint64_t seed, const PlantedSpec& spec) {
  spec.validate();
  const RngStream root(seed);
  RngStream support_rng = root.fork(1), teacher_rng = root.fork(2), student_rng = root.fork(3), x_rng = root.fork(4),
            noise_rng = root.fork(5);

  Dataset d;
  d.provenance = {Provenance::Kind::Planted, {}, seed, spec};
  d.task = spec.regression ? model::TaskKind::Regression : model::TaskKind::Classification;
  d.num_outputs = spec.num_classes;
  d.planted_rows = choose(spec.hidden, ceil_frac(spec.keep_frac, spec.hidden), support_rng);
  d.planted_cols = choose(spec.d_in, ceil_frac(spec.keep_frac, spec.d_in), support_rng);
  std::vector<bool> row_live(spec.hidden, false), col_live(spec.d_in, false);
  for (auto r : d.planted_rows) row_live[r] = true;
  for (auto c : d.planted_cols) col_live[c] = true;

  // Teacher: planted rows read planted columns; every other weight is zero.
  Matrix w(spec.hidden, spec.d_in);
  Vector b(spec.hidden, 0.0);
  const double w_std = std::sqrt(2.0 / static_cast<double>(d.planted_cols.size()));
  for (auto r : d.planted_rows) {
    for (auto c : d.planted_cols) w(r, c) = w_std * teacher_rng.next_normal();
    b[r] = 0.1 * teacher_rng.next_normal();
  }
  model::Head head{Matrix(spec.num_classes, spec.hidden), Vector(spec.num_classes, 0.0)};
  const double h_std = 1.0 / std::sqrt(static_cast<double>(d.planted_rows.size()));
  for (auto& v : head.w.values()) v = h_std * teacher_rng.next_normal();

  Matrix x(spec.n_samples, spec.d_in);
  for (auto& v : x.values()) v = x_rng.next_normal();
  Matrix logits(spec.n_samples, spec.num_classes);
  for (std::size_t i = 0; i < spec.n_samples; ++i) {
    for (std::size_t r = 0; r < spec.hidden; ++r) {
      if (!row_live[r]) continue;
      double pre = b[r];
      for (std::size_t c = 0; c < spec.d_in; ++c) pre += w(r, c) * x(i, c);
      const double h = gelu(pre);
      for (std::size_t k = 0; k < spec.num_classes; ++k) logits(i, k) += head.w(k, r) * h;
    }
  }
  // Center every output so classes are roughly balanced.
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    double mean = 0.0;
    for (std::size_t i = 0; i < spec.n_samples; ++i) mean += logits(i, k);
    mean /= static_cast<double>(spec.n_samples);
    head.b[k] = -mean;
    for (std::size_t i = 0; i < spec.n_samples; ++i) logits(i, k) -= mean;
  }

  d.samples.x = std::move(x);
  if (spec.regression) {
    for (auto& v : logits.values()) v += spec.noise * noise_rng.next_normal();
    d.samples.targets = std::move(logits);
  } else {
    for (std::size_t i = 0; i < spec.n_samples; ++i) {
      const auto row = logits.row(i);
      auto label = static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (spec.noise > 0.0 && noise_rng.next_uniform() < spec.noise) {
        const auto shift = 1 + noise_rng.next_below(spec.num_classes - 1);
        label = static_cast<std::int32_t>((static_cast<std::size_t>(label) + shift) % spec.num_classes);
      }
      d.samples.labels.push_back(label);
    }
  }

  // Student: planted rows equal the teacher; distractor rows read only the
  // unplanted inputs, so they cannot stand in for a planted unit.
  model::FrozenMlpWeights student{{w}, {b}, head};
  const std::size_t n_off_cols = spec.d_in - d.planted_cols.size();
  const double s_std = std::sqrt(2.0 / static_cast<double>(std::max<std::size_t>(1, n_off_cols)));
  for (std::size_t r = 0; r < spec.hidden; ++r) {
    if (row_live[r]) continue;
    for (std::size_t c = 0; c < spec.d_in; ++c) {
      if (!col_live[c]) student.weights[0](r, c) = s_std * student_rng.next_normal();
    }
    student.biases[0][r] = 0.1 * student_rng.next_normal();
  }
  d.planted_gate_rows.assign(spec.hidden, 1.0);
  d.planted_gate_cols.assign(spec.d_in, 1.0);
  if (spec.interior_gates) {
    RngStream gate_rng = root.fork(7);
    for (auto& g : d.planted_gate_rows) g = 0.6 + 0.3 * gate_rng.next_uniform();
    for (auto& g : d.planted_gate_cols) g = 0.6 + 0.3 * gate_rng.next_uniform();
    for (auto r : d.planted_rows) {
      for (auto c : d.planted_cols) student.weights[0](r, c) /= d.planted_gate_rows[r] * d.planted_gate_cols[c];
      student.biases[0][r] /= d.planted_gate_rows[r];
    }
  }
  d.student = std::move(student);
  seeded_split(d, seed, spec.val_frac);
  return d;
}

Dataset generate_tokens(std::uint64_t seed, std::size_t n_samples, std::size_t seq_len, std::size_t vocab,
                        std::size_t num_classes, double val_frac) {
  if (n_samples < 2 || seq_len == 0 || vocab < 2 || num_classes < 2) throw Error(ErrorKind::BadSpec, "bad token task shape");
  RngStream rng = RngStream(seed).fork(6);
  Dataset d;
  d.provenance = {Provenance::Kind::Tokens, {}, seed, {}};
  d.seq_len = seq_len;
  d.vocab = vocab;
  d.num_outputs = num_classes;
  for (std::size_t i = 0; i < n_samples; ++i) {
    std::size_t sum = 0;
    for (std::size_t t = 0; t < seq_len; ++t) {
      const auto id = static_cast<std::int32_t>(rng.next_below(vocab));
      d.samples.tokens.push_back(id);
      sum += static_cast<std::size_t>(id);
    }
    d.samples.labels.push_back(static_cast<std::int32_t>(sum % num_classes));
  }
  seeded_split(d, seed, val_frac);
  return d;
}

model::ModelConfig mlp_config(const Dataset& d, std::vector<std::size_t> hidden) {
  if (d.samples.x.rows() == 0) throw Error(ErrorKind::BadConfig, "mlp arch needs feature columns");
  model::ModelConfig c;
  c.arch = model::ArchKind::Mlp;
  c.widths = {d.samples.x.cols()};
  c.widths.insert(c.widths.end(), hidden.begin(), hidden.end());
  c.num_outputs = d.num_outputs;
  c.task = d.task;
  return c;
}

SupportScore support_f1(const std::vector<std::size_t>& planted, const Vector& kept) {
  SupportScore s;
  std::vector<bool> truth(kept.size(), false);
  for (auto i : planted) {
    if (i >= kept.size()) throw Error(ErrorKind::ShapeMismatch, "planted index outside the mask");
    truth[i] = true;
  }
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const bool k = kept[i] > 0.0;
    if (k && truth[i]) ++s.true_pos;
    if (k && !truth[i]) ++s.false_pos;
    if (!k && truth[i]) ++s.false_neg;
  }
  const double tp = static_cast<double>(s.true_pos);
  s.precision = s.true_pos + s.false_pos ? tp / static_cast<double>(s.true_pos + s.false_pos) : 0.0;
  s.recall = s.true_pos + s.false_neg ? tp / static_cast<double>(s.true_pos + s.false_neg) : 0.0;
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

}  // namespace finegates::data
