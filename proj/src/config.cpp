#include "finegates/config.h"

#include <fmt/format.h>

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace finegates::config {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw Error(ErrorKind::BadConfig, "'" + s + "' is not a number");
  return v;
}

std::uint64_t to_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw Error(ErrorKind::BadConfig, "'" + s + "' is not a non-negative integer");
  }
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw Error(ErrorKind::BadConfig, "'" + s + "' is not a boolean");
}

std::string from_bool(bool b) { return b ? "true" : "false"; }
std::string from_double(double v) { return fmt::format("{}", v); }

template <typename T>
std::vector<T> to_list(const std::string& s, T (*conv)(const std::string&)) {
  std::vector<T> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(conv(trim(item)));
  if (out.empty()) throw Error(ErrorKind::BadConfig, "empty list");
  return out;
}

std::size_t to_size(const std::string& s) { return static_cast<std::size_t>(to_u64(s)); }

std::string to_string(DataSource s) {
  switch (s) {
    case DataSource::Planted: return "planted";
    case DataSource::Csv: return "csv";
    case DataSource::Tokens: return "tokens";
  }
  return "planted";
}

DataSource parse_source(const std::string& s) {
  if (s == "planted") return DataSource::Planted;
  if (s == "csv") return DataSource::Csv;
  if (s == "tokens") return DataSource::Tokens;
  throw Error(ErrorKind::BadConfig, "unknown data source '" + s + "'");
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define FG_FIELD(key, expr, assign) \
  Field { key, [](const RunConfig& c) -> std::string { return expr; }, [](RunConfig& c, const std::string& v) { assign; } }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      FG_FIELD("run.mode", c.mode, c.mode = v),
      FG_FIELD("run.out_dir", c.out_dir.string(), c.out_dir = v),

      FG_FIELD("data.source", to_string(c.data.source), c.data.source = parse_source(v)),
      FG_FIELD("data.path", c.data.path.string(), c.data.path = v),
      FG_FIELD("data.label_column", c.data.label_column, c.data.label_column = v),
      FG_FIELD("data.token_column", c.data.token_column, c.data.token_column = v),
      FG_FIELD("data.seed", std::to_string(c.data.seed), c.data.seed = to_u64(v)),
      FG_FIELD("data.regression", from_bool(c.data.planted.regression), c.data.planted.regression = to_bool(v)),
      FG_FIELD("data.interior_gates", from_bool(c.data.planted.interior_gates),
               c.data.planted.interior_gates = to_bool(v)),
      FG_FIELD("data.val_frac", from_double(c.data.planted.val_frac), c.data.planted.val_frac = to_double(v)),
      FG_FIELD("data.d_in", std::to_string(c.data.planted.d_in), c.data.planted.d_in = to_size(v)),
      FG_FIELD("data.hidden", std::to_string(c.data.planted.hidden), c.data.planted.hidden = to_size(v)),
      FG_FIELD("data.keep_frac", from_double(c.data.planted.keep_frac), c.data.planted.keep_frac = to_double(v)),
      FG_FIELD("data.n_samples", std::to_string(c.data.planted.n_samples), c.data.planted.n_samples = to_size(v)),
      FG_FIELD("data.noise", from_double(c.data.planted.noise), c.data.planted.noise = to_double(v)),
      FG_FIELD("data.num_classes", std::to_string(c.data.planted.num_classes), c.data.planted.num_classes = to_size(v)),
      FG_FIELD("data.seq_len", std::to_string(c.data.seq_len), c.data.seq_len = to_size(v)),
      FG_FIELD("data.vocab", std::to_string(c.data.vocab), c.data.vocab = to_size(v)),

      FG_FIELD("model.arch", model::to_string(c.model.arch), c.model.arch = model::parse_arch(v)),
      FG_FIELD("model.widths", fmt::format("{}", fmt::join(c.model.widths, ",")), c.model.widths = to_list(v, to_size)),
      FG_FIELD("model.d_model", std::to_string(c.model.d_model), c.model.d_model = to_size(v)),
      FG_FIELD("model.n_heads", std::to_string(c.model.n_heads), c.model.n_heads = to_size(v)),
      FG_FIELD("model.d_ff", std::to_string(c.model.d_ff), c.model.d_ff = to_size(v)),
      FG_FIELD("model.n_blocks", std::to_string(c.model.n_blocks), c.model.n_blocks = to_size(v)),
      FG_FIELD("model.seq_len", std::to_string(c.model.seq_len), c.model.seq_len = to_size(v)),
      FG_FIELD("model.vocab", std::to_string(c.model.vocab), c.model.vocab = to_size(v)),
      FG_FIELD("model.num_outputs", std::to_string(c.model.num_outputs), c.model.num_outputs = to_size(v)),
      FG_FIELD("model.task", model::to_string(c.model.task), c.model.task = model::parse_task(v)),
      FG_FIELD("model.method", model::to_string(c.model.method), c.model.method = model::parse_method(v)),
      FG_FIELD("model.gate_mlp", from_bool(c.model.gate_mlp), c.model.gate_mlp = to_bool(v)),
      FG_FIELD("model.lowrank_rank", std::to_string(c.model.lowrank_rank), c.model.lowrank_rank = to_size(v)),
      FG_FIELD("model.sigma", from_double(c.model.sigma), c.model.sigma = to_double(v)),
      FG_FIELD("model.train_bias", from_bool(c.model.train_bias), c.model.train_bias = to_bool(v)),
      FG_FIELD("model.seed", std::to_string(c.model.seed), c.model.seed = to_u64(v)),

      FG_FIELD("train.lr_gates", from_double(c.train.lr_gates), c.train.lr_gates = to_double(v)),
      FG_FIELD("train.lr_bias_head", from_double(c.train.lr_bias_head), c.train.lr_bias_head = to_double(v)),
      FG_FIELD("train.lr_lowrank", c.train.lr_lowrank ? from_double(*c.train.lr_lowrank) : std::string("default"),
               c.train.lr_lowrank = v == "default" ? std::nullopt : std::optional<double>(to_double(v))),
      FG_FIELD("train.lambda", from_double(c.train.lambda), c.train.lambda = to_double(v)),
      FG_FIELD("train.target_sparsity", from_double(c.train.target_sparsity), c.train.target_sparsity = to_double(v)),
      FG_FIELD("train.epochs", std::to_string(c.train.epochs), c.train.epochs = to_size(v)),
      FG_FIELD("train.batch_size", std::to_string(c.train.batch_size), c.train.batch_size = to_size(v)),
      FG_FIELD("train.seed", std::to_string(c.train.seed), c.train.seed = to_u64(v)),
      FG_FIELD("train.schedule", train::to_string(c.train.schedule), c.train.schedule = train::parse_schedule(v)),
      FG_FIELD("train.warmup_steps", std::to_string(c.train.warmup_steps), c.train.warmup_steps = to_size(v)),
      FG_FIELD("train.floor_frac", from_double(c.train.floor_frac), c.train.floor_frac = to_double(v)),
      FG_FIELD("train.weight_decay", from_double(c.train.weight_decay), c.train.weight_decay = to_double(v)),
      FG_FIELD("train.kurtosis_weighting", from_bool(c.train.kurtosis_weighting), c.train.kurtosis_weighting = to_bool(v)),
      FG_FIELD("train.kurtosis_every", std::to_string(c.train.kurtosis_every), c.train.kurtosis_every = to_size(v)),
      FG_FIELD("train.beta1", from_double(c.train.beta1), c.train.beta1 = to_double(v)),
      FG_FIELD("train.beta2", from_double(c.train.beta2), c.train.beta2 = to_double(v)),
      FG_FIELD("train.adam_eps", from_double(c.train.adam_eps), c.train.adam_eps = to_double(v)),

      FG_FIELD("compact.policy", compact::to_string(c.policy), c.policy = compact::parse_policy(v)),
      FG_FIELD("compact.tau", from_double(c.tau), c.tau = to_double(v)),

      FG_FIELD("gradcheck.h", from_double(c.gradcheck_h), c.gradcheck_h = to_double(v)),
      FG_FIELD("gradcheck.tolerance", from_double(c.gradcheck_tolerance), c.gradcheck_tolerance = to_double(v)),
      FG_FIELD("gradcheck.batch", std::to_string(c.gradcheck_batch), c.gradcheck_batch = to_size(v)),
      FG_FIELD("gradcheck.abs_floor", from_double(c.gradcheck_abs_floor), c.gradcheck_abs_floor = to_double(v)),

      FG_FIELD("compare.adapter_lr", from_double(c.compare_adapter_lr), c.compare_adapter_lr = to_double(v)),
      FG_FIELD("compare.lora_rank", std::to_string(c.compare_lora_rank), c.compare_lora_rank = to_size(v)),

      FG_FIELD("bench.levels", fmt::format("{}", fmt::join(c.bench_levels, ",")), c.bench_levels = to_list(v, to_double)),
      FG_FIELD("bench.repeats", std::to_string(c.bench_repeats), c.bench_repeats = to_size(v)),
      FG_FIELD("bench.warmup", std::to_string(c.bench_warmup), c.bench_warmup = to_size(v)),
      FG_FIELD("bench.batch", std::to_string(c.bench_batch), c.bench_batch = to_size(v)),

      FG_FIELD("convergence.mu_init", from_double(c.convergence_mu_init), c.convergence_mu_init = to_double(v)),
      FG_FIELD("convergence.max_steps", std::to_string(c.convergence_max_steps), c.convergence_max_steps = to_size(v)),
      FG_FIELD("convergence.eta_factor", from_double(c.convergence_eta_factor), c.convergence_eta_factor = to_double(v)),
      FG_FIELD("convergence.grad_tol", from_double(c.convergence_grad_tol), c.convergence_grad_tol = to_double(v)),
      FG_FIELD("convergence.power_iters", std::to_string(c.convergence_power_iters),
               c.convergence_power_iters = to_size(v)),
      FG_FIELD("convergence.gates_only", from_bool(c.convergence_gates_only), c.convergence_gates_only = to_bool(v)),
  };
  return table;
}

#undef FG_FIELD

constexpr std::string_view kLayerTargetPrefix = "train.layer_target.";

}  // namespace

RunConfig parse_config(const std::string& text, const std::string& origin) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::BadConfig, fmt::format("{}:{}: expected key = value", origin, line_no));
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (c.explicit_keys.count(key)) throw Error(ErrorKind::BadConfig, fmt::format("{}:{}: duplicate key '{}'", origin, line_no, key));
    try {
      if (key.starts_with(kLayerTargetPrefix) && key.size() > kLayerTargetPrefix.size()) {
        c.train.layer_targets[key.substr(kLayerTargetPrefix.size())] = to_double(value);
      } else {
        const auto& table = fields();
        const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
        if (it == table.end()) throw Error(ErrorKind::BadConfig, "unknown key");
        it->set(c, value);
      }
    } catch (const Error& e) {
      throw Error(ErrorKind::BadConfig, fmt::format("{}:{}: key '{}': {}", origin, line_no, key, e.what()));
    }
    c.explicit_keys.insert(key);
  }
  try {
    c.train.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::BadConfig, fmt::format("{}: train section: {}", origin, e.what()));
  }
  if (!(c.tau > 0.0 && c.tau < 1.0)) throw Error(ErrorKind::BadConfig, fmt::format("{}: compact.tau must lie in (0, 1)", origin));
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::map<std::string, std::string> to_map(const RunConfig& c) {
  std::map<std::string, std::string> m;
  for (const auto& f : fields()) m[f.key] = f.get(c);
  for (const auto& [layer, target] : c.train.layer_targets) m[std::string(kLayerTargetPrefix) + layer] = from_double(target);
  return m;
}

std::string to_text(const RunConfig& c) {
  std::string s;
  for (const auto& [k, v] : to_map(c)) s += k + " = " + v + "\n";
  return s;
}

void write_resolved(const RunConfig& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "resolved_config.txt", std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write resolved config into " + dir.string());
  out << to_text(c);
}

data::Dataset load_data(const RunConfig& c) {
  switch (c.data.source) {
    case DataSource::Planted:
      return data::generate_planted(c.data.seed, c.data.planted);
    case DataSource::Csv: {
      data::CsvSchema schema;
      schema.label_column = c.data.label_column;
      if (!c.data.token_column.empty()) schema.token_column = c.data.token_column;
      schema.regression = c.data.planted.regression;
      schema.val_frac = c.data.planted.val_frac;
      schema.split_seed = c.data.seed;
      return data::load_csv(c.data.path, schema);
    }
    case DataSource::Tokens:
      return data::generate_tokens(c.data.seed, c.data.planted.n_samples, c.data.seq_len, c.data.vocab,
                                   c.data.planted.num_classes, c.data.planted.val_frac);
  }
  throw Error(ErrorKind::BadConfig, "unknown data source");
}

void fit_to_data(RunConfig& c, const data::Dataset& d) {
  auto unset = [&](const char* key) { return c.explicit_keys.count(key) == 0; };
  if (unset("model.num_outputs")) c.model.num_outputs = d.num_outputs;
  if (unset("model.task")) c.model.task = d.task;
  if (d.samples.x.rows() > 0) {
    if (unset("model.arch")) c.model.arch = model::ArchKind::Mlp;
    if (unset("model.widths")) {
      if (d.provenance.kind == data::Provenance::Kind::Planted) {
        c.model.widths = {d.samples.x.cols(), d.provenance.spec.hidden};
      } else {
        c.model.widths.front() = d.samples.x.cols();
      }
    }
  } else {
    if (unset("model.arch")) c.model.arch = model::ArchKind::Transformer;
    if (unset("model.seq_len")) c.model.seq_len = d.seq_len;
    if (unset("model.vocab")) c.model.vocab = d.vocab;
  }
  if (c.model.arch == model::ArchKind::Mlp && d.samples.x.rows() == 0) {
    throw Error(ErrorKind::BadConfig, "model.arch=mlp needs feature columns in the data");
  }
  if (c.model.arch == model::ArchKind::Mlp && c.model.widths.front() != d.samples.x.cols()) {
    throw Error(ErrorKind::BadConfig,
                fmt::format("model.widths starts at {} but the data has {} features", c.model.widths.front(), d.samples.x.cols()));
  }
  if (c.model.arch == model::ArchKind::Transformer &&
      (d.samples.tokens.empty() || c.model.seq_len != d.seq_len || c.model.vocab < d.vocab)) {
    throw Error(ErrorKind::BadConfig, "model.seq_len/model.vocab do not fit the token data");
  }
  d.check_head(c.model);
  try {
    c.model.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::BadConfig, fmt::format("model section: {}", e.what()));
  }
}

model::GatedModel build_run_model(const RunConfig& c, const data::Dataset& d) {
  const bool planted_shape = d.student && c.model.arch == model::ArchKind::Mlp && c.model.widths.size() == 2 &&
                             c.model.widths[1] == d.provenance.spec.hidden;
  if (planted_shape) return model::build_model(c.model, *d.student);
  return model::build_model(c.model);
}

}  // namespace finegates::config
