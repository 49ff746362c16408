// finegates: train, compact, evaluate and benchmark gated models; run the
// landscape experiments and the gradient check.
//
// Exit status: 0 when the subcommand's checks pass, 1 when a check fails,
// 2 on errors (bad config, unreadable files), 3 when compaction would empty a layer.

#include <CLI11.hpp>
#include <fmt/format.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "finegates/bench.h"
#include "finegates/config.h"
#include "finegates/landscape.h"

namespace fs = std::filesystem;
using namespace finegates;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kError = 2;
constexpr int kEmptyLayer = 3;

enum class Precision { F32, F64 };

Precision precision(Precision fallback) {
  const char* env = std::getenv("FG_PRECISION");
  if (!env || !*env) return fallback;
  const std::string v(env);
  if (v == "f32") return Precision::F32;
  if (v == "f64") return Precision::F64;
  throw Error(ErrorKind::BadConfig, "FG_PRECISION must be f32 or f64, got '" + v + "'");
}

const char* precision_name(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out << text;
}

/// Resolved run keys stored in checkpoints. The output directory is left out
/// so artifacts do not depend on where they were written.
std::map<std::string, std::string> run_meta(const config::RunConfig& c) {
  std::map<std::string, std::string> meta;
  for (const auto& [k, v] : config::to_map(c)) {
    if (k != "run.out_dir") meta["run." + k] = v;
  }
  return meta;
}

std::optional<config::RunConfig> config_from_meta(const std::map<std::string, std::string>& meta) {
  std::string text;
  for (const auto& [k, v] : meta) {
    if (k.starts_with("run.")) text += k.substr(4) + " = " + v + "\n";
  }
  if (text.empty()) return std::nullopt;
  return config::parse_config(text, "<checkpoint>");
}

void set_gate_means(model::GatedModel& m, double mu) {
  for (auto& l : m.linears) {
    std::fill(l.gate_r.mu.begin(), l.gate_r.mu.end(), mu);
    std::fill(l.gate_c.mu.begin(), l.gate_c.mu.end(), mu);
  }
}

struct Prepared {
  config::RunConfig cfg;
  data::Dataset data;
  model::GatedModel model;
};

Prepared prepare(config::RunConfig cfg) {
  data::Dataset d = config::load_data(cfg);
  config::fit_to_data(cfg, d);
  model::GatedModel m = config::build_run_model(cfg, d);
  return {std::move(cfg), std::move(d), std::move(m)};
}

std::string planted_support_lines(const data::Dataset& d, const model::MaskSet& masks) {
  if (d.planted_rows.empty() || masks.empty()) return {};
  const auto rows = data::support_f1(d.planted_rows, masks[0].rows);
  const auto cols = data::support_f1(d.planted_cols, masks[0].cols);
  return fmt::format("support.rows.precision={:.6f}\nsupport.rows.recall={:.6f}\nsupport.rows.f1={:.6f}\n"
                     "support.cols.precision={:.6f}\nsupport.cols.recall={:.6f}\nsupport.cols.f1={:.6f}\n",
                     rows.precision, rows.recall, rows.f1, cols.precision, cols.recall, cols.f1);
}

// ---------------------------------------------------------------- train

int cmd_train(const fs::path& config_path, const std::optional<fs::path>& out_override) {
  config::RunConfig cfg = config::load_config(config_path);
  if (out_override) cfg.out_dir = *out_override;
  Prepared p = prepare(std::move(cfg));
  const fs::path out = p.cfg.out_dir;
  fs::create_directories(out);
  config::write_resolved(p.cfg, out);

  train::TrainConfig tc = p.cfg.train;
  tc.metrics_log = out / "metrics.log";
  fs::remove(*tc.metrics_log);
  const std::uint64_t frozen_before = model::frozen_hash(p.model);
  const train::Split split = p.data.split();

  train::TrainRun run;
  try {
    run = train::train(p.model, split, tc);
  } catch (const train::Diverged& e) {
    model::save_checkpoint(e.last_good(), out / "model.last_good.fgck", run_meta(p.cfg));
    std::cerr << e.what() << "\nlast good model written to " << (out / "model.last_good.fgck").string() << "\n";
    return kCheckFailed;
  }
  model::save_checkpoint(run.model, out / "model.fgck", run_meta(p.cfg));

  std::string report;
  for (const auto& r : run.records) report += train::format_record(r, run.layer_names, false) + "\n";
  bool finite = true;
  for (const auto& r : run.records) {
    finite = finite && std::isfinite(r.train_loss) && std::isfinite(r.val_metric) && std::isfinite(r.grad_norm);
  }
  const bool frozen_intact = model::frozen_hash(run.model) == frozen_before;
  report += fmt::format("epochs={}\ntrainable_params={}\nfrozen_params={}\nfrozen_intact={}\n", run.records.size(),
                        run.model.trainable_parameter_count(), run.model.frozen_parameter_count(), frozen_intact);
  if (!run.records.empty()) report += fmt::format("final_val_metric={:.17g}\n", run.records.back().val_metric);
  const auto bin = compact::binarize(run.model, p.cfg.policy, p.cfg.tau);
  report += planted_support_lines(p.data, bin.masks);
  write_file(out / "train_report.txt", report);
  write_file(out / "gate_statistics.txt", compact::gate_statistics(run).to_table());
  std::cout << report;

  const bool ok = run.records.size() == tc.epochs && finite && frozen_intact;
  if (!ok) std::cerr << "train checks failed (record count, finiteness or frozen weights)\n";
  return ok ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------- compact

int cmd_compact(const fs::path& ckpt, const fs::path& out, std::optional<std::string> policy_flag,
                std::optional<double> tau_flag) {
  std::map<std::string, std::string> meta;
  const model::GatedModel m = model::load_checkpoint(ckpt, &meta);
  const auto run_cfg = config_from_meta(meta);
  compact::Policy policy = run_cfg ? run_cfg->policy : compact::Policy::Tau;
  double tau = run_cfg ? run_cfg->tau : 0.5;
  if (policy_flag) policy = compact::parse_policy(*policy_flag);
  if (tau_flag) tau = *tau_flag;

  const auto bin = compact::binarize(m, policy, tau);
  compact::Compaction c;
  try {
    c = compact::compact_model(m, bin.masks);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::EmptyLayer) throw;
    std::cerr << e.what() << "\n";
    return kEmptyLayer;
  }
  c.report.policy = policy;
  c.report.tau = tau;
  c.report.ambiguity_mass = bin.ambiguity_mass;
  c.report.equivalence_error = compact::verify_equivalence(m, c.model, 64, 0);

  fs::create_directories(out);
  compact::save_compact(c.model, c.report, out / "compact.fgck");
  std::string text = c.report.to_text();
  if (run_cfg && run_cfg->data.source == config::DataSource::Planted) {
    text += planted_support_lines(config::load_data(*run_cfg), bin.masks);
  }
  write_file(out / "compaction_report.txt", text);
  std::cout << c.report.to_table();

  const bool ok = c.report.equivalence_error <= 1e-12;
  if (!ok) std::cerr << fmt::format("equivalence error {:.3e} exceeds 1e-12\n", c.report.equivalence_error);
  return ok ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------- eval

int cmd_eval(const fs::path& ckpt, const fs::path& data_path, const std::optional<fs::path>& report_path) {
  const model::Container container = model::read_container(ckpt);
  const bool is_compact = container.kind == "compact";
  std::map<std::string, std::string> meta;
  std::optional<model::GatedModel> gated;
  std::optional<compact::CompactModel<double>> compacted;
  model::ModelConfig mc;
  if (is_compact) {
    compacted = compact::load_compact(ckpt);
    mc = compacted->config;
  } else {
    gated = model::load_checkpoint(ckpt, &meta);
    mc = gated->config;
  }

  model::Batch batch;
  std::string split_name;
  if (data_path.extension() == ".csv") {
    data::CsvSchema schema;
    schema.regression = mc.task == model::TaskKind::Regression;
    const data::Dataset d = data::load_csv(data_path, schema);
    d.check_head(mc);
    batch = d.samples;
    split_name = "all";
  } else {
    config::RunConfig cfg = config::load_config(data_path);
    const data::Dataset d = config::load_data(cfg);
    config::fit_to_data(cfg, d);
    d.check_head(mc);
    batch = d.split().val;
    split_name = "val";
  }

  const Precision prec = precision(Precision::F64);
  Matrix logits;
  if (is_compact) {
    if (prec == Precision::F32) {
      logits = compacted->cast<float>().forward(batch).cast<double>();
    } else {
      logits = compacted->forward(batch);
    }
  } else {
    if (prec == Precision::F32) throw Error(ErrorKind::BadConfig, "32-bit evaluation needs a compact checkpoint");
    logits = model::model_forward(*gated, batch, model::Mode::Eval);
  }
  const double value = train::logits_metric(mc.task, logits, batch);
  const std::string report =
      fmt::format("checkpoint_kind={}\nprecision={}\nsplit={}\nsamples={}\nmetric={}\nvalue={:.17g}\n", container.kind,
                  precision_name(prec), split_name, batch.size(),
                  mc.task == model::TaskKind::Classification ? "accuracy" : "mse", value);
  if (report_path) write_file(*report_path, report);
  std::cout << report;
  return std::isfinite(value) ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------- bench

template <typename T>
std::vector<bench::SpeedupRow> run_bench(const model::GatedModel& m, const std::vector<double>& levels,
                                         std::size_t repeats, std::size_t warmup, std::size_t batch_size,
                                         std::uint64_t seed) {
  const model::Batch batch = compact::random_batch(m.config, batch_size, seed);
  std::vector<bench::SpeedupRow> rows;
  for (double level : levels) {
    const auto masks = bench::structured_masks(m, level, seed);
    rows.push_back(bench::bench_masks<T>(m, masks, batch, repeats, warmup, fmt::format("{:.2f}", level)));
  }
  return rows;
}

int cmd_bench(const fs::path& ckpt, const std::vector<double>& levels, std::size_t repeats, std::size_t warmup,
              std::size_t batch_size, std::uint64_t seed, const std::optional<fs::path>& out) {
  bench::ensure_single_thread();
  const model::GatedModel m = model::load_checkpoint(ckpt);
  const Precision prec = precision(Precision::F32);
  const auto rows = prec == Precision::F32 ? run_bench<float>(m, levels, repeats, warmup, batch_size, seed)
                                           : run_bench<double>(m, levels, repeats, warmup, batch_size, seed);
  const std::string report = bench::speedup_report(rows);
  if (out) {
    write_file(*out / "bench_report.txt", report);
    write_file(*out / "bench_plot.tsv", bench::plot_data(rows));
  }
  std::cout << report;
  const double tol = prec == Precision::F32 ? 1e-4 : 1e-12;
  bool ok = true;
  for (const auto& r : rows) {
    if (!r.outputs_stable) std::cerr << "level " << r.label << ": timed outputs differ from untimed outputs\n";
    if (r.equivalence_error > tol) std::cerr << fmt::format("level {}: equivalence error {:.3e}\n", r.label, r.equivalence_error);
    ok = ok && r.outputs_stable && r.equivalence_error <= tol;
  }
  return ok ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------- landscape

config::RunConfig convergence_defaults() {
  config::RunConfig c;
  c.data.planted.regression = true;
  c.data.planted.interior_gates = true;
  c.data.planted.n_samples = 256;
  c.data.planted.d_in = 8;
  c.data.planted.hidden = 8;
  c.data.planted.keep_frac = 1.0;
  c.data.planted.num_classes = 1;
  c.model.train_bias = false;
  return c;
}

int cmd_landscape(const std::string& experiment, const std::optional<fs::path>& out, std::size_t instances,
                  std::uint64_t seed, const std::optional<fs::path>& config_path) {
  if (experiment == "jlower") {
    const auto sweep = landscape::jacobian_sweep(instances ? instances : 100, seed);
    const std::string text = sweep.to_text();
    if (out) write_file(*out / "jlower.tsv", text);
    std::cout << text.substr(text.find("instances="));
    const bool ok = sweep.all_positive() && sweep.max_block_error <= 1e-12;
    if (!sweep.all_positive()) {
      std::cerr << fmt::format("{} of {} instances have a Gram matrix that is not positive definite; "
                               "J (omega_r, -omega_c) = 0 up to {:.3e}\n",
                               sweep.reports.size() - sweep.positive, sweep.reports.size(), sweep.max_scaling_residual);
    }
    return ok ? kOk : kCheckFailed;
  }
  if (experiment == "counterexample") {
    const auto sweep = landscape::lora_saddle_sweep(instances ? instances : 50, 2, seed);
    const std::string text = sweep.to_text();
    if (out) write_file(*out / "counterexample.tsv", text);
    std::cout << text.substr(text.find("instances="));
    bool ok = sweep.max_grad_norm <= 1e-12 && sweep.max_pl_ratio == 0.0;
    for (const auto& i : sweep.instances) ok = ok && i.gap > 0.0 && i.gap >= i.bound - 1e-12;
    return ok ? kOk : kCheckFailed;
  }
  if (experiment == "convergence") {
    config::RunConfig cfg = config_path ? config::load_config(*config_path) : convergence_defaults();
    Prepared p = prepare(std::move(cfg));
    set_gate_means(p.model, p.cfg.convergence_mu_init);
    landscape::ConvergenceOptions opt;
    opt.max_steps = p.cfg.convergence_max_steps;
    opt.eta_factor = p.cfg.convergence_eta_factor;
    opt.grad_tol = p.cfg.convergence_grad_tol;
    opt.power_iters = p.cfg.convergence_power_iters;
    opt.gates_only = p.cfg.convergence_gates_only;
    const auto trace = landscape::convergence_experiment(p.model, p.data.split().train, p.cfg.train, opt);
    std::string text = "step\tloss\tgrad_norm\tdescent_residual\n";
    for (const auto& s : trace.steps) {
      text += fmt::format("{}\t{:.17g}\t{:.6e}\t{:.6e}\n", s.step, s.loss, s.grad_norm, s.descent_residual);
    }
    const std::string summary =
        fmt::format("smoothness={:.6e}\neta={:.6e}\nsteps={}\nfinal_grad_norm={:.6e}\nmax_residual={:.6e}\nviolations={}\n"
                    "reached_tolerance={}\n",
                    trace.smoothness, trace.eta, trace.steps.size() - 1, trace.final_grad_norm, trace.max_residual,
                    trace.violations, trace.reached_tolerance);
    if (out) {
      write_file(*out / "convergence.tsv", text);
      write_file(*out / "convergence_summary.txt", summary);
      config::write_resolved(p.cfg, *out);
    }
    std::cout << summary;
    return trace.violations == 0 && trace.reached_tolerance ? kOk : kCheckFailed;
  }
  throw Error(ErrorKind::BadConfig, "unknown experiment '" + experiment + "' (jlower, counterexample, convergence)");
}

// ---------------------------------------------------------------- gradcheck

int cmd_gradcheck(const std::optional<fs::path>& config_path, const std::optional<fs::path>& out) {
  if (precision(Precision::F64) != Precision::F64) throw Error(ErrorKind::BadConfig, "the gradient check runs in 64-bit only");
  config::RunConfig cfg = config_path ? config::load_config(*config_path) : config::RunConfig{};
  Prepared p = prepare(std::move(cfg));
  const train::Split split = p.data.split();
  const std::size_t n = std::min(p.cfg.gradcheck_batch, split.train.size());
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  const model::Batch batch = train::subset(split.train, idx, p.data.seq_len);
  // A zero low-rank factor makes the other factor's gradient vanish; probe at a generic point.
  RngStream probe_rng = RngStream(p.cfg.train.seed).fork(0x6c72);
  std::size_t randomized = 0;
  for (auto& l : p.model.linears) {
    if (!l.lowrank) continue;
    for (Matrix* f : {&l.lowrank->a, &l.lowrank->b}) {
      auto& v = f->values();
      if (std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; })) {
        for (auto& x : v) x = 0.1 * probe_rng.next_normal();
        ++randomized;
      }
    }
  }
  const auto report = train::grad_check(p.model, batch, p.cfg.train, p.cfg.gradcheck_h, p.cfg.gradcheck_tolerance,
                                        p.cfg.gradcheck_abs_floor);
  std::string text = fmt::format("randomized_lowrank_factors={}\n", randomized);
  for (const auto& t : report.tensors) {
    text += fmt::format("tensor={} rel_err={:.3e} worst_index={} checked={} skipped={}\n", t.name, t.rel_err, t.worst_index,
                        t.checked, t.skipped);
  }
  text += fmt::format("max_rel_err={:.3e}\nworst_tensor={}\ntolerance={:.1e}\nabs_floor={:.1e}\npassed={}\n",
                      report.max_rel_err, report.worst_tensor, p.cfg.gradcheck_tolerance, p.cfg.gradcheck_abs_floor,
                      report.passed);
  if (out) {
    write_file(*out / "gradcheck_report.txt", text);
    config::write_resolved(p.cfg, *out);
  }
  std::cout << text;
  return report.passed ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------- compare

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> seeds;
  if (const auto dots = s.find(".."); dots != std::string::npos) {
    const std::uint64_t lo = std::stoull(s.substr(0, dots)), hi = std::stoull(s.substr(dots + 2));
    if (hi < lo) throw Error(ErrorKind::BadConfig, "seed range '" + s + "' is empty");
    for (auto v = lo; v <= hi; ++v) seeds.push_back(v);
    return seeds;
  }
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) seeds.push_back(std::stoull(item));
  if (seeds.empty()) throw Error(ErrorKind::BadConfig, "no seeds given");
  return seeds;
}

int cmd_compare(const fs::path& config_path, const std::string& seeds, const std::optional<fs::path>& out_override) {
  config::RunConfig cfg = config::load_config(config_path);
  if (out_override) cfg.out_dir = *out_override;
  Prepared p = prepare(std::move(cfg));
  landscape::ComparisonConfig cc;
  cc.train = p.cfg.train;
  cc.adapter_lr = p.cfg.compare_adapter_lr;
  cc.lora_rank = p.cfg.compare_lora_rank;
  cc.seeds = parse_seeds(seeds);
  const auto result = landscape::compare_gates_vs_lora(p.model, p.data.split(), cc);
  const std::string table = result.to_table();
  fs::create_directories(p.cfg.out_dir);
  write_file(p.cfg.out_dir / "comparison.tsv", table);
  config::write_resolved(p.cfg, p.cfg.out_dir);
  std::cout << table.substr(table.find("# "));
  bool finite = true;
  for (const auto* s : {&result.gates, &result.lora}) {
    for (const auto& c : s->curves) finite = finite && all_finite(c);
  }
  return finite ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"finegates: stochastic row/column gates on frozen weights"};
  app.require_subcommand(1);

  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  fs::path train_config;
  std::optional<fs::path> train_out;
  train_cmd->add_option("--config", train_config, "Run config (key = value)")->required();
  train_cmd->add_option("--out", train_out, "Output directory (overrides run.out_dir)");

  auto* compact_cmd = app.add_subcommand("compact", "Binarize gates and physically remove dead rows/columns");
  fs::path compact_ckpt, compact_out;
  std::optional<std::string> compact_policy;
  std::optional<double> compact_tau;
  compact_cmd->add_option("--ckpt", compact_ckpt, "Gated model checkpoint")->required();
  compact_cmd->add_option("--out", compact_out, "Output directory")->required();
  compact_cmd->add_option("--policy", compact_policy, "tau or support")->check(CLI::IsMember({"tau", "support"}));
  compact_cmd->add_option("--tau", compact_tau, "Binarization threshold");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a gated or compact checkpoint");
  fs::path eval_ckpt, eval_data;
  std::optional<fs::path> eval_report;
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "CSV file (all rows) or run config (validation split)")->required();
  eval_cmd->add_option("--report", eval_report, "Write the report here as well");

  auto* bench_cmd = app.add_subcommand("bench", "Masked-dense vs compacted forward timing");
  fs::path bench_ckpt;
  std::vector<double> bench_levels{0.0, 0.2, 0.4};
  std::size_t bench_repeats = 30, bench_warmup = 3, bench_batch = 32;
  std::uint64_t bench_seed = 0;
  std::optional<fs::path> bench_out;
  bench_cmd->add_option("--ckpt", bench_ckpt, "Gated model checkpoint")->required();
  bench_cmd->add_option("--levels", bench_levels, "Removal levels")->delimiter(',');
  bench_cmd->add_option("--repeats", bench_repeats, "Timed repeats per variant (>= 30)");
  bench_cmd->add_option("--warmup", bench_warmup, "Untimed warmup repeats");
  bench_cmd->add_option("--batch", bench_batch, "Batch size");
  bench_cmd->add_option("--seed", bench_seed, "Seed for inputs and masks");
  bench_cmd->add_option("--out", bench_out, "Directory for the report and plot data");

  auto* land_cmd = app.add_subcommand("landscape", "Optimization landscape experiments");
  std::string land_experiment;
  std::optional<fs::path> land_out, land_config;
  std::size_t land_instances = 0;
  std::uint64_t land_seed = 0;
  land_cmd->add_option("--experiment", land_experiment, "jlower, counterexample or convergence")
      ->required()
      ->check(CLI::IsMember({"jlower", "counterexample", "convergence"}));
  land_cmd->add_option("--out", land_out, "Output directory");
  land_cmd->add_option("--instances", land_instances, "Random instances (jlower, counterexample)");
  land_cmd->add_option("--seed", land_seed, "Seed");
  land_cmd->add_option("--config", land_config, "Run config (convergence)");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Analytic vs central-difference gradients");
  std::optional<fs::path> grad_config, grad_out;
  grad_cmd->add_option("--config", grad_config, "Run config (defaults when omitted)");
  grad_cmd->add_option("--out", grad_out, "Output directory");

  auto* cmp_cmd = app.add_subcommand("compare", "Gates vs low-rank adapters across seeds");
  fs::path cmp_config;
  std::string cmp_seeds = "1..10";
  std::optional<fs::path> cmp_out;
  cmp_cmd->add_option("--config", cmp_config, "Run config")->required();
  cmp_cmd->add_option("--seeds", cmp_seeds, "Seed range a..b or list a,b,c");
  cmp_cmd->add_option("--out", cmp_out, "Output directory (overrides run.out_dir)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return cmd_train(train_config, train_out);
    if (*compact_cmd) return cmd_compact(compact_ckpt, compact_out, compact_policy, compact_tau);
    if (*eval_cmd) return cmd_eval(eval_ckpt, eval_data, eval_report);
    if (*bench_cmd) return cmd_bench(bench_ckpt, bench_levels, bench_repeats, bench_warmup, bench_batch, bench_seed, bench_out);
    if (*land_cmd) return cmd_landscape(land_experiment, land_out, land_instances, land_seed, land_config);
    if (*grad_cmd) return cmd_gradcheck(grad_config, grad_out);
    if (*cmp_cmd) return cmd_compare(cmp_config, cmp_seeds, cmp_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kError;
  }
  return kError;
}
