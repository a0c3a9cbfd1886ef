// cmemd: data generation, training, evaluation, OT solving and gradient
// checking for the cross-modality alignment toolkit.
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or
// numerical failure (including a failed gradient check).

#include "cmemd/data_synth.hpp"
#include "cmemd/errors.hpp"
#include "cmemd/evalkit.hpp"
#include "cmemd/gradcheck.hpp"
#include "cmemd/ot_solver.hpp"
#include "cmemd/run_config.hpp"
#include "cmemd/trainer.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cmemd;

namespace {

constexpr int kExitInvalid = 1;
constexpr int kExitRuntime = 2;

struct CommonOptions {
  std::string config;
  std::string preset = "regdb-profile";
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string data_dir;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_out = true) {
  cmd->add_option("--config", o.config, "Config file ([section] key = value)");
  cmd->add_option("--preset", o.preset, "Base preset: regdb-profile or sysu-profile")->capture_default_str();
  cmd->add_option("--seed", o.seed, "Overrides run.seed and data.seed");
  if (with_out) cmd->add_option("--out", o.out, "Output directory")->capture_default_str();
}

RunConfig resolve(const CommonOptions& o) {
  RunConfig cfg = preset_config(o.preset);
  if (!o.config.empty()) apply_config_file(cfg, o.config);
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.data.synth.seed = *o.seed;
  }
  if (!o.data_dir.empty()) {
    cfg.data.train_file = (fs::path(o.data_dir) / "train.csv").string();
    cfg.data.test_file = (fs::path(o.data_dir) / "test.csv").string();
  }
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("error while writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory " + dir.string() + ": " + ec.message());
}

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(row);
  }
  return rows;
}

int cmd_gen_data(const CommonOptions& o) {
  const RunConfig cfg = resolve(o);
  const std::string hash = hex64(config_hash(cfg));
  const Dataset ds = generate_dataset(cfg.data.synth);
  const fs::path dir(o.out);
  make_dir(dir);
  json files = json::object();
  for (const auto& [name, samples] : {std::pair{"train.csv", &ds.train}, std::pair{"test.csv", &ds.test}}) {
    const std::string text = format_feature_csv(to_labeled_batch(*samples));
    write_text(dir / name, text);
    files[name] = {{"rows", samples->size()}, {"fnv1a64", hex64(fnv1a64(text))}};
  }
  const SynthSpec& s = cfg.data.synth;
  const json manifest = {
      {"schema_version", 1},
      {"config_hash", hash},
      {"seed", s.seed},
      {"spec",
       {{"num_identities", s.num_identities},
        {"num_test_identities", s.num_test_identities},
        {"dim", s.dim},
        {"center_scale", s.center_scale},
        {"modality_offset_scale", s.modality_offset_scale},
        {"modality_transform_seed", s.modality_transform_seed},
        {"modality_transform_strength", s.modality_transform_strength},
        {"intra_identity_noise", s.intra_identity_noise},
        {"noisy_identity_fraction", s.noisy_identity_fraction},
        {"noisy_identity_factor", s.noisy_identity_factor},
        {"samples_per_identity_per_modality", s.samples_per_identity_per_modality}}},
      {"files", files}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  std::cout << manifest.dump(2) << "\n";
  return 0;
}

int cmd_train(const CommonOptions& o) {
  const RunConfig cfg = resolve(o);
  const std::uint64_t hash = config_hash(cfg);
  const fs::path dir(o.out);
  make_dir(dir);
  write_text(dir / "config.ini", to_config_text(cfg));
  const fs::path metrics_path = dir / "metrics.csv";
  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write " + metrics_path.string());
  metrics << "# config_hash=" << hex64(hash) << "\n" << metrics_csv_header() << "\n";

  Trainer trainer(cfg, load_train_data(cfg));
  const fs::path ckpt = dir / "checkpoint.bin";
  try {
    trainer.run([&](const EpochRecord& r) {
      metrics << metrics_csv_row(r) << "\n" << std::flush;
      std::cerr << "epoch " << r.epoch << " v2t rank_1 " << r.eval.visible_to_thermal.rank_1 << " gap "
                << r.eval.modality_gap << "\n";
    });
  } catch (const NumericalError&) {
    save_checkpoint(ckpt, trainer.model().states(), hash);
    std::cerr << "training aborted; last good parameters saved to " << ckpt.string() << "\n";
    throw;
  }
  save_checkpoint(ckpt, trainer.model().states(), hash);
  if (!metrics) throw std::runtime_error("error while writing " + metrics_path.string());
  return 0;
}

int cmd_eval(const CommonOptions& o, const std::string& checkpoint, std::optional<double> beta) {
  RunConfig cfg = resolve(o);
  if (beta) {
    cfg.mgs.beta = *beta;
    cfg.validate();
  }
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  if (ckpt.config_hash != config_hash(cfg)) {
    std::cerr << "note: checkpoint config hash " << hex64(ckpt.config_hash) << " differs from the evaluation config "
              << hex64(config_hash(cfg)) << "\n";
  }
  Model model = Model::from_checkpoint(cfg, ckpt);
  const TrainData data = load_train_data(cfg);
  const EvalMetrics m = evaluate_model(model, data.test, cfg.mgs.beta);
  const json report = {{"schema_version", kReportSchemaVersion},
                       {"config_hash", hex64(config_hash(cfg))},
                       {"checkpoint_config_hash", hex64(ckpt.config_hash)},
                       {"beta", cfg.mgs.beta},
                       {"modality_gap", m.modality_gap},
                       {"fisher_ratio", m.fisher_ratio},
                       {"visible_to_thermal", to_json(m.visible_to_thermal)},
                       {"thermal_to_visible", to_json(m.thermal_to_visible)}};
  const std::string text = report.dump(2) + "\n";
  if (!o.out.empty() && o.out != ".") {
    make_dir(o.out);
    write_text(fs::path(o.out) / "eval.json", text);
  }
  std::cout << text;
  return 0;
}

std::optional<Vector> parse_marginal(const std::string& text) {
  if (text.empty()) return std::nullopt;
  const Matrix m = parse_numeric_csv(text);
  if (m.rows() != 1) throw InvalidArgument("marginals must be a single comma-separated list");
  return Vector(m.row(0).transpose());
}

int cmd_ot_solve(const CommonOptions& o, const std::string& path, double epsilon, bool exact,
                 const std::string& rows_text, const std::string& cols_text, int max_iterations) {
  RunConfig cfg = resolve(o);
  cfg.sinkhorn.epsilon = epsilon;
  cfg.sinkhorn.max_iterations = max_iterations;
  cfg.validate();
  const CostMatrix cost{load_numeric_csv(path), 1.0};
  const auto rv = parse_marginal(rows_text);
  const auto cv = parse_marginal(cols_text);
  const MarginalWeights v = rv ? MarginalWeights::from(*rv) : MarginalWeights::uniform(cost.data.rows());
  const MarginalWeights t = cv ? MarginalWeights::from(*cv) : MarginalWeights::uniform(cost.data.cols());
  const TransportPlan plan = sinkhorn(cost, v, t, cfg.sinkhorn);
  json out = {{"schema_version", kReportSchemaVersion},
              {"config_hash", hex64(config_hash(cfg))},
              {"rows", cost.data.rows()},
              {"cols", cost.data.cols()},
              {"epsilon", epsilon},
              {"sinkhorn",
               {{"plan", matrix_json(plan.plan)},
                {"cost", transport_cost(plan, cost)},
                {"iterations", plan.iterations},
                {"converged", plan.converged},
                {"marginal_violation", plan.marginal_violation}}}};
  if (exact) {
    const TransportPlan ex = exact_transport(cost, v, t);
    out["exact"] = {{"plan", matrix_json(ex.plan)}, {"cost", transport_cost(ex, cost)}};
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_gradcheck(const CommonOptions& o, int num_probes, const std::optional<std::string>& corrupt) {
  const RunConfig cfg = resolve(o);
  const GradcheckReport report = run_gradcheck(cfg, num_probes, corrupt);
  json components = json::array();
  for (const ComponentCheck& c : report.components) {
    components.push_back({{"name", c.name},
                          {"probes", c.probes},
                          {"max_relative_error", c.max_relative_error},
                          {"passed", c.passed}});
  }
  json out = {{"schema_version", kReportSchemaVersion},
              {"config_hash", hex64(config_hash(cfg))},
              {"tolerance", kGradcheckTolerance},
              {"step", kGradcheckStep},
              {"num_probes", num_probes},
              {"passed", report.passed},
              {"components", components}};
  if (!report.warning.empty()) {
    out["warning"] = report.warning;
    std::cerr << "warning: " << report.warning << "\n";
  }
  std::cout << out.dump(2) << "\n";
  return report.passed ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modality transport alignment toolkit"};
  app.require_subcommand(1);

  CommonOptions gen_opts;
  auto* gen = app.add_subcommand("gen-data", "Write synthetic train/test feature files and a manifest");
  add_common(gen, gen_opts);

  CommonOptions train_opts;
  auto* train = app.add_subcommand("train", "Train and write metrics.csv, checkpoint.bin and config.ini");
  add_common(train, train_opts);
  train->add_option("--data", train_opts.data_dir, "Directory with train.csv and test.csv from gen-data");

  CommonOptions eval_opts;
  eval_opts.out = "";
  std::string checkpoint;
  std::optional<double> beta;
  auto* eval = app.add_subcommand("eval", "Retrieval report for a checkpoint, both directions");
  add_common(eval, eval_opts);
  eval->add_option("--data", eval_opts.data_dir, "Directory with train.csv and test.csv from gen-data");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint written by train")->required();
  eval->add_option("--beta", beta, "Local/global fusion weight override");

  CommonOptions ot_opts;
  std::string cost_path;
  double epsilon = 0.1;
  bool exact = false;
  std::string row_marginals, col_marginals;
  int max_iterations = 1000;
  auto* ot = app.add_subcommand("ot-solve", "Entropic transport plan for a cost CSV");
  add_common(ot, ot_opts, false);
  ot->add_option("cost", cost_path, "Cost matrix CSV")->required();
  ot->add_option("--epsilon", epsilon, "Regularization, relative to the largest cost")->capture_default_str();
  ot->add_flag("--exact", exact, "Also solve exactly for comparison");
  ot->add_option("--row-marginals", row_marginals, "Comma-separated row weights (default uniform)");
  ot->add_option("--col-marginals", col_marginals, "Comma-separated column weights (default uniform)");
  ot->add_option("--max-iterations", max_iterations, "Sinkhorn iteration cap")->capture_default_str();

  CommonOptions gc_opts;
  int num_probes = 20;
  std::optional<std::string> corrupt;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every analytic gradient");
  add_common(gc, gc_opts, false);
  gc->add_option("--num-probes", num_probes, "Coordinates probed per component")->capture_default_str();
  gc->add_option("--corrupt", corrupt, "Testing only: perturb one component's analytic gradient");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInvalid;
  }

  try {
    if (*gen) return cmd_gen_data(gen_opts);
    if (*train) return cmd_train(train_opts);
    if (*eval) return cmd_eval(eval_opts, checkpoint, beta);
    if (*ot) return cmd_ot_solve(ot_opts, cost_path, epsilon, exact, row_marginals, col_marginals, max_iterations);
    if (*gc) return cmd_gradcheck(gc_opts, num_probes, corrupt);
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const UnsupportedSize& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitInvalid;
}
