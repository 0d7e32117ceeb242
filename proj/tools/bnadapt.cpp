// bnadapt: generate / train / eval / estimators / reproduce.
//
// Exit codes: 0 success, 1 I/O or internal error, 2 config error,
// 3 tolerance failure, 4 method/model incompatibility.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "bnadapt/bench/config.hpp"
#include "bnadapt/bench/evalcsv.hpp"
#include "bnadapt/bench/recipes.hpp"
#include "bnadapt/bench/runner.hpp"
#include "bnadapt/estlab.hpp"

namespace fs = std::filesystem;
using namespace bnadapt;
using namespace bnadapt::bench;

namespace {

struct Common {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out;
  double scale = 1.0;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config (JSON); defaults to the built-in reference config");
  cmd->add_option("--seed", c.seeds, "replication seeds (comma separated)")->delimiter(',');
  cmd->add_option("--out", c.out, "output directory (BNADAPT_OUT overrides)");
  cmd->add_option("--scale", c.scale, "multiplier for domain counts, epochs and target counts");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_experiment(c.config);
  if (!c.seeds.empty()) cfg.seeds = c.seeds;
  if (c.scale != 1.0) cfg = apply_scale(cfg, c.scale);
  cfg.output_dir = resolve_output_dir(c.out, cfg).string();
  cfg.validate();
  return cfg;
}

std::vector<Alpha> parse_alphas(const std::vector<std::string>& v) {
  std::vector<Alpha> out;
  for (const auto& s : v) out.push_back(parse_alpha(s));
  return out;
}

int cmd_generate(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  Runner runner(cfg, cfg.output_dir);
  for (auto s : cfg.seeds) {
    const MetaDataset& meta = runner.dataset(s);
    std::cout << "seed " << s << ": " << meta.train.size() << " train / " << meta.val.size() << " val / "
              << meta.test.size() << " test domains, N=" << meta.config.perturbed_per_domain
              << " C=" << meta.config.controls_per_domain << ", generator seed " << meta.config.seed << " -> "
              << runner.dataset_dir(s).string() << " (manifest " << runner.manifest_hash(s) << ")\n";
  }
  return 0;
}

int cmd_train(const Common& c, const std::string& method) {
  const ExperimentConfig cfg = resolve(c);
  const MethodInfo info = method_info(method);
  check_trainable(info.checkpoint, cfg.generator);
  Runner runner(cfg, cfg.output_dir, true, &std::cerr);
  for (auto s : cfg.seeds) {
    runner.model(s, info.checkpoint);
    const TrainLog& log = runner.log(s, info.checkpoint);
    std::cout << "seed " << s << ": " << info.checkpoint << " best epoch " << log.best_epoch << " (val loss "
              << log.best_val_loss << "), stopped at " << log.last_epoch << " -> "
              << runner.checkpoint_path(s, info.checkpoint).string() << "\n";
  }
  return 0;
}

struct EvalFlags {
  std::string method;
  std::string checkpoint;
  std::vector<std::string> alphas;
  std::vector<std::size_t> labeled;
  std::optional<std::size_t> controls;
  std::string granularity;
  std::string csv;
};

int cmd_eval(const Common& c, const EvalFlags& f) {
  ExperimentConfig cfg = resolve(c);
  if (!f.alphas.empty()) cfg.evaluation.alphas = parse_alphas(f.alphas);
  if (!f.labeled.empty()) cfg.evaluation.labeled_batch = f.labeled;
  if (f.controls) cfg.evaluation.controls = {*f.controls};
  if (!f.granularity.empty()) cfg.evaluation.granularity = parse_granularity(f.granularity);
  cfg.validate();
  const MethodInfo info = method_info(f.method);
  const MethodSpec spec = method_spec(info.adapt, cfg.evaluation);
  Runner runner(cfg, cfg.output_dir, false);
  EvalTable table;
  for (auto s : cfg.seeds) {
    const fs::path data_dir = runner.dataset_dir(s);
    if (!fs::exists(data_dir / "manifest.json"))
      throw IoError("no dataset at " + data_dir.string() + " (run generate first)");
    const MetaDataset meta = read_dataset(data_dir);
    const fs::path ckpt = f.checkpoint.empty() ? runner.checkpoint_path(s, info.checkpoint) : fs::path(f.checkpoint);
    if (!fs::exists(ckpt)) throw IoError("no checkpoint at " + ckpt.string() + " (run train first)");
    const Checkpoint ck = read_checkpoint(ckpt.string());
    for (const auto& a : cfg.evaluation.alphas)
      for (auto l : cfg.evaluation.labeled_batch)
        for (auto cc : cfg.evaluation.controls) {
          const auto targets = make_targets(meta, a, l, cc, cfg.evaluation.target_domains);
          const EvalReport rep = evaluate(ck.model, targets, spec, cfg.evaluation.granularity, f.method);
          append_report(table, rep, a, l, cc, s);
          std::cout << f.method << " seed " << s << " alpha=" << format_alpha(a) << " L=" << l << " C=" << cc << ": "
                    << mean_pm_std(rep.mean, rep.std) << "\n";
        }
  }
  append_seed_aggregates(table);
  const fs::path out = f.csv.empty() ? fs::path(cfg.output_dir) / ("eval-" + f.method + ".csv") : fs::path(f.csv);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  binio::write_file(out.string(), to_csv(table));
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

struct EstFlags {
  std::size_t trials = 200000;
  std::vector<double> cell;
  std::string csv;
  std::uint64_t seed = 0;
};

int cmd_estimators(const EstFlags& f) {
  std::vector<est::Params> grid;
  if (f.cell.empty()) {
    grid = est::default_grid(f.trials, f.seed);
  } else {
    if (f.cell.size() != 4) throw ConfigError("--cell expects C,L,sigma,mu_bar");
    if (f.cell[0] < 0 || f.cell[1] < 0) throw ConfigError("--cell: C and L must be >= 0");
    est::Params p;
    p.C = static_cast<std::size_t>(f.cell[0]);
    p.L = static_cast<std::size_t>(f.cell[1]);
    p.sigma = f.cell[2];
    p.mu_bar = f.cell[3];
    p.trials = f.trials;
    p.seed = f.seed;
    grid.push_back(p);
  }
  const est::Report rep = est::compare_estimators(grid);
  const std::string csv = est::to_csv(rep);
  if (f.csv.empty()) {
    std::cout << csv;
  } else {
    const fs::path out(f.csv);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    binio::write_file(out.string(), csv);
    std::cout << "wrote " << out.string() << " (" << rep.rows.size() << " rows)\n";
  }
  if (rep.flagged_count() > 0) {
    throw ToleranceError(std::to_string(rep.flagged_count()) + " estimator cells outside tolerance");
  }
  return 0;
}

int cmd_reproduce(const Common& c, const std::string& recipe, const EvalFlags& f, std::optional<std::size_t> trials) {
  const ExperimentConfig cfg = resolve(c);
  RecipeOptions opt;
  if (!f.alphas.empty()) opt.alphas = parse_alphas(f.alphas);
  if (!f.labeled.empty()) opt.labeled_batch = f.labeled;
  opt.controls = f.controls;
  opt.estimator_trials = trials;
  Runner runner(cfg, cfg.output_dir, true, &std::cerr);
  const Bundle b = run_recipe(recipe, runner, opt);
  const auto files = write_bundle(b, fs::path(cfg.output_dir) / recipe);
  std::cout << table_text(b.table);
  for (const auto& p : files) std::cout << "wrote " << p.string() << "\n";
  if (b.estimators && b.estimators->flagged_count() > 0)
    throw ToleranceError(std::to_string(b.estimators->flagged_count()) + " estimator cells outside tolerance");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Batch-normalization test-time adaptation lab on synthetic multi-domain data"};
  app.require_subcommand(1);

  Common common;
  EvalFlags ef;
  EstFlags est_flags;
  std::string recipe;
  std::optional<std::size_t> recipe_trials;

  auto* gen = app.add_subcommand("generate", "write the synthetic dataset for every seed");
  add_common(gen, common);

  auto* train = app.add_subcommand("train", "train the checkpoint behind a method");
  add_common(train, common);
  train->add_option("--method", ef.method, "method name")->required();

  auto add_eval_flags = [&](CLI::App* cmd) {
    cmd->add_option("--alpha", ef.alphas, "Dirichlet alphas or 'balanced' (comma separated)")->delimiter(',');
    cmd->add_option("--labeled-batch", ef.labeled, "labeled batch sizes L (comma separated)")->delimiter(',');
    cmd->add_option("--controls", ef.controls, "control samples per target batch");
  };
  auto* eval = app.add_subcommand("eval", "adapt and score a trained method on fresh unseen domains");
  add_common(eval, common);
  add_eval_flags(eval);
  eval->add_option("--method", ef.method, "method name")->required();
  eval->add_option("--checkpoint", ef.checkpoint, "checkpoint file (default: from --out layout)");
  eval->add_option("--granularity", ef.granularity, "plate, batch or source");
  eval->add_option("--csv", ef.csv, "output CSV path (default: <out>/eval-<method>.csv)");

  auto* estimators = app.add_subcommand("estimators", "closed-form vs Monte Carlo estimator MSE");
  estimators->add_option("--trials", est_flags.trials, "Monte Carlo trials per cell");
  estimators->add_option("--cell", est_flags.cell, "single cell C,L,sigma,mu_bar")->delimiter(',');
  estimators->add_option("--seed", est_flags.seed, "base seed");
  estimators->add_option("--out", est_flags.csv, "output CSV path (default: stdout)");

  auto* reproduce = app.add_subcommand("reproduce", "run a recipe end to end and emit its table");
  add_common(reproduce, common);
  add_eval_flags(reproduce);
  reproduce->add_option("recipe", recipe, "recipe name")->required();
  reproduce->add_option("--trials", recipe_trials, "estimator-table Monte Carlo trials");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_generate(common);
    if (*train) return cmd_train(common, ef.method);
    if (*eval) return cmd_eval(common, ef);
    if (*estimators) return cmd_estimators(est_flags);
    if (*reproduce) return cmd_reproduce(common, recipe, ef, recipe_trials);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ToleranceError& e) {
    std::cerr << "tolerance failure: " << e.what() << "\n";
    return 3;
  } catch (const IncompatibleError& e) {
    std::cerr << "incompatible: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
