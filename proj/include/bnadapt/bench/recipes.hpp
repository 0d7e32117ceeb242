#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bnadapt/bench/runner.hpp"
#include "bnadapt/estlab.hpp"

namespace bnadapt::bench {

struct Table {
  std::string name;
  std::string caption;
  std::string corner = "Method";
  std::vector<std::string> columns;
  std::vector<std::pair<std::string, std::vector<std::string>>> rows;
};

inline std::string mean_pm_std(double m, double s) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f ± %.3f", m, s);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

inline std::string table_csv(const Table& t) {
  std::string out = csv_field(t.corner);
  for (const auto& c : t.columns) out += "," + csv_field(c);
  out += "\n";
  for (const auto& [label, cells] : t.rows) {
    out += csv_field(label);
    for (const auto& c : cells) out += "," + csv_field(c);
    out += "\n";
  }
  return out;
}

// Display width in code points, so "±" counts once.
inline std::size_t display_width(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s) n += (c & 0xC0) != 0x80;
  return n;
}

inline std::string table_text(const Table& t) {
  std::vector<std::size_t> width(t.columns.size() + 1, 0);
  width[0] = display_width(t.corner);
  for (std::size_t j = 0; j < t.columns.size(); ++j) width[j + 1] = display_width(t.columns[j]);
  for (const auto& [label, cells] : t.rows) {
    width[0] = std::max(width[0], display_width(label));
    for (std::size_t j = 0; j < cells.size(); ++j) width[j + 1] = std::max(width[j + 1], display_width(cells[j]));
  }
  auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w - display_width(s), ' '); };
  std::string out = t.caption + "\n";
  std::string line = pad(t.corner, width[0]);
  for (std::size_t j = 0; j < t.columns.size(); ++j) line += "  " + pad(t.columns[j], width[j + 1]);
  out += line + "\n";
  std::size_t total = width[0];
  for (std::size_t j = 1; j < width.size(); ++j) total += 2 + width[j];
  out += std::string(total, '-') + "\n";
  for (const auto& [label, cells] : t.rows) {
    line = pad(label, width[0]);
    for (std::size_t j = 0; j < cells.size(); ++j) line += "  " + pad(cells[j], width[j + 1]);
    out += line + "\n";
  }
  return out;
}

struct Bundle {
  std::string name;
  Table table;
  EvalTable detail;
  std::optional<est::Report> estimators;
  Json report;
};

inline const std::vector<std::string>& recipe_names() {
  static const std::vector<std::string> names = {"gap-table",           "label-shift-table", "batch-size-table",
                                                 "control-ratio-table", "estimator-table",   "alignment-table"};
  return names;
}

// Optional overrides of a recipe's built-in grid.
struct RecipeOptions {
  std::optional<std::vector<Alpha>> alphas;
  std::optional<std::vector<std::size_t>> labeled_batch;
  std::optional<std::size_t> controls;
  std::optional<std::size_t> estimator_trials;
};

namespace detail {

struct RowSpec {
  std::string label;   // table row
  std::string method;  // registry name
  std::optional<AdaptMethod> override;
  std::string tag;  // method column in the detail CSV
};

inline const std::vector<RowSpec>& standard_rows() {
  static const std::vector<RowSpec> rows = {
      {"ERM (no adaptation)", "erm-bn", std::nullopt, "erm-bn"},
      {"TENT", "tent", std::nullopt, "tent"},
      {"AdaBN", "adabn", std::nullopt, "adabn"},
      {"ARM-BN", "arm-bn", std::nullopt, "arm-bn"},
      {"CS-ARM-BN", "cs-arm-bn", std::nullopt, "cs-arm-bn"},
  };
  return rows;
}

inline Json base_report(Runner& runner, const std::string& name) {
  Json hashes = Json::object();
  for (auto s : runner.config().seeds) hashes[std::to_string(s)] = runner.manifest_hash(s);
  return Json{{"recipe", name},
              {"label", "synthetic analog"},
              {"config", to_json(runner.config())},
              {"dataset_manifest_sha1", hashes}};
}

inline std::string caption(const std::string& name, const std::string& what, const ExperimentConfig& c) {
  std::string seeds;
  for (auto s : c.seeds) seeds += (seeds.empty() ? "" : ",") + std::to_string(s);
  return name + " (synthetic analog): " + what + "; mean ± std over seeds {" + seeds + "}";
}

}  // namespace detail

inline Bundle recipe_label_shift(Runner& runner, const RecipeOptions& opt = {}) {
  const std::vector<Alpha> alphas = opt.alphas.value_or(std::vector<Alpha>{4.0, 1.0, 0.1, 0.01});
  const std::size_t L = opt.labeled_batch ? opt.labeled_batch->front() : 36;
  const std::size_t C = opt.controls.value_or(288);
  Bundle b;
  b.name = "label-shift-table";
  for (auto s : runner.config().seeds)
    for (const auto& row : detail::standard_rows())
      for (const auto& a : alphas)
        runner.evaluate_method(b.detail, s, row.method, a, L, C, Granularity::plate, row.override, row.tag);
  append_seed_aggregates(b.detail);
  b.table.name = b.name;
  b.table.caption = detail::caption(b.name, "accuracy on unseen domains under Dirichlet label shift, L=" +
                                                std::to_string(L) + ", C=" + std::to_string(C),
                                    runner.config());
  for (const auto& a : alphas) b.table.columns.push_back("alpha=" + format_alpha(a));
  for (const auto& row : detail::standard_rows()) {
    std::vector<std::string> cells;
    for (const auto& a : alphas) {
      const auto [m, sd] = lookup(b.detail, row.tag, a, L, C, Granularity::plate);
      cells.push_back(mean_pm_std(m, sd));
    }
    b.table.rows.emplace_back(row.label, cells);
  }
  b.report = detail::base_report(runner, b.name);
  return b;
}

inline Bundle recipe_batch_size(Runner& runner, const RecipeOptions& opt = {}) {
  const std::vector<std::size_t> ls = opt.labeled_batch.value_or(std::vector<std::size_t>{1, 2, 4, 8, 16, 32, 64, 128});
  const std::size_t C = opt.controls.value_or(128);
  const std::size_t full = runner.config().generator.perturbed_per_domain;
  Bundle b;
  b.name = "batch-size-table";
  std::vector<std::size_t> all = ls;
  all.push_back(full);
  for (auto s : runner.config().seeds)
    for (const auto& row : detail::standard_rows())
      for (std::size_t i = 0; i < all.size(); ++i) {
        const std::string tag = i + 1 == all.size() ? row.tag + ":full-domain" : row.tag;
        runner.evaluate_method(b.detail, s, row.method, std::nullopt, all[i], C, Granularity::plate, row.override,
                               tag);
      }
  append_seed_aggregates(b.detail);
  b.table.name = b.name;
  b.table.caption = detail::caption(
      b.name, "accuracy on unseen domains by labeled batch size L, C=" + std::to_string(C) + ", balanced labels",
      runner.config());
  for (auto l : ls) b.table.columns.push_back(std::to_string(l));
  b.table.columns.push_back("Full domain");
  for (const auto& row : detail::standard_rows()) {
    std::vector<std::string> cells;
    for (std::size_t i = 0; i < all.size(); ++i) {
      const std::string tag = i + 1 == all.size() ? row.tag + ":full-domain" : row.tag;
      const auto [m, sd] = lookup(b.detail, tag, std::nullopt, all[i], C, Granularity::plate);
      cells.push_back(mean_pm_std(m, sd));
    }
    b.table.rows.emplace_back(row.label, cells);
  }
  b.report = detail::base_report(runner, b.name);
  return b;
}

inline Bundle recipe_control_ratio(Runner& runner, const RecipeOptions& opt = {}) {
  const std::vector<std::size_t> ls = opt.labeled_batch.value_or(std::vector<std::size_t>{1, 2, 4, 8, 16});
  const std::vector<detail::RowSpec> rows = {
      {"ARM-BN (perturbed + controls)", "arm-bn", AdaptMethod::cs, "arm-bn+controls"},
      {"CS-ARM-BN", "cs-arm-bn", std::nullopt, "cs-arm-bn"},
  };
  Bundle b;
  b.name = "control-ratio-table";
  for (auto s : runner.config().seeds)
    for (const auto& row : rows)
      for (auto l : ls)
        runner.evaluate_method(b.detail, s, row.method, std::nullopt, l, 4 * l, Granularity::plate, row.override,
                               row.tag);
  append_seed_aggregates(b.detail);
  b.table.name = b.name;
  b.table.caption = detail::caption(b.name, "same total context size, 1 perturbed : 4 controls", runner.config());
  for (auto l : ls)
    b.table.columns.push_back(std::to_string(5 * l) + " [" + std::to_string(l) + " : " + std::to_string(4 * l) + "]");
  for (const auto& row : rows) {
    std::vector<std::string> cells;
    for (auto l : ls) {
      const auto [m, sd] = lookup(b.detail, row.tag, std::nullopt, l, 4 * l, Granularity::plate);
      cells.push_back(mean_pm_std(m, sd));
    }
    b.table.rows.emplace_back(row.label, cells);
  }
  b.report = detail::base_report(runner, b.name);
  return b;
}

inline Bundle recipe_gap(Runner& runner, const RecipeOptions& opt = {}) {
  const ExperimentConfig& c = runner.config();
  const std::size_t L = opt.labeled_batch ? opt.labeled_batch->front() : c.generator.perturbed_per_domain;
  const std::size_t C = opt.controls.value_or(c.generator.controls_per_domain);
  const std::vector<detail::RowSpec> rows = {
      {"ERM (no adaptation)", "erm-bn", std::nullopt, "erm-bn"},
      {"AdaBN", "adabn", std::nullopt, "adabn"},
      {"TENT", "tent", std::nullopt, "tent"},
      {"ARM-BN", "arm-bn", std::nullopt, "arm-bn"},
      {"CS-ARM-BN", "cs-arm-bn", std::nullopt, "cs-arm-bn"},
  };
  Bundle b;
  b.name = "gap-table";
  for (auto s : c.seeds) {
    const auto in_targets = make_in_domain_targets(runner.dataset(s), L, C, c.evaluation.target_domains);
    for (const auto& row : rows) {
      const MethodInfo info = method_info(row.method);
      const EvalReport in = evaluate(runner.model(s, info.checkpoint), in_targets,
                                     method_spec(row.override.value_or(info.adapt), c.evaluation), Granularity::plate,
                                     row.tag + ":in-domain");
      append_report(b.detail, in, std::nullopt, L, C, s);
      runner.evaluate_method(b.detail, s, row.method, std::nullopt, L, C, Granularity::plate, row.override,
                             row.tag + ":new-domain");
    }
  }
  append_seed_aggregates(b.detail);
  b.table.name = b.name;
  b.table.caption = detail::caption(b.name, "accuracy on training domains vs unseen domains, full-domain context (L=" +
                                                std::to_string(L) + ", C=" + std::to_string(C) + ")",
                                    c);
  b.table.columns = {"In-domain accuracy", "New-domain accuracy"};
  for (const auto& row : rows) {
    const auto [mi, si] = lookup(b.detail, row.tag + ":in-domain", std::nullopt, L, C, Granularity::plate);
    const auto [mn, sn] = lookup(b.detail, row.tag + ":new-domain", std::nullopt, L, C, Granularity::plate);
    b.table.rows.emplace_back(row.label, std::vector<std::string>{mean_pm_std(mi, si), mean_pm_std(mn, sn)});
  }
  b.report = detail::base_report(runner, b.name);
  return b;
}

inline Bundle recipe_estimators(Runner& runner, const RecipeOptions& opt = {}) {
  const std::size_t trials = opt.estimator_trials.value_or(200000);
  Bundle b;
  b.name = "estimator-table";
  b.estimators = est::compare_estimators(est::default_grid(trials, runner.config().seeds.front()));
  est::Params cell;
  cell.C = 12;
  cell.L = 4;
  cell.sigma = 1.0;
  cell.mu_bar = 0.5;
  cell.trials = trials;
  cell.seed = runner.config().seeds.front();
  const auto mc = est::monte_carlo_all(cell);
  b.table.name = b.name;
  b.table.caption = "estimator-table (synthetic analog): MSE decomposition of the three domain-offset estimators at "
                    "C=12, L=4, sigma=1, mu_bar=0.5 (" +
                    std::to_string(trials) + " trials); full grid in the detail CSV";
  b.table.corner = "Estimator";
  b.table.columns = {"Bias^2", "Variance", "MSE", "Bias^2 (MC)", "Variance (MC)", "MSE (MC)"};
  auto f = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (est::Estimator e : est::kEstimators) {
    const auto cf = est::mse_closed_form(e, cell);
    const auto m = mc[static_cast<std::size_t>(e)];
    b.table.rows.emplace_back(est::to_string(e), std::vector<std::string>{f(cf.bias2), f(cf.variance), f(cf.mse),
                                                                          f(m.bias2), f(m.variance), f(m.mse)});
  }
  b.report = Json{{"recipe", b.name},
                  {"label", "synthetic analog"},
                  {"config", to_json(runner.config())},
                  {"trials", trials},
                  {"flagged_cells", b.estimators->flagged_count()}};
  return b;
}

inline Bundle recipe_alignment(Runner& flat_runner, const RecipeOptions& opt = {}) {
  ExperimentConfig c = flat_runner.config();
  c.generator.hierarchy.mode = Hierarchy::two_level;
  Runner runner(c, flat_runner.out_dir() / "alignment", true);
  const std::size_t children = c.generator.hierarchy.children_per_parent;
  const std::size_t parents = std::max<std::size_t>(2, c.evaluation.target_domains / children);
  const std::size_t L = opt.labeled_batch ? opt.labeled_batch->front() : 64;
  const std::size_t C = opt.controls.value_or(0);
  const Granularity levels[] = {Granularity::source, Granularity::batch, Granularity::plate};
  Bundle b;
  b.name = "alignment-table";
  for (auto s : c.seeds) {
    const auto targets = make_hierarchical_targets(runner.dataset(s), parents, children, L, C);
    for (Granularity g : levels) {
      const EvalReport rep = evaluate(runner.model(s, "erm-bn"), targets, method_spec(AdaptMethod::adabn, c.evaluation),
                                      g, "adabn");
      append_report(b.detail, rep, std::nullopt, L, C, s);
    }
  }
  append_seed_aggregates(b.detail);
  b.table.name = b.name;
  b.table.caption = detail::caption(b.name, "AdaBN adapting per source, per batch and per plate (two-level domains)", c);
  b.table.corner = "Alignment level";
  b.table.columns = {"Accuracy", "Number of domains", "Samples per domain (avg.)"};
  const std::size_t total = parents * children * L;
  for (Granularity g : levels) {
    const std::size_t domains = g == Granularity::source ? 1 : g == Granularity::batch ? parents : parents * children;
    const auto [m, sd] = lookup(b.detail, "adabn", std::nullopt, L, C, g);
    std::string label = to_string(g);
    label[0] = static_cast<char>(std::toupper(label[0]));
    b.table.rows.emplace_back(label, std::vector<std::string>{mean_pm_std(m, sd), std::to_string(domains),
                                                              std::to_string(total / domains)});
  }
  b.report = detail::base_report(runner, b.name);
  return b;
}

inline Bundle run_recipe(const std::string& name, Runner& runner, const RecipeOptions& opt = {}) {
  if (name == "gap-table") return recipe_gap(runner, opt);
  if (name == "label-shift-table") return recipe_label_shift(runner, opt);
  if (name == "batch-size-table") return recipe_batch_size(runner, opt);
  if (name == "control-ratio-table") return recipe_control_ratio(runner, opt);
  if (name == "estimator-table") return recipe_estimators(runner, opt);
  if (name == "alignment-table") return recipe_alignment(runner, opt);
  std::string known;
  for (const auto& n : recipe_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown recipe \"" + name + "\" (known: " + known + ")");
}

// <dir>/<name>.csv (table), <name>.txt, <name>-detail.csv, <name>-report.json
inline std::vector<std::filesystem::path> write_bundle(const Bundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  auto put = [&](const std::string& file, const std::string& text) {
    binio::write_file((dir / file).string(), text);
    written.push_back(dir / file);
  };
  put(b.name + ".csv", table_csv(b.table));
  put(b.name + ".txt", table_text(b.table));
  if (b.estimators) put(b.name + "-detail.csv", est::to_csv(*b.estimators));
  else put(b.name + "-detail.csv", to_csv(b.detail));
  put(b.name + "-report.json", b.report.dump(2) + "\n");
  return written;
}

}  // namespace bnadapt::bench
