// Acceptance run: one PASS/FAIL line per primary criterion.
//
//   acceptance <config.json> <scratch dir>
//
// Exit status is 0 only when every criterion passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "bnadapt/bench/recipes.hpp"
#include "bnadapt/bench/runner.hpp"
#include "bnadapt/estlab.hpp"
#include "gradcases.hpp"

using namespace bnadapt;
using namespace bnadapt::bench;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const std::function<Outcome()>& check) {
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << title << ": " << o.detail << std::endl;
}

double seed_mean(const EvalTable& t, const std::string& tag, const Alpha& a, std::size_t L, std::size_t C) {
  return lookup(t, tag, a, L, C, Granularity::plate).first;
}

bool not_bn_affine(ParamKind k) { return !is_bn_affine(k); }

}  // namespace

int main(int argc, char** argv) {
  if (argc != 3) {
    std::cerr << "usage: acceptance <config.json> <scratch dir>\n";
    return 2;
  }
  unsetenv(kOutputEnv);
  const ExperimentConfig cfg = load_experiment(argv[1]);
  const fs::path scratch = argv[2];
  fs::remove_all(scratch);
  fs::create_directories(scratch);
  Runner runner(cfg, scratch / "shared", false);

  report(1, "estimator grid, Monte Carlo vs closed form", [] {
    const auto t0 = Clock::now();
    const est::Report r = est::compare_estimators(est::default_grid(200000, 0));
    const double secs = seconds_since(t0);
    double worst = 0.0;
    for (const auto& row : r.rows) worst = std::max(worst, row.rel_gap);
    return Outcome{r.flagged_count() == 0 && secs < 60.0,
                   std::to_string(r.flagged_count()) + "/" + std::to_string(r.rows.size()) +
                       " cells outside 2% (abs 1e-3 below 0.05), worst rel gap " + fmt("%.4f", worst) + ", " +
                       fmt("%.1f", secs) + " s (limit 60 s)"};
  });

  report(2, "closed-form identities, bit-exact", [] {
    std::size_t bad = 0, cells = 0;
    for (const est::Params& p : est::default_grid(1)) {
      const auto arm = est::mse_closed_form(est::Estimator::arm_bn, p);
      const auto ctl = est::mse_closed_form(est::Estimator::controls_only, p);
      const auto cs = est::mse_closed_form(est::Estimator::cs_arm_bn, p);
      const double ratio = static_cast<double>(p.L) / static_cast<double>(p.C + p.L);
      const double s2 = p.sigma * p.sigma;
      const bool ok = cs.bias2 == ratio * ratio * arm.bias2 && cs.variance == s2 / static_cast<double>(p.C + p.L) &&
                      cs.variance <= std::min(arm.variance, ctl.variance);
      bad += !ok;
      ++cells;
    }
    return Outcome{bad == 0, std::to_string(cells - bad) + "/" + std::to_string(cells) + " grid cells exact"};
  });

  report(3, "finite-difference gradient checks", [] {
    const auto t0 = Clock::now();
    RandomStream consts(7, 1);
    const auto cases = testing::gradient_cases(consts);
    double worst = 0.0;
    std::string worst_name;
    for (std::size_t c = 0; c < cases.size(); ++c) {
      RandomStream pts(11, c);
      for (int k = 0; k < 10; ++k) {
        const Tensor x = testing::random_matrix(pts, cases[c].rows, cases[c].cols);
        const double e = grad_check(cases[c].f, x, 1e-5);
        if (e > worst) {
          worst = e;
          worst_name = cases[c].name;
        }
      }
    }
    const double secs = seconds_since(t0);
    return Outcome{worst < 1e-5 && secs < 30.0, std::to_string(cases.size()) + " primitives x 10 points, max rel err " +
                                                    fmt("%.2e", worst) + " (" + worst_name + "), " +
                                                    fmt("%.2f", secs) + " s (limit 30 s)"};
  });

  report(4, "label shift, L=36, C=288", [&] {
    const auto t0 = Clock::now();
    RecipeOptions opt;
    opt.alphas = std::vector<Alpha>{1.0, 0.01};
    opt.labeled_batch = std::vector<std::size_t>{36};
    opt.controls = 288;
    const Bundle b = run_recipe("label-shift-table", runner, opt);
    const double secs = seconds_since(t0);
    auto acc = [&](const std::string& tag, double a) { return seed_mean(b.detail, tag, a, 36, 288); };
    const double cs1 = acc("cs-arm-bn", 1.0), cs001 = acc("cs-arm-bn", 0.01);
    const double erm = acc("erm-bn", 0.01);
    const double arm1 = acc("arm-bn", 1.0), arm001 = acc("arm-bn", 0.01);
    const double ada1 = acc("adabn", 1.0), ada001 = acc("adabn", 0.01);
    const double tent = acc("tent", 0.01);
    const bool a = cs001 >= 0.9 * cs1;
    const bool bb = arm1 - arm001 >= 0.2 && ada1 - ada001 >= 0.2;
    const bool c = cs001 > erm && erm > std::max({arm001, ada001, tent});
    std::ostringstream os;
    os << "(a) CS " << fmt("%.3f", cs001) << " vs 0.9 x " << fmt("%.3f", cs1) << (a ? " ok" : " FAIL")
       << "; (b) drop ARM-BN " << fmt("%.3f", arm1 - arm001) << ", AdaBN " << fmt("%.3f", ada1 - ada001)
       << (bb ? " ok" : " FAIL") << "; (c) CS " << fmt("%.3f", cs001) << " > ERM " << fmt("%.3f", erm)
       << " > max(ARM-BN " << fmt("%.3f", arm001) << ", AdaBN " << fmt("%.3f", ada001) << ", TENT "
       << fmt("%.3f", tent) << ")" << (c ? " ok" : " FAIL") << "; " << fmt("%.0f", secs) << " s (limit 900 s)";
    return Outcome{a && bb && c && secs < 900.0, os.str()};
  });

  report(5, "small labeled batch, L=1, C=128", [&] {
    RecipeOptions opt;
    opt.labeled_batch = std::vector<std::size_t>{1, 64};
    opt.controls = 128;
    const Bundle b = run_recipe("batch-size-table", runner, opt);
    auto acc = [&](const std::string& tag, std::size_t l) { return seed_mean(b.detail, tag, std::nullopt, l, 128); };
    const double cs1 = acc("cs-arm-bn", 1), cs64 = acc("cs-arm-bn", 64);
    const double arm1 = acc("arm-bn", 1), ada1 = acc("adabn", 1);
    const bool ok = std::abs(cs1 - cs64) <= 0.03 && arm1 < 0.225 && ada1 < 0.225;
    return Outcome{ok, "CS L=1 " + fmt("%.3f", cs1) + " vs L=64 " + fmt("%.3f", cs64) + " (|gap| <= 0.03); ARM-BN " +
                           fmt("%.3f", arm1) + ", AdaBN " + fmt("%.3f", ada1) + " at L=1 (< 0.225)"};
  });

  report(6, "generalization gap, full-domain context", [&] {
    const Bundle b = run_recipe("gap-table", runner);
    const std::size_t L = cfg.generator.perturbed_per_domain, C = cfg.generator.controls_per_domain;
    auto acc = [&](const std::string& tag) { return seed_mean(b.detail, tag, std::nullopt, L, C); };
    const double erm_in = acc("erm-bn:in-domain"), erm_new = acc("erm-bn:new-domain");
    const double gap = erm_in - erm_new;
    const double arm_res = erm_in - acc("arm-bn:new-domain");
    const double cs_res = erm_in - acc("cs-arm-bn:new-domain");
    const bool ok = gap >= 0.15 && arm_res <= 0.05 && cs_res <= 0.05;
    return Outcome{ok, "ERM in-domain " + fmt("%.3f", erm_in) + " - new-domain " + fmt("%.3f", erm_new) + " = " +
                           fmt("%.3f", gap) + " (>= 0.15); residual vs ERM in-domain: ARM-BN " + fmt("%+.3f", arm_res) +
                           ", CS-ARM-BN " + fmt("%+.3f", cs_res) + " (<= 0.05)"};
  });

  report(7, "BEN relabel invariance and ARM-BEN under label shift", [&] {
    std::size_t identical = 0, total = 0;
    EvalTable t;
    for (auto s : cfg.seeds) {
      const Model& m = runner.model(s, "arm-ben");
      const auto a = make_targets(runner.dataset(s), 1.0, 36, 288, cfg.evaluation.target_domains);
      const auto b = make_targets(runner.dataset(s), 0.01, 36, 288, cfg.evaluation.target_domains);
      for (std::size_t j = 0; j < a.size(); ++j) {
        // Same controls, different perturbed rows and labels.
        const Model ma = adapt_ben(m, AdaptationContext(a[j].X, a[j].Z, ContextPolicy::controls_only));
        const Model mb = adapt_ben(m, AdaptationContext(b[j].X, b[j].Z, ContextPolicy::controls_only));
        identical += checkpoint_bytes(ma) == checkpoint_bytes(mb);
        ++total;
      }
      runner.evaluate_method(t, s, "arm-ben", 1.0, 36, 288, Granularity::plate);
      runner.evaluate_method(t, s, "arm-ben", 0.01, 36, 288, Granularity::plate);
    }
    append_seed_aggregates(t);
    const double a1 = seed_mean(t, "arm-ben", 1.0, 36, 288), a001 = seed_mean(t, "arm-ben", 0.01, 36, 288);
    const bool ok = identical == total && std::abs(a1 - a001) <= 0.02;
    return Outcome{ok, std::to_string(identical) + "/" + std::to_string(total) +
                           " adapted models bit-identical; ARM-BEN alpha=0.01 " + fmt("%.3f", a001) + " vs alpha=1 " +
                           fmt("%.3f", a1) + " (|gap| <= 0.02)"};
  });

  report(8, "TENT descent, frozen weights, zero steps", [&] {
    std::size_t runs = 0, monotone = 0, frozen = 0, zero_exact = 0;
    double worst_rise = -1e300;
    for (auto s : cfg.seeds) {
      const Model& m = runner.model(s, "erm-bn");
      const auto targets = make_targets(runner.dataset(s), 0.01, 36, 288, cfg.evaluation.target_domains);
      const auto checksum = parameter_checksum(m, not_bn_affine);
      for (const auto& t : targets) {
        const auto ctx = AdaptationContext::perturbed_only(t.X);
        const TentResult r = adapt_tent_traced(m, ctx, cfg.evaluation.tent);
        bool mono = true;
        for (std::size_t i = 1; i < r.entropy.size(); ++i) {
          worst_rise = std::max(worst_rise, r.entropy[i] - r.entropy[i - 1]);
          mono = mono && r.entropy[i] <= r.entropy[i - 1] + 1e-6;
        }
        monotone += mono;
        frozen += parameter_checksum(r.model, not_bn_affine) == checksum;
        TentConfig zero = cfg.evaluation.tent;
        zero.steps = 0;
        zero_exact += checkpoint_bytes(adapt_tent(m, ctx, zero)) == checkpoint_bytes(adapt_adabn(m, ctx));
        ++runs;
      }
    }
    const bool ok = monotone == runs && frozen == runs && zero_exact == runs;
    return Outcome{ok, std::to_string(monotone) + "/" + std::to_string(runs) +
                           " entropy traces non-increasing (largest step change " + fmt("%+.2e", worst_rise) + "), " +
                           std::to_string(frozen) + "/" + std::to_string(runs) + " frozen checksums unchanged, " +
                           std::to_string(zero_exact) + "/" + std::to_string(runs) + " zero-step runs equal AdaBN"};
  });

  report(9, "TVN whitening of controls, ridge 1e-8", [&] {
    double worst_mean = 0.0, worst_cov = 0.0;
    std::size_t n = 0;
    for (auto s : cfg.seeds) {
      for (const auto& t : make_targets(runner.dataset(s), 1.0, 36, 288, cfg.evaluation.target_domains)) {
        const TvnResult r = tvn_whiten(t.Z, t.Z, Tensor::identity(t.Z.cols()), 1e-8, Recolor::none);
        const Tensor mu = column_mean(r.whitened);
        for (double v : mu.values()) worst_mean = std::max(worst_mean, std::abs(v));
        Tensor d = covariance(r.whitened);
        for (std::size_t i = 0; i < d.rows(); ++i) d(i, i) -= 1.0;
        worst_cov = std::max(worst_cov, frobenius_norm(d));
        ++n;
      }
    }
    return Outcome{worst_mean < 1e-9 && worst_cov < 1e-6,
                   std::to_string(n) + " control sets, max |mean| " + fmt("%.2e", worst_mean) + " (< 1e-9), max ||cov - I||_F " +
                       fmt("%.2e", worst_cov) + " (< 1e-6)"};
  });

  report(10, "reproduce label-shift-table is byte-identical", [&] {
    std::vector<std::map<std::string, std::string>> runs;
    for (const char* tag : {"run-a", "run-b"}) {
      Runner fresh(cfg, scratch / tag, true);
      const Bundle b = run_recipe("label-shift-table", fresh);
      std::map<std::string, std::string> csvs;
      for (const auto& p : write_bundle(b, scratch / tag / b.name))
        if (p.extension() == ".csv") csvs[p.filename().string()] = binio::read_file(p.string());
      runs.push_back(std::move(csvs));
    }
    const bool ok = runs[0] == runs[1] && runs[0].size() == 2;
    std::string names;
    for (const auto& [k, v] : runs[0]) names += (names.empty() ? "" : ", ") + k + " (" + std::to_string(v.size()) + " B)";
    return Outcome{ok, std::string(ok ? "identical: " : "differ: ") + names};
  });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
