// Tiny in-memory label-shift table plus one estimator cell.
// Build with -DBNADAPT_BUILD_SAMPLES=ON, run ./build/samples/label_shift_demo.
#include <cstdio>
#include <filesystem>

#include "bnadapt/bench/recipes.hpp"

using namespace bnadapt;

int main() {
  bench::ExperimentConfig c;
  c.generator.dim = 8;
  c.generator.classes = 4;
  c.generator.n_domains_train = 8;
  c.generator.n_domains_val = 2;
  c.generator.n_domains_test = 2;
  c.generator.perturbed_per_domain = 128;
  c.generator.controls_per_domain = 128;
  c.model.hidden = {32};
  c.training.max_epochs = 20;
  c.training.episodes_per_epoch = 10;
  c.evaluation.target_domains = 5;
  c.seeds = {0};

  // persist=false keeps datasets and checkpoints in memory
  bench::Runner runner(c, std::filesystem::temp_directory_path() / "bnadapt-demo", false);
  bench::RecipeOptions opt;
  opt.labeled_batch = std::vector<std::size_t>{16};
  opt.controls = 64;
  const bench::Bundle b = bench::run_recipe("label-shift-table", runner, opt);
  std::printf("%s\n", bench::table_text(b.table).c_str());

  est::Params p;
  p.C = 12;
  p.L = 4;
  p.sigma = 1.0;
  p.mu_bar = 0.5;
  const est::Decomposition d = est::mse_closed_form(est::Estimator::cs_arm_bn, p);
  std::printf("pooled estimator C=12 L=4: bias2 %g  var %g  mse %g\n", d.bias2, d.variance, d.mse);
  return 0;
}
