#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "bnadapt/bench/config.hpp"
#include "bnadapt/bench/evalcsv.hpp"
#include "bnadapt/bench/sha1.hpp"
#include "bnadapt/metatrain.hpp"
#include "bnadapt/model.hpp"
#include "bnadapt/synthgen.hpp"

namespace bnadapt::bench {

// How a method name maps onto a trained checkpoint and a test-time
// adaptation. Several methods share one checkpoint (adabn, tent and ben
// all adapt the erm-bn model).
struct MethodInfo {
  std::string name;
  std::string checkpoint;
  AdaptMethod adapt = AdaptMethod::none;
};

inline MethodInfo method_info(const std::string& name) {
  require_method(name);
  static const std::map<std::string, MethodInfo> table = {
      {"erm-bn", {"erm-bn", "erm-bn", AdaptMethod::none}},
      {"erm-psn", {"erm-psn", "erm-psn", AdaptMethod::none}},
      {"adabn", {"adabn", "erm-bn", AdaptMethod::adabn}},
      {"tent", {"tent", "erm-bn", AdaptMethod::tent}},
      {"ben", {"ben", "erm-bn", AdaptMethod::ben}},
      {"arm-bn", {"arm-bn", "arm-bn", AdaptMethod::adabn}},
      {"arm-ben", {"arm-ben", "arm-ben", AdaptMethod::ben}},
      {"arm-cml", {"arm-cml", "arm-cml", AdaptMethod::cml}},
      {"cs-arm-bn", {"cs-arm-bn", "cs-arm-bn", AdaptMethod::cs}},
      {"tvn-probe", {"tvn-probe", "tvn-probe", AdaptMethod::tvn}},
      {"coral-erm", {"coral-erm", "coral-erm", AdaptMethod::none}},
  };
  return table.at(name);
}

inline MethodSpec method_spec(AdaptMethod adapt, const EvaluationConfig& e) {
  MethodSpec s;
  s.adapt = adapt;
  s.tent = e.tent;
  s.tvn_ridge = e.tvn_ridge;
  s.recolor = e.tvn_recolor;
  return s;
}

inline Architecture architecture_for(const std::string& checkpoint, const ExperimentConfig& c) {
  Architecture a;
  a.input_dim = c.generator.dim;
  a.classes = c.generator.classes;
  a.hidden = c.model.hidden;
  a.norm = NormMode::batchnorm;
  a.context_dim = 0;
  a.encoder_hidden = c.model.encoder_hidden;
  if (checkpoint == "erm-psn") a.norm = NormMode::per_sample;
  if (checkpoint == "arm-cml") {
    a.norm = NormMode::none;
    a.context_dim = c.model.context_dim;
  }
  if (checkpoint == "tvn-probe") {
    a.norm = NormMode::none;
    a.hidden.clear();
  }
  return a;
}

// Control-dependent checkpoints refuse a dataset without controls before
// any training happens.
inline void check_trainable(const std::string& checkpoint, const GeneratorConfig& g) {
  if ((checkpoint == "cs-arm-bn" || checkpoint == "arm-ben" || checkpoint == "tvn-probe") && g.controls_per_domain == 0)
    throw IncompatibleError(checkpoint + " needs control samples, but the generator has C = 0");
  if (checkpoint == "tvn-probe" && g.controls_per_domain < 2)
    throw IncompatibleError("tvn-probe needs at least 2 controls per domain");
}

inline TrainResult train_checkpoint(const std::string& checkpoint, const MetaDataset& meta, const ExperimentConfig& c,
                                    std::uint64_t seed) {
  check_trainable(checkpoint, meta.config);
  const TrainConfig tc = training_for_seed(c, seed);
  Model model(architecture_for(checkpoint, c), ModelInit{tc.seed, false});
  if (checkpoint == "erm-bn" || checkpoint == "erm-psn") return train_erm(std::move(model), meta, tc);
  if (checkpoint == "arm-bn") return train_arm(std::move(model), meta, tc, ArmVariant::arm_bn);
  if (checkpoint == "cs-arm-bn") return train_arm(std::move(model), meta, tc, ArmVariant::cs_arm_bn);
  if (checkpoint == "arm-ben") return train_arm(std::move(model), meta, tc, ArmVariant::arm_ben);
  if (checkpoint == "arm-cml") return train_arm(std::move(model), meta, tc, ArmVariant::arm_cml);
  if (checkpoint == "tvn-probe") return train_tvn_probe(std::move(model), meta, tc, c.evaluation.tvn_ridge);
  if (checkpoint == "coral-erm") return train_coral_erm(std::move(model), meta, meta.test, tc);
  throw ConfigError("no trainer for checkpoint " + checkpoint);
}

inline constexpr std::uint64_t kTargetStream = 0x746172676574ULL;

// Target batches for one replication seed. Batch j always uses the same
// sub-stream, so batches that differ only in alpha or L share offsets,
// controls and noise.
inline std::vector<DomainBatch> make_targets(const MetaDataset& meta, const Alpha& alpha, std::size_t L,
                                             std::size_t C, std::size_t count) {
  const RandomStream root(meta.config.seed, kTargetStream);
  std::vector<DomainBatch> out;
  for (std::size_t j = 0; j < count; ++j) {
    const LabelMix mix = alpha ? LabelMix::dirichlet(*alpha) : LabelMix::balanced();
    TargetBatch tb = make_target_batch(meta, NewDomain{}, mix, L, C, root.child(j));
    tb.batch.domain_id = detail::domain_name("target", j);
    out.push_back(std::move(tb.batch));
  }
  return out;
}

// Fresh samples from existing training domains (in-domain evaluation).
inline std::vector<DomainBatch> make_in_domain_targets(const MetaDataset& meta, std::size_t L, std::size_t C,
                                                       std::size_t count) {
  const RandomStream root(meta.config.seed, kTargetStream + 1);
  std::vector<DomainBatch> out;
  for (std::size_t j = 0; j < count && j < meta.train.size(); ++j) {
    TargetBatch tb =
        make_target_batch(meta, ExistingDomain{meta.train[j].domain_id}, LabelMix::balanced(), L, C, root.child(j));
    out.push_back(std::move(tb.batch));
  }
  return out;
}

// Two-level targets: `parents` fresh parents with `children` fresh child
// domains each.
inline std::vector<DomainBatch> make_hierarchical_targets(const MetaDataset& meta, std::size_t parents,
                                                          std::size_t children, std::size_t L, std::size_t C) {
  const RandomStream root(meta.config.seed, kTargetStream + 2);
  std::vector<DomainBatch> out;
  for (std::size_t p = 0; p < parents; ++p) {
    const RandomStream prs = root.child(p);
    const std::string pid = "target-p" + std::to_string(p);
    const Tensor parent_offset = draw_parent_offset(meta, prs);
    for (std::size_t c = 0; c < children; ++c) {
      TargetBatch tb = make_target_batch(meta, NewChildDomain{pid, parent_offset}, LabelMix::balanced(), L, C,
                                         prs.child(100 + c));
      tb.batch.domain_id = pid + "-" + std::to_string(c);
      out.push_back(std::move(tb.batch));
    }
  }
  return out;
}

// Working directory layout:
//   <out>/seed-<s>/dataset/            generated domains + manifest.json
//   <out>/seed-<s>/checkpoints/<k>.ckpt
//   <out>/seed-<s>/logs/<k>.jsonl
class Runner {
 public:
  Runner(ExperimentConfig cfg, std::filesystem::path out, bool persist = true, std::ostream* progress = nullptr)
      : cfg_(std::move(cfg)), out_(std::move(out)), persist_(persist), progress_(progress) {
    cfg_.validate();
  }

  const ExperimentConfig& config() const { return cfg_; }
  const std::filesystem::path& out_dir() const { return out_; }

  std::filesystem::path seed_dir(std::uint64_t s) const { return out_ / ("seed-" + std::to_string(s)); }
  std::filesystem::path dataset_dir(std::uint64_t s) const { return seed_dir(s) / "dataset"; }
  std::filesystem::path checkpoint_path(std::uint64_t s, const std::string& k) const {
    return seed_dir(s) / "checkpoints" / (k + ".ckpt");
  }
  std::filesystem::path log_path(std::uint64_t s, const std::string& k) const {
    return seed_dir(s) / "logs" / (k + ".jsonl");
  }

  const MetaDataset& dataset(std::uint64_t s) {
    auto it = data_.find(s);
    if (it != data_.end()) return *it->second;
    auto meta = std::make_unique<MetaDataset>(make_meta_dataset(generator_for_seed(cfg_, s)));
    if (persist_) write_dataset(*meta, dataset_dir(s));
    return *data_.emplace(s, std::move(meta)).first->second;
  }

  std::string manifest_hash(std::uint64_t s) { return git_blob_sha1(manifest_text(dataset(s))); }

  const Model& model(std::uint64_t s, const std::string& checkpoint) {
    const auto key = std::make_pair(s, checkpoint);
    auto it = models_.find(key);
    if (it != models_.end()) return *it->second;
    const MetaDataset& meta = dataset(s);
    if (progress_) *progress_ << "train " << checkpoint << " seed " << s << std::endl;
    TrainResult r = train_checkpoint(checkpoint, meta, cfg_, s);
    if (persist_) {
      std::filesystem::create_directories(checkpoint_path(s, checkpoint).parent_path());
      std::filesystem::create_directories(log_path(s, checkpoint).parent_path());
      write_checkpoint(checkpoint_path(s, checkpoint).string(), r.model, checkpoint_header(s, checkpoint, r.log));
      binio::write_file(log_path(s, checkpoint).string(), r.log.jsonl());
    }
    logs_[key] = r.log;
    return *models_.emplace(key, std::make_unique<Model>(std::move(r.model))).first->second;
  }

  const TrainLog& log(std::uint64_t s, const std::string& checkpoint) {
    model(s, checkpoint);
    return logs_.at({s, checkpoint});
  }

  Json checkpoint_header(std::uint64_t s, const std::string& checkpoint, const TrainLog& log) {
    return Json{{"method", checkpoint},
                {"seed", s},
                {"training", to_json(training_for_seed(cfg_, s))},
                {"best_epoch", log.best_epoch},
                {"best_val_loss", log.best_val_loss},
                {"dataset_manifest_sha1", manifest_hash(s)}};
  }

  // Evaluates one method over fresh unseen targets and appends the rows.
  EvalReport evaluate_method(EvalTable& table, std::uint64_t s, const std::string& method, const Alpha& alpha,
                             std::size_t L, std::size_t C, Granularity g, std::optional<AdaptMethod> override = {},
                             const std::string& label = {}) {
    const MethodInfo info = method_info(method);
    const Model& m = model(s, info.checkpoint);
    const auto targets = make_targets(dataset(s), alpha, L, C, cfg_.evaluation.target_domains);
    EvalReport rep = evaluate(m, targets, method_spec(override.value_or(info.adapt), cfg_.evaluation), g,
                              label.empty() ? method : label);
    append_report(table, rep, alpha, L, C, s);
    return rep;
  }

 private:
  ExperimentConfig cfg_;
  std::filesystem::path out_;
  bool persist_;
  std::ostream* progress_;
  std::map<std::uint64_t, std::unique_ptr<MetaDataset>> data_;
  std::map<std::pair<std::uint64_t, std::string>, std::unique_ptr<Model>> models_;
  std::map<std::pair<std::uint64_t, std::string>, TrainLog> logs_;
};

// Output directory: the environment override wins over the config.
inline constexpr const char* kOutputEnv = "BNADAPT_OUT";

inline std::filesystem::path resolve_output_dir(const std::string& flag, const ExperimentConfig& c) {
  if (const char* env = std::getenv(kOutputEnv); env && *env) return env;
  if (!flag.empty()) return flag;
  return c.output_dir;
}

// Enlarges (or shrinks) domain counts, epochs and target counts.
inline ExperimentConfig apply_scale(ExperimentConfig c, double scale) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("--scale must be > 0");
  auto sc = [&](std::size_t v) { return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(v * scale))); };
  c.generator.n_domains_train = sc(c.generator.n_domains_train);
  c.generator.n_domains_val = sc(c.generator.n_domains_val);
  c.generator.n_domains_test = sc(c.generator.n_domains_test);
  c.training.max_epochs = sc(c.training.max_epochs);
  c.training.patience = std::min(c.training.patience, c.training.max_epochs);
  c.evaluation.target_domains = sc(c.evaluation.target_domains);
  return c;
}

}  // namespace bnadapt::bench
