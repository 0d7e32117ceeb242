#pragma once

#include <chrono>
#include <functional>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bnadapt/adapt.hpp"
#include "bnadapt/jsonutil.hpp"
#include "bnadapt/model.hpp"
#include "bnadapt/synthgen.hpp"

namespace bnadapt {

enum class LrSchedule { cosine, none };

struct TrainConfig {
  std::size_t max_epochs = 100;
  std::size_t patience = 20;
  double learning_rate = 1e-3;
  LrSchedule schedule = LrSchedule::cosine;
  std::size_t batch_size = 128;  // ERM mini-batch rows
  // Episodes: perturbed rows per episode (drawn uniformly from
  // [episode_perturbed_min, episode_perturbed] when the minimum is nonzero)
  // and control rows per episode.
  std::size_t episode_perturbed = 64;
  std::size_t episode_perturbed_min = 0;
  std::size_t episode_controls = 128;
  std::size_t episodes_per_epoch = 40;
  std::size_t meta_batch = 1;  // episodes averaged per gradient step
  bool disjoint_query = false;
  std::size_t query_size = 64;  // disjoint_query only
  double coral_weight = 0.05;
  AdamConfig adam;
  std::uint64_t seed = 0;

  void validate() const {
    if (max_epochs < 1) throw ConfigError("training.max_epochs must be >= 1");
    if (patience > max_epochs) throw ConfigError("training.patience must be <= max_epochs");
    if (!(learning_rate > 0.0)) throw ConfigError("training.learning_rate must be > 0");
    if (batch_size < 2) throw ConfigError("training.batch_size must be >= 2");
    if (episode_perturbed < 1) throw ConfigError("training.episode_perturbed must be >= 1");
    if (episode_perturbed_min > episode_perturbed) throw ConfigError("training.episode_perturbed_min > episode_perturbed");
    if (episodes_per_epoch < 1 || meta_batch < 1) throw ConfigError("training: episodes_per_epoch and meta_batch must be >= 1");
    if (disjoint_query && query_size < 1) throw ConfigError("training.query_size must be >= 1");
  }
};

inline Json to_json(const TrainConfig& c) {
  return Json{{"max_epochs", c.max_epochs},
              {"patience", c.patience},
              {"learning_rate", c.learning_rate},
              {"schedule", c.schedule == LrSchedule::cosine ? "cosine" : "none"},
              {"batch_size", c.batch_size},
              {"episode_perturbed", c.episode_perturbed},
              {"episode_perturbed_min", c.episode_perturbed_min},
              {"episode_controls", c.episode_controls},
              {"episodes_per_epoch", c.episodes_per_epoch},
              {"meta_batch", c.meta_batch},
              {"disjoint_query", c.disjoint_query},
              {"query_size", c.query_size},
              {"coral_weight", c.coral_weight},
              {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon},
                        {"weight_decay", c.adam.weight_decay}}},
              {"seed", c.seed}};
}

// Reads the TrainConfig keys of `o`; the caller owns finish() so it can
// accept additional keys in the same object.
inline void read_train_config(StrictObject& o, TrainConfig& c) {
  std::string schedule = c.schedule == LrSchedule::cosine ? "cosine" : "none";
  o.read("max_epochs", c.max_epochs);
  o.read("patience", c.patience);
  o.read("learning_rate", c.learning_rate);
  o.read("schedule", schedule);
  o.read("batch_size", c.batch_size);
  o.read("episode_perturbed", c.episode_perturbed);
  o.read("episode_perturbed_min", c.episode_perturbed_min);
  o.read("episode_controls", c.episode_controls);
  o.read("episodes_per_epoch", c.episodes_per_epoch);
  o.read("meta_batch", c.meta_batch);
  o.read("disjoint_query", c.disjoint_query);
  o.read("query_size", c.query_size);
  o.read("coral_weight", c.coral_weight);
  o.read("seed", c.seed);
  if (const Json* a = o.child("adam")) {
    StrictObject ao(*a, o.where() + ".adam");
    ao.read("beta1", c.adam.beta1);
    ao.read("beta2", c.adam.beta2);
    ao.read("epsilon", c.adam.epsilon);
    ao.read("weight_decay", c.adam.weight_decay);
    ao.finish();
  }
  if (schedule == "cosine") c.schedule = LrSchedule::cosine;
  else if (schedule == "none") c.schedule = LrSchedule::none;
  else throw ConfigError(o.where() + ".schedule: expected cosine or none");
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  double wall_time = 0.0;  // seconds since training start
};

struct TrainLog {
  std::vector<EpochRecord> epochs;  // epoch 0 = untrained model
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::size_t last_epoch = 0;

  // JSON lines, one record per epoch.
  std::string jsonl() const {
    std::string out;
    for (const auto& e : epochs) {
      out += Json{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"lr", e.lr},
                  {"wall_time", e.wall_time}}
                 .dump();
      out += '\n';
    }
    return out;
  }
};

struct TrainResult {
  Model model;
  TrainLog log;
};

namespace detail {

struct PooledRows {
  Tensor x;
  std::vector<int> y;
};

inline PooledRows pool_perturbed(const std::vector<DomainBatch>& domains) {
  PooledRows p;
  std::size_t n = 0;
  for (const auto& d : domains) n += d.perturbed_count();
  if (n == 0) throw ConfigError("no perturbed rows to train on");
  const std::size_t dim = domains.front().X.cols();
  p.x = Tensor::zeros(n, dim);
  std::size_t r = 0;
  for (const auto& d : domains) {
    std::copy(d.X.values().begin(), d.X.values().end(), p.x.values().begin() + static_cast<std::ptrdiff_t>(r * dim));
    p.y.insert(p.y.end(), d.y.begin(), d.y.end());
    r += d.perturbed_count();
  }
  return p;
}

inline std::vector<int> gather(const std::vector<int>& v, const std::vector<std::size_t>& idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(v[i]);
  return out;
}

inline void apply_gradients(Model& model, const BoundModel& bound, Adam& opt, double lr) {
  std::vector<Tensor*> params;
  std::vector<const Tensor*> grads;
  std::size_t k = 0;
  for (auto& p : model.parameters()) {
    params.push_back(p.tensor);
    grads.push_back(&bound.params[k++].grad());
  }
  opt.step(params, grads, lr);
}

inline void update_running(Model& model, const std::vector<BatchStats>& stats) {
  for (std::size_t i = 0; i < stats.size(); ++i) model.norms()[i].update_running(stats[i]);
}

// Shared epoch loop: cosine schedule, validation, early stopping and
// restoration of the lowest-validation-loss checkpoint.
template <typename EpochFn, typename ValFn>
TrainResult run_epochs(Model model, const TrainConfig& cfg, EpochFn&& run_epoch, ValFn&& val_loss,
                       const std::function<double(const Model&)>& initial_train_loss) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  Adam opt(cfg.adam);
  TrainLog log;
  const double v0 = val_loss(model);
  log.epochs.push_back({0, initial_train_loss(model), v0, cfg.learning_rate, elapsed()});
  Model best = model;
  log.best_val_loss = v0;
  log.best_epoch = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const double lr = cfg.schedule == LrSchedule::cosine ? cosine_annealing(cfg.learning_rate, epoch - 1, cfg.max_epochs)
                                                         : cfg.learning_rate;
    const double train_loss = run_epoch(model, opt, lr, epoch);
    if (!std::isfinite(train_loss)) {
      throw NumericError("training diverged at epoch " + std::to_string(epoch) + " (train loss " +
                         std::to_string(train_loss) + ", lr " + std::to_string(lr) + ")");
    }
    const double v = val_loss(model);
    log.epochs.push_back({epoch, train_loss, v, lr, elapsed()});
    log.last_epoch = epoch;
    if (v < log.best_val_loss) {
      log.best_val_loss = v;
      log.best_epoch = epoch;
      best = model;
    }
    if (epoch - log.best_epoch >= cfg.patience) break;
  }
  return {std::move(best), std::move(log)};
}

}  // namespace detail

// Mean cross-entropy of a fixed model over every perturbed row of the
// domains, using running BN statistics.
inline double plain_loss(const Model& model, const std::vector<DomainBatch>& domains) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& d : domains) {
    ag::Tape tape;
    const BoundModel bound = BoundModel::constants(tape, model);
    const auto g = forward_graph(tape, model, bound, tape.constant(d.X), StatSource::running());
    total += ag::softmax_cross_entropy(g.logits, d.y).value().item() * static_cast<double>(d.y.size());
    n += d.y.size();
  }
  return total / static_cast<double>(n);
}

// Minimizes mean cross-entropy over the pooled training domains with
// mini-batch Adam (BN in batch mode, running statistics updated).
inline TrainResult train_erm(Model model, const MetaDataset& data, const TrainConfig& cfg) {
  if (data.train.empty()) throw ConfigError("train_erm: no training domains");
  if (model.has_context_encoder()) throw IncompatibleError("train_erm: model has a context encoder");
  const detail::PooledRows pool = detail::pool_perturbed(data.train);
  const RandomStream root(cfg.seed, 0x65726dULL);
  auto epoch_fn = [&](Model& m, Adam& opt, double lr, std::size_t epoch) {
    RandomStream rs = root.child(epoch);
    const auto order = rs.permutation(pool.y.size());
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start + 2 <= order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      if (end - start < 2) break;
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
      ag::Tape tape;
      const BoundModel bound(tape, m);
      const auto g = forward_graph(tape, m, bound, tape.constant(gather_rows(pool.x, idx)), StatSource::batch());
      const ag::Var loss = ag::softmax_cross_entropy(g.logits, detail::gather(pool.y, idx));
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) return lv;
      tape.backward(loss);
      detail::apply_gradients(m, bound, opt, lr);
      detail::update_running(m, g.batch_stats);
      total += lv;
      ++steps;
    }
    return total / static_cast<double>(std::max<std::size_t>(steps, 1));
  };
  auto val_fn = [&](const Model& m) { return plain_loss(m, data.val); };
  auto init_fn = [&](const Model& m) { return plain_loss(m, data.train); };
  return detail::run_epochs(std::move(model), cfg, epoch_fn, val_fn, init_fn);
}

enum class ArmVariant { arm_bn, cs_arm_bn, arm_ben, arm_cml };

inline std::string to_string(ArmVariant v) {
  switch (v) {
    case ArmVariant::arm_bn: return "arm-bn";
    case ArmVariant::cs_arm_bn: return "cs-arm-bn";
    case ArmVariant::arm_ben: return "arm-ben";
    case ArmVariant::arm_cml: return "arm-cml";
  }
  return "?";
}

inline ContextPolicy default_policy(ArmVariant v) {
  switch (v) {
    case ArmVariant::arm_bn: return ContextPolicy::perturbed_only;
    case ArmVariant::cs_arm_bn: return ContextPolicy::union_set;
    case ArmVariant::arm_ben: return ContextPolicy::controls_only;
    case ArmVariant::arm_cml: return ContextPolicy::perturbed_only;
  }
  return ContextPolicy::perturbed_only;
}

// One meta-training episode: a context and a labeled query from the same
// domain. With query_in_context the query rows are the context's
// perturbed rows (shared form).
struct Episode {
  std::string domain_id;
  Tensor controls;   // C x D (may be empty)
  Tensor perturbed;  // context perturbed rows
  std::vector<int> perturbed_labels;
  Tensor query;  // only used when !query_in_context
  std::vector<int> query_labels;
  bool query_in_context = true;
};

// Episodic cross-entropy on the tape. Context rows are stacked controls
// first, then perturbed rows; BN statistics come from the context rows and
// gradients flow through them. `controls` may be an invalid Var (no
// controls).
inline ag::Var episodic_loss_graph(ag::Tape& tape, const Model& model, const BoundModel& bound, ContextPolicy policy,
                                   const ag::Var& controls, const ag::Var& perturbed, const std::vector<int>& labels,
                                   const ag::Var* query = nullptr, const std::vector<int>* query_labels = nullptr) {
  const bool has_controls = controls.valid() && controls.value().size() > 0;
  if ((policy == ContextPolicy::union_set || policy == ContextPolicy::controls_only) && !has_controls)
    throw IncompatibleError("episode policy " + to_string(policy) + " needs C >= 1");
  const bool separate_query = query != nullptr;
  const bool use_cml = model.has_context_encoder();

  ag::Var ctx;
  switch (policy) {
    case ContextPolicy::perturbed_only: ctx = perturbed; break;
    case ContextPolicy::controls_only: ctx = controls; break;
    case ContextPolicy::union_set: ctx = ag::concat_rows(controls, perturbed); break;
  }
  const std::size_t n_ctx = ctx.value().rows();

  if (use_cml) {
    const ag::Var cv = context_vector_graph(tape, model, bound, ctx);
    const ag::Var& q = separate_query ? *query : perturbed;
    const auto& ql = separate_query ? *query_labels : labels;
    const auto g = forward_graph(tape, model, bound, q, StatSource::batch(), cv);
    return ag::softmax_cross_entropy(g.logits, ql);
  }

  if (!separate_query && policy != ContextPolicy::controls_only) {
    // Query = the context's perturbed rows, which sit at the tail.
    const auto g = forward_graph(tape, model, bound, ctx, StatSource::batch());
    const std::size_t l = perturbed.value().rows();
    const ag::Var logits = l == n_ctx ? g.logits : ag::slice_rows(g.logits, n_ctx - l, n_ctx);
    return ag::softmax_cross_entropy(logits, labels);
  }
  const ag::Var& q = separate_query ? *query : perturbed;
  const auto& ql = separate_query ? *query_labels : labels;
  const ag::Var input = ag::concat_rows(ctx, q);
  const auto g = forward_graph(tape, model, bound, input, StatSource::batch(n_ctx));
  return ag::softmax_cross_entropy(ag::slice_rows(g.logits, n_ctx, input.value().rows()), ql);
}

namespace detail {

inline Episode draw_episode(const MetaDataset& data, const TrainConfig& cfg, ContextPolicy policy,
                            const RandomStream& rs) {
  RandomStream pick = rs.child(1);
  RandomStream prs = rs.child(2);
  RandomStream crs = rs.child(3);
  const DomainBatch& d = data.train[pick.uniform_index(data.train.size())];
  std::size_t m = cfg.episode_perturbed;
  if (cfg.episode_perturbed_min > 0) m = cfg.episode_perturbed_min + prs.uniform_index(cfg.episode_perturbed - cfg.episode_perturbed_min + 1);
  const std::size_t n = d.perturbed_count();
  Episode ep;
  ep.domain_id = d.domain_id;
  if (cfg.disjoint_query) {
    const std::size_t total = std::min(n, m + cfg.query_size);
    if (total <= m) throw ConfigError("disjoint query: domain too small for context + query");
    const auto idx = prs.sample_without_replacement(n, total);
    const std::vector<std::size_t> ci(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m));
    const std::vector<std::size_t> qi(idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end());
    ep.perturbed = gather_rows(d.X, ci);
    ep.perturbed_labels = gather(d.y, ci);
    ep.query = gather_rows(d.X, qi);
    ep.query_labels = gather(d.y, qi);
    ep.query_in_context = false;
  } else {
    const auto idx = prs.sample_without_replacement(n, std::min(n, m));
    ep.perturbed = gather_rows(d.X, idx);
    ep.perturbed_labels = gather(d.y, idx);
  }
  if (policy != ContextPolicy::perturbed_only) {
    const std::size_t c = d.control_count();
    if (c == 0 || cfg.episode_controls == 0) throw IncompatibleError("episode needs control samples (C = 0)");
    const auto cidx = crs.sample_without_replacement(c, std::min(c, cfg.episode_controls));
    ep.controls = gather_rows(d.Z, cidx);
  }
  return ep;
}

}  // namespace detail

// Adapted-model validation loss for an episodic variant: each validation
// domain adapts on its full context (per policy) and is scored on all of
// its perturbed rows.
inline double adapted_loss(const Model& model, const std::vector<DomainBatch>& domains, ContextPolicy policy) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& d : domains) {
    ag::Tape tape;
    const BoundModel bound = BoundModel::constants(tape, model);
    const ag::Var z = d.control_count() ? tape.constant(d.Z) : ag::Var{};
    const ag::Var loss = episodic_loss_graph(tape, model, bound, policy, z, tape.constant(d.X), d.y);
    total += loss.value().item() * static_cast<double>(d.y.size());
    n += d.y.size();
  }
  return total / static_cast<double>(n);
}

// Episodic meta-training. BN variants compute statistics from the episode
// context per policy and score the query under those statistics; arm-cml
// conditions on a pooled context vector. `policy_override` replaces the
// variant's context policy.
inline TrainResult train_arm(Model model, const MetaDataset& data, const TrainConfig& cfg, ArmVariant variant,
                             std::optional<ContextPolicy> policy_override = std::nullopt) {
  if (data.train.empty()) throw ConfigError("train_arm: no training domains");
  if (variant == ArmVariant::arm_cml) {
    if (!model.has_context_encoder()) throw IncompatibleError("arm-cml needs a model with a context encoder");
  } else if (model.bn_layer_count() == 0) {
    throw IncompatibleError(to_string(variant) + " needs a model with BN layers");
  }
  const ContextPolicy policy = policy_override.value_or(default_policy(variant));
  if (policy != ContextPolicy::perturbed_only) {
    if (cfg.episode_controls == 0 || data.config.controls_per_domain == 0)
      throw IncompatibleError(to_string(variant) + " needs control samples, but C = 0");
  }
  const RandomStream root(cfg.seed, 0x61726dULL);
  auto epoch_fn = [&](Model& m, Adam& opt, double lr, std::size_t epoch) {
    double total = 0.0;
    for (std::size_t s = 0; s < cfg.episodes_per_epoch; ++s) {
      const RandomStream step_rs = root.child(epoch).child(s);
      ag::Tape tape;
      const BoundModel bound(tape, m);
      ag::Var sum;
      std::vector<BatchStats> last_stats;
      for (std::size_t e = 0; e < cfg.meta_batch; ++e) {
        const Episode ep = detail::draw_episode(data, cfg, policy, step_rs.child(e));
        const ag::Var z = ep.controls.empty() ? ag::Var{} : tape.constant(ep.controls);
        ag::Var loss;
        if (ep.query_in_context) {
          loss = episodic_loss_graph(tape, m, bound, policy, z, tape.constant(ep.perturbed), ep.perturbed_labels);
        } else {
          const ag::Var q = tape.constant(ep.query);
          loss = episodic_loss_graph(tape, m, bound, policy, z, tape.constant(ep.perturbed), ep.perturbed_labels, &q,
                                     &ep.query_labels);
        }
        sum = sum.valid() ? ag::add(sum, loss) : loss;
      }
      const ag::Var mean_loss = cfg.meta_batch == 1 ? sum : ag::scale(sum, 1.0 / static_cast<double>(cfg.meta_batch));
      const double lv = mean_loss.value().item();
      if (!std::isfinite(lv)) return lv;
      tape.backward(mean_loss);
      detail::apply_gradients(m, bound, opt, lr);
      total += lv;
    }
    return total / static_cast<double>(cfg.episodes_per_epoch);
  };
  auto val_fn = [&](const Model& m) { return adapted_loss(m, data.val, policy); };
  auto init_fn = [&](const Model& m) { return adapted_loss(m, data.train, policy); };
  TrainResult r = detail::run_epochs(std::move(model), cfg, epoch_fn, val_fn, init_fn);
  // Running statistics of an episodic model are only a fallback; set them
  // to the pooled training-context statistics.
  if (r.model.bn_layer_count() > 0) {
    const detail::PooledRows pool = detail::pool_perturbed(data.train);
    const BNSnapshot s = collect_bn_snapshot(r.model, pool.x);
    r.model = swap_bn_stats(r.model, s);
  }
  return r;
}

// ERM plus a CORAL penalty between penultimate features of a labeled source
// mini-batch and an unlabeled target mini-batch (perturbed rows of the
// `target_domains`). Source and target pass through BN separately.
inline TrainResult train_coral_erm(Model model, const MetaDataset& data, const std::vector<DomainBatch>& target_domains,
                                   const TrainConfig& cfg) {
  if (model.has_context_encoder()) throw IncompatibleError("coral-erm: model has a context encoder");
  if (target_domains.empty()) throw ConfigError("coral-erm needs unlabeled target domains");
  const detail::PooledRows pool = detail::pool_perturbed(data.train);
  const detail::PooledRows target = detail::pool_perturbed(target_domains);
  const RandomStream root(cfg.seed, 0x636f72ULL);
  auto epoch_fn = [&](Model& m, Adam& opt, double lr, std::size_t epoch) {
    RandomStream rs = root.child(epoch);
    RandomStream trs = rs.child(1);
    const auto order = rs.permutation(pool.y.size());
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start + 2 <= order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      if (end - start < 2) break;
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
      const auto tidx = trs.sample_without_replacement(target.y.size(), std::min(target.y.size(), cfg.batch_size));
      ag::Tape tape;
      const BoundModel bound(tape, m);
      const auto gs = forward_graph(tape, m, bound, tape.constant(gather_rows(pool.x, idx)), StatSource::batch());
      const auto gt = forward_graph(tape, m, bound, tape.constant(gather_rows(target.x, tidx)), StatSource::batch());
      const ag::Var ce = ag::softmax_cross_entropy(gs.logits, detail::gather(pool.y, idx));
      const ag::Var loss = ag::add(ce, ag::scale(coral_penalty(gs.features, gt.features), cfg.coral_weight));
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) return lv;
      tape.backward(loss);
      detail::apply_gradients(m, bound, opt, lr);
      detail::update_running(m, gs.batch_stats);
      total += lv;
      ++steps;
    }
    return total / static_cast<double>(std::max<std::size_t>(steps, 1));
  };
  auto val_fn = [&](const Model& m) { return plain_loss(m, data.val); };
  auto init_fn = [&](const Model& m) { return plain_loss(m, data.train); };
  return detail::run_epochs(std::move(model), cfg, epoch_fn, val_fn, init_fn);
}

// Covariance of per-domain-centered control rows pooled over domains.
inline Tensor pooled_control_covariance(const std::vector<DomainBatch>& domains) {
  Tensor centered;
  for (const auto& d : domains) {
    if (d.control_count() < 2) throw IncompatibleError("TVN needs at least 2 controls per domain");
    Tensor z = d.Z;
    const Tensor mu = column_mean(z);
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) -= mu[j];
    centered = centered.empty() ? z : concat_rows(centered, z);
  }
  return covariance(centered);
}

// Domains with every row replaced by its TVN realignment against the
// domain's own controls.
inline std::vector<DomainBatch> tvn_realign_domains(const std::vector<DomainBatch>& domains, const Tensor& train_cov,
                                                    double ridge, Recolor recolor = Recolor::full) {
  std::vector<DomainBatch> out;
  for (const auto& d : domains) {
    DomainBatch r = d;
    r.X = tvn_whiten(d.X, d.Z, train_cov, ridge, recolor).realigned;
    r.Z = tvn_whiten(d.Z, d.Z, train_cov, ridge, recolor).realigned;
    out.push_back(std::move(r));
  }
  return out;
}

// Linear probe trained on TVN-realigned embeddings. The embedding is the
// identity map on the input features; the training covariance is stored in
// the returned model.
inline TrainResult train_tvn_probe(Model probe, const MetaDataset& data, const TrainConfig& cfg, double ridge) {
  if (probe.architecture().norm != NormMode::none || probe.has_context_encoder())
    throw IncompatibleError("tvn probe must be a plain model without normalization");
  const Tensor train_cov = pooled_control_covariance(data.train);
  MetaDataset realigned = data;
  realigned.train = tvn_realign_domains(data.train, train_cov, ridge);
  realigned.val = tvn_realign_domains(data.val, train_cov, ridge);
  TrainResult r = train_erm(std::move(probe), realigned, cfg);
  r.model.tvn_train_cov() = train_cov;
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation.

enum class AdaptMethod { none, adabn, cs, ben, tent, cml, tvn };

inline std::string to_string(AdaptMethod m) {
  switch (m) {
    case AdaptMethod::none: return "none";
    case AdaptMethod::adabn: return "adabn";
    case AdaptMethod::cs: return "cs";
    case AdaptMethod::ben: return "ben";
    case AdaptMethod::tent: return "tent";
    case AdaptMethod::cml: return "cml";
    case AdaptMethod::tvn: return "tvn";
  }
  return "?";
}

struct MethodSpec {
  AdaptMethod adapt = AdaptMethod::none;
  TentConfig tent;
  double tvn_ridge = 1e-6;
  Recolor recolor = Recolor::full;
};

enum class Granularity { plate, batch, source };

inline std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::plate: return "plate";
    case Granularity::batch: return "batch";
    case Granularity::source: return "source";
  }
  return "?";
}

inline Granularity parse_granularity(const std::string& s) {
  if (s == "plate") return Granularity::plate;
  if (s == "batch") return Granularity::batch;
  if (s == "source") return Granularity::source;
  throw ConfigError("unknown granularity \"" + s + "\" (expected plate, batch or source)");
}

struct EvalRecord {
  std::string domain_id;
  double accuracy = 0.0;
  std::size_t samples = 0;
};

struct EvalReport {
  std::string method;
  Granularity granularity = Granularity::plate;
  std::vector<EvalRecord> records;
  double mean = 0.0;
  double std = 0.0;
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

// Labels predicted for one group of target batches after adapting on the
// group's pooled context.
inline std::vector<std::vector<int>> predict_group(const Model& model, const std::vector<const DomainBatch*>& group,
                                                   const MethodSpec& method) {
  Tensor x_all, z_all;
  for (const DomainBatch* b : group) {
    x_all = x_all.empty() ? b->X : concat_rows(x_all, b->X);
    if (b->control_count() > 0) z_all = z_all.empty() ? b->Z : concat_rows(z_all, b->Z);
  }
  const bool needs_controls = method.adapt == AdaptMethod::cs || method.adapt == AdaptMethod::ben ||
                              method.adapt == AdaptMethod::tvn;
  if (needs_controls && z_all.empty())
    throw IncompatibleError("method " + to_string(method.adapt) + " needs control samples but the target batch has C = 0");

  std::vector<std::vector<int>> out;
  auto predict_all = [&](const Model& m, const Tensor* cv) {
    for (const DomainBatch* b : group) out.push_back(argmax_rows(forward(m, b->X, StatSource::running(), cv).logits));
  };
  switch (method.adapt) {
    case AdaptMethod::none:
      if (model.has_context_encoder()) throw IncompatibleError("context-encoder model needs method cml");
      predict_all(model, nullptr);
      break;
    case AdaptMethod::adabn:
      predict_all(adapt_adabn(model, AdaptationContext::perturbed_only(x_all)), nullptr);
      break;
    case AdaptMethod::cs:
      predict_all(adapt_cs(model, AdaptationContext::joint(x_all, z_all)), nullptr);
      break;
    case AdaptMethod::ben:
      predict_all(adapt_ben(model, AdaptationContext::controls_only(z_all)), nullptr);
      break;
    case AdaptMethod::tent:
      predict_all(adapt_tent(model, AdaptationContext::perturbed_only(x_all), method.tent), nullptr);
      break;
    case AdaptMethod::cml: {
      if (!model.has_context_encoder()) throw IncompatibleError("method cml needs a context-encoder model");
      const Tensor cv = context_vector(model, x_all);
      if (model.bn_layer_count() > 0) {
        // BN inside a CML model normalizes with the context's own statistics.
        for (const DomainBatch* b : group)
          out.push_back(argmax_rows(forward(model, b->X, StatSource::batch(), &cv).logits));
      } else {
        predict_all(model, &cv);
      }
      break;
    }
    case AdaptMethod::tvn: {
      if (model.tvn_train_cov().empty()) throw IncompatibleError("method tvn needs a TVN probe checkpoint");
      for (const DomainBatch* b : group) {
        const Tensor a = tvn_whiten(b->X, z_all, model.tvn_train_cov(), method.tvn_ridge, method.recolor).realigned;
        out.push_back(argmax_rows(forward(model, a).logits));
      }
      break;
    }
  }
  return out;
}

// Per target batch: build the method's context at the requested
// granularity, adapt, predict the perturbed rows and score sample-level
// accuracy.
inline EvalReport evaluate(const Model& model, const std::vector<DomainBatch>& targets, const MethodSpec& method,
                           Granularity granularity, std::string method_name = {}) {
  if (targets.empty()) throw ConfigError("evaluate: no target batches");
  if (method.adapt == AdaptMethod::tvn && model.tvn_train_cov().empty())
    throw IncompatibleError("method tvn needs a TVN probe checkpoint");
  if ((method.adapt == AdaptMethod::adabn || method.adapt == AdaptMethod::cs || method.adapt == AdaptMethod::ben ||
       method.adapt == AdaptMethod::tent) &&
      model.bn_layer_count() == 0)
    throw IncompatibleError("method " + to_string(method.adapt) + " needs a BN model");
  EvalReport report;
  report.method = method_name.empty() ? to_string(method.adapt) : std::move(method_name);
  report.granularity = granularity;

  // Group targets, preserving first-seen order.
  std::vector<std::vector<std::size_t>> groups;
  std::map<std::string, std::size_t> group_of;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    std::string key;
    switch (granularity) {
      case Granularity::plate: key = "#" + std::to_string(i); break;
      case Granularity::batch: key = targets[i].parent_id.value_or("#" + std::to_string(i)); break;
      case Granularity::source: key = "all"; break;
    }
    auto [it, inserted] = group_of.emplace(key, groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].push_back(i);
  }
  std::vector<EvalRecord> records(targets.size());
  for (const auto& g : groups) {
    std::vector<const DomainBatch*> members;
    for (std::size_t i : g) members.push_back(&targets[i]);
    const auto preds = predict_group(model, members, method);
    for (std::size_t k = 0; k < g.size(); ++k) {
      const DomainBatch& t = targets[g[k]];
      records[g[k]] = {t.domain_id, accuracy(preds[k], t.y), t.y.size()};
    }
  }
  report.records = std::move(records);
  std::vector<double> acc;
  for (const auto& r : report.records) acc.push_back(r.accuracy);
  std::tie(report.mean, report.std) = mean_std(acc);
  return report;
}

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

// Deterministic domain-level k-fold partition: shuffle, then deal the
// domains round-robin into test folds.
inline std::vector<Fold> kfold_split(const std::vector<std::string>& domains, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("kfold_split: k must be >= 2");
  if (k > domains.size()) throw ConfigError("kfold_split: k = " + std::to_string(k) + " exceeds " +
                                           std::to_string(domains.size()) + " domains");
  RandomStream rs(seed, 0x666f6c64ULL);
  const auto order = rs.permutation(domains.size());
  std::vector<Fold> folds(k);
  for (std::size_t i = 0; i < order.size(); ++i) folds[i % k].test.push_back(domains[order[i]]);
  for (std::size_t f = 0; f < k; ++f)
    for (std::size_t g = 0; g < k; ++g)
      if (g != f) folds[f].train.insert(folds[f].train.end(), folds[g].test.begin(), folds[g].test.end());
  return folds;
}

}  // namespace bnadapt
