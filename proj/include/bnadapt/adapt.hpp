#pragma once

#include <string>
#include <vector>

#include "bnadapt/model.hpp"
#include "bnadapt/numcore.hpp"

// Test-time adaptation of a trained model from an unlabeled target batch.
namespace bnadapt {

enum class ContextPolicy { perturbed_only, controls_only, union_set };

inline std::string to_string(ContextPolicy p) {
  switch (p) {
    case ContextPolicy::perturbed_only: return "perturbed-only";
    case ContextPolicy::controls_only: return "controls-only";
    case ContextPolicy::union_set: return "union";
  }
  return "?";
}

// Unlabeled rows of one target batch. There is deliberately no label field.
class AdaptationContext {
 public:
  AdaptationContext(Tensor perturbed, Tensor controls, ContextPolicy policy)
      : perturbed_(std::move(perturbed)), controls_(std::move(controls)), policy_(policy) {
    const std::size_t l = perturbed_count(), c = control_count();
    if (!perturbed_.empty() && !controls_.empty() && perturbed_.cols() != controls_.cols())
      throw ShapeError("AdaptationContext: perturbed and control widths differ");
    switch (policy_) {
      case ContextPolicy::perturbed_only:
        if (l < 1) throw IncompatibleError("perturbed-only context needs L >= 1");
        break;
      case ContextPolicy::controls_only:
        if (c < 1) throw IncompatibleError("controls-only context needs C >= 1");
        break;
      case ContextPolicy::union_set:
        if (l + c < 1) throw IncompatibleError("union context needs L + C >= 1");
        break;
    }
  }

  static AdaptationContext perturbed_only(Tensor x) {
    return AdaptationContext(std::move(x), Tensor{}, ContextPolicy::perturbed_only);
  }
  static AdaptationContext controls_only(Tensor z) {
    return AdaptationContext(Tensor{}, std::move(z), ContextPolicy::controls_only);
  }
  static AdaptationContext joint(Tensor x, Tensor z) {
    return AdaptationContext(std::move(x), std::move(z), ContextPolicy::union_set);
  }

  const Tensor& perturbed() const { return perturbed_; }
  const Tensor& controls() const { return controls_; }
  ContextPolicy policy() const { return policy_; }
  std::size_t perturbed_count() const { return perturbed_.empty() ? 0 : perturbed_.rows(); }
  std::size_t control_count() const { return controls_.empty() ? 0 : controls_.rows(); }

  // Rows the policy admits: controls first, then perturbed.
  Tensor rows() const {
    switch (policy_) {
      case ContextPolicy::perturbed_only: return perturbed_;
      case ContextPolicy::controls_only: return controls_;
      case ContextPolicy::union_set:
        if (perturbed_count() == 0) return controls_;
        if (control_count() == 0) return perturbed_;
        return concat_rows(controls_, perturbed_);
    }
    return {};
  }

 private:
  Tensor perturbed_;
  Tensor controls_;
  ContextPolicy policy_;
};

inline BNSnapshot collect_bn_snapshot(const Model& model, const AdaptationContext& ctx) {
  return collect_bn_snapshot(model, ctx.rows());
}

namespace detail {

inline void require_bn(const Model& model, const char* method) {
  if (model.bn_layer_count() == 0) throw IncompatibleError(std::string(method) + " needs a model with BN layers");
}

inline void require_policy(const AdaptationContext& ctx, ContextPolicy want, const char* method) {
  if (ctx.policy() != want)
    throw IncompatibleError(std::string(method) + " expects a " + to_string(want) + " context, got " +
                            to_string(ctx.policy()));
}

}  // namespace detail

// AdaBN: BN statistics from the perturbed target rows.
inline Model adapt_adabn(const Model& model, const AdaptationContext& ctx) {
  detail::require_bn(model, "AdaBN");
  detail::require_policy(ctx, ContextPolicy::perturbed_only, "AdaBN");
  return swap_bn_stats(model, collect_bn_snapshot(model, ctx));
}

// Control-stabilized adaptation: BN statistics pooled over controls and
// perturbed rows (M = C + L). Refuses C = 0.
inline Model adapt_cs(const Model& model, const AdaptationContext& ctx) {
  detail::require_bn(model, "CS adaptation");
  detail::require_policy(ctx, ContextPolicy::union_set, "CS adaptation");
  if (ctx.control_count() == 0) throw IncompatibleError("CS adaptation refuses C = 0 (that is AdaBN)");
  return swap_bn_stats(model, collect_bn_snapshot(model, ctx));
}

// BEN: BN statistics from the controls alone.
inline Model adapt_ben(const Model& model, const AdaptationContext& ctx) {
  detail::require_bn(model, "BEN");
  detail::require_policy(ctx, ContextPolicy::controls_only, "BEN");
  return swap_bn_stats(model, collect_bn_snapshot(model, ctx));
}

struct TentConfig {
  std::size_t steps = 10;
  double learning_rate = 1e-3;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("tent.learning_rate must be > 0");
  }
};

struct TentResult {
  Model model;
  // Mean prediction entropy before each step and after the last one
  // (steps + 1 values).
  std::vector<double> entropy;
};

inline bool is_bn_affine(ParamKind k) { return k == ParamKind::norm_gamma || k == ParamKind::norm_beta; }

// TENT: target batch statistics, then full-batch Adam steps on the mean
// prediction entropy that move only the BN gamma/beta. Each step
// re-normalizes with the batch statistics of the current parameters; the
// returned model carries the statistics of the final parameters.
inline TentResult adapt_tent_traced(const Model& model, const AdaptationContext& ctx, const TentConfig& cfg) {
  detail::require_bn(model, "TENT");
  detail::require_policy(ctx, ContextPolicy::perturbed_only, "TENT");
  cfg.validate();
  Model working = model;
  const Tensor& x = ctx.perturbed();
  TentResult result;
  Adam opt;
  for (std::size_t step = 0; step <= cfg.steps; ++step) {
    ag::Tape tape;
    const BoundModel bound(tape, working, is_bn_affine);
    const GraphOutput g = forward_graph(tape, working, bound, tape.constant(x), StatSource::batch());
    const ag::Var h = ag::softmax_entropy(g.logits);
    const double value = h.value().item();
    if (!std::isfinite(value)) throw NumericError("TENT: non-finite entropy at step " + std::to_string(step));
    result.entropy.push_back(value);
    if (step == cfg.steps) break;
    tape.backward(h);
    std::vector<Tensor*> params;
    std::vector<const Tensor*> grads;
    std::size_t k = 0;
    for (auto& p : working.parameters()) {
      if (is_bn_affine(p.kind)) {
        params.push_back(p.tensor);
        grads.push_back(&bound.params[k].grad());
      }
      ++k;
    }
    opt.step(params, grads, cfg.learning_rate);
  }
  result.model = swap_bn_stats(working, collect_bn_snapshot(working, ctx));
  return result;
}

inline Model adapt_tent(const Model& model, const AdaptationContext& ctx, const TentConfig& cfg) {
  return adapt_tent_traced(model, ctx, cfg).model;
}

enum class Recolor { full, diagonal, none };

struct TvnResult {
  Tensor whitened;   // (a - mu_ctrl) R, before re-coloring
  Tensor realigned;  // whitened rows re-colored by train_cov^(1/2)
};

// Typical variation normalization: whiten with the control mean and
// covariance of the same batch, then re-color towards the training
// covariance.
inline TvnResult tvn_whiten(const Tensor& embeddings, const Tensor& control_embeddings, const Tensor& train_cov,
                            double ridge, Recolor recolor = Recolor::full) {
  if (ridge < 0.0) throw ConfigError("tvn ridge must be >= 0");
  if (embeddings.cols() != control_embeddings.cols()) throw ShapeError("tvn_whiten: width mismatch");
  const std::size_t d = embeddings.cols();
  const Tensor mu = column_mean(control_embeddings);
  const Tensor r = inv_sqrt_psd(covariance(control_embeddings), ridge);
  Tensor centered = embeddings;
  for (std::size_t i = 0; i < centered.rows(); ++i)
    for (std::size_t j = 0; j < d; ++j) centered(i, j) -= mu[j];
  TvnResult out;
  out.whitened = matmul(centered, r);
  switch (recolor) {
    case Recolor::none:
      out.realigned = out.whitened;
      break;
    case Recolor::full:
      if (train_cov.rows() != d || train_cov.cols() != d) throw ShapeError("tvn_whiten: train_cov shape");
      out.realigned = matmul(out.whitened, sqrt_psd(train_cov));
      break;
    case Recolor::diagonal:
      if (train_cov.rows() != d || train_cov.cols() != d) throw ShapeError("tvn_whiten: train_cov shape");
      out.realigned = out.whitened;
      for (std::size_t j = 0; j < d; ++j) {
        const double s = std::sqrt(std::max(train_cov(j, j), 0.0));
        for (std::size_t i = 0; i < out.realigned.rows(); ++i) out.realigned(i, j) *= s;
      }
      break;
  }
  return out;
}

// ||cov(S) - cov(T)||_F^2 on the tape.
inline ag::Var coral_penalty(const ag::Var& source, const ag::Var& target) {
  if (source.value().rows() < 2 || target.value().rows() < 2)
    throw ShapeError("coral_penalty needs at least 2 rows on each side");
  if (source.value().cols() != target.value().cols()) throw ShapeError("coral_penalty: feature width mismatch");
  return ag::sum_squares(ag::sub(ag::covariance(source), ag::covariance(target)));
}

inline double coral_penalty(const Tensor& source, const Tensor& target) {
  ag::Tape tape;
  return coral_penalty(tape.constant(source), tape.constant(target)).value().item();
}

}  // namespace bnadapt
