#pragma once

// Compressing: few-shot adaptation with Dense Model Fusion. Every iteration
// takes a clipped SGD step and then pulls each parameter back toward the
// task-start weights W_init by its importance times the damping ratio:
//
//   u  = clip(lr * g, max_update)
//   W <- (W - u) * (1 - s*alpha) + W_init * s*alpha
//
// For constant alpha and s*alpha > 0 this keeps
//   |W - W_init| <= max_update * (1 - s*alpha) / (s*alpha)
// for every parameter, however many iterations run.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "imco/error.hpp"
#include "imco/implanting.hpp"
#include "imco/importance.hpp"
#include "imco/nn.hpp"
#include "imco/tensor.hpp"

namespace imco {

/// Where the fusion weights come from.
enum class FusionImportance {
  accumulated,  // the per-parameter S built by the importance pass
  uniform,      // S = 1 everywhere (importance-free model fusion)
};

struct DmfConfig {
  double lr = 0.0003;
  double max_update = 0.01;
  double base_damping = 0.3;   // r
  double error_coeff = 0.4;    // mu_alpha
  double alpha_lo = 0.01;
  double alpha_hi = 1.0;
  int tunable_top_layers = 2;  // backbone layers below the head that adapt
  int iterations = 200;
  bool adaptive_damping = true;  // false holds alpha at base_damping
  FusionImportance importance = FusionImportance::accumulated;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("DMF learning rate must be positive");
    if (!(max_update > 0.0)) throw ConfigError("max_update must be positive");
    if (!(0.0 <= alpha_lo && alpha_lo <= alpha_hi && alpha_hi <= 1.0))
      throw ConfigError("alpha clamp must satisfy 0 <= lo <= hi <= 1");
    if (tunable_top_layers < 0) throw ConfigError("tunable_top_layers must be non-negative");
    if (iterations < 0) throw ConfigError("iterations must be non-negative");
  }
};

/// Damping from the batch error rate: clamp(r - mu * e, lo, hi).
inline double egpsa_alpha(double base_damping, double error_coeff, double error_rate, double alpha_lo,
                          double alpha_hi) {
  if (!(error_rate >= 0.0 && error_rate <= 1.0)) throw ConfigError("error rate must lie in [0, 1]");
  return std::clamp(base_damping - error_coeff * error_rate, alpha_lo, alpha_hi);
}

/// Marks the head and the `top_layers` backbone layers below it tunable and
/// freezes the rest.
inline void set_tunable_top(ParameterStore& model, int top_layers) {
  const std::size_t K = model.layer_count();
  const std::size_t first = K - 1 > static_cast<std::size_t>(top_layers) ? K - 1 - static_cast<std::size_t>(top_layers) : 0;
  for (std::size_t k = 0; k < K; ++k) model.set_tunable(k, k >= first);
}

struct Expansion {
  ParameterStore model;
  ParameterStore initial;  // W_init
};

/// Appends one prototype row per new class. With `centroid_bias` the new
/// biases are -|mean|^2 / 2, otherwise zero.
inline Expansion expand_classifier(ParameterStore model, const Matrix& new_class_means, bool centroid_bias = true) {
  if (new_class_means.cols() != model.embedding_dim())
    throw ShapeError("class means have width " + std::to_string(new_class_means.cols()) + ", head expects " +
                     std::to_string(model.embedding_dim()));
  const Vector bias = centroid_bias ? Vector(imco::centroid_bias(new_class_means))
                                    : Vector(Vector::Zero(new_class_means.rows()));
  model.append_head_rows(new_class_means, bias);
  Expansion out{model, model};
  return out;
}

/// One DMF update of the tunable layers of `model`, in place.
inline void dmf_step(ParameterStore& model, const GradientStore& grad, const ParameterStore& initial,
                     const ImportanceMatrix& importance, double alpha, double lr, double max_update) {
  const std::size_t K = model.layer_count();
  if (grad.layers.size() != K || initial.layer_count() != K || importance.layers.size() != K)
    throw ShapeError("DMF step needs congruent stores");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("damping ratio must lie in [0, 1]");
  if (!(max_update > 0.0)) throw ConfigError("max_update must be positive");
  for (std::size_t k = 0; k < K; ++k) {
    Layer& w = model.layer(k);
    if (!w.tunable) continue;
    const ParamBlock& g = grad.layers[k];
    const Layer& w0 = initial.layer(k);
    const ParamBlock& s = importance.layers[k];
    if (w.weight.rows() != g.weight.rows() || w.weight.cols() != g.weight.cols() ||
        w.weight.rows() != w0.weight.rows() || w.weight.cols() != w0.weight.cols() ||
        w.weight.rows() != s.weight.rows() || w.weight.cols() != s.weight.cols())
      throw ShapeError("DMF step: layer " + std::to_string(k) + " shapes differ");
    auto fuse = [&](auto& param, const auto& gvec, const auto& init, const auto& svec) {
      const auto u = (lr * gvec.array()).max(-max_update).min(max_update);
      const auto sa = svec.array() * alpha;
      param.array() = (param.array() - u) * (1.0 - sa) + init.array() * sa;
    };
    fuse(w.weight, g.weight, w0.weight, s.weight);
    fuse(w.bias, g.bias, w0.bias, s.bias);
  }
}

/// Limit of |W - W_init| for one parameter; +inf when s*alpha == 0.
inline double displacement_bound(double importance, double alpha, double max_update) {
  const double sa = importance * alpha;
  if (sa <= 0.0) return std::numeric_limits<double>::infinity();
  return max_update * (1.0 - sa) / sa;
}

struct DisplacementReport {
  BlockList displacement;  // |W - W_init|
  BlockList bound;         // +inf where s*alpha == 0
  double alpha = 0.0;      // damping the bound was evaluated at
  double max_ratio = 0.0;  // max displacement/bound over bounded entries
  std::size_t bounded_count = 0;
};

/// Compares |W - W_init| against the analytic bound at `alpha`. An entry with
/// a zero bound scores ratio 0 when it has not moved and +inf otherwise.
inline DisplacementReport displacement_report(const ParameterStore& model, const ParameterStore& initial,
                                              const ImportanceMatrix& importance, double alpha, double max_update) {
  DisplacementReport r;
  r.alpha = alpha;
  for (std::size_t k = 0; k < model.layer_count(); ++k) {
    const Layer& w = model.layer(k);
    const Layer& w0 = initial.layer(k);
    const ParamBlock& s = importance.layers.at(k);
    ParamBlock disp{(w.weight - w0.weight).cwiseAbs(), (w.bias - w0.bias).cwiseAbs()};
    ParamBlock bnd = ParamBlock::zeros(w.out_dim(), w.in_dim());
    for (std::size_t i = 0; i < disp.size(); ++i) {
      const double b = displacement_bound(s.at(i), alpha, max_update);
      bnd.at(i) = b;
      if (std::isinf(b)) continue;
      ++r.bounded_count;
      const double d = disp.at(i);
      const double ratio = b > 0.0 ? d / b : (d == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
      r.max_ratio = std::max(r.max_ratio, ratio);
    }
    r.displacement.push_back(std::move(disp));
    r.bound.push_back(std::move(bnd));
  }
  return r;
}

struct DmfLogRow {
  int iter = 0;
  double error = 0.0;
  double alpha = 0.0;
  double loss = 0.0;
  double max_displacement_ratio = 0.0;
};

struct CompressResult {
  ParameterStore model;
  ParameterStore initial;
  ImportanceMatrix importance;  // S padded to the expanded head
  DisplacementReport report;
  std::vector<DmfLogRow> log;
};

namespace detail {

/// Number of existing head rows and the prototype rows for the new labels.
inline Matrix new_class_means(const ParameterStore& model, const Batch& support) {
  const auto old = static_cast<int>(model.output_dim());
  int top = -1;
  for (int y : support.labels) {
    if (y < old) throw LabelError("adaptation support may only contain new classes");
    top = std::max(top, y);
  }
  if (top < 0) throw ConfigError("adaptation support is empty");
  Labels local;
  for (int y : support.labels) local.push_back(y - old);
  return build_prototype_classifier(embed(model, support.inputs), local);
}

}  // namespace detail

/// Expands the head for the classes in `support` (labels >= current head
/// width, contiguous) and adapts with DMF. `importance` covers the
/// pre-expansion model or is already padded.
inline CompressResult compress_adapt(const ParameterStore& model, const Batch& support,
                                     const ImportanceMatrix& importance, const DmfConfig& cfg) {
  cfg.validate();
  if (support.size() == 0) throw ConfigError("adaptation support is empty");
  Expansion ex = expand_classifier(model, detail::new_class_means(model, support));
  CompressResult out;
  out.model = std::move(ex.model);
  set_tunable_top(out.model, cfg.tunable_top_layers);
  out.initial = out.model;
  if (cfg.importance == FusionImportance::uniform) {
    out.importance = ImportanceMatrix::zeros_like(out.model);
    for (auto& b : out.importance.layers) {
      b.weight.setOnes();
      b.bias.setOnes();
    }
  } else {
    out.importance = importance.extended_to(out.model);
  }

  double alpha_min = std::numeric_limits<double>::infinity();
  for (int it = 0; it < cfg.iterations; ++it) {
    const LossAndGradient lg = backward(out.model, support);
    const double error = 1.0 - accuracy(lg.logits, support.labels);
    const double alpha = cfg.adaptive_damping
                             ? egpsa_alpha(cfg.base_damping, cfg.error_coeff, error, cfg.alpha_lo, cfg.alpha_hi)
                             : std::clamp(cfg.base_damping, cfg.alpha_lo, cfg.alpha_hi);
    alpha_min = std::min(alpha_min, alpha);
    dmf_step(out.model, lg.gradient, out.initial, out.importance, alpha, cfg.lr, cfg.max_update);
    const double ratio = displacement_report(out.model, out.initial, out.importance, alpha_min, cfg.max_update).max_ratio;
    out.log.push_back({it, error, alpha, lg.loss, ratio});
  }
  if (std::isinf(alpha_min)) alpha_min = std::clamp(cfg.base_damping, cfg.alpha_lo, cfg.alpha_hi);
  out.report = displacement_report(out.model, out.initial, out.importance, alpha_min, cfg.max_update);
  return out;
}

/// Unregularized comparator: same head expansion and tunable cut, plain SGD.
inline CompressResult naive_finetune_adapt(const ParameterStore& model, const Batch& support, double lr,
                                           int iterations, int tunable_top_layers) {
  if (support.size() == 0) throw ConfigError("adaptation support is empty");
  Expansion ex = expand_classifier(model, detail::new_class_means(model, support));
  CompressResult out;
  out.model = std::move(ex.model);
  set_tunable_top(out.model, tunable_top_layers);
  out.initial = out.model;
  out.importance = ImportanceMatrix::zeros_like(out.model);
  for (int it = 0; it < iterations; ++it) {
    const LossAndGradient lg = backward(out.model, support);
    const double error = 1.0 - accuracy(lg.logits, support.labels);
    sgd_step(out.model, lg.gradient, lr);
    out.log.push_back({it, error, 0.0, lg.loss, 0.0});
  }
  out.report = displacement_report(out.model, out.initial, out.importance, 0.0, 1.0);
  return out;
}

}  // namespace imco
