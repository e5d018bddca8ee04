#pragma once

// Small dense network engine: leaky-rectifier hidden layers, a linear output
// layer (the classifier head), softmax losses and exact backpropagation.
// Everything is double precision and single threaded.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "imco/error.hpp"
#include "imco/random.hpp"
#include "imco/tensor.hpp"

namespace imco {

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kProbabilityFloor = 1e-12;

struct Layer {
  Matrix weight;  // [out x in]
  Vector bias;    // [out]
  bool tunable = true;

  Eigen::Index in_dim() const { return weight.cols(); }
  Eigen::Index out_dim() const { return weight.rows(); }
  std::size_t size() const { return static_cast<std::size_t>(weight.size() + bias.size()); }

  double at(std::size_t index) const {
    const auto w = static_cast<std::size_t>(weight.size());
    return index < w ? weight.data()[index] : bias[static_cast<Eigen::Index>(index - w)];
  }
};

/// Ordered layers of a feed-forward network. Layer K-1 is the classifier
/// head; the layers below it form the backbone. Copying is a deep snapshot.
class ParameterStore {
 public:
  ParameterStore() = default;

  explicit ParameterStore(std::vector<Layer> layers) : layers_(std::move(layers)) { validate(); }

  /// Glorot-uniform weights and zero biases. `dims` lists widths from input to
  /// output, so {16, 32, 6} builds two layers.
  static ParameterStore glorot(std::span<const int> dims, Rng& rng) {
    if (dims.size() < 2) throw ConfigError("network needs at least an input and an output width");
    std::vector<Layer> layers;
    for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
      const int in = dims[k];
      const int out = dims[k + 1];
      if (in <= 0 || out <= 0) throw ConfigError("layer widths must be positive");
      const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
      Layer layer{Matrix(out, in), Vector::Zero(out), true};
      for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = rng.uniform(-limit, limit);
      layers.push_back(std::move(layer));
    }
    return ParameterStore(std::move(layers));
  }

  std::size_t layer_count() const { return layers_.size(); }
  const Layer& layer(std::size_t k) const { return layers_.at(k); }
  Layer& layer(std::size_t k) { return layers_.at(k); }
  std::span<const Layer> layers() const { return layers_; }

  const Layer& head() const { return layers_.back(); }
  Layer& head() { return layers_.back(); }

  Eigen::Index input_dim() const { return layers_.front().in_dim(); }
  Eigen::Index output_dim() const { return layers_.back().out_dim(); }
  /// Width of the penultimate activations fed to the head.
  Eigen::Index embedding_dim() const { return layers_.back().in_dim(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.size();
    return n;
  }

  void set_tunable(std::size_t k, bool tunable) { layers_.at(k).tunable = tunable; }
  void set_all_tunable(bool tunable) {
    for (auto& l : layers_) l.tunable = tunable;
  }

  /// Appends classifier rows. Existing rows are untouched.
  void append_head_rows(const Matrix& weight_rows, const Vector& bias_rows) {
    Layer& h = head();
    if (weight_rows.cols() != h.in_dim() || weight_rows.rows() != bias_rows.size())
      throw ShapeError("new head rows do not match the head input width");
    Matrix w(h.out_dim() + weight_rows.rows(), h.in_dim());
    w << h.weight, weight_rows;
    Vector b(h.bias.size() + bias_rows.size());
    b << h.bias, bias_rows;
    h.weight = std::move(w);
    h.bias = std::move(b);
  }

  bool operator==(const ParameterStore& other) const {
    if (layers_.size() != other.layers_.size()) return false;
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      const Layer& a = layers_[k];
      const Layer& b = other.layers_[k];
      if (a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols() || a.weight != b.weight ||
          a.bias != b.bias)
        return false;
    }
    return true;
  }

 private:
  void validate() const {
    if (layers_.empty()) throw ConfigError("a network needs at least one layer");
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      if (layers_[k].bias.size() != layers_[k].out_dim())
        throw ShapeError("layer " + std::to_string(k) + ": bias length differs from output width");
      if (k + 1 < layers_.size() && layers_[k].out_dim() != layers_[k + 1].in_dim())
        throw ShapeError("layer " + std::to_string(k) + " output does not feed layer " + std::to_string(k + 1));
    }
  }

  std::vector<Layer> layers_;
};

/// dL/dp for every parameter, mirroring a ParameterStore.
struct GradientStore {
  BlockList layers;

  static GradientStore zeros_like(const ParameterStore& model) {
    GradientStore g;
    for (const auto& l : model.layers()) g.layers.push_back(ParamBlock::zeros(l.out_dim(), l.in_dim()));
    return g;
  }

  bool all_finite() const {
    for (const auto& b : layers)
      if (!b.weight.allFinite() || !b.bias.allFinite()) return false;
    return true;
  }
};

/// Layer inputs and pre-activations recorded during a forward pass.
struct ForwardTrace {
  std::vector<Matrix> inputs;  // inputs[k] feeds layer k
  std::vector<Matrix> preactivations;
  Matrix logits;

  const Matrix& embeddings() const { return inputs.back(); }
};

struct ForwardResult {
  Matrix embeddings;
  Matrix logits;
};

namespace detail {

inline Matrix leaky(const Matrix& z) {
  return z.unaryExpr([](double v) { return v > 0.0 ? v : kLeakySlope * v; });
}

inline Matrix leaky_slope(const Matrix& z) {
  return z.unaryExpr([](double v) { return v > 0.0 ? 1.0 : kLeakySlope; });
}

inline Matrix affine(const Layer& layer, const Matrix& x) {
  Matrix z = x * layer.weight.transpose();
  z.rowwise() += layer.bias.transpose();
  return z;
}

}  // namespace detail

inline ForwardTrace forward_trace(const ParameterStore& model, const Matrix& inputs) {
  if (inputs.cols() != model.input_dim())
    throw ShapeError("input width " + std::to_string(inputs.cols()) + " does not match network input " +
                     std::to_string(model.input_dim()));
  ForwardTrace t;
  Matrix x = inputs;
  const std::size_t K = model.layer_count();
  for (std::size_t k = 0; k < K; ++k) {
    t.inputs.push_back(x);
    Matrix z = detail::affine(model.layer(k), x);
    if (k + 1 < K) {
      x = detail::leaky(z);
      t.preactivations.push_back(std::move(z));
    } else {
      t.preactivations.push_back(z);
      t.logits = std::move(z);
    }
  }
  return t;
}

inline ForwardResult forward(const ParameterStore& model, const Matrix& inputs) {
  ForwardTrace t = forward_trace(model, inputs);
  return {std::move(t.inputs.back()), std::move(t.logits)};
}

/// Penultimate activations only; the head is skipped.
inline Matrix embed(const ParameterStore& model, const Matrix& inputs) {
  if (inputs.cols() != model.input_dim()) throw ShapeError("input width does not match network input");
  Matrix x = inputs;
  for (std::size_t k = 0; k + 1 < model.layer_count(); ++k) x = detail::leaky(detail::affine(model.layer(k), x));
  return x;
}

/// Row-wise softmax with max subtraction.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

/// A scalar loss averaged over the batch and its gradient with respect to the logits.
struct LossValue {
  double loss = 0.0;
  Matrix dlogits;
};

inline LossValue softmax_cross_entropy(const Matrix& logits, const Labels& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows())
    throw ShapeError("label count does not match logit rows");
  const Eigen::Index B = logits.rows();
  const Eigen::Index C = logits.cols();
  LossValue out;
  out.dlogits = softmax_rows(logits);
  for (Eigen::Index i = 0; i < B; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= C)
      throw LabelError("label " + std::to_string(y) + " outside [0, " + std::to_string(C) + ")");
    // log-sum-exp form keeps the loss finite for confident wrong answers
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    out.loss += lse - logits(i, y);
    out.dlogits(i, y) -= 1.0;
  }
  out.loss /= static_cast<double>(B);
  out.dlogits /= static_cast<double>(B);
  return out;
}

/// KL(P || Q) per row with P = softmax(p_logits), Q = softmax(q_logits),
/// averaged over rows. The gradient is with respect to p_logits; q is constant.
inline LossValue kl_divergence_with_grad(const Matrix& p_logits, const Matrix& q_logits) {
  if (p_logits.rows() != q_logits.rows() || p_logits.cols() != q_logits.cols())
    throw ShapeError("KL divergence needs equally shaped logits");
  const Matrix p = softmax_rows(p_logits);
  const Matrix q = softmax_rows(q_logits);
  const Eigen::Index B = p.rows();
  LossValue out;
  out.dlogits = Matrix::Zero(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < B; ++i) {
    const Eigen::ArrayXd lp = p.row(i).array().max(kProbabilityFloor).log();
    const Eigen::ArrayXd lq = q.row(i).array().max(kProbabilityFloor).log();
    const Eigen::ArrayXd pr = p.row(i).array();
    const Eigen::ArrayXd ratio = lp - lq;
    const double kl = (pr * ratio).sum();
    out.loss += kl;
    // d/dz_j sum_c p_c (log p_c - log q_c) = p_j (ratio_j - kl)
    out.dlogits.row(i) = (pr * (ratio - kl)).matrix().transpose();
  }
  out.loss /= static_cast<double>(B);
  out.dlogits /= static_cast<double>(B);
  return out;
}

inline double kl_divergence(const Matrix& p_logits, const Matrix& q_logits) {
  return kl_divergence_with_grad(p_logits, q_logits).loss;
}

/// Maps logits to a loss and its logit gradient.
using LossSpec = std::function<LossValue(const Matrix& logits)>;

inline LossSpec cross_entropy_loss(Labels labels) {
  return [labels = std::move(labels)](const Matrix& logits) { return softmax_cross_entropy(logits, labels); };
}

/// Backpropagates `grad_output`, the gradient with respect to the output of
/// layer `top` (post-activation for hidden layers, logits for the head), down
/// to layer 0. Layers with tunable == false receive an all-zero block.
inline GradientStore backprop_from(const ParameterStore& model, const ForwardTrace& trace, std::size_t top,
                                   const Matrix& grad_output) {
  GradientStore g = GradientStore::zeros_like(model);
  const std::size_t K = model.layer_count();
  Matrix delta = grad_output;
  if (top + 1 < K) delta = delta.cwiseProduct(detail::leaky_slope(trace.preactivations[top]));
  for (std::size_t k = top + 1; k-- > 0;) {
    const Layer& layer = model.layer(k);
    if (layer.tunable) {
      g.layers[k].weight = delta.transpose() * trace.inputs[k];
      g.layers[k].bias = delta.colwise().sum().transpose();
    }
    if (k == 0) break;
    delta = (delta * layer.weight).cwiseProduct(detail::leaky_slope(trace.preactivations[k - 1]));
  }
  return g;
}

struct LossAndGradient {
  double loss = 0.0;
  GradientStore gradient;
  Matrix logits;
};

inline LossAndGradient backward(const ParameterStore& model, const Matrix& inputs, const LossSpec& loss) {
  ForwardTrace trace = forward_trace(model, inputs);
  LossValue lv = loss(trace.logits);
  if (lv.dlogits.rows() != trace.logits.rows() || lv.dlogits.cols() != trace.logits.cols())
    throw ShapeError("loss gradient does not match logits");
  GradientStore g = backprop_from(model, trace, model.layer_count() - 1, lv.dlogits);
  return {lv.loss, std::move(g), std::move(trace.logits)};
}

inline LossAndGradient backward(const ParameterStore& model, const Batch& batch) {
  return backward(model, batch.inputs, cross_entropy_loss(batch.labels));
}

/// Replaces every entry u with sign(u) * min(|u|, max_update).
inline GradientStore clip_update(GradientStore update, double max_update) {
  if (!(max_update > 0.0)) throw ConfigError("clip threshold must be positive");
  for (auto& b : update.layers) {
    b.weight = b.weight.cwiseMax(-max_update).cwiseMin(max_update);
    b.bias = b.bias.cwiseMax(-max_update).cwiseMin(max_update);
  }
  return update;
}

/// Plain SGD on tunable layers.
inline void sgd_step(ParameterStore& model, const GradientStore& grad, double lr) {
  for (std::size_t k = 0; k < model.layer_count(); ++k) {
    Layer& l = model.layer(k);
    if (!l.tunable) continue;
    l.weight -= lr * grad.layers[k].weight;
    l.bias -= lr * grad.layers[k].bias;
  }
}

/// Heavy-ball SGD, used for pre-training. Adaptation uses plain steps.
class MomentumSgd {
 public:
  MomentumSgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  void step(ParameterStore& model, const GradientStore& grad) {
    if (velocity_.layers.size() != model.layer_count()) velocity_ = GradientStore::zeros_like(model);
    for (std::size_t k = 0; k < model.layer_count(); ++k) {
      Layer& l = model.layer(k);
      if (!l.tunable) continue;
      ParamBlock& v = velocity_.layers[k];
      if (!v.same_shape(grad.layers[k])) v = ParamBlock::zeros(l.out_dim(), l.in_dim());
      v.weight = momentum_ * v.weight + grad.layers[k].weight;
      v.bias = momentum_ * v.bias + grad.layers[k].bias;
      l.weight -= lr_ * v.weight;
      l.bias -= lr_ * v.bias;
    }
  }

 private:
  double lr_;
  double momentum_;
  GradientStore velocity_;
};

inline Labels argmax_rows(const Matrix& logits) {
  Labels out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index j = 0;
    logits.row(i).maxCoeff(&j);
    out[static_cast<std::size_t>(i)] = static_cast<int>(j);
  }
  return out;
}

inline double accuracy(const Matrix& logits, const Labels& labels) {
  if (labels.empty()) return 0.0;
  const Labels pred = argmax_rows(logits);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

}  // namespace imco
