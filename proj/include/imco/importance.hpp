#pragma once

// Parameter importance from adversarial weight perturbation. After a task is
// learned, a copy of the model is pushed uphill on (cross-entropy + KL to the
// previous model) for one epoch; parameters that move the most under this
// ascent carry the most label information.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>

#include "imco/error.hpp"
#include "imco/nn.hpp"
#include "imco/tensor.hpp"

namespace imco {

/// Per-parameter importance in [0, 1], laid out like a ParameterStore.
struct ImportanceMatrix {
  BlockList layers;
  int task_counter = 0;

  static ImportanceMatrix zeros_like(const ParameterStore& model) {
    ImportanceMatrix s;
    for (const auto& l : model.layers()) s.layers.push_back(ParamBlock::zeros(l.out_dim(), l.in_dim()));
    return s;
  }

  /// Pads rows appended to any layer (new classifier rows) with zero importance.
  ImportanceMatrix extended_to(const ParameterStore& model) const {
    if (layers.size() != model.layer_count()) throw ShapeError("importance and model differ in depth");
    ImportanceMatrix out = zeros_like(model);
    out.task_counter = task_counter;
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const ParamBlock& src = layers[k];
      ParamBlock& dst = out.layers[k];
      if (src.weight.cols() != dst.weight.cols() || src.weight.rows() > dst.weight.rows())
        throw ShapeError("layer " + std::to_string(k) + " cannot be extended to the model shape");
      dst.weight.topRows(src.weight.rows()) = src.weight;
      dst.bias.head(src.bias.size()) = src.bias;
    }
    return out;
  }

  double max_value() const {
    double m = 0.0;
    for (const auto& b : layers) {
      if (b.weight.size()) m = std::max(m, b.weight.maxCoeff());
      if (b.bias.size()) m = std::max(m, b.bias.maxCoeff());
    }
    return m;
  }

  double min_value() const {
    double m = 1.0;
    for (const auto& b : layers) {
      if (b.weight.size()) m = std::min(m, b.weight.minCoeff());
      if (b.bias.size()) m = std::min(m, b.bias.minCoeff());
    }
    return m;
  }

  /// Mean importance of one layer, weights and biases together.
  double layer_mean(std::size_t k) const {
    const ParamBlock& b = layers.at(k);
    return (b.weight.sum() + b.bias.sum()) / static_cast<double>(b.size());
  }
};

/// Cross-entropy on the current head plus KL(current || previous) on the
/// class columns both heads share, batch-averaged, with its gradient.
inline LossAndGradient adversarial_loss(const ParameterStore& model, const ParameterStore& prev_model,
                                        const Batch& batch) {
  const Eigen::Index shared = prev_model.output_dim();
  if (shared < 1 || shared > model.output_dim()) throw ConfigError("models share no classifier columns");
  if (prev_model.input_dim() != model.input_dim()) throw ShapeError("models take different input widths");
  const Matrix prev_logits = forward(prev_model, batch.inputs).logits;
  const Labels labels = batch.labels;
  return backward(model, batch.inputs, [&](const Matrix& logits) {
    LossValue ce = softmax_cross_entropy(logits, labels);
    const Matrix cur_shared = logits.leftCols(shared);
    const LossValue kl = kl_divergence_with_grad(cur_shared, prev_logits);
    ce.loss += kl.loss;
    ce.dlogits.leftCols(shared) += kl.dlogits;
    return ce;
  });
}

/// Copy of `model` after `epochs` passes of gradient ascent on the
/// adversarial loss. Every layer is perturbed regardless of its tunable flag;
/// the returned copy keeps the original flags. `batch_size` 0 means full batch.
inline ParameterStore perturb_adversarially(const ParameterStore& model, const ParameterStore& prev_model,
                                            const Batch& data, double ascent_lr, int epochs, int batch_size = 0) {
  if (epochs < 1) throw ConfigError("adversarial perturbation needs at least one epoch");
  if (ascent_lr < 0.0) throw ConfigError("ascent step size must be non-negative");
  if (data.size() == 0) throw ConfigError("adversarial perturbation needs data");
  ParameterStore adv = model;
  adv.set_all_tunable(true);
  const std::size_t n = data.size();
  const std::size_t step = batch_size > 0 ? static_cast<std::size_t>(batch_size) : n;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (std::size_t start = 0; start < n; start += step) {
      const std::size_t end = std::min(n, start + step);
      Batch mb;
      mb.inputs = data.inputs.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(end - start));
      mb.labels.assign(data.labels.begin() + static_cast<std::ptrdiff_t>(start),
                       data.labels.begin() + static_cast<std::ptrdiff_t>(end));
      const LossAndGradient lg = adversarial_loss(adv, prev_model, mb);
      sgd_step(adv, lg.gradient, -ascent_lr);
    }
  }
  for (std::size_t k = 0; k < model.layer_count(); ++k) adv.set_tunable(k, model.layer(k).tunable);
  return adv;
}

/// Squared displacement per parameter, divided by the layer maximum. A layer
/// that did not move is all zero.
inline ImportanceMatrix layer_importance(const ParameterStore& model, const ParameterStore& perturbed) {
  if (model.layer_count() != perturbed.layer_count()) throw ShapeError("models differ in depth");
  ImportanceMatrix out;
  for (std::size_t k = 0; k < model.layer_count(); ++k) {
    const Layer& a = model.layer(k);
    const Layer& b = perturbed.layer(k);
    if (a.weight.rows() != b.weight.rows() || a.weight.cols() != b.weight.cols())
      throw ShapeError("layer " + std::to_string(k) + " differs in shape");
    ParamBlock v{(b.weight - a.weight).array().square().matrix(), (b.bias - a.bias).array().square().matrix()};
    double peak = 0.0;
    if (v.weight.size()) peak = std::max(peak, v.weight.maxCoeff());
    if (v.bias.size()) peak = std::max(peak, v.bias.maxCoeff());
    if (peak > 0.0) {
      v.weight /= peak;
      v.bias /= peak;
      // the arg-max entry is exactly peak/peak == 1
    } else {
      v.weight.setZero();
      v.bias.setZero();
    }
    out.layers.push_back(std::move(v));
  }
  return out;
}

/// min(I + S_prev, 1) element-wise. A smaller S_prev (fewer classifier rows)
/// is zero-padded first.
inline ImportanceMatrix accumulate_importance(const ImportanceMatrix& current, const ImportanceMatrix& previous) {
  if (current.layers.size() != previous.layers.size()) throw ShapeError("importance matrices differ in depth");
  ImportanceMatrix prev = previous;
  for (std::size_t k = 0; k < prev.layers.size(); ++k) {
    const ParamBlock& c = current.layers[k];
    ParamBlock& p = prev.layers[k];
    if (!p.same_shape(c)) {
      if (p.weight.cols() != c.weight.cols() || p.weight.rows() > c.weight.rows())
        throw ShapeError("importance layer " + std::to_string(k) + " differs in shape");
      ParamBlock grown = ParamBlock::zeros(c.weight.rows(), c.weight.cols());
      grown.weight.topRows(p.weight.rows()) = p.weight;
      grown.bias.head(p.bias.size()) = p.bias;
      p = std::move(grown);
    }
  }
  ImportanceMatrix out;
  out.task_counter = previous.task_counter + 1;
  for (std::size_t k = 0; k < prev.layers.size(); ++k) {
    const ParamBlock& c = current.layers[k];
    const ParamBlock& p = prev.layers[k];
    out.layers.push_back({(c.weight + p.weight).cwiseMin(1.0), (c.bias + p.bias).cwiseMin(1.0)});
  }
  return out;
}

/// `layer,index,importance` rows, index in flat block order.
inline void write_importance_csv(const ImportanceMatrix& s, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "layer,index,importance\n";
  out.precision(17);
  for (std::size_t k = 0; k < s.layers.size(); ++k)
    for (std::size_t i = 0; i < s.layers[k].size(); ++i) out << k << ',' << i << ',' << s.layers[k].at(i) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace imco
