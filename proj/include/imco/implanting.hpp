#pragma once

// Open-set pre-training. Each episode is augmented with n synthesized classes
// whose samples are convex mixtures of two real episode classes; a prototype
// head is built from the augmented support set and the backbone is trained on
// the augmented query loss.

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "imco/data.hpp"
#include "imco/error.hpp"
#include "imco/nn.hpp"
#include "imco/random.hpp"
#include "imco/tensor.hpp"

namespace imco {

/// Shape parameters of the Beta distribution the mixing ratio is drawn from.
struct MixSpec {
  double beta_a = 1.5;
  double beta_b = 1.5;

  void validate() const {
    if (!(beta_a > 0.0 && beta_b > 0.0)) throw ConfigError("Beta shape parameters must be positive");
  }
};

enum class MixSpace { input, embedding };

/// How episode query embeddings are scored against prototypes.
enum class PrototypeMetric { dot, cosine };

/// lambda * a + (1 - lambda) * b
inline Vector mix_features(const Vector& a, const Vector& b, double lambda) {
  if (a.size() != b.size()) throw ShapeError("mixed vectors differ in width");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("mixing ratio must lie in [0, 1]");
  return lambda * a + (1.0 - lambda) * b;
}

inline double sample_mix_ratio(const MixSpec& spec, Rng& rng) { return rng.beta(spec.beta_a, spec.beta_b); }

/// One synthesized row: a mixture of two rows of the same base-episode split.
struct MixRecipe {
  Eigen::Index row_a = 0;
  Eigen::Index row_b = 0;
  double lambda = 0.5;
};

/// Base episode plus n synthesized classes labeled n..2n-1. Features are
/// inputs or penultimate embeddings depending on `space`; in both cases the
/// first n*k support rows (n*q query rows) are the base episode's.
struct AugmentedEpisode {
  Episode base;
  MixSpace space = MixSpace::embedding;
  std::vector<std::pair<int, int>> class_pairs;  // source local labels per synthesized class
  std::vector<MixRecipe> support_mix;
  std::vector<MixRecipe> query_mix;
  Matrix support_features;
  Labels support_labels;
  Matrix query_features;
  Labels query_labels;

  int way() const { return 2 * base.way; }
};

namespace detail {

/// n unordered pairs of distinct labels in [0, n), without replacement while
/// the pool lasts.
inline std::vector<std::pair<int, int>> draw_class_pairs(int n, Rng& rng) {
  std::vector<std::pair<int, int>> pool;
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b) pool.emplace_back(a, b);
  std::vector<std::pair<int, int>> out;
  while (static_cast<int>(out.size()) < n) {
    rng.shuffle(pool);
    for (const auto& p : pool) {
      if (static_cast<int>(out.size()) == n) break;
      out.push_back(p);
    }
  }
  return out;
}

inline std::vector<MixRecipe> draw_recipes(const std::vector<std::pair<int, int>>& pairs, int per_class,
                                           const MixSpec& spec, Rng& rng) {
  std::vector<MixRecipe> out;
  for (const auto& [a, b] : pairs) {
    for (int i = 0; i < per_class; ++i) {
      MixRecipe r;
      r.row_a = a * per_class + static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(per_class)));
      r.row_b = b * per_class + static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(per_class)));
      r.lambda = sample_mix_ratio(spec, rng);
      out.push_back(r);
    }
  }
  return out;
}

inline Matrix apply_recipes(const Matrix& rows, const std::vector<MixRecipe>& recipes) {
  Matrix out(static_cast<Eigen::Index>(rows.rows() + static_cast<Eigen::Index>(recipes.size())), rows.cols());
  out.topRows(rows.rows()) = rows;
  for (std::size_t i = 0; i < recipes.size(); ++i) {
    const auto& r = recipes[i];
    out.row(rows.rows() + static_cast<Eigen::Index>(i)) = r.lambda * rows.row(r.row_a) + (1.0 - r.lambda) * rows.row(r.row_b);
  }
  return out;
}

inline Labels augmented_labels(const Labels& base, int n, int per_class) {
  Labels out = base;
  for (int j = 0; j < n; ++j) out.insert(out.end(), static_cast<std::size_t>(per_class), n + j);
  return out;
}

}  // namespace detail

inline AugmentedEpisode synthesize_episode(const Episode& ep, const MixSpec& spec, MixSpace space,
                                           const ParameterStore& model, Rng& rng) {
  if (ep.way < 2) throw ConfigError("synthesizing classes needs an episode with at least two classes");
  spec.validate();
  AugmentedEpisode aug;
  aug.base = ep;
  aug.space = space;
  aug.class_pairs = detail::draw_class_pairs(ep.way, rng);
  aug.support_mix = detail::draw_recipes(aug.class_pairs, ep.shot, spec, rng);
  aug.query_mix = detail::draw_recipes(aug.class_pairs, ep.query_per_class, spec, rng);
  const Matrix support = space == MixSpace::input ? ep.support.inputs : embed(model, ep.support.inputs);
  const Matrix query = space == MixSpace::input ? ep.query.inputs : embed(model, ep.query.inputs);
  aug.support_features = detail::apply_recipes(support, aug.support_mix);
  aug.query_features = detail::apply_recipes(query, aug.query_mix);
  aug.support_labels = detail::augmented_labels(ep.support.labels, ep.way, ep.shot);
  aug.query_labels = detail::augmented_labels(ep.query.labels, ep.way, ep.query_per_class);
  return aug;
}

/// Row c is the mean embedding of class c. Labels must cover 0..n-1.
inline Matrix build_prototype_classifier(const Matrix& embeddings, const Labels& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != embeddings.rows())
    throw ShapeError("label count does not match embedding rows");
  int n = 0;
  for (int y : labels) {
    if (y < 0) throw LabelError("negative class label");
    n = std::max(n, y + 1);
  }
  Matrix protos = Matrix::Zero(n, embeddings.cols());
  std::vector<int> counts(static_cast<std::size_t>(n), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    protos.row(labels[i]) += embeddings.row(static_cast<Eigen::Index>(i));
    ++counts[static_cast<std::size_t>(labels[i])];
  }
  for (int c = 0; c < n; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) throw ConfigError("class " + std::to_string(c) + " has no samples");
    protos.row(c) /= counts[static_cast<std::size_t>(c)];
  }
  return protos;
}

/// Bias that turns dot-product scoring against prototypes into
/// nearest-centroid scoring: w.x - |w|^2 / 2.
inline Vector centroid_bias(const Matrix& prototypes) { return -0.5 * prototypes.rowwise().squaredNorm(); }

struct PrototypeScores {
  Matrix logits;
  /// Back-maps a logit gradient onto the query and prototype rows.
  Matrix dquery;
  Matrix dprototypes;
};

/// Scores queries against prototypes and, if `dlogits` is given, pulls the
/// gradient back. Cosine scores are multiplied by `scale`.
inline Matrix prototype_logits(const Matrix& query, const Matrix& prototypes, PrototypeMetric metric, double scale) {
  if (metric == PrototypeMetric::dot) return query * prototypes.transpose();
  const Matrix qn = query.rowwise().normalized();
  const Matrix pn = prototypes.rowwise().normalized();
  return scale * qn * pn.transpose();
}

namespace detail {

/// d(x / |x|) applied row-wise: (g - (g.u) u) / |x|
inline Matrix normalize_backward(const Matrix& x, const Matrix& g) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double norm = x.row(i).norm();
    if (norm == 0.0) {
      out.row(i).setZero();
      continue;
    }
    const auto u = x.row(i) / norm;
    out.row(i) = (g.row(i) - g.row(i).dot(u) * u) / norm;
  }
  return out;
}

}  // namespace detail

inline PrototypeScores prototype_scores_backward(const Matrix& query, const Matrix& prototypes, PrototypeMetric metric,
                                                 double scale, const Matrix& dlogits) {
  PrototypeScores s;
  if (metric == PrototypeMetric::dot) {
    s.logits = query * prototypes.transpose();
    s.dquery = dlogits * prototypes;
    s.dprototypes = dlogits.transpose() * query;
    return s;
  }
  const Matrix qn = query.rowwise().normalized();
  const Matrix pn = prototypes.rowwise().normalized();
  s.logits = scale * qn * pn.transpose();
  s.dquery = detail::normalize_backward(query, scale * dlogits * pn);
  s.dprototypes = detail::normalize_backward(prototypes, scale * dlogits.transpose() * qn);
  return s;
}

struct ImplantConfig {
  int episodes = 600;
  int way = 5;
  int shot = 5;
  int query = 15;
  MixSpec mix;
  MixSpace space = MixSpace::embedding;
  PrototypeMetric metric = PrototypeMetric::dot;
  double cosine_scale = 10.0;
  double lr = 0.001;
  double momentum = 0.9;
  bool synthesize = true;  // false trains on plain episodes, the closed-set episodic control
};

struct EpisodeLogRow {
  int episode = 0;
  double loss = 0.0;
  double query_acc = 0.0;
};

struct EpisodeGradient {
  double loss = 0.0;
  double query_acc = 0.0;
  GradientStore gradient;
};

/// Query cross-entropy of an augmented episode against its support
/// prototypes, with the exact gradient through the mixing and prototype
/// averaging into the backbone.
inline EpisodeGradient episode_loss_and_gradient(const ParameterStore& model, const AugmentedEpisode& aug,
                                                 PrototypeMetric metric, double cosine_scale) {
  if (model.layer_count() < 2) throw ConfigError("episodic training needs a backbone below the head");
  const std::size_t top = model.layer_count() - 2;
  const Eigen::Index ns = aug.support_features.rows();
  const Eigen::Index nq = aug.query_features.rows();

  // Rows that actually pass through the network.
  Matrix sources;
  if (aug.space == MixSpace::input) {
    sources.resize(ns + nq, model.input_dim());
    sources << aug.support_features, aug.query_features;
  } else {
    sources.resize(aug.base.support.inputs.rows() + aug.base.query.inputs.rows(), model.input_dim());
    sources << aug.base.support.inputs, aug.base.query.inputs;
  }
  const ForwardTrace trace = forward_trace(model, sources);
  const Matrix& emb = trace.embeddings();

  Matrix es;
  Matrix eq;
  const Eigen::Index base_s = aug.base.support.inputs.rows();
  if (aug.space == MixSpace::input) {
    es = emb.topRows(ns);
    eq = emb.bottomRows(nq);
  } else {
    es = detail::apply_recipes(emb.topRows(base_s), aug.support_mix);
    eq = detail::apply_recipes(emb.bottomRows(emb.rows() - base_s), aug.query_mix);
  }

  const Matrix protos = build_prototype_classifier(es, aug.support_labels);
  const Matrix logits = prototype_logits(eq, protos, metric, cosine_scale);
  const LossValue ce = softmax_cross_entropy(logits, aug.query_labels);
  const PrototypeScores back = prototype_scores_backward(eq, protos, metric, cosine_scale, ce.dlogits);

  // Prototype rows are class means of the support rows.
  Matrix des = Matrix::Zero(ns, es.cols());
  std::vector<int> counts(static_cast<std::size_t>(protos.rows()), 0);
  for (int y : aug.support_labels) ++counts[static_cast<std::size_t>(y)];
  for (Eigen::Index i = 0; i < ns; ++i) {
    const int y = aug.support_labels[static_cast<std::size_t>(i)];
    des.row(i) = back.dprototypes.row(y) / counts[static_cast<std::size_t>(y)];
  }

  Matrix demb = Matrix::Zero(emb.rows(), emb.cols());
  if (aug.space == MixSpace::input) {
    demb.topRows(ns) = des;
    demb.bottomRows(nq) = back.dquery;
  } else {
    const Eigen::Index base_q = aug.base.query.inputs.rows();
    auto scatter = [&](const Matrix& d, const std::vector<MixRecipe>& recipes, Eigen::Index base_rows,
                       Eigen::Index offset) {
      demb.middleRows(offset, base_rows) += d.topRows(base_rows);
      for (std::size_t i = 0; i < recipes.size(); ++i) {
        const auto& r = recipes[i];
        const auto g = d.row(base_rows + static_cast<Eigen::Index>(i));
        demb.row(offset + r.row_a) += r.lambda * g;
        demb.row(offset + r.row_b) += (1.0 - r.lambda) * g;
      }
    };
    scatter(des, aug.support_mix, base_s, 0);
    scatter(back.dquery, aug.query_mix, base_q, base_s);
  }

  EpisodeGradient out;
  out.loss = ce.loss;
  out.query_acc = accuracy(logits, aug.query_labels);
  out.gradient = backprop_from(model, trace, top, demb);
  return out;
}

/// Plain (non-augmented) episode wrapped in the augmented layout with no
/// synthesized rows.
inline AugmentedEpisode plain_episode(const Episode& ep, MixSpace space, const ParameterStore& model) {
  AugmentedEpisode aug;
  aug.base = ep;
  aug.space = space;
  aug.support_features = space == MixSpace::input ? ep.support.inputs : embed(model, ep.support.inputs);
  aug.query_features = space == MixSpace::input ? ep.query.inputs : embed(model, ep.query.inputs);
  aug.support_labels = ep.support.labels;
  aug.query_labels = ep.query.labels;
  return aug;
}

/// Episodic open-set pre-training of the backbone. The head is not touched.
inline std::vector<EpisodeLogRow> implant_pretrain(ParameterStore& model, const ClassSet& base,
                                                   const ImplantConfig& cfg, std::uint64_t seed) {
  cfg.mix.validate();
  if (static_cast<int>(base.num_classes()) < cfg.way)
    throw SamplingError("base set has fewer classes than the episode way");
  Rng episode_rng(derive_seed(seed, "episodes"));
  Rng mix_rng(derive_seed(seed, "mixup"));
  MomentumSgd opt(cfg.lr, cfg.momentum);
  std::vector<EpisodeLogRow> log;
  for (int e = 0; e < cfg.episodes; ++e) {
    const Episode ep = sample_episode(base, cfg.way, cfg.shot, cfg.query, episode_rng);
    const AugmentedEpisode aug =
        cfg.synthesize ? synthesize_episode(ep, cfg.mix, cfg.space, model, mix_rng) : plain_episode(ep, cfg.space, model);
    const EpisodeGradient g = episode_loss_and_gradient(model, aug, cfg.metric, cfg.cosine_scale);
    opt.step(model, g.gradient);
    log.push_back({e, g.loss, g.query_acc});
  }
  return log;
}

struct EpochLogRow {
  int epoch = 0;
  double loss = 0.0;
  double acc = 0.0;
};

/// Mini-batch cross-entropy training of whatever layers are tunable.
inline std::vector<EpochLogRow> train_supervised(ParameterStore& model, const Batch& data, int epochs, int batch_size,
                                                 double lr, double momentum, Rng& rng) {
  if (data.size() == 0) throw ConfigError("no training samples");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  MomentumSgd opt(lr, momentum);
  std::vector<EpochLogRow> log;
  const std::size_t n = data.size();
  for (int epoch = 0; epoch < epochs; ++epoch) {
    const auto order = rng.choose(n, n);
    double loss_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
      Batch mb;
      mb.inputs.resize(static_cast<Eigen::Index>(end - start), data.inputs.cols());
      for (std::size_t i = start; i < end; ++i) {
        mb.inputs.row(static_cast<Eigen::Index>(i - start)) = data.inputs.row(static_cast<Eigen::Index>(order[i]));
        mb.labels.push_back(data.labels[order[i]]);
      }
      const LossAndGradient lg = backward(model, mb);
      opt.step(model, lg.gradient);
      loss_sum += lg.loss * static_cast<double>(end - start);
      const Labels pred = argmax_rows(lg.logits);
      for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == mb.labels[i];
    }
    log.push_back({epoch, loss_sum / static_cast<double>(n), static_cast<double>(hits) / static_cast<double>(n)});
  }
  return log;
}

/// Closed-set pre-training: the whole network is trained with cross-entropy
/// over the base classes, labeled by position in `class_order`.
inline std::vector<EpochLogRow> closed_set_pretrain(ParameterStore& model, const ClassSet& base_train,
                                                    const std::vector<int>& class_order, int epochs, int batch_size,
                                                    double lr, double momentum, std::uint64_t seed) {
  if (model.output_dim() != static_cast<Eigen::Index>(class_order.size()))
    throw ShapeError("head width does not match the number of base classes");
  Rng rng(derive_seed(seed, "closed-set"));
  model.set_all_tunable(true);
  return train_supervised(model, stack_classes(base_train, class_order), epochs, batch_size, lr, momentum, rng);
}

/// Replaces the head with a prototype head over `class_order` and then trains
/// the head alone on cross-entropy. The backbone is left as it is.
inline std::vector<EpochLogRow> fit_global_head(ParameterStore& model, const ClassSet& train,
                                                const std::vector<int>& class_order, int epochs, int batch_size,
                                                double lr, double momentum, std::uint64_t seed) {
  const Batch data = stack_classes(train, class_order);
  const Matrix protos = build_prototype_classifier(embed(model, data.inputs), data.labels);
  Layer& head = model.head();
  head.weight = protos;
  head.bias = centroid_bias(protos);
  std::vector<bool> flags;
  for (const auto& l : model.layers()) flags.push_back(l.tunable);
  model.set_all_tunable(false);
  head.tunable = true;
  Rng rng(derive_seed(seed, "global-head"));
  auto log = train_supervised(model, data, epochs, batch_size, lr, momentum, rng);
  for (std::size_t k = 0; k < flags.size(); ++k) model.set_tunable(k, flags[k]);
  return log;
}

}  // namespace imco
