#pragma once

// Independent reference computations for the tests. Everything here is
// written with plain loops and std::vector so that it shares no code path
// with the library beyond the parameter containers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "imco/nn.hpp"
#include "imco/random.hpp"

namespace oracle {

using Row = std::vector<double>;

inline Row forward_row(const imco::ParameterStore& model, const Row& x0) {
  Row x = x0;
  for (std::size_t k = 0; k < model.layer_count(); ++k) {
    const imco::Layer& l = model.layer(k);
    Row z(static_cast<std::size_t>(l.out_dim()), 0.0);
    for (Eigen::Index o = 0; o < l.out_dim(); ++o) {
      double s = l.bias[o];
      for (Eigen::Index i = 0; i < l.in_dim(); ++i) s += l.weight(o, i) * x[static_cast<std::size_t>(i)];
      const bool hidden = k + 1 < model.layer_count();
      z[static_cast<std::size_t>(o)] = hidden && s <= 0.0 ? 0.01 * s : s;
    }
    x = std::move(z);
  }
  return x;
}

inline double cross_entropy_row(const Row& logits, int label) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double s = 0.0;
  for (double v : logits) s += std::exp(v - m);
  return m + std::log(s) - logits[static_cast<std::size_t>(label)];
}

inline Row softmax(const Row& z) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  Row p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - m);
  for (double& v : p) v /= s;
  return p;
}

/// Sum over classes of p log(p / q) on probabilities.
inline double kl_probs(const Row& p, const Row& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

inline Row row_of(const imco::Matrix& m, Eigen::Index i) {
  Row r(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
  return r;
}

inline double mean_cross_entropy(const imco::ParameterStore& model, const imco::Matrix& x, const imco::Labels& y) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    s += cross_entropy_row(forward_row(model, row_of(x, i)), y[static_cast<std::size_t>(i)]);
  return s / static_cast<double>(x.rows());
}

/// Mean cross-entropy carried in extended precision, for difference
/// quotients whose cancellation error must sit well below 1e-4 relative.
inline long double mean_cross_entropy_extended(const imco::ParameterStore& model, const imco::Matrix& x,
                                               const imco::Labels& y) {
  long double total = 0.0L;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    std::vector<long double> a(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index j = 0; j < x.cols(); ++j) a[static_cast<std::size_t>(j)] = x(r, j);
    for (std::size_t k = 0; k < model.layer_count(); ++k) {
      const imco::Layer& l = model.layer(k);
      std::vector<long double> z(static_cast<std::size_t>(l.out_dim()));
      for (Eigen::Index o = 0; o < l.out_dim(); ++o) {
        long double s = l.bias[o];
        for (Eigen::Index i = 0; i < l.in_dim(); ++i) s += static_cast<long double>(l.weight(o, i)) * a[static_cast<std::size_t>(i)];
        z[static_cast<std::size_t>(o)] = k + 1 < model.layer_count() && s <= 0.0L ? 0.01L * s : s;
      }
      a = std::move(z);
    }
    long double m = a[0];
    for (long double v : a) m = std::max(m, v);
    long double e = 0.0L;
    for (long double v : a) e += std::exp(v - m);
    total += m + std::log(e) - a[static_cast<std::size_t>(y[static_cast<std::size_t>(r)])];
  }
  return total / static_cast<long double>(x.rows());
}

/// Central differences in extended precision, divided by the step actually
/// taken in double.
inline imco::GradientStore finite_difference_extended(
    imco::ParameterStore model, const std::function<long double(const imco::ParameterStore&)>& loss, double h = 1e-6) {
  imco::GradientStore g = imco::GradientStore::zeros_like(model);
  for (std::size_t k = 0; k < model.layer_count(); ++k) {
    imco::Layer& l = model.layer(k);
    auto probe = [&](double& p) {
      const double keep = p;
      const double hi = keep + h, lo = keep - h;
      p = hi;
      const long double up = loss(model);
      p = lo;
      const long double down = loss(model);
      p = keep;
      return static_cast<double>((up - down) / (static_cast<long double>(hi) - static_cast<long double>(lo)));
    };
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) g.layers[k].weight.data()[i] = probe(l.weight.data()[i]);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) g.layers[k].bias[i] = probe(l.bias[i]);
  }
  return g;
}

/// Central differences of `loss` over every parameter of every layer.
inline imco::GradientStore finite_difference(imco::ParameterStore model,
                                             const std::function<double(const imco::ParameterStore&)>& loss,
                                             double h = 1e-5) {
  imco::GradientStore g = imco::GradientStore::zeros_like(model);
  for (std::size_t k = 0; k < model.layer_count(); ++k) {
    imco::Layer& l = model.layer(k);
    auto probe = [&](double& p) {
      const double keep = p;
      p = keep + h;
      const double up = loss(model);
      p = keep - h;
      const double down = loss(model);
      p = keep;
      return (up - down) / (2.0 * h);
    };
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) g.layers[k].weight.data()[i] = probe(l.weight.data()[i]);
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) g.layers[k].bias[i] = probe(l.bias[i]);
  }
  return g;
}

/// Largest |a - n| / max(|a|, |n|) over all entries; entries where both sides
/// are below `floor` in magnitude are compared absolutely against `floor`.
inline double max_relative_error(const imco::GradientStore& analytic, const imco::GradientStore& numeric,
                                 double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t k = 0; k < analytic.layers.size(); ++k)
    for (std::size_t i = 0; i < analytic.layers[k].size(); ++i) {
      const double a = analytic.layers[k].at(i);
      const double n = numeric.layers[k].at(i);
      const double scale = std::max({std::abs(a), std::abs(n), floor});
      worst = std::max(worst, std::abs(a - n) / scale);
    }
  return worst;
}

/// True when no hidden pre-activation of any row lies within `margin` of the
/// rectifier kink, so central differences with step h < margin are smooth.
inline bool clear_of_kinks(const imco::ParameterStore& model, const imco::Matrix& x, double margin) {
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Row a = row_of(x, r);
    for (std::size_t k = 0; k + 1 < model.layer_count(); ++k) {
      const imco::Layer& l = model.layer(k);
      Row z(static_cast<std::size_t>(l.out_dim()));
      for (Eigen::Index o = 0; o < l.out_dim(); ++o) {
        double s = l.bias[o];
        for (Eigen::Index i = 0; i < l.in_dim(); ++i) s += l.weight(o, i) * a[static_cast<std::size_t>(i)];
        if (std::abs(s) < margin) return false;
        z[static_cast<std::size_t>(o)] = s > 0.0 ? s : 0.01 * s;
      }
      a = std::move(z);
    }
  }
  return true;
}

/// Random widths in [2, max_width], `layers` layers, Glorot weights and
/// small random biases.
inline imco::ParameterStore random_model(imco::Rng& rng, int layers, int max_width) {
  std::vector<int> dims;
  for (int k = 0; k <= layers; ++k) dims.push_back(2 + static_cast<int>(rng.index(static_cast<std::size_t>(max_width - 1))));
  imco::ParameterStore m = imco::ParameterStore::glorot(dims, rng);
  for (std::size_t k = 0; k < m.layer_count(); ++k)
    for (Eigen::Index i = 0; i < m.layer(k).bias.size(); ++i) m.layer(k).bias[i] = rng.uniform(-0.2, 0.2);
  return m;
}

inline imco::Matrix random_matrix(imco::Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  imco::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, scale);
  return m;
}

inline imco::Labels random_labels(imco::Rng& rng, std::size_t n, std::size_t classes) {
  imco::Labels y(n);
  for (auto& v : y) v = static_cast<int>(rng.index(classes));
  return y;
}

/// W_n = W_init - sum_{i=1..n} (1 - sa)^i u_{n-i+1}, with u already clipped.
inline double unrolled_fusion(double w_init, const std::vector<double>& u, double sa) {
  const std::size_t n = u.size();
  double acc = 0.0;
  for (std::size_t i = 1; i <= n; ++i) acc += std::pow(1.0 - sa, static_cast<double>(i)) * u[n - i];
  return w_init - acc;
}

/// Partial sum of max_update * (1 - sa)^i for i = 1..n.
inline double geometric_displacement(double max_update, double sa, int n) {
  double s = 0.0;
  double f = 1.0;
  for (int i = 1; i <= n; ++i) {
    f *= 1.0 - sa;
    s += max_update * f;
  }
  return s;
}

inline double clip(double v, double c) { return std::clamp(v, -c, c); }

}  // namespace oracle
