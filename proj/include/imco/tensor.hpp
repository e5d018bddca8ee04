#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "imco/error.hpp"

namespace imco {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Labels = std::vector<int>;

/// Labeled rows. Labels index the logit columns of whatever head consumes the batch.
struct Batch {
  Matrix inputs;
  Labels labels;

  std::size_t size() const { return labels.size(); }
};

/// Weight matrix [out x in] plus bias [out] for one layer. Used for gradients,
/// importance values and displacement reports, all of which mirror the
/// parameter layout of a network.
///
/// Parameter addresses within a block are flat: indices [0, out*in) walk the
/// weight row-major, indices [out*in, out*in + out) walk the bias.
struct ParamBlock {
  Matrix weight;
  Vector bias;

  static ParamBlock zeros(Eigen::Index out, Eigen::Index in) {
    return {Matrix::Zero(out, in), Vector::Zero(out)};
  }

  std::size_t size() const { return static_cast<std::size_t>(weight.size() + bias.size()); }

  double at(std::size_t index) const {
    const auto w = static_cast<std::size_t>(weight.size());
    return index < w ? weight.data()[index] : bias[static_cast<Eigen::Index>(index - w)];
  }
  double& at(std::size_t index) {
    const auto w = static_cast<std::size_t>(weight.size());
    return index < w ? weight.data()[index] : bias[static_cast<Eigen::Index>(index - w)];
  }

  bool same_shape(const ParamBlock& other) const {
    return weight.rows() == other.weight.rows() && weight.cols() == other.weight.cols() &&
           bias.size() == other.bias.size();
  }
};

using BlockList = std::vector<ParamBlock>;

inline void require_same_shape(const BlockList& a, const BlockList& b, const char* what) {
  bool ok = a.size() == b.size();
  for (std::size_t k = 0; ok && k < a.size(); ++k) ok = a[k].same_shape(b[k]);
  if (!ok) throw ShapeError(std::string(what) + ": parameter layouts differ");
}

}  // namespace imco
