#pragma once

#include "entroad/bundle.hpp"
#include "entroad/error.hpp"
#include "entroad/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace entroad {

// Patch-level structural entropy of one image.
struct EntropyMap {
  VecD raw;        // nats, one value per patch
  VecD normalized; // min-max scaled to [0,1]
  std::vector<int> layers_used;
};

// Drops the [CLS] row/column and row-normalizes the spatial block.
// All-zero spatial rows become uniform.
template <class T>
Mat<T> normalize_attention(const Mat<T>& attention) {
  const Eigen::Index n = attention.rows() - 1;
  if (n < 1 || attention.cols() != attention.rows()) {
    throw DataError("attention must be square with at least one spatial token");
  }
  Mat<T> out = attention.bottomRightCorner(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    T sum = T(0);
    for (Eigen::Index j = 0; j < n; ++j) {
      sum += out(i, j);
    }
    if (sum <= T(0)) {
      out.row(i).setConstant(T(1) / T(n));
    } else {
      out.row(i) /= (sum + T(kEps));
    }
  }
  return out;
}

// Shannon entropy (natural log) of every row. The eps inside the log makes a
// one-hot row come out at -eps, so results are floored at 0.
template <class T>
Vec<T> layer_entropy(const Mat<T>& normalized) {
  Vec<T> e(normalized.rows());
  for (Eigen::Index i = 0; i < normalized.rows(); ++i) {
    T h = T(0);
    for (Eigen::Index j = 0; j < normalized.cols(); ++j) {
      const T a = normalized(i, j);
      h -= a * std::log(a + T(kEps));
    }
    e[i] = std::max(h, T(0));
  }
  return e;
}

// Layer-averaged entropy over `layers`.
inline VecD structural_entropy(const FeatureBundle& bundle, const std::vector<int>& layers) {
  if (layers.empty()) {
    throw UsageError("entropy needs at least one layer");
  }
  VecD total = VecD::Zero(bundle.num_patches());
  for (int layer : layers) {
    const MatD att = bundle.layer_attention(layer).cast<double>();
    total += layer_entropy<double>(normalize_attention<double>(att));
  }
  return total / static_cast<double>(layers.size());
}

template <class T>
Vec<T> minmax_normalize(const Vec<T>& e) {
  if (e.size() == 0) {
    return e;
  }
  const T lo = e.minCoeff();
  const T hi = e.maxCoeff();
  return (e.array() - lo) / (hi - lo + T(kEps));
}

inline EntropyMap compute_entropy_map(const FeatureBundle& bundle, const std::vector<int>& layers) {
  EntropyMap m;
  m.raw = structural_entropy(bundle, layers);
  m.normalized = minmax_normalize<double>(m.raw);
  m.layers_used = layers;
  return m;
}

} // namespace entroad
