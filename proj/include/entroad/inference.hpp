#pragma once

// Fused anomaly map and image score for one bundle.

#include "entroad/bundle.hpp"
#include "entroad/error.hpp"
#include "entroad/model.hpp"
#include "entroad/pipeline.hpp"
#include "entroad/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace entroad {

struct AnomalyResult {
  std::string image_id;
  int H = 0;
  int W = 0;
  VecD map;   // fused, row-major H*W
  VecD map_a; // smoothed branch maps
  VecD map_b;
  double score = 0.0;
  double a_loc = 0.0;
  double a_ret = 0.0;
  double gate = 1.0;
};

// alpha_bar * M_A + beta_bar * M_B with weights normalized by (alpha + beta + eps).
template <class T>
Vec<T> fuse_maps(const Vec<T>& map_a, const Vec<T>& map_b, double alpha, double beta) {
  if (alpha < 0.0 || beta < 0.0) {
    throw UsageError("fusion weights must be non-negative");
  }
  if (!(alpha + beta > 0.0)) {
    throw UsageError("fusion weights are both zero");
  }
  if (map_a.size() != map_b.size()) {
    throw UsageError("branch maps differ in size");
  }
  const double s = alpha + beta + kEps;
  return T(alpha / s) * map_a + T(beta / s) * map_b;
}

namespace detail {

// Half-sample symmetric reflection (edge sample repeated), periodic in 2n.
inline int reflect_index(int i, int n) {
  if (n == 1) {
    return 0;
  }
  const int period = 2 * n;
  i %= period;
  if (i < 0) {
    i += period;
  }
  return i < n ? i : period - 1 - i;
}

inline std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (double& v : k) {
    v /= total;
  }
  return k;
}

} // namespace detail

// Separable Gaussian blur with reflect padding, clamped to [0,1].
template <class T>
Vec<T> gaussian_smooth(const Vec<T>& map, int h, int w, double sigma) {
  if (!(sigma > 0.0)) {
    throw UsageError("smoothing sigma must be > 0");
  }
  if (map.size() != static_cast<Eigen::Index>(h) * w) {
    throw UsageError("map size does not match its geometry");
  }
  const std::vector<double> k = detail::gaussian_kernel(sigma);
  const int radius = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(static_cast<std::size_t>(map.size()));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t) {
        acc += k[static_cast<std::size_t>(t + radius)] *
               static_cast<double>(map[y * w + detail::reflect_index(x + t, w)]);
      }
      tmp[static_cast<std::size_t>(y * w + x)] = acc;
    }
  }
  Vec<T> out(map.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t) {
        acc += k[static_cast<std::size_t>(t + radius)] *
               tmp[static_cast<std::size_t>(detail::reflect_index(y + t, h) * w + x)];
      }
      out[y * w + x] = T(std::clamp(acc, 0.0, 1.0));
    }
  }
  return out;
}

// Mean of the max(1, floor(fraction * n)) largest entries.
template <class T>
T topk_score(const Vec<T>& map, double fraction = 0.01) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw UsageError("top fraction must lie in (0,1]");
  }
  if (map.size() == 0) {
    throw UsageError("empty map");
  }
  const auto n = static_cast<std::size_t>(map.size());
  const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n))));
  std::vector<T> v(map.data(), map.data() + n);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k - 1), v.end(), std::greater<T>());
  // Fixed summation order, so the score depends only on the top-k values.
  std::sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), std::greater<T>());
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    total += static_cast<double>(v[i]);
  }
  return T(total / static_cast<double>(k));
}

inline double image_score(double a_loc, double a_ret, double k = 0.7) {
  if (!(k >= 0.0 && k <= 1.0)) {
    throw UsageError("score balance k must lie in [0,1]");
  }
  return (1.0 - k) * a_loc + k * a_ret;
}

// Maps and scores from already-prepared inputs.
template <class T>
AnomalyResult infer_prepared(const FrozenInputs<T>& in, const FeatureBundle& bundle, const Model<T>& model,
                             DomainPrior prior) {
  const InferenceConfig& ic = model.config.inference;
  AnomalyResult res;
  res.image_id = bundle.image_id;
  res.H = bundle.H;
  res.W = bundle.W;
  res.gate = static_cast<double>(in.tokens.g);
  res.a_ret = static_cast<double>(in.a_ret);
  const Vec<T> raw_a = branch_anomaly_map<T>(in, branch_forward<T>(in, model, 0));
  const Vec<T> raw_b = branch_anomaly_map<T>(in, branch_forward<T>(in, model, 1));
  res.map_a = gaussian_smooth<T>(raw_a, bundle.H, bundle.W, ic.smoothing_sigma).template cast<double>();
  res.map_b = gaussian_smooth<T>(raw_b, bundle.H, bundle.W, ic.smoothing_sigma).template cast<double>();
  const auto [alpha, beta] = ic.fusion_weights(prior);
  res.map = fuse_maps<double>(res.map_a, res.map_b, alpha, beta);
  res.a_loc = topk_score<double>(res.map, ic.top_fraction);
  res.score = image_score(res.a_loc, res.a_ret, ic.score_k);
  if (!std::isfinite(res.score)) {
    throw NumericalError("non-finite score for " + bundle.image_id);
  }
  return res;
}

template <class T>
AnomalyResult infer(const FeatureBundle& bundle, const Model<T>& model, DomainPrior prior) {
  return infer_prepared<T>(prepare_inputs<T>(bundle, model), bundle, model, prior);
}

template <class T>
AnomalyResult infer(const FeatureBundle& bundle, const Model<T>& model) {
  return infer<T>(bundle, model, model.config.inference.prior);
}

} // namespace entroad
