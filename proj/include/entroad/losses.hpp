#pragma once

// Training objectives. Maps and masks are flattened H*W vectors. Every loss
// optionally accumulates `scale * dL/dinput` into a caller-provided gradient.

#include "entroad/error.hpp"
#include "entroad/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace entroad {

struct LossConfig {
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double dice_weight = 1.0; // lambda_d
  double lambda_a = 0.7;
  double lambda_b = 0.3;

  void validate() const {
    if (!(focal_alpha > 0.0 && focal_alpha < 1.0)) {
      throw UsageError("focal_alpha must lie in (0,1)");
    }
    if (focal_gamma < 0.0 || dice_weight < 0.0 || lambda_a < 0.0 || lambda_b < 0.0) {
      throw UsageError("loss weights must be non-negative");
    }
    if (!(lambda_a + lambda_b > 0.0)) {
      throw UsageError("lambda_a + lambda_b must be > 0");
    }
  }
};

namespace detail {

inline void require_same_shape(Eigen::Index a, Eigen::Index b) {
  if (a != b) {
    throw UsageError("prediction and mask shapes differ");
  }
}

// x^p with 0^0 = 1 and the derivative p * x^(p-1) reported as 0 when p == 0.
template <class T>
T pow_derivative(T x, T p) {
  if (p == T(0)) {
    return T(0);
  }
  if (p == T(1)) {
    return T(1);
  }
  return p * std::pow(x, p - T(1));
}

} // namespace detail

template <class T>
T bce_image(T a, T y, T* grad = nullptr, T scale = T(1)) {
  const T eps = T(kEps);
  a = std::clamp(a, T(0), T(1));
  const T loss = -y * std::log(a + eps) - (T(1) - y) * std::log(T(1) - a + eps);
  if (grad != nullptr) {
    *grad += scale * (-y / (a + eps) + (T(1) - y) / (T(1) - a + eps));
  }
  return loss;
}

// Pixel-mean focal loss.
template <class T>
T focal(const Vec<T>& m, const Vec<T>& y, T alpha, T gamma, Vec<T>* grad = nullptr, T scale = T(1)) {
  detail::require_same_shape(m.size(), y.size());
  const T eps = T(kEps);
  const T inv = T(1) / T(m.size());
  T total = T(0);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    // Resampling can overshoot [0,1] by an ulp; in f32 that exceeds eps.
    const T mi = std::clamp(m[i], T(0), T(1));
    const T yi = y[i];
    const T pos_w = std::pow(T(1) - mi, gamma);
    const T neg_w = std::pow(mi, gamma);
    const T log_pos = std::log(mi + eps);
    const T log_neg = std::log(T(1) - mi + eps);
    total += alpha * yi * pos_w * log_pos + (T(1) - alpha) * (T(1) - yi) * neg_w * log_neg;
    if (grad != nullptr) {
      const T d_pos = -detail::pow_derivative(T(1) - mi, gamma) * log_pos + pos_w / (mi + eps);
      const T d_neg = detail::pow_derivative(mi, gamma) * log_neg - neg_w / (T(1) - mi + eps);
      (*grad)[i] -= scale * inv * (alpha * yi * d_pos + (T(1) - alpha) * (T(1) - yi) * d_neg);
    }
  }
  return -total * inv;
}

template <class T>
T dice(const Vec<T>& m, const Vec<T>& y, Vec<T>* grad = nullptr, T scale = T(1)) {
  detail::require_same_shape(m.size(), y.size());
  const T eps = T(kEps);
  const T inter = m.dot(y);
  const T denom = m.sum() + y.sum() + eps;
  const T numer = T(2) * inter + eps;
  if (grad != nullptr) {
    // d/dm_k of numer/denom = (2 y_k denom - numer) / denom^2
    *grad -= scale * ((T(2) * denom) * y.array() - numer).matrix() / (denom * denom);
  }
  return T(1) - numer / denom;
}

template <class T>
T seg_loss(const Vec<T>& m, const Vec<T>& y, const LossConfig& cfg, Vec<T>* grad = nullptr, T scale = T(1)) {
  const T f = focal<T>(m, y, T(cfg.focal_alpha), T(cfg.focal_gamma), grad, scale);
  const T lambda = T(cfg.dice_weight);
  return f + lambda * dice<T>(m, y, grad, scale * lambda);
}

template <class T>
T stage1_loss(const Vec<T>& base_map, const Vec<T>& y_map, T a_img, T y, const LossConfig& cfg,
              Vec<T>* grad_map = nullptr, T* grad_a = nullptr, T scale = T(1)) {
  return seg_loss<T>(base_map, y_map, cfg, grad_map, scale) + bce_image<T>(a_img, y, grad_a, scale);
}

// One layer's prediction pair for the branch loss.
template <class T>
struct LayerMaps {
  Vec<T> anomaly; // resized S_a
  Vec<T> normal;  // resized S_n
};

// Sum over layers of focal(S_a, Y) + l_d dice(S_a, Y) + l_d dice(S_n, 1 - Y).
// Gradients land in grads[l].anomaly / grads[l].normal when provided.
template <class T>
T branch_loss(const std::vector<LayerMaps<T>>& maps, const Vec<T>& y, const LossConfig& cfg,
              std::vector<LayerMaps<T>>* grads = nullptr, T scale = T(1)) {
  const Vec<T> inv_y = (T(1) - y.array()).matrix();
  const T lambda = T(cfg.dice_weight);
  T total = T(0);
  for (std::size_t l = 0; l < maps.size(); ++l) {
    Vec<T>* ga = grads != nullptr ? &(*grads)[l].anomaly : nullptr;
    Vec<T>* gn = grads != nullptr ? &(*grads)[l].normal : nullptr;
    total += seg_loss<T>(maps[l].anomaly, y, cfg, ga, scale);
    total += lambda * dice<T>(maps[l].normal, inv_y, gn, scale * lambda);
  }
  return total;
}

// (lambda_a, lambda_b) / (lambda_a + lambda_b + eps)
inline std::pair<double, double> normalized_weights(double a, double b) {
  const double s = a + b + kEps;
  return {a / s, b / s};
}

template <class T>
T stage2_loss(T loss_a, T loss_b, const LossConfig& cfg) {
  if (!(cfg.lambda_a + cfg.lambda_b > 0.0)) {
    throw UsageError("lambda_a + lambda_b must be > 0");
  }
  const auto [wa, wb] = normalized_weights(cfg.lambda_a, cfg.lambda_b);
  return T(wa) * loss_a + T(wb) * loss_b;
}

} // namespace entroad
