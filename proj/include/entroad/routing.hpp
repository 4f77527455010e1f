#pragma once

#include "entroad/bundle.hpp"
#include "entroad/entropy.hpp"
#include "entroad/error.hpp"
#include "entroad/tensor.hpp"

#include <cmath>
#include <tuple>
#include <utility>

namespace entroad {

struct RoutingConfig {
  double temperature = 0.1; // T
  double tau = 0.5;         // gate threshold
  double k0 = 5.0;
  double k1 = 50.0;
  bool gate_enabled = true; // false forces g = 1 (ablation)
};

template <class T>
struct RoutedTokens {
  Vec<T> t_n;
  Vec<T> t_a_raw;
  Vec<T> t_a;
  T g = T(1);
  Vec<T> w_a;
  Vec<T> w_n;
};

// Spatial softmax of the anomaly/normal routing logits.
template <class T>
std::pair<Vec<T>, Vec<T>> routing_weights(const Vec<T>& p, const Vec<T>& e_hat, T temperature) {
  if (!(temperature > T(0))) {
    throw UsageError("router temperature must be > 0");
  }
  if (p.size() != e_hat.size()) {
    throw UsageError("evidence and entropy lengths differ");
  }
  const Vec<T> logit_a = (p.array() * e_hat.array() / temperature).matrix();
  const Vec<T> logit_n = ((T(1) - p.array()) * (T(1) - e_hat.array()) / temperature).matrix();
  return {softmax<T>(logit_a), softmax<T>(logit_n)};
}

// Returns (t_a_raw, t_n).
template <class T>
std::pair<Vec<T>, Vec<T>> aggregate_tokens(const Mat<T>& z, const Vec<T>& w_a, const Vec<T>& w_n) {
  return {z.transpose() * w_a, z.transpose() * w_n};
}

template <class T>
T population_stddev(const Vec<T>& v) {
  if (v.size() == 0) {
    return T(0);
  }
  const T mean = v.mean();
  return std::sqrt((v.array() - mean).square().mean());
}

// g = sigmoid((max p - tau) * (k0 + k1 * std(e_hat))).
template <class T>
T confidence_gate(const Vec<T>& p, const Vec<T>& e_hat, T tau, T k0, T k1) {
  const T p_max = p.maxCoeff();
  const T sigma = population_stddev<T>(e_hat);
  return sigmoid<T>((p_max - tau) * (k0 + k1 * sigma));
}

template <class T>
RoutedTokens<T> route(const Mat<T>& z, const Vec<T>& p, const Vec<T>& e_hat, const RoutingConfig& cfg) {
  if (z.rows() != p.size()) {
    throw UsageError("feature rows and evidence length differ");
  }
  RoutedTokens<T> out;
  std::tie(out.w_a, out.w_n) = routing_weights<T>(p, e_hat, T(cfg.temperature));
  std::tie(out.t_a_raw, out.t_n) = aggregate_tokens<T>(z, out.w_a, out.w_n);
  out.g = cfg.gate_enabled ? confidence_gate<T>(p, e_hat, T(cfg.tau), T(cfg.k0), T(cfg.k1)) : T(1);
  out.t_a = out.g * out.t_a_raw;
  return out;
}

// Routes one bundle: Z from `layer`, evidence p, normalized entropy from `entropy`.
template <class T>
RoutedTokens<T> route(const FeatureBundle& bundle, const EntropyMap& entropy, const Vec<T>& p, int layer,
                      const RoutingConfig& cfg) {
  return route<T>(bundle.layer_features(layer).template cast<T>(), p, entropy.normalized.template cast<T>(), cfg);
}

template <class T>
struct RouteGradient {
  Vec<T> p;
  Vec<T> e_hat;
  Mat<T> z;
  T tau = T(0);
  T k0 = T(0);
  T k1 = T(0);
};

// Reverse pass of route() for upstream gradients on (t_n, t_a).
template <class T>
RouteGradient<T> route_backward(const Mat<T>& z, const Vec<T>& p, const Vec<T>& e_hat, const RoutingConfig& cfg,
                                const RoutedTokens<T>& fwd, const Vec<T>& grad_t_n, const Vec<T>& grad_t_a) {
  const T temp = T(cfg.temperature);
  RouteGradient<T> g;
  g.p = Vec<T>::Zero(p.size());
  g.e_hat = Vec<T>::Zero(p.size());

  const Vec<T> grad_raw = fwd.g * grad_t_a;
  g.z = fwd.w_a * grad_raw.transpose() + fwd.w_n * grad_t_n.transpose();

  const Vec<T> grad_wa = z * grad_raw;
  const Vec<T> grad_wn = z * grad_t_n;
  const Vec<T> grad_la = (fwd.w_a.array() * (grad_wa.array() - fwd.w_a.dot(grad_wa))).matrix();
  const Vec<T> grad_ln = (fwd.w_n.array() * (grad_wn.array() - fwd.w_n.dot(grad_wn))).matrix();
  g.p += (grad_la.array() * e_hat.array() / temp).matrix();
  g.e_hat += (grad_la.array() * p.array() / temp).matrix();
  g.p -= (grad_ln.array() * (T(1) - e_hat.array()) / temp).matrix();
  g.e_hat -= (grad_ln.array() * (T(1) - p.array()) / temp).matrix();

  if (cfg.gate_enabled) {
    const T grad_gate = grad_t_a.dot(fwd.t_a_raw);
    const T grad_x = grad_gate * fwd.g * (T(1) - fwd.g);
    Eigen::Index arg = 0;
    const T p_max = p.maxCoeff(&arg);
    const T sigma = population_stddev<T>(e_hat);
    const T slope = T(cfg.k0) + T(cfg.k1) * sigma;
    const T margin = p_max - T(cfg.tau);
    g.p[arg] += grad_x * slope;
    g.tau = -grad_x * slope;
    g.k0 = grad_x * margin;
    g.k1 = grad_x * margin * sigma;
    if (sigma > T(0)) {
      const T grad_sigma = grad_x * margin * T(cfg.k1);
      const T mean = e_hat.mean();
      g.e_hat += (grad_sigma * (e_hat.array() - mean) / (T(e_hat.size()) * sigma)).matrix();
    }
  }
  return g;
}

} // namespace entroad
