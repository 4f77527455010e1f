#pragma once

// Per-image forward and reverse passes shared by training and inference.

#include "entroad/bundle.hpp"
#include "entroad/entropy.hpp"
#include "entroad/losses.hpp"
#include "entroad/memory.hpp"
#include "entroad/model.hpp"
#include "entroad/prompt.hpp"
#include "entroad/routing.hpp"
#include "entroad/tensor.hpp"

#include <vector>

namespace entroad {

// Everything about one image that depends only on frozen Stage-1 state and
// the backbone outputs. Constant throughout Stage 2.
template <class T>
struct FrozenInputs {
  Vec<T> evidence; // p
  T a_ret = T(0);
  EntropyMap entropy;
  RoutedTokens<T> tokens;
  std::vector<Mat<T>> aligned; // per map layer, N x d_t unit rows
  ResizePlan plan;
  Vec<T> mask; // H*W, zeros when absent
};

template <class T>
FrozenInputs<T> prepare_inputs(const FeatureBundle& bundle, const Model<T>& model) {
  const ModelConfig& cfg = model.config;
  FrozenInputs<T> in;
  const Mat<T> r = project_patches<T>(bundle, model.projection, model.bank.layer);
  in.evidence = patch_evidence<T>(r, model.bank);
  if (model.bank.keys_image.rows() > 0) {
    in.a_ret = image_retrieval_forward<T>(r, model.bank.keys_image, model.bank.values_image).score;
  }
  in.entropy = compute_entropy_map(bundle, cfg.layers);
  in.tokens = route<T>(bundle, in.entropy, in.evidence, cfg.routing_layer(), cfg.routing);
  for (int layer : cfg.map_layers) {
    in.aligned.push_back(align_features<T>(bundle.layer_features(layer).template cast<T>(), model.align));
  }
  in.plan = ResizePlan(bundle.h_p, bundle.w_p, bundle.H, bundle.W);
  in.mask = bundle.mask_vector<T>();
  return in;
}

// One branch's forward state for one image.
template <class T>
struct BranchForward {
  BiasForward<T> bias;
  EncodeForward<T> enc_n;
  EncodeForward<T> enc_a;
  std::vector<Vec<T>> s_n; // per map layer, length N
  std::vector<Vec<T>> s_a;
};

template <class T>
BranchForward<T> branch_forward(const FrozenInputs<T>& in, const Model<T>& model, int branch) {
  BranchForward<T> f;
  Vec<T> u_n, u_a;
  if (model.text.mode == TextEncoder<T>::Mode::toy) {
    f.bias = branch_bias_forward<T>(in.tokens.t_n, in.tokens.t_a, model.adapter(branch));
    const auto [prompt_n, prompt_a] = synthesize_prompts<T>(model.learner, f.bias.bias);
    f.enc_n = encode_prompt_forward<T>(model.text, prompt_n);
    f.enc_a = encode_prompt_forward<T>(model.text, prompt_a);
    u_n = f.enc_n.unit;
    u_a = f.enc_a.unit;
  } else {
    u_n = model.text.class_embedding(PromptClass::normal);
    u_a = model.text.class_embedding(PromptClass::anomaly);
  }
  for (const Mat<T>& z : in.aligned) {
    auto [s_n, s_a] = similarity_maps<T>(z, u_n, u_a, T(model.config.logit_temperature));
    f.s_n.push_back(std::move(s_n));
    f.s_a.push_back(std::move(s_a));
  }
  return f;
}

// Layer-averaged anomaly probabilities resized to H x W.
template <class T>
Vec<T> branch_anomaly_map(const FrozenInputs<T>& in, const BranchForward<T>& f) {
  Vec<T> mean = Vec<T>::Zero(f.s_a.front().size());
  for (const auto& s : f.s_a) {
    mean += s;
  }
  mean /= T(f.s_a.size());
  return in.plan.apply(mean);
}

template <class T>
std::vector<LayerMaps<T>> branch_layer_maps(const FrozenInputs<T>& in, const BranchForward<T>& f) {
  std::vector<LayerMaps<T>> out;
  for (std::size_t l = 0; l < f.s_a.size(); ++l) {
    out.push_back({in.plan.apply(f.s_a[l]), in.plan.apply(f.s_n[l])});
  }
  return out;
}

// Gradient of the Stage-2 trainables.
template <class T>
struct Stage2Gradient {
  Mat<T> context;
  BranchAdapter<T> adapter_a;
  BranchAdapter<T> adapter_b;

  static Stage2Gradient zeros_like(const Model<T>& m) {
    return {Mat<T>::Zero(m.learner.context.rows(), m.learner.context.cols()),
            BranchAdapter<T>::zeros_like(m.adapter_a), BranchAdapter<T>::zeros_like(m.adapter_b)};
  }

  BranchAdapter<T>& adapter(int branch) { return branch == 0 ? adapter_a : adapter_b; }

  void add(const Stage2Gradient& o) {
    context += o.context;
    for (int b = 0; b < 2; ++b) {
      auto& mine = adapter(b);
      const auto& theirs = b == 0 ? o.adapter_a : o.adapter_b;
      mine.w1 += theirs.w1;
      mine.b1 += theirs.b1;
      mine.w2 += theirs.w2;
      mine.b2 += theirs.b2;
    }
  }
};

// Branch loss for one image; accumulates `scale * dL/dtheta` into grad when given.
template <class T>
T branch_loss_and_grad(const FrozenInputs<T>& in, const Model<T>& model, int branch, Stage2Gradient<T>* grad,
                       T scale) {
  const BranchForward<T> f = branch_forward<T>(in, model, branch);
  const std::vector<LayerMaps<T>> maps = branch_layer_maps<T>(in, f);
  if (grad == nullptr) {
    return branch_loss<T>(maps, in.mask, model.config.loss);
  }
  std::vector<LayerMaps<T>> gmaps;
  for (const auto& m : maps) {
    gmaps.push_back({Vec<T>::Zero(m.anomaly.size()), Vec<T>::Zero(m.normal.size())});
  }
  const T loss = branch_loss<T>(maps, in.mask, model.config.loss, &gmaps, scale);

  const T inv_temp = T(1) / T(model.config.logit_temperature);
  const Eigen::Index d_t = model.learner.dim();
  Vec<T> grad_u_a = Vec<T>::Zero(d_t);
  Vec<T> grad_u_n = Vec<T>::Zero(d_t);
  for (std::size_t l = 0; l < maps.size(); ++l) {
    const Vec<T> grad_sa = in.plan.adjoint(gmaps[l].anomaly) - in.plan.adjoint(gmaps[l].normal);
    const Vec<T> grad_logit =
        (grad_sa.array() * f.s_a[l].array() * f.s_n[l].array() * inv_temp).matrix();
    const Vec<T> back = in.aligned[l].transpose() * grad_logit;
    grad_u_a += back;
    grad_u_n -= back;
  }
  const Vec<T> grad_mean = encode_prompt_backward_mean<T>(model.text, f.enc_n, grad_u_n) +
                           encode_prompt_backward_mean<T>(model.text, f.enc_a, grad_u_a);
  const T rows = T(model.learner.length() + 1);
  grad->context.rowwise() += (grad_mean / rows).transpose();
  const Vec<T> grad_bias = grad_mean * (T(model.learner.length()) / rows);
  branch_bias_backward<T>(f.bias, model.adapter(branch), grad_bias, grad->adapter(branch));
  return loss;
}

// Weighted two-branch objective for one image.
template <class T>
T stage2_image_loss(const FrozenInputs<T>& in, const Model<T>& model, Stage2Gradient<T>* grad = nullptr,
                    T scale = T(1)) {
  const auto [wa, wb] = normalized_weights(model.config.loss.lambda_a, model.config.loss.lambda_b);
  const T la = branch_loss_and_grad<T>(in, model, 0, grad, scale * T(wa));
  const T lb = branch_loss_and_grad<T>(in, model, 1, grad, scale * T(wb));
  return stage2_loss<T>(la, lb, model.config.loss);
}

} // namespace entroad
