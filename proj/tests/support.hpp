#pragma once

// Shared fixtures: random bundles, tiny trained models, scratch directories.

#include "entroad/bundle.hpp"
#include "entroad/model.hpp"
#include "entroad/synthetic.hpp"
#include "entroad/training.hpp"

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

namespace testing_support {

using namespace entroad;

// Fresh per-process directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("entroad_" + name + "_" + std::to_string(static_cast<long>(::getpid())));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline VecD random_vec(std::mt19937_64& rng, Eigen::Index n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  VecD v(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    v[i] = u(rng);
  }
  return v;
}

inline MatD random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  MatD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = u(rng);
  }
  return m;
}

// Attention with softmax rows (CLS included), stored f32 and re-normalized in f32.
inline MatF random_attention(std::mt19937_64& rng, int n) {
  MatF a(n + 1, n + 1);
  for (int r = 0; r <= n; ++r) {
    const VecD row = softmax<double>(random_vec(rng, n + 1, -2.0, 2.0));
    a.row(r) = row.cast<float>().transpose();
    a.row(r) /= a.row(r).sum();
  }
  return a;
}

// Random valid bundle; pixel geometry is `scale` pixels per patch.
inline FeatureBundle random_bundle(std::mt19937_64& rng, int h_p, int w_p, int d, const std::vector<int>& layers,
                                   int scale = 2, int label = -1) {
  FeatureBundle b;
  b.image_id = "rnd_" + std::to_string(rng() % 100000);
  b.h_p = h_p;
  b.w_p = w_p;
  b.H = h_p * scale;
  b.W = w_p * scale;
  b.d = d;
  b.layers = layers;
  for (int layer : layers) {
    b.features[layer] = random_mat(rng, h_p * w_p, d).cast<float>();
    b.attention[layer] = random_attention(rng, h_p * w_p);
  }
  if (label >= 0) {
    b.label = label;
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(b.H) * b.W, 0);
    if (label == 1) {
      std::uniform_int_distribution<std::size_t> pick(0, mask.size() - 1);
      mask[pick(rng)] = 1;
    }
    b.mask = std::move(mask);
  }
  return b;
}

// Small synthetic set: d = d_r = d_t so no projection is random.
inline SyntheticConfig small_synthetic(int n_images, int grid, std::uint64_t seed) {
  SyntheticConfig s;
  s.n_images = n_images;
  s.h_p = grid;
  s.w_p = grid;
  s.d = 8;
  s.blob_radius = 1;
  s.seed = seed;
  return s;
}

inline TrainConfig small_train_config(int width, std::uint64_t seed) {
  TrainConfig t;
  t.model.d_r = width;
  t.model.d_t = width;
  t.model.context_length = 4;
  t.model.memory.patch_prototypes = 64;
  t.model.memory.image_prototypes = 16;
  t.model.seed = seed;
  t.batch_size = 4;
  t.epochs_stage2 = 2;
  return t;
}

// Perturbs the zero-initialized second adapter layers so every parameter
// carries a nonzero gradient.
template <class T>
void perturb_adapters(Model<T>& m, std::uint64_t seed, double amplitude = 0.3) {
  std::mt19937_64 rng(seed);
  for (BranchAdapter<T>* a : {&m.adapter_a, &m.adapter_b}) {
    a->w2 = (amplitude * random_mat(rng, a->w2.rows(), a->w2.cols())).template cast<T>();
    a->b2 = (amplitude * random_vec(rng, a->b2.size())).template cast<T>();
    a->b1 = (0.1 * random_vec(rng, a->b1.size())).template cast<T>();
  }
}

// Stage-1 trained model in double, built from the given bundles.
inline Model<double> trained_double_model(const std::vector<FeatureBundle>& bundles, const TrainConfig& cfg) {
  return train<double>(bundles, cfg).model;
}

} // namespace testing_support
