#pragma once

// Synthetic backbone: produces bundles whose normal patches have compact local
// attention and clustered features, and whose anomalous blobs carry a feature
// shift plus attention blended toward uniform.

#include "entroad/bundle.hpp"
#include "entroad/error.hpp"
#include "entroad/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

namespace entroad {

inline constexpr int kSyntheticPatchPixels = 14;

struct SyntheticConfig {
  int n_images = 300;
  int h_p = 8;
  int w_p = 8;
  int d = 32;
  double anomaly_fraction = 0.5;
  int blob_radius = 2;
  double feature_shift = 4.0;
  double attention_disruption = 0.8;
  // Normal images may carry a benign blob: disrupted attention and a shift of
  // distractor_shift * feature_shift along a random per-image direction, no mask.
  double distractor_fraction = 1.0;
  double distractor_shift = 1.0;
  std::uint64_t seed = 7;
  std::vector<int> layers{6, 12, 18, 24};

  void validate() const {
    if (n_images < 1) {
      throw UsageError("synthetic n_images must be >= 1");
    }
    if (h_p < 1 || w_p < 1) {
      throw UsageError("synthetic grid must be at least 1x1");
    }
    if (d < 2) {
      throw UsageError("synthetic d must be >= 2");
    }
    if (blob_radius < 1) {
      throw UsageError("synthetic blob_radius must be >= 1");
    }
    if (!(anomaly_fraction >= 0.0 && anomaly_fraction <= 1.0)) {
      throw UsageError("synthetic anomaly_fraction must lie in [0,1]");
    }
    if (!(distractor_fraction >= 0.0 && distractor_fraction <= 1.0)) {
      throw UsageError("synthetic distractor_fraction must lie in [0,1]");
    }
    if (distractor_shift < 0.0) {
      throw UsageError("synthetic distractor_shift must be >= 0");
    }
    if (!(attention_disruption >= 0.0 && attention_disruption <= 1.0)) {
      throw UsageError("synthetic attention_disruption must lie in [0,1]");
    }
    if (layers.empty()) {
      throw UsageError("synthetic layers must not be empty");
    }
  }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline VecD gaussian_vector(std::mt19937_64& rng, int d, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  VecD v(d);
  for (int i = 0; i < d; ++i) {
    v[i] = n(rng);
  }
  return v;
}

// Quantities shared by every image of one generated set.
struct SyntheticDomain {
  std::vector<VecD> mean;       // per layer
  std::vector<VecD> anomaly_dir; // per layer, unit
  std::vector<double> attention_width;
};

inline SyntheticDomain make_domain(const SyntheticConfig& cfg) {
  std::mt19937_64 rng(splitmix64(cfg.seed ^ 0xD0A11ULL));
  SyntheticDomain dom;
  const VecD shared = l2_normalize<double>(gaussian_vector(rng, cfg.d, 1.0));
  const VecD dir_shared = l2_normalize<double>(gaussian_vector(rng, cfg.d, 1.0));
  for (std::size_t k = 0; k < cfg.layers.size(); ++k) {
    const VecD own = l2_normalize<double>(gaussian_vector(rng, cfg.d, 1.0));
    dom.mean.push_back(4.0 * l2_normalize<double>(VecD(0.8 * shared + 0.6 * own)));
    const VecD dir_own = l2_normalize<double>(gaussian_vector(rng, cfg.d, 1.0));
    dom.anomaly_dir.push_back(l2_normalize<double>(VecD(0.9 * dir_shared + 0.44 * dir_own)));
    dom.attention_width.push_back(0.7 + 0.1 * static_cast<double>(k));
  }
  return dom;
}

} // namespace detail

// Deterministic in cfg (including seed). Every image gets a mask; normal
// images carry an all-zero mask.
inline std::vector<FeatureBundle> gen_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const detail::SyntheticDomain dom = detail::make_domain(cfg);
  const int n = cfg.h_p * cfg.w_p;
  const int H = kSyntheticPatchPixels * cfg.h_p;
  const int W = kSyntheticPatchPixels * cfg.w_p;
  const int n_layers = static_cast<int>(cfg.layers.size());

  std::vector<FeatureBundle> out;
  out.reserve(static_cast<std::size_t>(cfg.n_images));
  for (int img = 0; img < cfg.n_images; ++img) {
    std::mt19937_64 rng(detail::splitmix64(cfg.seed * 0x100000001B3ULL + static_cast<std::uint64_t>(img)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    FeatureBundle b;
    char id[48];
    std::snprintf(id, sizeof id, "synth_%llu_%04d", static_cast<unsigned long long>(cfg.seed), img);
    b.image_id = id;
    b.h_p = cfg.h_p;
    b.w_p = cfg.w_p;
    b.H = H;
    b.W = W;
    b.d = cfg.d;
    b.layers = cfg.layers;

    const bool anomalous = unit(rng) < cfg.anomaly_fraction;
    const bool distracted = !anomalous && cfg.distractor_fraction > 0.0 && unit(rng) < cfg.distractor_fraction;
    // 1 = defect, 2 = benign distractor
    std::vector<std::uint8_t> blob(static_cast<std::size_t>(n), 0);
    if (anomalous || distracted) {
      const int cy = static_cast<int>(unit(rng) * cfg.h_p);
      const int cx = static_cast<int>(unit(rng) * cfg.w_p);
      const int r2 = cfg.blob_radius * cfg.blob_radius;
      for (int y = 0; y < cfg.h_p; ++y) {
        for (int x = 0; x < cfg.w_p; ++x) {
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r2) {
            blob[static_cast<std::size_t>(y * cfg.w_p + x)] = anomalous ? 1 : 2;
          }
        }
      }
    }

    const VecD style = detail::gaussian_vector(rng, cfg.d, 0.25);
    const VecD jitter = l2_normalize<double>(detail::gaussian_vector(rng, cfg.d, 1.0));
    const VecD clutter = l2_normalize<double>(detail::gaussian_vector(rng, cfg.d, 1.0));

    for (int k = 0; k < n_layers; ++k) {
      const int layer = cfg.layers[static_cast<std::size_t>(k)];
      const double depth = n_layers > 1 ? static_cast<double>(k) / (n_layers - 1) : 1.0;
      const VecD dir = l2_normalize<double>(VecD(dom.anomaly_dir[k] + 0.3 * jitter));

      MatF z(n, cfg.d);
      for (int i = 0; i < n; ++i) {
        VecD f = dom.mean[k] + style + detail::gaussian_vector(rng, cfg.d, 0.25);
        const std::uint8_t kind = blob[static_cast<std::size_t>(i)];
        if (kind == 1) {
          f += (0.5 + 0.5 * depth) * cfg.feature_shift * dir;
        } else if (kind == 2) {
          f += (0.5 + 0.5 * depth) * cfg.distractor_shift * cfg.feature_shift * clutter;
        }
        z.row(i) = f.cast<float>().transpose();
      }

      // Spatial attention: Gaussian neighbourhood with noisy logits.
      const double width = dom.attention_width[k];
      MatD att = MatD::Zero(n + 1, n + 1);
      const double cls_share = 0.1;
      att.row(0).setConstant(1.0 / (n + 1));
      for (int i = 0; i < n; ++i) {
        const int yi = i / cfg.w_p;
        const int xi = i % cfg.w_p;
        VecD row(n);
        for (int j = 0; j < n; ++j) {
          const int yj = j / cfg.w_p;
          const int xj = j % cfg.w_p;
          const double dist2 = (yi - yj) * (yi - yj) + (xi - xj) * (xi - xj);
          row[j] = -dist2 / (2.0 * width * width) + 0.3 * gauss(rng);
        }
        VecD local = softmax<double>(row);
        if (blob[static_cast<std::size_t>(i)] != 0) {
          local = (1.0 - cfg.attention_disruption) * local +
                  VecD::Constant(n, cfg.attention_disruption / static_cast<double>(n));
        }
        att(i + 1, 0) = cls_share;
        att.block(i + 1, 1, 1, n) = (1.0 - cls_share) * local.transpose();
      }
      MatF attf = att.cast<float>();
      // Re-normalize in f32 so stored rows sum to 1 at f32 precision.
      for (int r = 0; r <= n; ++r) {
        attf.row(r) /= attf.row(r).sum();
      }
      b.features[layer] = std::move(z);
      b.attention[layer] = std::move(attf);
    }

    b.label = anomalous ? 1 : 0;
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(H) * W, 0);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const int p = (y / kSyntheticPatchPixels) * cfg.w_p + (x / kSyntheticPatchPixels);
        mask[static_cast<std::size_t>(y) * W + x] = blob[static_cast<std::size_t>(p)] == 1 ? 1 : 0;
      }
    }
    b.mask = std::move(mask);
    out.push_back(std::move(b));
  }
  return out;
}

} // namespace entroad
