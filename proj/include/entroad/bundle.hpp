#pragma once

#include "entroad/error.hpp"
#include "entroad/tensor.hpp"
#include "entroad/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace entroad {

inline constexpr std::string_view kBundleMagic = "EADB";
inline constexpr std::uint16_t kBundleVersion = 1;

// Row sums of stored attention may drift by this much before a read is rejected.
inline constexpr double kAttentionRowTolerance = 1e-3;
// Drift below this is f32 summation noise and is left untouched so that
// files round-trip bit-exactly.
inline constexpr double kAttentionRenormalizeFloor = 1e-6;

// One image's per-layer patch features and head-averaged attention, plus
// optional supervision. Row/column 0 of every attention matrix is [CLS].
struct FeatureBundle {
  std::string image_id;
  int h_p = 0;
  int w_p = 0;
  int H = 0;
  int W = 0;
  int d = 0;
  std::vector<int> layers;
  std::map<int, MatF> features;  // N x d
  std::map<int, MatF> attention; // (N+1) x (N+1)
  std::optional<int> label;
  std::optional<std::vector<std::uint8_t>> mask; // H*W, row-major, values {0,1}

  int num_patches() const { return h_p * w_p; }

  bool has_layer(int layer) const { return features.count(layer) != 0; }

  const MatF& layer_features(int layer) const {
    auto it = features.find(layer);
    if (it == features.end()) {
      throw DataError("bundle '" + image_id + "' has no layer " + std::to_string(layer));
    }
    return it->second;
  }

  const MatF& layer_attention(int layer) const {
    auto it = attention.find(layer);
    if (it == attention.end()) {
      throw DataError("bundle '" + image_id + "' has no layer " + std::to_string(layer));
    }
    return it->second;
  }

  // Throws DataError naming the first violated invariant.
  void validate() const {
    const std::string who = "bundle '" + image_id + "': ";
    if (h_p < 1 || w_p < 1 || H < 1 || W < 1 || d < 1) {
      throw DataError(who + "non-positive geometry");
    }
    if (layers.empty()) {
      throw DataError(who + "no layers");
    }
    const Eigen::Index n = num_patches();
    for (int layer : layers) {
      auto f = features.find(layer);
      auto a = attention.find(layer);
      if (f == features.end() || a == attention.end()) {
        throw DataError(who + "missing tensors for layer " + std::to_string(layer));
      }
      if (f->second.rows() != n || f->second.cols() != d) {
        throw DataError(who + "features of layer " + std::to_string(layer) + " are not N x d");
      }
      if (a->second.rows() != n + 1 || a->second.cols() != n + 1) {
        throw DataError(who + "attention of layer " + std::to_string(layer) + " is not (N+1) x (N+1)");
      }
      if (!f->second.allFinite() || !a->second.allFinite()) {
        throw DataError(who + "non-finite values in layer " + std::to_string(layer));
      }
      if ((a->second.array() < 0.0f).any()) {
        throw DataError(who + "negative attention in layer " + std::to_string(layer));
      }
      for (Eigen::Index r = 0; r <= n; ++r) {
        const double sum = a->second.row(r).template cast<double>().sum();
        if (std::abs(sum - 1.0) > kAttentionRowTolerance) {
          throw DataError(who + "attention row " + std::to_string(r) + " of layer " + std::to_string(layer) +
                          " does not sum to 1");
        }
      }
    }
    if (features.size() != layers.size() || attention.size() != layers.size()) {
      throw DataError(who + "tensor maps do not match the layer list");
    }
    if (label && *label != 0 && *label != 1) {
      throw DataError(who + "label must be 0 or 1");
    }
    if (mask) {
      if (mask->size() != static_cast<std::size_t>(H) * static_cast<std::size_t>(W)) {
        throw DataError(who + "mask shape is not H x W");
      }
      if (std::any_of(mask->begin(), mask->end(), [](std::uint8_t v) { return v > 1; })) {
        throw DataError(who + "mask values must be 0 or 1");
      }
    }
  }

  // Patch-grid labels: a patch is anomalous if any pixel it covers is.
  std::vector<std::uint8_t> patch_labels() const {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(num_patches()), 0);
    if (!mask) {
      return out;
    }
    for (int y = 0; y < H; ++y) {
      const int py = std::min(h_p - 1, y * h_p / H);
      for (int x = 0; x < W; ++x) {
        if ((*mask)[static_cast<std::size_t>(y) * W + x] != 0) {
          const int px = std::min(w_p - 1, x * w_p / W);
          out[static_cast<std::size_t>(py) * w_p + px] = 1;
        }
      }
    }
    return out;
  }

  // Mask as a 0/1 vector of length H*W (zeros when absent).
  template <class T>
  Vec<T> mask_vector() const {
    Vec<T> out = Vec<T>::Zero(static_cast<Eigen::Index>(H) * W);
    if (mask) {
      for (std::size_t i = 0; i < mask->size(); ++i) {
        out[static_cast<Eigen::Index>(i)] = T((*mask)[i]);
      }
    }
    return out;
  }
};

inline void write_bundle(const FeatureBundle& bundle, const std::filesystem::path& path) {
  bundle.validate();
  io::json header = {
      {"image_id", bundle.image_id},
      {"h_p", bundle.h_p},
      {"w_p", bundle.w_p},
      {"H", bundle.H},
      {"W", bundle.W},
      {"d", bundle.d},
      {"layers", bundle.layers},
      {"has_label", bundle.label.has_value()},
      {"label", bundle.label.value_or(0)},
      {"has_mask", bundle.mask.has_value()},
  };
  io::BinaryWriter out(path);
  out.write_header(kBundleMagic, kBundleVersion, header);
  for (int layer : bundle.layers) {
    out.write_matrix(bundle.features.at(layer));
    out.write_matrix(bundle.attention.at(layer));
  }
  if (bundle.mask) {
    out.write_bytes(*bundle.mask);
  }
  out.close();
}

inline FeatureBundle read_bundle(const std::filesystem::path& path) {
  io::BinaryReader in(path);
  const io::json header = in.read_header(kBundleMagic, kBundleVersion);
  FeatureBundle b;
  b.image_id = io::header_get<std::string>(header, "image_id", path);
  b.h_p = io::header_get<int>(header, "h_p", path);
  b.w_p = io::header_get<int>(header, "w_p", path);
  b.H = io::header_get<int>(header, "H", path);
  b.W = io::header_get<int>(header, "W", path);
  b.d = io::header_get<int>(header, "d", path);
  b.layers = io::header_get<std::vector<int>>(header, "layers", path);
  if (b.h_p < 1 || b.w_p < 1 || b.d < 1 || b.H < 1 || b.W < 1) {
    throw DataError("'" + path.string() + "': non-positive geometry in header");
  }
  const Eigen::Index n = b.num_patches();
  for (int layer : b.layers) {
    b.features[layer] = in.read_matrix<float>(n, b.d, "features");
    MatF att = in.read_matrix<float>(n + 1, n + 1, "attention");
    for (Eigen::Index r = 0; r < att.rows(); ++r) {
      const double sum = att.row(r).template cast<double>().sum();
      const double dev = std::abs(sum - 1.0);
      if (!(dev <= kAttentionRowTolerance)) {
        throw DataError("'" + path.string() + "': attention row " + std::to_string(r) + " of layer " +
                        std::to_string(layer) + " sums to " + std::to_string(sum));
      }
      if (dev > kAttentionRenormalizeFloor) {
        att.row(r) = (att.row(r).template cast<double>() / sum).template cast<float>();
      }
    }
    b.attention[layer] = std::move(att);
  }
  if (io::header_get<bool>(header, "has_label", path)) {
    b.label = io::header_get<int>(header, "label", path);
  }
  if (io::header_get<bool>(header, "has_mask", path)) {
    b.mask = in.read_bytes(static_cast<std::size_t>(b.H) * static_cast<std::size_t>(b.W), "mask");
  }
  b.validate();
  return b;
}

// All *.eadb files in a directory, sorted by file name.
inline std::vector<std::filesystem::path> list_bundles(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw DataError("'" + dir.string() + "' is not a directory");
  }
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".eadb") {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<FeatureBundle> read_bundle_dir(const std::filesystem::path& dir) {
  std::vector<FeatureBundle> out;
  for (const auto& p : list_bundles(dir)) {
    out.push_back(read_bundle(p));
  }
  return out;
}

} // namespace entroad
