#pragma once

#include "entroad/bundle.hpp"
#include "entroad/error.hpp"
#include "entroad/tensor.hpp"
#include "entroad/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <vector>

namespace entroad {

// Per-layer linear map r = normalize(z W + b), W is d x d_r.
template <class T>
struct VisualProjection {
  std::map<int, Mat<T>> weight;
  std::map<int, Vec<T>> bias;

  // Identity when d == d_r, otherwise seeded N(0, 1/d) entries.
  static VisualProjection init(const std::vector<int>& layers, int d, int d_r, std::uint64_t seed) {
    VisualProjection p;
    std::mt19937_64 rng(seed ^ 0x9A0FULL);
    std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
    for (int layer : layers) {
      Mat<T> w(d, d_r);
      if (d == d_r) {
        w.setIdentity();
      } else {
        for (Eigen::Index i = 0; i < w.size(); ++i) {
          w.data()[i] = T(n(rng));
        }
      }
      p.weight[layer] = std::move(w);
      p.bias[layer] = Vec<T>::Zero(d_r);
    }
    return p;
  }

  int output_dim() const { return weight.empty() ? 0 : static_cast<int>(weight.begin()->second.cols()); }

  const Mat<T>& W(int layer) const {
    auto it = weight.find(layer);
    if (it == weight.end()) {
      throw DataError("no visual projection for layer " + std::to_string(layer));
    }
    return it->second;
  }
  const Vec<T>& b(int layer) const { return bias.at(layer); }

  template <class U>
  VisualProjection<U> cast() const {
    VisualProjection<U> out;
    for (const auto& [k, w] : weight) {
      out.weight[k] = w.template cast<U>();
    }
    for (const auto& [k, v] : bias) {
      out.bias[k] = v.template cast<U>();
    }
    return out;
  }
};

// Unit rows plus the pre-normalization norms needed for the backward pass.
template <class T>
struct Projected {
  Mat<T> unit;
  Vec<T> norms;
};

template <class T>
Projected<T> project_rows(const Mat<T>& z, const Mat<T>& w, const Vec<T>& b) {
  Projected<T> out;
  out.unit = z * w;
  out.unit.rowwise() += b.transpose();
  out.norms.resize(out.unit.rows());
  for (Eigen::Index i = 0; i < out.unit.rows(); ++i) {
    const T n = out.unit.row(i).norm();
    out.norms[i] = n;
    if (n > T(0)) {
      out.unit.row(i) /= n;
    }
  }
  return out;
}

// Accumulates dW, db from the gradient w.r.t. the unit rows.
template <class T>
void project_rows_backward(const Mat<T>& z, const Projected<T>& fwd, const Mat<T>& grad_unit, Mat<T>& grad_w,
                           Vec<T>& grad_b) {
  Mat<T> grad_pre(grad_unit.rows(), grad_unit.cols());
  for (Eigen::Index i = 0; i < grad_unit.rows(); ++i) {
    const T n = fwd.norms[i];
    if (n <= T(0)) {
      grad_pre.row(i).setZero();
      continue;
    }
    const T dot = fwd.unit.row(i).dot(grad_unit.row(i));
    grad_pre.row(i) = (grad_unit.row(i) - dot * fwd.unit.row(i)) / n;
  }
  grad_w.noalias() += z.transpose() * grad_pre;
  grad_b += grad_pre.colwise().sum().transpose();
}

template <class T>
Mat<T> project_patches(const FeatureBundle& bundle, const VisualProjection<T>& proj, int layer) {
  const Mat<T> z = bundle.layer_features(layer).template cast<T>();
  return project_rows<T>(z, proj.W(layer), proj.b(layer)).unit;
}

inline constexpr std::string_view kBankMagic = "EAMB";
inline constexpr std::uint16_t kBankVersion = 1;

template <class T>
struct MemoryBank {
  Mat<T> keys_patch;   // M x d_r, unit rows
  Mat<T> values_patch; // M x 2, [normal, anomaly]
  Mat<T> keys_image;   // M_img x d_r
  Mat<T> values_image; // M_img x 2
  double quantile = 0.9;
  int layer = 0;

  Eigen::Index size() const { return keys_patch.rows(); }

  void validate() const {
    if (keys_patch.rows() < 2) {
      throw DataError("memory bank needs at least two patch prototypes");
    }
    if (values_patch.rows() != keys_patch.rows() || values_patch.cols() != 2) {
      throw DataError("memory bank patch values must be M x 2");
    }
    if (keys_image.rows() != values_image.rows() || (keys_image.rows() > 0 && values_image.cols() != 2)) {
      throw DataError("memory bank image values must be M_img x 2");
    }
    if (keys_image.rows() > 0 && keys_image.cols() != keys_patch.cols()) {
      throw DataError("memory bank key widths disagree");
    }
    if (!(quantile >= 0.0 && quantile < 1.0)) {
      throw DataError("memory bank quantile must lie in [0,1)");
    }
    auto check_keys = [](const Mat<T>& k) {
      for (Eigen::Index i = 0; i < k.rows(); ++i) {
        if (std::abs(static_cast<double>(k.row(i).norm()) - 1.0) > 1e-5) {
          throw DataError("memory bank keys must be unit-norm");
        }
      }
    };
    auto check_values = [](const Mat<T>& v) {
      for (Eigen::Index i = 0; i < v.rows(); ++i) {
        if (v(i, 0) < T(0) || v(i, 1) < T(0) || std::abs(static_cast<double>(v(i, 0) + v(i, 1)) - 1.0) > 1e-6) {
          throw DataError("memory bank values must lie on the simplex");
        }
      }
    };
    check_keys(keys_patch);
    check_keys(keys_image);
    check_values(values_patch);
    check_values(values_image);
    const bool has_anomaly = (values_patch.col(1).array() > T(0.5)).any();
    const bool has_normal = (values_patch.col(1).array() < T(0.5)).any();
    if (!has_anomaly || !has_normal) {
      throw DataError("memory bank needs both classes");
    }
  }

  template <class U>
  MemoryBank<U> cast() const {
    MemoryBank<U> out;
    out.keys_patch = keys_patch.template cast<U>();
    out.values_patch = values_patch.template cast<U>();
    out.keys_image = keys_image.template cast<U>();
    out.values_image = values_image.template cast<U>();
    out.quantile = quantile;
    out.layer = layer;
    return out;
  }
};

struct MemoryConfig {
  int patch_prototypes = 1024;
  int image_prototypes = 256;
  double quantile = 0.9;
  std::uint64_t seed = 0;
};

struct PatchRef {
  int bundle = 0;
  int patch = 0;
  std::uint8_t label = 0;
};

struct ImageRef {
  int bundle = 0;
  std::uint8_t label = 0;
};

// Which training patches and images become prototypes. Independent of the
// projection, so the same set can be re-projected as the projection trains.
struct PrototypeSet {
  std::vector<PatchRef> patches;
  std::vector<ImageRef> images;
};

namespace detail {

// Proportional allocation of `budget` draws across two strata of the given sizes,
// keeping at least one draw from each.
inline std::pair<std::size_t, std::size_t> stratify(std::size_t budget, std::size_t normal, std::size_t anomalous) {
  const std::size_t pool = normal + anomalous;
  budget = std::min(budget, pool);
  auto n_anom = static_cast<std::size_t>(
      std::llround(static_cast<double>(budget) * static_cast<double>(anomalous) / static_cast<double>(pool)));
  n_anom = std::clamp<std::size_t>(n_anom, 1, std::min(anomalous, budget - 1));
  std::size_t n_norm = std::min(normal, budget - n_anom);
  return {n_norm, n_anom};
}

template <class Ref>
void take_random(std::vector<Ref>& pool, std::size_t count, std::mt19937_64& rng, std::vector<Ref>& out) {
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
    out.push_back(pool[i]);
  }
}

} // namespace detail

// Stratified uniform sampling by patch mask label (and image label).
inline PrototypeSet sample_prototypes(const std::vector<FeatureBundle>& bundles, const MemoryConfig& cfg) {
  if (cfg.patch_prototypes < 2) {
    throw UsageError("memory size must be >= 2");
  }
  std::vector<PatchRef> normal_patches, anomalous_patches;
  std::vector<ImageRef> normal_images, anomalous_images;
  for (std::size_t b = 0; b < bundles.size(); ++b) {
    const auto& bundle = bundles[b];
    const int bi = static_cast<int>(b);
    if (bundle.label) {
      (*bundle.label == 1 ? anomalous_images : normal_images).push_back({bi, static_cast<std::uint8_t>(*bundle.label)});
    }
    if (!bundle.mask && bundle.label.value_or(1) != 0) {
      continue; // patch labels unknown
    }
    const auto labels = bundle.patch_labels();
    for (int i = 0; i < bundle.num_patches(); ++i) {
      const std::uint8_t l = labels[static_cast<std::size_t>(i)];
      (l != 0 ? anomalous_patches : normal_patches).push_back({bi, i, l});
    }
  }
  if (anomalous_patches.empty() || normal_patches.empty()) {
    throw DataError("memory bank needs both classes");
  }

  std::mt19937_64 rng(cfg.seed ^ 0x3E3B0ULL);
  PrototypeSet set;
  const auto [pn, pa] = detail::stratify(static_cast<std::size_t>(cfg.patch_prototypes), normal_patches.size(),
                                         anomalous_patches.size());
  detail::take_random(normal_patches, pn, rng, set.patches);
  detail::take_random(anomalous_patches, pa, rng, set.patches);

  if (!normal_images.empty() && !anomalous_images.empty() && cfg.image_prototypes >= 2) {
    const auto [in, ia] = detail::stratify(static_cast<std::size_t>(cfg.image_prototypes), normal_images.size(),
                                           anomalous_images.size());
    detail::take_random(normal_images, in, rng, set.images);
    detail::take_random(anomalous_images, ia, rng, set.images);
  }
  return set;
}

// Raw (unprojected) features backing a prototype set at one layer.
template <class T>
struct PrototypeFeatures {
  Mat<T> patch_features;               // M x d
  std::vector<Mat<T>> image_features;  // per image prototype, N x d
  Mat<T> values_patch;
  Mat<T> values_image;
};

template <class T>
PrototypeFeatures<T> gather_prototypes(const PrototypeSet& set, const std::vector<FeatureBundle>& bundles, int layer) {
  PrototypeFeatures<T> pf;
  const auto m = static_cast<Eigen::Index>(set.patches.size());
  const int d = bundles.empty() ? 0 : bundles.front().d;
  pf.patch_features.resize(m, d);
  pf.values_patch.resize(m, 2);
  for (Eigen::Index j = 0; j < m; ++j) {
    const auto& ref = set.patches[static_cast<std::size_t>(j)];
    pf.patch_features.row(j) = bundles[static_cast<std::size_t>(ref.bundle)].layer_features(layer).row(ref.patch).template cast<T>();
    pf.values_patch(j, 0) = ref.label ? T(0) : T(1);
    pf.values_patch(j, 1) = ref.label ? T(1) : T(0);
  }
  pf.values_image.resize(static_cast<Eigen::Index>(set.images.size()), 2);
  for (std::size_t j = 0; j < set.images.size(); ++j) {
    const auto& ref = set.images[j];
    pf.image_features.push_back(bundles[static_cast<std::size_t>(ref.bundle)].layer_features(layer).template cast<T>());
    pf.values_image(static_cast<Eigen::Index>(j), 0) = ref.label ? T(0) : T(1);
    pf.values_image(static_cast<Eigen::Index>(j), 1) = ref.label ? T(1) : T(0);
  }
  return pf;
}

// Mean of unit rows, re-normalized.
template <class T>
Vec<T> pool_unit_rows(const Mat<T>& unit, T* norm_out = nullptr) {
  const Vec<T> mean = unit.colwise().mean().transpose();
  const T n = mean.norm();
  if (norm_out != nullptr) {
    *norm_out = n;
  }
  return n > T(0) ? Vec<T>(mean / n) : mean;
}

template <class T>
MemoryBank<T> materialize_bank(const PrototypeFeatures<T>& pf, const VisualProjection<T>& proj, int layer,
                               double quantile) {
  MemoryBank<T> bank;
  bank.layer = layer;
  bank.quantile = quantile;
  bank.keys_patch = project_rows<T>(pf.patch_features, proj.W(layer), proj.b(layer)).unit;
  bank.values_patch = pf.values_patch;
  bank.keys_image.resize(static_cast<Eigen::Index>(pf.image_features.size()), proj.output_dim());
  for (std::size_t j = 0; j < pf.image_features.size(); ++j) {
    const Mat<T> unit = project_rows<T>(pf.image_features[j], proj.W(layer), proj.b(layer)).unit;
    bank.keys_image.row(static_cast<Eigen::Index>(j)) = pool_unit_rows<T>(unit).transpose();
  }
  bank.values_image = pf.values_image;
  return bank;
}

template <class T>
MemoryBank<T> build_memory(const std::vector<FeatureBundle>& bundles, const VisualProjection<T>& proj, int layer,
                           const MemoryConfig& cfg) {
  const PrototypeSet set = sample_prototypes(bundles, cfg);
  MemoryBank<T> bank = materialize_bank<T>(gather_prototypes<T>(set, bundles, layer), proj, layer, cfg.quantile);
  bank.validate();
  return bank;
}

// Linear-interpolated q-quantile of a sample.
template <class T>
T quantile_value(std::vector<T> values, double q) {
  if (values.empty()) {
    throw UsageError("quantile of an empty sample");
  }
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
  const T a = values[lo];
  if (hi == lo) {
    return a;
  }
  const T b = *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(lo) + 1, values.end());
  return a + T(pos - static_cast<double>(lo)) * (b - a);
}

// Softmax retrieval weights (N x M, zero where filtered) and the evidence p.
template <class T>
struct EvidenceForward {
  Mat<T> weights;
  Vec<T> p;
};

// s = R K^T; entries below each row's q-quantile are dropped before the
// softmax; p_i is the anomaly component of softmax(s_i) V. Keys flagged in
// `exclude` take no part (used to hold out an image's own prototypes).
template <class T>
EvidenceForward<T> patch_evidence_forward(const Mat<T>& r, const Mat<T>& keys, const Mat<T>& values, double q,
                                          std::span<const std::uint8_t> exclude = {}) {
  const Mat<T> s = r * keys.transpose();
  const auto live = [&](Eigen::Index j) { return exclude.empty() || exclude[static_cast<std::size_t>(j)] == 0; };
  EvidenceForward<T> out;
  out.weights.setZero(s.rows(), s.cols());
  out.p.resize(s.rows());
  std::vector<T> row;
  row.reserve(static_cast<std::size_t>(s.cols()));
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    row.clear();
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      if (live(j)) {
        row.push_back(s(i, j));
      }
    }
    if (row.empty()) {
      throw DataError("every memory key is excluded");
    }
    const T thr = q > 0.0 ? quantile_value<T>(row, q) : -std::numeric_limits<T>::infinity();
    T hi = -std::numeric_limits<T>::infinity();
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      if (live(j) && s(i, j) >= thr) {
        hi = std::max(hi, s(i, j));
      }
    }
    T total = T(0);
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
      if (live(j) && s(i, j) >= thr) {
        const T e = std::exp(s(i, j) - hi);
        out.weights(i, j) = e;
        total += e;
      }
    }
    out.weights.row(i) /= total;
    out.p[i] = out.weights.row(i).dot(values.col(1));
  }
  return out;
}

// Given dL/dp, accumulates dL/dR and dL/dK (filter mask held fixed).
template <class T>
void patch_evidence_backward(const EvidenceForward<T>& fwd, const Mat<T>& r, const Mat<T>& keys, const Mat<T>& values,
                             const Vec<T>& grad_p, Mat<T>& grad_r, Mat<T>& grad_keys) {
  Mat<T> ds(fwd.weights.rows(), fwd.weights.cols());
  for (Eigen::Index i = 0; i < ds.rows(); ++i) {
    for (Eigen::Index j = 0; j < ds.cols(); ++j) {
      ds(i, j) = fwd.weights(i, j) * grad_p[i] * (values(j, 1) - fwd.p[i]);
    }
  }
  grad_r.noalias() += ds * keys;
  grad_keys.noalias() += ds.transpose() * r;
}

template <class T>
Vec<T> patch_evidence(const Mat<T>& r, const MemoryBank<T>& bank) {
  return patch_evidence_forward<T>(r, bank.keys_patch, bank.values_patch, bank.quantile).p;
}

template <class T>
struct RetrievalForward {
  Vec<T> pooled;
  T pooled_norm = T(0);
  Vec<T> weights;
  T score = T(0);
};

template <class T>
RetrievalForward<T> image_retrieval_forward(const Mat<T>& r, const Mat<T>& keys, const Mat<T>& values,
                                            std::span<const std::uint8_t> exclude = {}) {
  if (keys.rows() == 0) {
    throw DataError("memory bank has no image-level keys");
  }
  RetrievalForward<T> out;
  out.pooled = pool_unit_rows<T>(r, &out.pooled_norm);
  const Vec<T> s = keys * out.pooled;
  if (exclude.empty()) {
    out.weights = softmax<T>(s);
  } else {
    T hi = -std::numeric_limits<T>::infinity();
    for (Eigen::Index j = 0; j < s.size(); ++j) {
      if (exclude[static_cast<std::size_t>(j)] == 0) {
        hi = std::max(hi, s[j]);
      }
    }
    if (!std::isfinite(hi)) {
      throw DataError("every image key is excluded");
    }
    out.weights = Vec<T>::Zero(s.size());
    for (Eigen::Index j = 0; j < s.size(); ++j) {
      if (exclude[static_cast<std::size_t>(j)] == 0) {
        out.weights[j] = std::exp(s[j] - hi);
      }
    }
    out.weights /= out.weights.sum();
  }
  out.score = out.weights.dot(values.col(1));
  return out;
}

// Given dL/da_ret, accumulates dL/dR (through the mean pool) and dL/dK.
template <class T>
void image_retrieval_backward(const RetrievalForward<T>& fwd, const Mat<T>& r, const Mat<T>& keys,
                              const Mat<T>& values, T grad_score, Mat<T>& grad_r, Mat<T>& grad_keys) {
  Vec<T> ds(fwd.weights.size());
  for (Eigen::Index j = 0; j < ds.size(); ++j) {
    ds[j] = fwd.weights[j] * grad_score * (values(j, 1) - fwd.score);
  }
  const Vec<T> grad_pooled = keys.transpose() * ds;
  grad_keys.noalias() += ds * fwd.pooled.transpose();
  const Vec<T> grad_mean = l2_normalize_backward<T>(fwd.pooled, fwd.pooled_norm, grad_pooled);
  grad_r.rowwise() += (grad_mean / T(r.rows())).transpose();
}

template <class T>
T image_retrieval_score(const FeatureBundle& bundle, const VisualProjection<T>& proj, const MemoryBank<T>& bank) {
  const Mat<T> r = project_patches<T>(bundle, proj, bank.layer);
  return image_retrieval_forward<T>(r, bank.keys_image, bank.values_image).score;
}

// Patch evidence of the bank layer, bilinearly resized to H x W.
template <class T>
Vec<T> base_anomaly_map(const FeatureBundle& bundle, const VisualProjection<T>& proj, const MemoryBank<T>& bank) {
  const Mat<T> r = project_patches<T>(bundle, proj, bank.layer);
  const ResizePlan plan(bundle.h_p, bundle.w_p, bundle.H, bundle.W);
  return plan.apply<T>(patch_evidence<T>(r, bank));
}

template <class T>
void write_bank(const MemoryBank<T>& bank, const std::filesystem::path& path) {
  bank.validate();
  io::json header = {{"M", bank.keys_patch.rows()},
                     {"M_img", bank.keys_image.rows()},
                     {"d_r", bank.keys_patch.cols()},
                     {"q", bank.quantile},
                     {"layer", bank.layer}};
  io::BinaryWriter out(path);
  out.write_header(kBankMagic, kBankVersion, header);
  out.write_matrix(bank.keys_patch);
  out.write_matrix(bank.values_patch);
  out.write_matrix(bank.keys_image);
  out.write_matrix(bank.values_image);
  out.close();
}

template <class T>
MemoryBank<T> read_bank(const std::filesystem::path& path) {
  io::BinaryReader in(path);
  const io::json header = in.read_header(kBankMagic, kBankVersion);
  const auto m = io::header_get<Eigen::Index>(header, "M", path);
  const auto m_img = io::header_get<Eigen::Index>(header, "M_img", path);
  const auto d_r = io::header_get<Eigen::Index>(header, "d_r", path);
  MemoryBank<T> bank;
  bank.quantile = io::header_get<double>(header, "q", path);
  bank.layer = header.value("layer", 0);
  bank.keys_patch = in.read_matrix<T>(m, d_r, "patch keys");
  bank.values_patch = in.read_matrix<T>(m, 2, "patch values");
  bank.keys_image = in.read_matrix<T>(m_img, d_r, "image keys");
  bank.values_image = in.read_matrix<T>(m_img, 2, "image values");
  bank.validate();
  return bank;
}

} // namespace entroad
