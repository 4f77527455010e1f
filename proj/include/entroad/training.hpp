#pragma once

// Two-stage training with hand-derived adjoints and a finite-difference harness.

#include "entroad/bundle.hpp"
#include "entroad/error.hpp"
#include "entroad/losses.hpp"
#include "entroad/memory.hpp"
#include "entroad/model.hpp"
#include "entroad/parallel.hpp"
#include "entroad/pipeline.hpp"
#include "entroad/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace entroad {

struct TrainConfig {
  double lr = 4e-4;
  int batch_size = 8;
  int epochs_stage1 = 1;
  int epochs_stage2 = 5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  ModelConfig model;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) {
      throw UsageError("lr must be a finite non-negative number");
    }
    if (batch_size < 1) {
      throw UsageError("batch_size must be >= 1");
    }
    if (epochs_stage1 < 0 || epochs_stage2 < 0) {
      throw UsageError("epoch counts must be >= 0");
    }
    model.validate();
  }
};

struct HistoryRow {
  std::string stage;
  int epoch = 0;
  int batch = 0;
  double loss = 0.0;
};

inline void write_history_csv(const std::vector<HistoryRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw DataError("cannot write " + path.string());
  }
  out << "stage,epoch,batch,loss\n";
  out.precision(9);
  for (const auto& r : rows) {
    out << r.stage << ',' << r.epoch << ',' << r.batch << ',' << r.loss << '\n';
  }
}

// Adam over a fixed list of flat parameter blocks.
template <class T>
class Adam {
public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<std::span<T>>& params, const std::vector<std::span<const T>>& grads) {
    if (params.size() != grads.size()) {
      throw std::logic_error("Adam: parameter and gradient lists differ");
    }
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < params[k].size(); ++i) {
        const double g = static_cast<double>(grads[k][i]);
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        const double step = lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        params[k][i] = static_cast<T>(static_cast<double>(params[k][i]) - step);
      }
    }
  }

  int steps() const { return t_; }

private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

namespace detail {

template <class Derived>
auto flat(Eigen::PlainObjectBase<Derived>& m) {
  return std::span<typename Derived::Scalar>(m.data(), static_cast<std::size_t>(m.size()));
}

template <class Derived>
auto flat(const Eigen::PlainObjectBase<Derived>& m) {
  return std::span<const typename Derived::Scalar>(m.data(), static_cast<std::size_t>(m.size()));
}

// Shuffled batch order for one epoch; the last partial batch is kept.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, std::uint64_t seed,
                                                           std::uint64_t stage, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed ^ (stage * 0x9E3779B97F4A7C15ULL) ^ (static_cast<std::uint64_t>(epoch) << 20));
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<std::size_t>(batch_size))));
  }
  return out;
}

template <class T>
void require_finite(T loss, const std::string& where) {
  if (!std::isfinite(static_cast<double>(loss))) {
    throw NumericalError("non-finite loss " + where);
  }
}

inline void check_training_set(const std::vector<FeatureBundle>& bundles, const ModelConfig& cfg) {
  if (bundles.empty()) {
    throw DataError("no training bundles");
  }
  bool has_normal = false, has_anomalous = false;
  for (const auto& b : bundles) {
    if (!b.label) {
      throw DataError("bundle " + b.image_id + " has no label");
    }
    if (*b.label == 1 && !b.mask) {
      throw DataError("anomalous bundle " + b.image_id + " has no mask");
    }
    (*b.label == 1 ? has_anomalous : has_normal) = true;
    if (b.d != bundles.front().d) {
      throw DataError("bundle " + b.image_id + " has feature width " + std::to_string(b.d) + ", expected " +
                      std::to_string(bundles.front().d));
    }
    for (int layer : cfg.layers) {
      if (!b.has_layer(layer)) {
        throw DataError("bundle " + b.image_id + " lacks layer " + std::to_string(layer));
      }
    }
    for (int layer : cfg.map_layers) {
      if (!b.has_layer(layer)) {
        throw DataError("bundle " + b.image_id + " lacks layer " + std::to_string(layer));
      }
    }
  }
  if (!has_normal || !has_anomalous) {
    throw DataError("training data must contain both normal and anomalous images");
  }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Stage 1

// Training-time state: the projection plus the raw prototype features, so the
// memory keys follow the projection as it trains.
template <class T>
struct Stage1State {
  VisualProjection<T> projection;
  PrototypeSet set;
  PrototypeFeatures<T> protos;
  int layer = 0;
  double quantile = 0.9;
};

template <class T>
Stage1State<T> init_stage1(const std::vector<FeatureBundle>& bundles, const ModelConfig& cfg) {
  Stage1State<T> st;
  st.layer = cfg.feature_layer();
  st.quantile = cfg.memory.quantile;
  st.projection = VisualProjection<T>::init(cfg.layers, cfg.d, cfg.d_r, cfg.seed);
  MemoryConfig mc = cfg.memory;
  mc.seed = cfg.seed;
  st.set = sample_prototypes(bundles, mc);
  st.protos = gather_prototypes<T>(st.set, bundles, st.layer);
  return st;
}

// Mean Stage-1 loss over `batch`. A training image never retrieves its own
// prototypes. When grad is given, dL/d(W, b) of the bank layer is added to it.
template <class T>
T stage1_batch_loss(const Stage1State<T>& st, const std::vector<FeatureBundle>& bundles,
                    std::span<const std::size_t> batch, const LossConfig& cfg, VisualProjection<T>* grad = nullptr) {
  const int layer = st.layer;
  const Mat<T>& w = st.projection.W(layer);
  const Vec<T>& b = st.projection.b(layer);
  const Projected<T> keys = project_rows<T>(st.protos.patch_features, w, b);
  const std::size_t m_img = st.protos.image_features.size();
  std::vector<Projected<T>> img_proj(m_img);
  std::vector<T> img_norm(m_img, T(0));
  Mat<T> keys_image(static_cast<Eigen::Index>(m_img), w.cols());
  for (std::size_t j = 0; j < m_img; ++j) {
    img_proj[j] = project_rows<T>(st.protos.image_features[j], w, b);
    keys_image.row(static_cast<Eigen::Index>(j)) = pool_unit_rows<T>(img_proj[j].unit, &img_norm[j]).transpose();
  }

  struct Slot {
    T loss = T(0);
    Mat<T> gw;
    Vec<T> gb;
    Mat<T> gkeys;
    Mat<T> gkeys_image;
  };
  std::vector<Slot> slots(batch.size());
  const T scale = T(1) / T(batch.size());
  parallel_for(batch.size(), [&](std::size_t k) {
    const std::size_t idx = batch[k];
    const FeatureBundle& bundle = bundles[idx];
    std::vector<std::uint8_t> ex_patch(st.set.patches.size()), ex_image(m_img);
    for (std::size_t j = 0; j < ex_patch.size(); ++j) {
      ex_patch[j] = st.set.patches[j].bundle == static_cast<int>(idx);
    }
    for (std::size_t j = 0; j < m_img; ++j) {
      ex_image[j] = st.set.images[j].bundle == static_cast<int>(idx);
    }
    const Mat<T> z = bundle.layer_features(layer).template cast<T>();
    const Projected<T> r = project_rows<T>(z, w, b);
    const auto ev = patch_evidence_forward<T>(r.unit, keys.unit, st.protos.values_patch, st.quantile, ex_patch);
    const ResizePlan plan(bundle.h_p, bundle.w_p, bundle.H, bundle.W);
    const Vec<T> base = plan.apply(ev.p);
    const Vec<T> y = bundle.mask_vector<T>();
    const T label = T(bundle.label.value_or(0));

    Slot& s = slots[k];
    const bool has_image = m_img > 0;
    RetrievalForward<T> ret;
    T a_ret = T(0);
    if (has_image) {
      ret = image_retrieval_forward<T>(r.unit, keys_image, st.protos.values_image, ex_image);
      a_ret = ret.score;
    }
    if (grad == nullptr) {
      s.loss = has_image ? stage1_loss<T>(base, y, a_ret, label, cfg) : seg_loss<T>(base, y, cfg);
      return;
    }
    Vec<T> gmap = Vec<T>::Zero(base.size());
    T ga = T(0);
    s.loss = has_image ? stage1_loss<T>(base, y, a_ret, label, cfg, &gmap, &ga, scale)
                       : seg_loss<T>(base, y, cfg, &gmap, scale);
    const Vec<T> gp = plan.adjoint(gmap);
    Mat<T> gr = Mat<T>::Zero(r.unit.rows(), r.unit.cols());
    s.gkeys = Mat<T>::Zero(keys.unit.rows(), keys.unit.cols());
    s.gkeys_image = Mat<T>::Zero(keys_image.rows(), keys_image.cols());
    patch_evidence_backward<T>(ev, r.unit, keys.unit, st.protos.values_patch, gp, gr, s.gkeys);
    if (has_image) {
      image_retrieval_backward<T>(ret, r.unit, keys_image, st.protos.values_image, ga, gr, s.gkeys_image);
    }
    s.gw = Mat<T>::Zero(w.rows(), w.cols());
    s.gb = Vec<T>::Zero(b.size());
    project_rows_backward<T>(z, r, gr, s.gw, s.gb);
  });

  T total = T(0);
  for (const auto& s : slots) {
    total += s.loss;
  }
  if (grad != nullptr) {
    Mat<T>& gw = grad->weight[layer];
    Vec<T>& gb = grad->bias[layer];
    if (gw.size() == 0) {
      gw = Mat<T>::Zero(w.rows(), w.cols());
      gb = Vec<T>::Zero(b.size());
    }
    Mat<T> gkeys = Mat<T>::Zero(keys.unit.rows(), keys.unit.cols());
    Mat<T> gkeys_image = Mat<T>::Zero(keys_image.rows(), keys_image.cols());
    for (const auto& s : slots) {
      gw += s.gw;
      gb += s.gb;
      gkeys += s.gkeys;
      gkeys_image += s.gkeys_image;
    }
    project_rows_backward<T>(st.protos.patch_features, keys, gkeys, gw, gb);
    for (std::size_t j = 0; j < m_img; ++j) {
      const auto row = static_cast<Eigen::Index>(j);
      const Vec<T> key = keys_image.row(row).transpose();
      const Vec<T> gmean = l2_normalize_backward<T>(key, img_norm[j], gkeys_image.row(row).transpose());
      Mat<T> gunit(img_proj[j].unit.rows(), img_proj[j].unit.cols());
      gunit.rowwise() = (gmean / T(gunit.rows())).transpose();
      project_rows_backward<T>(st.protos.image_features[j], img_proj[j], gunit, gw, gb);
    }
  }
  return total * scale;
}

template <class T>
struct Stage1Result {
  VisualProjection<T> projection;
  MemoryBank<T> bank;
  std::vector<HistoryRow> history;
};

template <class T>
Stage1Result<T> train_stage1(const std::vector<FeatureBundle>& bundles, const TrainConfig& cfg) {
  cfg.validate();
  detail::check_training_set(bundles, cfg.model);
  ModelConfig mc = cfg.model;
  mc.d = bundles.front().d;
  Stage1State<T> st = init_stage1<T>(bundles, mc);
  Adam<T> opt(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  Stage1Result<T> out;
  for (int epoch = 0; epoch < cfg.epochs_stage1; ++epoch) {
    const auto batches = detail::epoch_batches(bundles.size(), cfg.batch_size, mc.seed, 1, epoch);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      VisualProjection<T> grad;
      const T loss = stage1_batch_loss<T>(st, bundles, batches[bi], mc.loss, &grad);
      detail::require_finite(loss, "in stage 1, epoch " + std::to_string(epoch) + " batch " + std::to_string(bi));
      Mat<T>& w = st.projection.weight.at(st.layer);
      Vec<T>& b = st.projection.bias.at(st.layer);
      const auto& gw = grad.weight.at(st.layer);
      const auto& gb = grad.bias.at(st.layer);
      opt.step({detail::flat(w), detail::flat(b)}, {detail::flat(gw), detail::flat(gb)});
      out.history.push_back({"stage1", epoch, static_cast<int>(bi), static_cast<double>(loss)});
    }
  }
  out.projection = st.projection;
  out.bank = materialize_bank<T>(st.protos, st.projection, st.layer, st.quantile);
  out.bank.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Stage 2

namespace detail {

template <class T>
std::vector<std::span<T>> stage2_views(Model<T>& m) {
  return {flat(m.learner.context), flat(m.adapter_a.w1), flat(m.adapter_a.b1), flat(m.adapter_a.w2),
          flat(m.adapter_a.b2),    flat(m.adapter_b.w1), flat(m.adapter_b.b1), flat(m.adapter_b.w2),
          flat(m.adapter_b.b2)};
}

template <class T>
std::vector<std::span<const T>> stage2_views(const Stage2Gradient<T>& g) {
  return {flat(g.context),      flat(g.adapter_a.w1), flat(g.adapter_a.b1), flat(g.adapter_a.w2),
          flat(g.adapter_a.b2), flat(g.adapter_b.w1), flat(g.adapter_b.b1), flat(g.adapter_b.w2),
          flat(g.adapter_b.b2)};
}

inline const std::vector<std::string>& stage2_names() {
  static const std::vector<std::string> names{"context",    "adapter_a.w1", "adapter_a.b1",
                                              "adapter_a.w2", "adapter_a.b2", "adapter_b.w1",
                                              "adapter_b.b1", "adapter_b.w2", "adapter_b.b2"};
  return names;
}

} // namespace detail

template <class T>
std::vector<FrozenInputs<T>> prepare_all(const std::vector<FeatureBundle>& bundles, const Model<T>& model) {
  std::vector<FrozenInputs<T>> out(bundles.size());
  parallel_for(bundles.size(), [&](std::size_t i) { out[i] = prepare_inputs<T>(bundles[i], model); });
  return out;
}

// Mean Stage-2 objective over a batch of prepared images.
template <class T>
T stage2_batch_loss(const std::vector<FrozenInputs<T>>& inputs, std::span<const std::size_t> batch,
                    const Model<T>& model, Stage2Gradient<T>* grad = nullptr) {
  const T scale = T(1) / T(batch.size());
  std::vector<T> losses(batch.size(), T(0));
  std::vector<Stage2Gradient<T>> slots;
  if (grad != nullptr) {
    slots.assign(batch.size(), Stage2Gradient<T>::zeros_like(model));
  }
  parallel_for(batch.size(), [&](std::size_t k) {
    losses[k] = stage2_image_loss<T>(inputs[batch[k]], model, grad != nullptr ? &slots[k] : nullptr, scale);
  });
  T total = T(0);
  for (std::size_t k = 0; k < batch.size(); ++k) {
    total += losses[k];
    if (grad != nullptr) {
      grad->add(slots[k]);
    }
  }
  return total * scale;
}

// Assembles a model from Stage-1 artifacts with fresh Stage-2 state.
template <class T>
Model<T> assemble_model(const ModelConfig& cfg, const VisualProjection<T>& projection, const MemoryBank<T>& bank) {
  Model<T> m;
  m.config = cfg;
  m.projection = projection;
  m.bank = bank;
  init_prompt_state(m);
  return m;
}

template <class T>
void train_stage2(const std::vector<FeatureBundle>& bundles, Model<T>& model, const TrainConfig& cfg,
                  std::vector<HistoryRow>* history = nullptr) {
  model.bank.validate();
  const std::uint64_t frozen = frozen_checksum(model);
  const std::vector<FrozenInputs<T>> inputs = prepare_all<T>(bundles, model);
  Adam<T> opt(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  for (int epoch = 0; epoch < cfg.epochs_stage2; ++epoch) {
    const auto batches = detail::epoch_batches(bundles.size(), cfg.batch_size, model.config.seed, 2, epoch);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      Stage2Gradient<T> grad = Stage2Gradient<T>::zeros_like(model);
      const T loss = stage2_batch_loss<T>(inputs, batches[bi], model, &grad);
      detail::require_finite(loss, "in stage 2, epoch " + std::to_string(epoch) + " batch " + std::to_string(bi));
      opt.step(detail::stage2_views(model), detail::stage2_views(grad));
      if (history != nullptr) {
        history->push_back({"stage2", epoch, static_cast<int>(bi), static_cast<double>(loss)});
      }
    }
  }
  if (frozen_checksum(model) != frozen) {
    throw std::logic_error("stage 2 modified frozen state");
  }
}

template <class T>
struct TrainResult {
  Model<T> model;
  std::vector<HistoryRow> history;
};

// Both stages end to end.
template <class T>
TrainResult<T> train(const std::vector<FeatureBundle>& bundles, const TrainConfig& cfg) {
  Stage1Result<T> s1 = train_stage1<T>(bundles, cfg);
  ModelConfig mc = cfg.model;
  mc.d = bundles.front().d;
  TrainResult<T> out{assemble_model<T>(mc, s1.projection, s1.bank), std::move(s1.history)};
  train_stage2<T>(bundles, out.model, cfg, &out.history);
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference verification

struct GradCheckEntry {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;
};

struct NamedBlock {
  std::string name;
  std::span<double> value;
  std::span<const double> grad;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

// Central differences of `loss()` over at most `max_coords` sampled coordinates.
template <class F>
GradCheckReport finite_difference_check(const std::vector<NamedBlock>& blocks, F&& loss, double h,
                                        std::size_t max_coords = 200, std::uint64_t seed = 0) {
  if (!(h > 0.0)) {
    throw UsageError("finite-difference step must be > 0");
  }
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::size_t i = 0; i < blocks[b].value.size(); ++i) {
      coords.emplace_back(b, i);
    }
  }
  if (coords.size() > max_coords) {
    std::mt19937_64 rng(seed ^ 0xFDC4ULL);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
    std::sort(coords.begin(), coords.end());
  }
  GradCheckReport report;
  for (const auto& [b, i] : coords) {
    double& x = blocks[b].value[i];
    const double saved = x;
    // The difference is taken in the loss's own type, so an extended-precision
    // loss keeps its extra digits.
    const double x_up = saved + h;
    const double x_down = saved - h;
    x = x_up;
    const auto up = loss();
    x = x_down;
    const auto down = loss();
    x = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericalError("non-finite loss during finite differences on " + blocks[b].name);
    }
    using R = std::remove_cvref_t<decltype(up)>;
    const R step = R(x_up) - R(x_down); // the step actually taken after rounding
    GradCheckEntry e{blocks[b].name, i, blocks[b].grad[i], static_cast<double>((up - down) / step), 0.0};
    e.rel_err = relative_error(e.analytic, e.numeric);
    report.max_rel_err = std::max(report.max_rel_err, e.rel_err);
    report.entries.push_back(std::move(e));
  }
  return report;
}

// Analytic vs. numeric gradients of the mean Stage-2 objective over `batch`
// for the named parameter blocks (empty subset = all trainables).
inline GradCheckReport grad_check(const Model<double>& model_in, const std::vector<FeatureBundle>& batch,
                                  const std::vector<std::string>& subset = {}, double h = 1e-5,
                                  std::size_t max_coords = 200, std::uint64_t seed = 0) {
  Model<double> model = model_in;
  const auto inputs = prepare_all<double>(batch, model);
  std::vector<std::size_t> idx(batch.size());
  std::iota(idx.begin(), idx.end(), 0);
  Stage2Gradient<double> grad = Stage2Gradient<double>::zeros_like(model);
  const double base = stage2_batch_loss<double>(inputs, idx, model, &grad);
  detail::require_finite(base, "in grad_check");

  const auto values = detail::stage2_views(model);
  const auto grads = detail::stage2_views(grad);
  const auto& names = detail::stage2_names();
  std::vector<NamedBlock> blocks;
  for (std::size_t k = 0; k < names.size(); ++k) {
    const bool wanted = subset.empty() || std::any_of(subset.begin(), subset.end(), [&](const std::string& s) {
                          return names[k] == s || names[k].rfind(s + ".", 0) == 0;
                        });
    if (wanted) {
      blocks.push_back({names[k], values[k], grads[k]});
    }
  }
  if (blocks.empty()) {
    throw UsageError("grad_check: no parameters match the requested subset");
  }
  // Central differences are evaluated on a long-double copy: with a loss of
  // order 10, one f64 rounding is ~1e-10 of FD noise at h = 1e-5, the same size
  // as the 1e-4 tolerance on a 1e-6 gradient.
  using X = long double;
  Model<X> wide = model.cast<X>();
  const auto wide_inputs = prepare_all<X>(batch, wide);
  const auto wide_values = detail::stage2_views(wide);
  return finite_difference_check(
      blocks,
      [&] {
        for (std::size_t k = 0; k < values.size(); ++k) {
          for (std::size_t j = 0; j < values[k].size(); ++j) {
            wide_values[k][j] = static_cast<X>(values[k][j]);
          }
        }
        return stage2_batch_loss<X>(wide_inputs, idx, wide);
      },
      h, max_coords, seed);
}

} // namespace entroad
