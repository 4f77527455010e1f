#pragma once

#include "entroad/error.hpp"
#include "entroad/losses.hpp"
#include "entroad/memory.hpp"
#include "entroad/prompt.hpp"
#include "entroad/routing.hpp"
#include "entroad/tensor.hpp"
#include "entroad/tensor_io.hpp"

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace entroad {

enum class DomainPrior { structured, diffuse };

inline DomainPrior parse_prior(const std::string& s) {
  if (s == "structured") {
    return DomainPrior::structured;
  }
  if (s == "diffuse") {
    return DomainPrior::diffuse;
  }
  throw UsageError("prior must be 'structured' or 'diffuse', got '" + s + "'");
}

inline std::string to_string(DomainPrior p) { return p == DomainPrior::structured ? "structured" : "diffuse"; }

struct InferenceConfig {
  double alpha = 0.7; // branch A weight under the structured prior
  double beta = 0.3;
  DomainPrior prior = DomainPrior::structured;
  double score_k = 0.7;
  double smoothing_sigma = 4.0;
  double top_fraction = 0.01;

  // (alpha, beta) as configured for the structured prior, swapped for diffuse.
  std::pair<double, double> fusion_weights(DomainPrior p) const {
    return p == DomainPrior::structured ? std::pair{alpha, beta} : std::pair{beta, alpha};
  }
};

struct ModelConfig {
  std::vector<int> layers{6, 12, 18, 24};     // entropy layers
  std::vector<int> map_layers{6, 12, 18, 24}; // alignment-map layers
  int aggregation_layer = 0;                  // 0 = deepest entropy layer
  int d = 0;                                  // feature width, taken from data
  int d_r = 768;
  int d_t = 768;
  int context_length = 12;
  int adapter_hidden = 0; // 0 = d_t / 2
  double logit_temperature = 0.07;
  RoutingConfig routing;
  MemoryConfig memory;
  LossConfig loss;
  InferenceConfig inference;
  std::uint64_t seed = 0;

  int feature_layer() const { return layers.back(); }
  int routing_layer() const { return aggregation_layer != 0 ? aggregation_layer : layers.back(); }
  int hidden() const { return adapter_hidden != 0 ? adapter_hidden : std::max(1, d_t / 2); }

  void validate() const {
    if (layers.empty() || map_layers.empty()) {
      throw UsageError("layer sets must not be empty");
    }
    if (d_r < 1 || d_t < 1 || context_length < 1) {
      throw UsageError("model widths must be positive");
    }
    if (!(logit_temperature > 0.0)) {
      throw UsageError("logit temperature must be > 0");
    }
    if (!(routing.temperature > 0.0)) {
      throw UsageError("router temperature must be > 0");
    }
    if (!(memory.quantile >= 0.0 && memory.quantile < 1.0)) {
      throw UsageError("memory quantile must lie in [0,1)");
    }
    if (inference.alpha < 0.0 || inference.beta < 0.0 || !(inference.alpha + inference.beta > 0.0)) {
      throw UsageError("fusion weights must be non-negative and not both zero");
    }
    if (!(inference.score_k >= 0.0 && inference.score_k <= 1.0)) {
      throw UsageError("score k must lie in [0,1]");
    }
    if (!(inference.smoothing_sigma > 0.0)) {
      throw UsageError("smoothing sigma must be > 0");
    }
    if (!(inference.top_fraction > 0.0 && inference.top_fraction <= 1.0)) {
      throw UsageError("top fraction must lie in (0,1]");
    }
    loss.validate();
  }
};

inline io::json to_json(const ModelConfig& c) {
  return {
      {"layers", c.layers},
      {"map_layers", c.map_layers},
      {"aggregation_layer", c.aggregation_layer},
      {"d", c.d},
      {"d_r", c.d_r},
      {"d_t", c.d_t},
      {"context_length", c.context_length},
      {"adapter_hidden", c.adapter_hidden},
      {"logit_temperature", c.logit_temperature},
      {"router_temperature", c.routing.temperature},
      {"gate_tau", c.routing.tau},
      {"gate_k0", c.routing.k0},
      {"gate_k1", c.routing.k1},
      {"gate_enabled", c.routing.gate_enabled},
      {"memory_size", c.memory.patch_prototypes},
      {"memory_image_size", c.memory.image_prototypes},
      {"quantile", c.memory.quantile},
      {"focal_alpha", c.loss.focal_alpha},
      {"focal_gamma", c.loss.focal_gamma},
      {"dice_weight", c.loss.dice_weight},
      {"lambda_a", c.loss.lambda_a},
      {"lambda_b", c.loss.lambda_b},
      {"fusion_alpha", c.inference.alpha},
      {"fusion_beta", c.inference.beta},
      {"prior", to_string(c.inference.prior)},
      {"score_k", c.inference.score_k},
      {"smoothing_sigma", c.inference.smoothing_sigma},
      {"top_fraction", c.inference.top_fraction},
      {"seed", c.seed},
  };
}

inline ModelConfig model_config_from_json(const io::json& j) {
  ModelConfig c;
  try {
    c.layers = j.at("layers").get<std::vector<int>>();
    c.map_layers = j.at("map_layers").get<std::vector<int>>();
    c.aggregation_layer = j.at("aggregation_layer").get<int>();
    c.d = j.at("d").get<int>();
    c.d_r = j.at("d_r").get<int>();
    c.d_t = j.at("d_t").get<int>();
    c.context_length = j.at("context_length").get<int>();
    c.adapter_hidden = j.at("adapter_hidden").get<int>();
    c.logit_temperature = j.at("logit_temperature").get<double>();
    c.routing.temperature = j.at("router_temperature").get<double>();
    c.routing.tau = j.at("gate_tau").get<double>();
    c.routing.k0 = j.at("gate_k0").get<double>();
    c.routing.k1 = j.at("gate_k1").get<double>();
    c.routing.gate_enabled = j.at("gate_enabled").get<bool>();
    c.memory.patch_prototypes = j.at("memory_size").get<int>();
    c.memory.image_prototypes = j.at("memory_image_size").get<int>();
    c.memory.quantile = j.at("quantile").get<double>();
    c.loss.focal_alpha = j.at("focal_alpha").get<double>();
    c.loss.focal_gamma = j.at("focal_gamma").get<double>();
    c.loss.dice_weight = j.at("dice_weight").get<double>();
    c.loss.lambda_a = j.at("lambda_a").get<double>();
    c.loss.lambda_b = j.at("lambda_b").get<double>();
    c.inference.alpha = j.at("fusion_alpha").get<double>();
    c.inference.beta = j.at("fusion_beta").get<double>();
    c.inference.prior = parse_prior(j.at("prior").get<std::string>());
    c.inference.score_k = j.at("score_k").get<double>();
    c.inference.smoothing_sigma = j.at("smoothing_sigma").get<double>();
    c.inference.top_fraction = j.at("top_fraction").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const io::json::exception& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
  c.memory.seed = c.seed;
  return c;
}

// All state needed for inference. Projection and bank come from Stage 1;
// learner and adapters are the Stage-2 trainables.
template <class T>
struct Model {
  ModelConfig config;
  VisualProjection<T> projection;
  MemoryBank<T> bank;
  PromptLearner<T> learner;
  BranchAdapter<T> adapter_a;
  BranchAdapter<T> adapter_b;
  TextEncoder<T> text;
  Mat<T> align; // d x d_t, fixed

  const BranchAdapter<T>& adapter(int branch) const { return branch == 0 ? adapter_a : adapter_b; }

  template <class U>
  Model<U> cast() const {
    Model<U> m;
    m.config = config;
    m.projection = projection.template cast<U>();
    m.bank = bank.template cast<U>();
    m.learner = learner.template cast<U>();
    m.adapter_a = adapter_a.template cast<U>();
    m.adapter_b = adapter_b.template cast<U>();
    m.text = text.template cast<U>();
    m.align = align.template cast<U>();
    return m;
  }
};

// Fresh Stage-2 state for a model whose Stage-1 parts are already set.
template <class T>
void init_prompt_state(Model<T>& m) {
  const ModelConfig& c = m.config;
  m.learner = PromptLearner<T>::init(c.context_length, c.d_t, c.seed);
  m.adapter_a = BranchAdapter<T>::init(c.d, c.hidden(), c.d_t, c.seed + 1);
  m.adapter_b = BranchAdapter<T>::init(c.d, c.hidden(), c.d_t, c.seed + 2);
  m.text = TextEncoder<T>::toy(c.d_t, c.seed);
  m.align = make_alignment<T>(c.d, c.d_t, c.seed);
}

namespace detail {

inline std::uint64_t hash_tensor(std::uint64_t h, const float* data, std::size_t n) {
  return io::fnv1a(std::string_view(reinterpret_cast<const char*>(data), n * sizeof(float)), h);
}

template <class Derived>
std::uint64_t hash_eigen(std::uint64_t h, const Eigen::MatrixBase<Derived>& m) {
  const Mat<float> f = m.template cast<float>();
  return hash_tensor(h, f.data(), static_cast<std::size_t>(f.size()));
}

} // namespace detail

// Checksum of the frozen Stage-1 state (projections and bank).
template <class T>
std::uint64_t frozen_checksum(const Model<T>& m) {
  std::uint64_t h = io::fnv1a("frozen");
  for (const auto& [layer, w] : m.projection.weight) {
    h = detail::hash_eigen(h, w);
    h = detail::hash_eigen(h, m.projection.bias.at(layer));
  }
  h = detail::hash_eigen(h, m.bank.keys_patch);
  h = detail::hash_eigen(h, m.bank.values_patch);
  h = detail::hash_eigen(h, m.bank.keys_image);
  h = detail::hash_eigen(h, m.bank.values_image);
  return h;
}

inline constexpr std::string_view kCheckpointMagic = "EAMD";
inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

// Visits every stored tensor in declaration order as (name, rows, cols, data).
template <class ModelT, class F>
void visit_checkpoint_tensors(ModelT& m, F&& fn) {
  for (auto& [layer, w] : m.projection.weight) {
    fn("projection." + std::to_string(layer) + ".weight", w);
    fn("projection." + std::to_string(layer) + ".bias", m.projection.bias.at(layer));
  }
  fn("bank.keys_patch", m.bank.keys_patch);
  fn("bank.values_patch", m.bank.values_patch);
  fn("bank.keys_image", m.bank.keys_image);
  fn("bank.values_image", m.bank.values_image);
  fn("learner.context", m.learner.context);
  fn("learner.class_normal", m.learner.class_normal);
  fn("learner.class_anomaly", m.learner.class_anomaly);
  fn("adapter_a.w1", m.adapter_a.w1);
  fn("adapter_a.b1", m.adapter_a.b1);
  fn("adapter_a.w2", m.adapter_a.w2);
  fn("adapter_a.b2", m.adapter_a.b2);
  fn("adapter_b.w1", m.adapter_b.w1);
  fn("adapter_b.b1", m.adapter_b.b1);
  fn("adapter_b.w2", m.adapter_b.w2);
  fn("adapter_b.b2", m.adapter_b.b2);
  fn("text.g", m.text.g);
  fn("align", m.align);
}

} // namespace detail

template <class T>
void save_checkpoint(const Model<T>& m, const std::filesystem::path& path, const std::string& config_hash = "") {
  io::json tensors = io::json::array();
  detail::visit_checkpoint_tensors(m, [&](const std::string& name, const auto& t) {
    tensors.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  });
  io::json header = {{"config", to_json(m.config)},
                     {"bank_layer", m.bank.layer},
                     {"bank_quantile", m.bank.quantile},
                     {"projection_layers", m.config.layers},
                     {"tensors", tensors},
                     {"config_hash", config_hash}};
  io::BinaryWriter out(path);
  out.write_header(kCheckpointMagic, kCheckpointVersion, header);
  detail::visit_checkpoint_tensors(m, [&](const std::string&, const auto& t) {
    const Mat<float> f = t.template cast<float>();
    out.write_matrix(f);
  });
  out.close();
}

template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  io::BinaryReader in(path);
  const io::json header = in.read_header(kCheckpointMagic, kCheckpointVersion);
  Model<T> m;
  m.config = model_config_from_json(io::header_get<io::json>(header, "config", path));
  const auto layers = io::header_get<std::vector<int>>(header, "projection_layers", path);
  for (int layer : layers) {
    m.projection.weight[layer] = Mat<T>();
    m.projection.bias[layer] = Vec<T>();
  }
  m.bank.layer = io::header_get<int>(header, "bank_layer", path);
  m.bank.quantile = io::header_get<double>(header, "bank_quantile", path);
  const auto tensors = io::header_get<io::json>(header, "tensors", path);
  std::size_t idx = 0;
  detail::visit_checkpoint_tensors(m, [&](const std::string& name, auto& t) {
    if (idx >= tensors.size() || tensors[idx].value("name", "") != name) {
      throw DataError("'" + path.string() + "': unexpected tensor order at '" + name + "'");
    }
    const auto rows = tensors[idx].at("rows").template get<Eigen::Index>();
    const auto cols = tensors[idx].at("cols").template get<Eigen::Index>();
    const Mat<T> value = in.read_matrix<T>(rows, cols, name.c_str());
    using Target = std::decay_t<decltype(t)>;
    if constexpr (Target::ColsAtCompileTime == 1) {
      t = Eigen::Map<const Vec<T>>(value.data(), rows * cols);
    } else {
      t = value;
    }
    ++idx;
  });
  m.bank.validate();
  return m;
}

} // namespace entroad
