#pragma once

// Run configuration: TOML file, environment, and command-line overrides.
// Precedence is flags > ENTROAD_SEED > file > built-in defaults.

#include "entroad/error.hpp"
#include "entroad/metrics.hpp"
#include "entroad/model.hpp"
#include "entroad/synthetic.hpp"
#include "entroad/tensor_io.hpp"
#include "entroad/training.hpp"

#include <toml.hpp>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace entroad {

struct RunConfig {
  TrainConfig train;
  SyntheticConfig synthetic;
  EvalOptions eval;

  void validate() const {
    train.validate();
    synthetic.validate();
    if (!(eval.fpr_limit > 0.0 && eval.fpr_limit <= 1.0) || eval.n_thresholds < 2) {
      throw UsageError("eval settings out of range");
    }
  }
};

// One settable key. `flag` is the command-line spelling (--flag).
struct ConfigKey {
  std::string section;
  std::string key;
  std::string help;
  std::function<io::json(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  const auto e = s.find_last_not_of(" \t");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

template <class V>
V parse_value(const std::string& text, const std::string& key);

template <>
inline double parse_value<double>(const std::string& text, const std::string& key) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(text, &pos);
    if (pos != text.size()) {
      throw std::invalid_argument(text);
    }
    return v;
  } catch (const std::exception&) {
    throw UsageError("'" + key + "' expects a number, got '" + text + "'");
  }
}

template <>
inline long long parse_value<long long>(const std::string& text, const std::string& key) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(text, &pos);
    if (pos != text.size()) {
      throw std::invalid_argument(text);
    }
    return v;
  } catch (const std::exception&) {
    throw UsageError("'" + key + "' expects an integer, got '" + text + "'");
  }
}

template <>
inline bool parse_value<bool>(const std::string& text, const std::string& key) {
  if (text == "true" || text == "1") {
    return true;
  }
  if (text == "false" || text == "0") {
    return false;
  }
  throw UsageError("'" + key + "' expects true or false, got '" + text + "'");
}

template <>
inline std::vector<int> parse_value<std::vector<int>>(const std::string& text, const std::string& key) {
  std::vector<int> out;
  std::string s = text;
  if (!s.empty() && s.front() == '[' && s.back() == ']') {
    s = s.substr(1, s.size() - 2);
  }
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    out.push_back(static_cast<int>(parse_value<long long>(trim(item), key)));
  }
  if (out.empty()) {
    throw UsageError("'" + key + "' expects a non-empty list of integers");
  }
  return out;
}

template <class V, class Ref>
ConfigKey make_key(std::string section, std::string key, std::string help, Ref ref) {
  ConfigKey k;
  k.section = std::move(section);
  k.key = key;
  k.help = std::move(help);
  k.get = [ref](const RunConfig& c) { return io::json(ref(const_cast<RunConfig&>(c))); };
  k.set = [ref, key](RunConfig& c, const std::string& text) {
    if constexpr (std::is_same_v<V, long long>) {
      const long long v = parse_value<long long>(text, key);
      using Target = std::decay_t<decltype(ref(c))>;
      if constexpr (std::is_unsigned_v<Target>) {
        if (v < 0) {
          throw UsageError("'" + key + "' must be non-negative");
        }
      }
      ref(c) = static_cast<Target>(v);
    } else {
      ref(c) = parse_value<V>(text, key);
    }
  };
  return k;
}

} // namespace detail

// Every configurable key with its default taken from a default-constructed RunConfig.
inline const std::vector<ConfigKey>& config_keys() {
  using detail::make_key;
  using LL = long long;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    // training
    k.push_back(make_key<double>("train", "lr", "Adam learning rate", [](RunConfig& c) -> double& { return c.train.lr; }));
    k.push_back(make_key<LL>("train", "batch_size", "images per batch", [](RunConfig& c) -> int& { return c.train.batch_size; }));
    k.push_back(make_key<LL>("train", "epochs_stage1", "Stage-1 epochs", [](RunConfig& c) -> int& { return c.train.epochs_stage1; }));
    k.push_back(make_key<LL>("train", "epochs_stage2", "Stage-2 epochs", [](RunConfig& c) -> int& { return c.train.epochs_stage2; }));
    k.push_back(make_key<LL>("train", "seed", "model and training seed", [](RunConfig& c) -> std::uint64_t& { return c.train.model.seed; }));
    // model
    k.push_back(make_key<std::vector<int>>("model", "layers", "entropy layers", [](RunConfig& c) -> std::vector<int>& { return c.train.model.layers; }));
    k.push_back(make_key<std::vector<int>>("model", "map_layers", "alignment-map layers", [](RunConfig& c) -> std::vector<int>& { return c.train.model.map_layers; }));
    k.push_back(make_key<LL>("model", "aggregation_layer", "token routing layer (0 = deepest)", [](RunConfig& c) -> int& { return c.train.model.aggregation_layer; }));
    k.push_back(make_key<LL>("model", "d_r", "retrieval projection width", [](RunConfig& c) -> int& { return c.train.model.d_r; }));
    k.push_back(make_key<LL>("model", "d_t", "text embedding width", [](RunConfig& c) -> int& { return c.train.model.d_t; }));
    k.push_back(make_key<LL>("model", "context_length", "learnable context tokens L", [](RunConfig& c) -> int& { return c.train.model.context_length; }));
    k.push_back(make_key<LL>("model", "adapter_hidden", "adapter hidden width (0 = d_t/2)", [](RunConfig& c) -> int& { return c.train.model.adapter_hidden; }));
    k.push_back(make_key<double>("model", "logit_temperature", "similarity temperature tau_s", [](RunConfig& c) -> double& { return c.train.model.logit_temperature; }));
    // routing
    k.push_back(make_key<double>("routing", "router_temperature", "router temperature T", [](RunConfig& c) -> double& { return c.train.model.routing.temperature; }));
    k.push_back(make_key<double>("routing", "gate_tau", "gate threshold tau", [](RunConfig& c) -> double& { return c.train.model.routing.tau; }));
    k.push_back(make_key<double>("routing", "gate_k0", "gate base slope k0", [](RunConfig& c) -> double& { return c.train.model.routing.k0; }));
    k.push_back(make_key<double>("routing", "gate_k1", "gate entropy slope k1", [](RunConfig& c) -> double& { return c.train.model.routing.k1; }));
    k.push_back(make_key<bool>("routing", "gate_enabled", "confidence gate on/off", [](RunConfig& c) -> bool& { return c.train.model.routing.gate_enabled; }));
    // memory
    k.push_back(make_key<LL>("memory", "memory_size", "patch prototypes M", [](RunConfig& c) -> int& { return c.train.model.memory.patch_prototypes; }));
    k.push_back(make_key<LL>("memory", "memory_image_size", "image prototypes", [](RunConfig& c) -> int& { return c.train.model.memory.image_prototypes; }));
    k.push_back(make_key<double>("memory", "quantile", "retrieval filter quantile q", [](RunConfig& c) -> double& { return c.train.model.memory.quantile; }));
    // loss
    k.push_back(make_key<double>("loss", "focal_alpha", "focal alpha", [](RunConfig& c) -> double& { return c.train.model.loss.focal_alpha; }));
    k.push_back(make_key<double>("loss", "focal_gamma", "focal gamma", [](RunConfig& c) -> double& { return c.train.model.loss.focal_gamma; }));
    k.push_back(make_key<double>("loss", "dice_weight", "Dice weight lambda_d", [](RunConfig& c) -> double& { return c.train.model.loss.dice_weight; }));
    k.push_back(make_key<double>("loss", "lambda_a", "branch A loss weight", [](RunConfig& c) -> double& { return c.train.model.loss.lambda_a; }));
    k.push_back(make_key<double>("loss", "lambda_b", "branch B loss weight", [](RunConfig& c) -> double& { return c.train.model.loss.lambda_b; }));
    // inference
    k.push_back(make_key<double>("inference", "fusion_alpha", "branch A fusion weight", [](RunConfig& c) -> double& { return c.train.model.inference.alpha; }));
    k.push_back(make_key<double>("inference", "fusion_beta", "branch B fusion weight", [](RunConfig& c) -> double& { return c.train.model.inference.beta; }));
    {
      ConfigKey p;
      p.section = "inference";
      p.key = "prior";
      p.help = "domain prior (structured|diffuse)";
      p.get = [](const RunConfig& c) { return io::json(to_string(c.train.model.inference.prior)); };
      p.set = [](RunConfig& c, const std::string& s) { c.train.model.inference.prior = parse_prior(s); };
      k.push_back(std::move(p));
    }
    k.push_back(make_key<double>("inference", "score_k", "image score balance k", [](RunConfig& c) -> double& { return c.train.model.inference.score_k; }));
    k.push_back(make_key<double>("inference", "smoothing_sigma", "Gaussian smoothing sigma", [](RunConfig& c) -> double& { return c.train.model.inference.smoothing_sigma; }));
    k.push_back(make_key<double>("inference", "top_fraction", "top fraction for a_loc", [](RunConfig& c) -> double& { return c.train.model.inference.top_fraction; }));
    // evaluation
    k.push_back(make_key<double>("eval", "fpr_limit", "AUPRO false-positive cap", [](RunConfig& c) -> double& { return c.eval.fpr_limit; }));
    k.push_back(make_key<LL>("eval", "n_thresholds", "AUPRO thresholds", [](RunConfig& c) -> int& { return c.eval.n_thresholds; }));
    // synthetic data
    k.push_back(make_key<LL>("synthetic", "n_images", "synthetic image count", [](RunConfig& c) -> int& { return c.synthetic.n_images; }));
    k.push_back(make_key<LL>("synthetic", "h_p", "synthetic grid rows", [](RunConfig& c) -> int& { return c.synthetic.h_p; }));
    k.push_back(make_key<LL>("synthetic", "w_p", "synthetic grid columns", [](RunConfig& c) -> int& { return c.synthetic.w_p; }));
    k.push_back(make_key<LL>("synthetic", "d", "synthetic feature width", [](RunConfig& c) -> int& { return c.synthetic.d; }));
    k.push_back(make_key<double>("synthetic", "anomaly_fraction", "share of anomalous images", [](RunConfig& c) -> double& { return c.synthetic.anomaly_fraction; }));
    k.push_back(make_key<LL>("synthetic", "blob_radius", "defect radius in patches", [](RunConfig& c) -> int& { return c.synthetic.blob_radius; }));
    k.push_back(make_key<double>("synthetic", "feature_shift", "defect feature shift", [](RunConfig& c) -> double& { return c.synthetic.feature_shift; }));
    k.push_back(make_key<double>("synthetic", "attention_disruption", "defect attention blend toward uniform", [](RunConfig& c) -> double& { return c.synthetic.attention_disruption; }));
    k.push_back(make_key<double>("synthetic", "distractor_fraction", "share of normal images with a benign blob", [](RunConfig& c) -> double& { return c.synthetic.distractor_fraction; }));
    k.push_back(make_key<double>("synthetic", "distractor_shift", "benign blob shift relative to feature_shift", [](RunConfig& c) -> double& { return c.synthetic.distractor_shift; }));
    k.push_back(make_key<LL>("synthetic", "data_seed", "synthetic data seed", [](RunConfig& c) -> std::uint64_t& { return c.synthetic.seed; }));
    k.push_back(make_key<std::vector<int>>("synthetic", "synth_layers", "synthetic layer ids", [](RunConfig& c) -> std::vector<int>& { return c.synthetic.layers; }));
    return k;
  }();
  return keys;
}

inline const ConfigKey& find_config_key(const std::string& key) {
  for (const auto& k : config_keys()) {
    if (k.key == key) {
      return k;
    }
  }
  throw UsageError("unknown config key '" + key + "'");
}

inline std::string default_text(const ConfigKey& k) {
  const io::json v = k.get(RunConfig{});
  if (v.is_array()) {
    std::string s;
    for (const auto& e : v) {
      s += (s.empty() ? "" : ",") + e.dump();
    }
    return s;
  }
  return v.is_string() ? v.get<std::string>() : v.dump();
}

inline io::json to_json(const RunConfig& c) {
  io::json j = io::json::object();
  for (const auto& k : config_keys()) {
    j[k.section][k.key] = k.get(c);
  }
  return j;
}

// FNV-1a of the canonical (key-sorted) JSON form.
inline std::string config_hash(const RunConfig& c) { return io::hex64(io::fnv1a(to_json(c).dump())); }

namespace detail {

inline std::string toml_scalar_text(const toml::node& n, const std::string& key) {
  if (auto v = n.value<bool>(); v && n.is_boolean()) {
    return *v ? "true" : "false";
  }
  if (n.is_integer()) {
    return std::to_string(*n.value<std::int64_t>());
  }
  if (n.is_floating_point()) {
    std::ostringstream os;
    os.precision(17);
    os << *n.value<double>();
    return os.str();
  }
  if (n.is_string()) {
    return *n.value<std::string>();
  }
  if (const auto* arr = n.as_array()) {
    std::string s;
    for (const auto& e : *arr) {
      s += (s.empty() ? "" : ",") + toml_scalar_text(e, key);
    }
    return s;
  }
  throw UsageError("unsupported value type for '" + key + "'");
}

} // namespace detail

// Applies a TOML document onto `cfg`; unknown sections or keys are rejected.
inline void apply_toml(RunConfig& cfg, const toml::table& doc) {
  std::set<std::string> sections;
  for (const auto& k : config_keys()) {
    sections.insert(k.section);
  }
  for (const auto& [sec_name, sec_node] : doc) {
    const std::string sec(sec_name.str());
    const auto* tbl = sec_node.as_table();
    if (!sections.count(sec) || tbl == nullptr) {
      throw UsageError("unknown config section '" + sec + "'");
    }
    for (const auto& [key_name, node] : *tbl) {
      const std::string key(key_name.str());
      const ConfigKey& k = find_config_key(key);
      if (k.section != sec) {
        throw UsageError("config key '" + key + "' belongs in section [" + k.section + "], not [" + sec + "]");
      }
      k.set(cfg, detail::toml_scalar_text(node, key));
    }
  }
}

inline void apply_toml_file(RunConfig& cfg, const std::filesystem::path& path) {
  toml::table doc;
  try {
    doc = toml::parse_file(path.string());
  } catch (const toml::parse_error& e) {
    throw UsageError("cannot parse " + path.string() + ": " + std::string(e.description()));
  }
  apply_toml(cfg, doc);
}

inline void apply_toml_string(RunConfig& cfg, std::string_view text) {
  toml::table doc;
  try {
    doc = toml::parse(text);
  } catch (const toml::parse_error& e) {
    throw UsageError(std::string("cannot parse config: ") + std::string(e.description()));
  }
  apply_toml(cfg, doc);
}

// ENTROAD_SEED replaces both the model seed and the synthetic data seed.
inline void apply_seed_env(RunConfig& cfg) {
  if (const char* s = std::getenv("ENTROAD_SEED"); s != nullptr && *s != '\0') {
    find_config_key("seed").set(cfg, s);
    find_config_key("data_seed").set(cfg, s);
  }
}

} // namespace entroad
