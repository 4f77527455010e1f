#pragma once

// Dual-branch prompt adaptation: token pair -> prompt bias -> biased prompts
// -> text embeddings -> per-layer normal/anomaly similarity maps.

#include "entroad/error.hpp"
#include "entroad/tensor.hpp"
#include "entroad/tensor_io.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace entroad {

enum class PromptClass { normal, anomaly };

template <class T>
struct PromptLearner {
  Mat<T> context; // L x d_t, trainable
  Vec<T> class_normal;
  Vec<T> class_anomaly;

  int length() const { return static_cast<int>(context.rows()); }
  int dim() const { return static_cast<int>(context.cols()); }

  // Context ~ N(0, 0.02^2); class embeddings are fixed random unit vectors.
  static PromptLearner init(int length, int d_t, std::uint64_t seed) {
    if (length < 1) {
      throw UsageError("prompt context length must be >= 1");
    }
    std::mt19937_64 rng(seed ^ 0xC0E7ULL);
    std::normal_distribution<double> small(0.0, 0.02);
    std::normal_distribution<double> unit(0.0, 1.0);
    PromptLearner p;
    p.context.resize(length, d_t);
    for (Eigen::Index i = 0; i < p.context.size(); ++i) {
      p.context.data()[i] = T(small(rng));
    }
    auto draw = [&] {
      Vec<double> v(d_t);
      for (int i = 0; i < d_t; ++i) {
        v[i] = unit(rng);
      }
      return l2_normalize<double>(v).template cast<T>().eval();
    };
    p.class_normal = draw();
    p.class_anomaly = draw();
    return p;
  }

  const Vec<T>& class_embedding(PromptClass c) const { return c == PromptClass::normal ? class_normal : class_anomaly; }

  template <class U>
  PromptLearner<U> cast() const {
    return {context.template cast<U>(), class_normal.template cast<U>(), class_anomaly.template cast<U>()};
  }
};

// Two-layer MLP f(t_n, t_a) = W2^T relu(W1^T [t_n; t_a] + b1) + b2.
template <class T>
struct BranchAdapter {
  Mat<T> w1; // 2d x h
  Vec<T> b1;
  Mat<T> w2; // h x d_t
  Vec<T> b2;

  // He-initialized first layer; zero second layer so the initial bias is 0.
  static BranchAdapter init(int token_dim, int hidden, int d_t, std::uint64_t seed) {
    if (hidden < 1) {
      throw UsageError("adapter hidden width must be >= 1");
    }
    std::mt19937_64 rng(seed ^ 0xADA9ULL);
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 / (2.0 * token_dim)));
    BranchAdapter a;
    a.w1.resize(2 * token_dim, hidden);
    for (Eigen::Index i = 0; i < a.w1.size(); ++i) {
      a.w1.data()[i] = T(n(rng));
    }
    a.b1 = Vec<T>::Zero(hidden);
    a.w2 = Mat<T>::Zero(hidden, d_t);
    a.b2 = Vec<T>::Zero(d_t);
    return a;
  }

  static BranchAdapter zeros_like(const BranchAdapter& o) {
    return {Mat<T>::Zero(o.w1.rows(), o.w1.cols()), Vec<T>::Zero(o.b1.size()), Mat<T>::Zero(o.w2.rows(), o.w2.cols()),
            Vec<T>::Zero(o.b2.size())};
  }

  int token_dim() const { return static_cast<int>(w1.rows() / 2); }
  int output_dim() const { return static_cast<int>(w2.cols()); }

  template <class U>
  BranchAdapter<U> cast() const {
    return {w1.template cast<U>(), b1.template cast<U>(), w2.template cast<U>(), b2.template cast<U>()};
  }
};

template <class T>
struct BiasForward {
  Vec<T> input;  // [t_n; t_a]
  Vec<T> hidden_pre;
  Vec<T> hidden;
  Vec<T> bias;
};

template <class T>
BiasForward<T> branch_bias_forward(const Vec<T>& t_n, const Vec<T>& t_a, const BranchAdapter<T>& adapter) {
  if (t_n.size() != adapter.token_dim() || t_a.size() != adapter.token_dim()) {
    throw UsageError("adapter expects tokens of width " + std::to_string(adapter.token_dim()) + ", got " +
                     std::to_string(t_n.size()));
  }
  BiasForward<T> f;
  f.input.resize(t_n.size() + t_a.size());
  f.input << t_n, t_a;
  f.hidden_pre = adapter.w1.transpose() * f.input + adapter.b1;
  f.hidden = f.hidden_pre.cwiseMax(T(0));
  f.bias = adapter.w2.transpose() * f.hidden + adapter.b2;
  return f;
}

template <class T>
Vec<T> branch_bias(const Vec<T>& t_n, const Vec<T>& t_a, const BranchAdapter<T>& adapter) {
  return branch_bias_forward<T>(t_n, t_a, adapter).bias;
}

// Accumulates parameter gradients for dL/db; returns dL/d[t_n; t_a].
template <class T>
Vec<T> branch_bias_backward(const BiasForward<T>& fwd, const BranchAdapter<T>& adapter, const Vec<T>& grad_bias,
                            BranchAdapter<T>& grad) {
  grad.w2.noalias() += fwd.hidden * grad_bias.transpose();
  grad.b2 += grad_bias;
  Vec<T> grad_hidden = adapter.w2 * grad_bias;
  for (Eigen::Index i = 0; i < grad_hidden.size(); ++i) {
    if (!(fwd.hidden_pre[i] > T(0))) {
      grad_hidden[i] = T(0);
    }
  }
  grad.w1.noalias() += fwd.input * grad_hidden.transpose();
  grad.b1 += grad_hidden;
  return adapter.w1 * grad_hidden;
}

// Context tokens shifted by the bias, followed by the class embedding:
// an (L+1) x d_t token sequence.
template <class T>
Mat<T> synthesize_prompt(const PromptLearner<T>& learner, const Vec<T>& bias, PromptClass cls) {
  if (bias.size() != learner.dim()) {
    throw UsageError("prompt bias width does not match the context width");
  }
  Mat<T> out(learner.length() + 1, learner.dim());
  out.topRows(learner.length()) = learner.context.rowwise() + bias.transpose();
  out.row(learner.length()) = learner.class_embedding(cls).transpose();
  return out;
}

template <class T>
std::pair<Mat<T>, Mat<T>> synthesize_prompts(const PromptLearner<T>& learner, const Vec<T>& bias) {
  return {synthesize_prompt<T>(learner, bias, PromptClass::normal),
          synthesize_prompt<T>(learner, bias, PromptClass::anomaly)};
}

inline constexpr std::string_view kTextTableMagic = "EATE";
inline constexpr std::uint16_t kTextTableVersion = 1;

// Toy mode: u = normalize(G * mean_rows(prompt)), differentiable.
// Precomputed mode: fixed unit embeddings keyed by prompt id, inference only.
template <class T>
struct TextEncoder {
  enum class Mode { toy, precomputed };
  Mode mode = Mode::toy;
  Mat<T> g;                            // d_t x d_t (toy)
  std::map<std::string, Vec<T>> table; // precomputed
  std::map<std::string, std::string> table_class;

  static TextEncoder toy(int d_t, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x7E47ULL);
    std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(d_t)));
    TextEncoder enc;
    enc.g.resize(d_t, d_t);
    for (Eigen::Index i = 0; i < enc.g.size(); ++i) {
      enc.g.data()[i] = T(n(rng));
    }
    return enc;
  }

  int dim() const {
    if (mode == Mode::toy) {
      return static_cast<int>(g.rows());
    }
    return table.empty() ? 0 : static_cast<int>(table.begin()->second.size());
  }

  const Vec<T>& lookup(const std::string& key) const {
    auto it = table.find(key);
    if (it == table.end()) {
      throw DataError("no precomputed text embedding for '" + key + "'");
    }
    return it->second;
  }

  // Class-level embedding in precomputed mode: the entry named after the
  // class if present, otherwise the normalized mean of prompts tagged with it.
  Vec<T> class_embedding(PromptClass cls) const {
    const std::string name = cls == PromptClass::normal ? "normal" : "anomaly";
    if (table.count(name) != 0) {
      return table.at(name);
    }
    Vec<T> sum;
    int count = 0;
    for (const auto& [key, c] : table_class) {
      if (c != name) {
        continue;
      }
      const Vec<T>& v = lookup(key);
      sum = count == 0 ? v : Vec<T>(sum + v);
      ++count;
    }
    if (count == 0) {
      throw DataError("no precomputed text embedding for class '" + name + "'");
    }
    return l2_normalize<T>(sum);
  }

  template <class U>
  TextEncoder<U> cast() const {
    TextEncoder<U> out;
    out.mode = mode == Mode::toy ? TextEncoder<U>::Mode::toy : TextEncoder<U>::Mode::precomputed;
    out.g = g.template cast<U>();
    for (const auto& [k, v] : table) {
      out.table[k] = v.template cast<U>();
    }
    out.table_class = table_class;
    return out;
  }
};

template <class T>
struct EncodeForward {
  Vec<T> unit;
  T norm = T(0);
};

template <class T>
EncodeForward<T> encode_prompt_forward(const TextEncoder<T>& enc, const Mat<T>& prompt) {
  if (enc.mode != TextEncoder<T>::Mode::toy) {
    throw UsageError("prompt encoding requires the toy text encoder");
  }
  const Vec<T> mean = prompt.colwise().mean().transpose();
  const Vec<T> v = enc.g * mean;
  EncodeForward<T> f;
  f.norm = v.norm();
  f.unit = f.norm > T(0) ? Vec<T>(v / f.norm) : v;
  return f;
}

template <class T>
Vec<T> encode_prompt(const TextEncoder<T>& enc, const Mat<T>& prompt) {
  return encode_prompt_forward<T>(enc, prompt).unit;
}

// dL/d(mean prompt row); every prompt row receives this divided by L+1.
template <class T>
Vec<T> encode_prompt_backward_mean(const TextEncoder<T>& enc, const EncodeForward<T>& fwd, const Vec<T>& grad_unit) {
  return enc.g.transpose() * l2_normalize_backward<T>(fwd.unit, fwd.norm, grad_unit);
}

// Two-way softmax over scaled cosine similarities. `z_unit` rows must be
// unit-norm (see align_features); u vectors are normalized here.
template <class T>
std::pair<Vec<T>, Vec<T>> similarity_maps(const Mat<T>& z_unit, const Vec<T>& u_n, const Vec<T>& u_a, T temperature) {
  if (!(temperature > T(0))) {
    throw UsageError("logit temperature must be > 0");
  }
  const Vec<T> un = l2_normalize<T>(u_n);
  const Vec<T> ua = l2_normalize<T>(u_a);
  const Vec<T> diff = (z_unit * ua - z_unit * un) / temperature;
  Vec<T> s_a(diff.size());
  for (Eigen::Index i = 0; i < diff.size(); ++i) {
    s_a[i] = sigmoid<T>(diff[i]);
  }
  const Vec<T> s_n = (T(1) - s_a.array()).matrix();
  return {s_n, s_a};
}

// Maps layer features into the text width and normalizes rows. `align` is the
// fixed d x d_t map (identity when d == d_t).
template <class T>
Mat<T> align_features(const Mat<T>& z, const Mat<T>& align) {
  return l2_normalize_rows<T>(Mat<T>(z * align));
}

template <class T>
Mat<T> make_alignment(int d, int d_t, std::uint64_t seed) {
  Mat<T> a(d, d_t);
  if (d == d_t) {
    a.setIdentity();
    return a;
  }
  std::mt19937_64 rng(seed ^ 0xA119ULL);
  std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    a.data()[i] = T(n(rng));
  }
  return a;
}

template <class T>
void write_text_table(const TextEncoder<T>& enc, const std::filesystem::path& path) {
  io::json prompts = io::json::array();
  io::json classes = io::json::array();
  for (const auto& [key, v] : enc.table) {
    prompts.push_back(key);
    auto it = enc.table_class.find(key);
    classes.push_back(it == enc.table_class.end() ? "" : it->second);
  }
  io::BinaryWriter out(path);
  out.write_header(kTextTableMagic, kTextTableVersion, {{"d_t", enc.dim()}, {"prompts", prompts}, {"classes", classes}});
  for (const auto& [key, v] : enc.table) {
    out.write_vector(v);
  }
  out.close();
}

// Table of unit-norm embeddings, written by the exporter.
template <class T>
TextEncoder<T> read_text_table(const std::filesystem::path& path) {
  io::BinaryReader in(path);
  const io::json header = in.read_header(kTextTableMagic, kTextTableVersion);
  const int d_t = io::header_get<int>(header, "d_t", path);
  const auto prompts = io::header_get<std::vector<std::string>>(header, "prompts", path);
  std::vector<std::string> classes = header.value("classes", std::vector<std::string>{});
  TextEncoder<T> enc;
  enc.mode = TextEncoder<T>::Mode::precomputed;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    Vec<T> v = in.read_vector<T>(d_t, "text embedding");
    if (std::abs(static_cast<double>(v.norm()) - 1.0) > 1e-4) {
      throw DataError("'" + path.string() + "': embedding '" + prompts[i] + "' is not unit-norm");
    }
    enc.table[prompts[i]] = std::move(v);
    if (i < classes.size() && !classes[i].empty()) {
      enc.table_class[prompts[i]] = classes[i];
    }
  }
  return enc;
}

} // namespace entroad
