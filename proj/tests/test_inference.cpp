#include "oracles.hpp"
#include "support.hpp"

#include "entroad/inference.hpp"

#include <gtest/gtest.h>

using namespace entroad;
using namespace testing_support;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct OracleOut {
  std::vector<double> map;
  double score = 0.0;
  double gate = 0.0;
};

// Straight-line f64 evaluation of the inference path. Stage-1 quantities
// (evidence, retrieval score, entropy) and the toy text encoder come from their
// own modules, which carry their own oracles.
OracleOut oracle_infer(const FeatureBundle& b, const Model<double>& m) {
  const ModelConfig& c = m.config;
  const MatD r = project_patches<double>(b, m.projection, m.bank.layer);
  const VecD p = patch_evidence<double>(r, m.bank);
  const double a_ret = image_retrieval_forward<double>(r, m.bank.keys_image, m.bank.values_image).score;
  const VecD e = compute_entropy_map(b, c.layers).normalized;
  const MatD z = b.layer_features(c.routing_layer()).cast<double>();
  const Eigen::Index n = z.rows();

  std::vector<double> wa(static_cast<std::size_t>(n)), wn(static_cast<std::size_t>(n));
  double sa = 0.0, sn = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    wa[static_cast<std::size_t>(i)] = std::exp(p[i] * e[i] / c.routing.temperature);
    wn[static_cast<std::size_t>(i)] = std::exp((1 - p[i]) * (1 - e[i]) / c.routing.temperature);
    sa += wa[static_cast<std::size_t>(i)];
    sn += wn[static_cast<std::size_t>(i)];
  }
  VecD ta = VecD::Zero(z.cols()), tn = VecD::Zero(z.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    ta += wa[static_cast<std::size_t>(i)] / sa * z.row(i).transpose();
    tn += wn[static_cast<std::size_t>(i)] / sn * z.row(i).transpose();
  }
  const double mean = e.mean();
  double var = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    var += (e[i] - mean) * (e[i] - mean);
  }
  const double gate = sigmoid((p.maxCoeff() - c.routing.tau) * (c.routing.k0 + c.routing.k1 * std::sqrt(var / n)));
  ta *= gate;

  std::vector<std::vector<double>> branch_maps;
  for (int br = 0; br < 2; ++br) {
    const BranchAdapter<double>& ad = m.adapter(br);
    VecD in(2 * z.cols());
    in << tn, ta;
    VecD hidden = ad.w1.transpose() * in + ad.b1;
    for (Eigen::Index k = 0; k < hidden.size(); ++k) {
      hidden[k] = std::max(hidden[k], 0.0);
    }
    const VecD bias = ad.w2.transpose() * hidden + ad.b2;
    VecD u[2];
    for (int cls = 0; cls < 2; ++cls) {
      const Eigen::Index L = m.learner.context.rows();
      MatD prompt(L + 1, m.learner.context.cols());
      for (Eigen::Index row = 0; row < L; ++row) {
        prompt.row(row) = m.learner.context.row(row) + bias.transpose();
      }
      prompt.row(L) = (cls == 0 ? m.learner.class_normal : m.learner.class_anomaly).transpose();
      u[cls] = encode_prompt<double>(m.text, prompt);
      u[cls] /= u[cls].norm();
    }
    VecD acc = VecD::Zero(n);
    for (int layer : c.map_layers) {
      const MatD zl = b.layer_features(layer).cast<double>() * m.align;
      for (Eigen::Index i = 0; i < n; ++i) {
        const VecD zi = zl.row(i).transpose() / zl.row(i).norm();
        acc[i] += sigmoid((zi.dot(u[1]) - zi.dot(u[0])) / c.logit_temperature);
      }
    }
    acc /= static_cast<double>(c.map_layers.size());
    const VecD up = ResizePlan(b.h_p, b.w_p, b.H, b.W).apply<double>(acc);
    std::vector<double> sm = oracles::gaussian_conv2d(std::vector<double>(up.data(), up.data() + up.size()), b.H, b.W,
                                                      c.inference.smoothing_sigma);
    for (double& v : sm) {
      v = std::clamp(v, 0.0, 1.0);
    }
    branch_maps.push_back(sm);
  }
  const auto [al, be] = c.inference.fusion_weights(c.inference.prior);
  OracleOut out;
  out.gate = gate;
  for (std::size_t i = 0; i < branch_maps[0].size(); ++i) {
    out.map.push_back((al * branch_maps[0][i] + be * branch_maps[1][i]) / (al + be + 1e-8));
  }
  std::vector<double> sorted = out.map;
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(c.inference.top_fraction * sorted.size())));
  double a_loc = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    a_loc += sorted[i];
  }
  a_loc /= static_cast<double>(k);
  out.score = (1 - c.inference.score_k) * a_loc + c.inference.score_k * a_ret;
  return out;
}

} // namespace

TEST(Inference, FuseExamples) {
  std::mt19937_64 rng(80);
  const VecD a = random_vec(rng, 10, 0, 1), b = random_vec(rng, 10, 0, 1);
  EXPECT_LT((fuse_maps<double>(a, b, 1.0, 1.0) - 0.5 * (a + b)).cwiseAbs().maxCoeff(), 1e-7);
  EXPECT_LT((fuse_maps<double>(a, b, 0.7, 0.3) - (0.7 * a + 0.3 * b)).cwiseAbs().maxCoeff(), 1e-7);
  // Scale invariance holds up to the eps in the normalizer.
  EXPECT_LT((fuse_maps<double>(a, b, 7.0, 3.0) - fuse_maps<double>(a, b, 0.7, 0.3)).cwiseAbs().maxCoeff(), 1e-7);
  EXPECT_LT((fuse_maps<double>(a, b, 7.0, 3.0) - (7.0 * a + 3.0 * b) / (10.0 + 1e-8)).cwiseAbs().maxCoeff(), 1e-12);
  const VecD f = fuse_maps<double>(a, b, 0.7, 0.3);
  for (Eigen::Index i = 0; i < 10; ++i) {
    EXPECT_GE(f[i], std::min(a[i], b[i]) - 1e-7);
    EXPECT_LE(f[i], std::max(a[i], b[i]) + 1e-7);
  }
  EXPECT_THROW(fuse_maps<double>(a, b, 0.0, 0.0), UsageError);
  EXPECT_THROW(fuse_maps<double>(a, b, -1.0, 2.0), UsageError);
}

TEST(Inference, SmoothingPreservesConstants) {
  const VecD c = VecD::Constant(20 * 30, 0.37);
  EXPECT_LT((gaussian_smooth<double>(c, 20, 30, 4.0) - c).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Inference, SmoothedImpulseSumsToOne) {
  VecD m = VecD::Zero(64 * 64);
  m[32 * 64 + 32] = 1.0;
  EXPECT_NEAR(gaussian_smooth<double>(m, 64, 64, 4.0).sum(), 1.0, 1e-4);
}

TEST(Inference, SmoothingMatchesBruteForceConvolution) {
  std::mt19937_64 rng(81);
  for (double sigma : {1.0, 4.0, 10.5}) {
    const VecD m = random_vec(rng, 32 * 32, 0, 1);
    const VecD got = gaussian_smooth<double>(m, 32, 32, sigma);
    const auto ref = oracles::gaussian_conv2d(std::vector<double>(m.data(), m.data() + m.size()), 32, 32, sigma);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      ASSERT_NEAR(got[static_cast<Eigen::Index>(i)], ref[i], 1e-5) << "sigma " << sigma;
    }
  }
  EXPECT_THROW(gaussian_smooth<double>(VecD::Zero(4), 2, 2, 0.0), UsageError);
}

TEST(Inference, TopkExamples) {
  EXPECT_DOUBLE_EQ(topk_score<double>(VecD::Constant(100, 0.4)), 0.4);
  VecD big = VecD::Zero(518 * 518);
  big[1234] = 1.0;
  EXPECT_NEAR(topk_score<double>(big), 1.0 / 2683.0, 1e-15);
  EXPECT_NEAR(topk_score<double>(big), 3.727e-4, 1e-7);
  EXPECT_THROW(topk_score<double>(big, 0.0), UsageError);
}

TEST(Inference, TopkMatchesSortOracleAndIsMonotone) {
  std::mt19937_64 rng(82);
  for (int t = 0; t < 20; ++t) {
    VecD m = random_vec(rng, 2500, 0, 1);
    std::vector<double> s(m.data(), m.data() + m.size());
    std::sort(s.begin(), s.end(), std::greater<double>());
    double ref = 0.0;
    for (int i = 0; i < 25; ++i) {
      ref += s[static_cast<std::size_t>(i)];
    }
    const double got = topk_score<double>(m);
    EXPECT_NEAR(got, ref / 25.0, 1e-9);
    m[static_cast<Eigen::Index>(rng() % 2500)] += 0.5;
    EXPECT_GE(topk_score<double>(m), got);
  }
}

TEST(Inference, ImageScoreExamples) {
  EXPECT_DOUBLE_EQ(image_score(0.3, 0.3), 0.3);
  EXPECT_NEAR(image_score(0.2, 0.8, 0.7), 0.62, 1e-12);
  EXPECT_EQ(image_score(0.2, 0.8, 0.0), 0.2);
  EXPECT_THROW(image_score(0.2, 0.8, 1.5), UsageError);
}

class InferenceModel : public ::testing::Test {
protected:
  static void SetUpTestSuite() {
    SyntheticConfig s = small_synthetic(16, 2, 5);
    bundles_ = new std::vector<FeatureBundle>(gen_synthetic(s));
    TrainConfig cfg = small_train_config(8, 5);
    cfg.epochs_stage2 = 1;
    model_ = new Model<double>(train<double>(*bundles_, cfg).model);
    perturb_adapters(*model_, 9, 0.5);
  }
  static void TearDownTestSuite() {
    delete bundles_;
    delete model_;
  }
  static std::vector<FeatureBundle>* bundles_;
  static Model<double>* model_;
};

std::vector<FeatureBundle>* InferenceModel::bundles_ = nullptr;
Model<double>* InferenceModel::model_ = nullptr;

TEST_F(InferenceModel, MatchesStraightLineOracle) {
  for (const auto& b : *bundles_) {
    const AnomalyResult r = infer<double>(b, *model_);
    const OracleOut o = oracle_infer(b, *model_);
    ASSERT_EQ(static_cast<std::size_t>(r.map.size()), o.map.size());
    for (std::size_t i = 0; i < o.map.size(); ++i) {
      ASSERT_NEAR(r.map[static_cast<Eigen::Index>(i)], o.map[i], 1e-5) << b.image_id;
    }
    EXPECT_NEAR(r.score, o.score, 1e-5);
    EXPECT_NEAR(r.gate, o.gate, 1e-9);
    EXPECT_GE(r.score, 0.0);
    EXPECT_LE(r.score, 1.0);
  }
}

TEST_F(InferenceModel, DeterministicAndPriorSwapOnlyTouchesFusion) {
  const auto& b = bundles_->front();
  const AnomalyResult s = infer<double>(b, *model_, DomainPrior::structured);
  const AnomalyResult again = infer<double>(b, *model_, DomainPrior::structured);
  EXPECT_TRUE(s.map == again.map);
  EXPECT_EQ(s.score, again.score);
  const AnomalyResult d = infer<double>(b, *model_, DomainPrior::diffuse);
  EXPECT_TRUE(s.map_a == d.map_a);
  EXPECT_TRUE(s.map_b == d.map_b);
  EXPECT_EQ(s.gate, d.gate);
  EXPECT_EQ(s.a_ret, d.a_ret);
  EXPECT_LT((d.map - fuse_maps<double>(s.map_a, s.map_b, 0.3, 0.7)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST_F(InferenceModel, SinglePrecisionTracksDouble) {
  const Model<float> mf = model_->cast<float>();
  for (std::size_t i = 0; i < 4; ++i) {
    const AnomalyResult a = infer<double>((*bundles_)[i], *model_);
    const AnomalyResult f = infer<float>((*bundles_)[i], mf);
    EXPECT_LT((a.map - f.map).cwiseAbs().maxCoeff(), 1e-3);
    EXPECT_NEAR(a.score, f.score, 1e-3);
  }
}
