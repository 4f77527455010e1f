#pragma once

#include "entroad/bundle.hpp"
#include "entroad/error.hpp"
#include "entroad/inference.hpp"
#include "entroad/parallel.hpp"

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

namespace entroad {

namespace detail {

inline void check_scores(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) {
    throw UsageError("scores and labels differ in length");
  }
}

// Indices sorted by descending score.
inline std::vector<std::size_t> rank_desc(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

} // namespace detail

// P(score+ > score-) + 0.5 P(score+ == score-).
inline double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  detail::check_scores(scores, labels);
  const auto idx = detail::rank_desc(scores);
  double pos = 0.0, neg = 0.0;
  for (auto l : labels) {
    (l != 0 ? pos : neg) += 1.0;
  }
  if (pos == 0.0 || neg == 0.0) {
    throw DataError("AUROC needs both classes");
  }
  // Walk tie groups from the top; each positive beats all negatives ranked below.
  double wins = 0.0;
  double neg_above = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    double gp = 0.0, gn = 0.0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] != 0 ? gp : gn) += 1.0;
      ++j;
    }
    wins += gp * (neg - neg_above - gn) + 0.5 * gp * gn;
    neg_above += gn;
    i = j;
  }
  return wins / (pos * neg);
}

// Mean over positives of the precision at that positive's score, tied scores
// forming one threshold.
inline double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  detail::check_scores(scores, labels);
  const auto idx = detail::rank_desc(scores);
  double total_pos = 0.0;
  for (auto l : labels) {
    total_pos += l != 0 ? 1.0 : 0.0;
  }
  if (total_pos == 0.0) {
    throw DataError("average precision needs at least one positive");
  }
  double tp = 0.0, seen = 0.0, ap = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    double gp = 0.0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      gp += labels[idx[j]] != 0 ? 1.0 : 0.0;
      ++j;
    }
    tp += gp;
    seen += static_cast<double>(j - i);
    ap += gp * (tp / seen);
    i = j;
  }
  return ap / total_pos;
}

// 4-connected component labels of a binary mask; 0 = background, regions 1..n.
inline std::vector<int> label_regions(std::span<const std::uint8_t> mask, int h, int w, int* count = nullptr) {
  std::vector<int> lab(mask.size(), 0);
  std::vector<int> stack;
  int next = 0;
  for (int start = 0; start < h * w; ++start) {
    if (mask[static_cast<std::size_t>(start)] == 0 || lab[static_cast<std::size_t>(start)] != 0) {
      continue;
    }
    ++next;
    lab[static_cast<std::size_t>(start)] = next;
    stack.push_back(start);
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int y = p / w, x = p % w;
      const int nbr[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& n : nbr) {
        if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) {
          continue;
        }
        const auto q = static_cast<std::size_t>(n[0] * w + n[1]);
        if (mask[q] != 0 && lab[q] == 0) {
          lab[q] = next;
          stack.push_back(static_cast<int>(q));
        }
      }
    }
  }
  if (count != nullptr) {
    *count = next;
  }
  return lab;
}

struct AuproInput {
  std::span<const double> map;
  std::span<const std::uint8_t> mask;
  int h = 0;
  int w = 0;
};

// Area under the per-region-overlap vs. false-positive-rate curve up to
// fpr_limit, normalized by fpr_limit. Thresholds are quantile-spaced samples
// of the pooled map values.
inline double aupro(const std::vector<AuproInput>& items, double fpr_limit = 0.3, int n_thresholds = 200,
                    int* region_count = nullptr) {
  if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) {
    throw UsageError("fpr_limit must lie in (0,1]");
  }
  if (n_thresholds < 2) {
    throw UsageError("need at least two thresholds");
  }
  std::vector<std::vector<int>> labels(items.size());
  std::vector<int> counts(items.size(), 0);
  parallel_for(items.size(), [&](std::size_t i) {
    const auto& it = items[i];
    if (it.map.size() != it.mask.size() || it.map.size() != static_cast<std::size_t>(it.h) * it.w) {
      throw UsageError("map and mask geometry differ");
    }
    labels[i] = label_regions(it.mask, it.h, it.w, &counts[i]);
  });

  std::vector<double> pooled;
  for (const auto& it : items) {
    pooled.insert(pooled.end(), it.map.begin(), it.map.end());
  }
  std::sort(pooled.begin(), pooled.end());
  std::vector<double> thr;
  for (int k = 0; k < n_thresholds; ++k) {
    const double pos = static_cast<double>(k) * static_cast<double>(pooled.size() - 1) / (n_thresholds - 1);
    thr.push_back(pooled[static_cast<std::size_t>(std::llround(pos))]);
  }
  thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
  const std::size_t nt = thr.size();

  // Histogram each pixel by the number of thresholds it reaches, so a pixel
  // counts as detected at threshold t exactly when its bin exceeds t's index.
  std::vector<double> normal_hist(nt + 1, 0.0);
  double normal_total = 0.0;
  std::vector<std::vector<double>> region_hist;
  std::vector<double> region_size;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::size_t base = region_hist.size();
    region_hist.resize(base + static_cast<std::size_t>(counts[i]), std::vector<double>(nt + 1, 0.0));
    region_size.resize(base + static_cast<std::size_t>(counts[i]), 0.0);
    for (std::size_t p = 0; p < items[i].map.size(); ++p) {
      const auto bin = static_cast<std::size_t>(std::upper_bound(thr.begin(), thr.end(), items[i].map[p]) - thr.begin());
      const int r = labels[i][p];
      if (r == 0) {
        normal_hist[bin] += 1.0;
        normal_total += 1.0;
      } else {
        region_hist[base + static_cast<std::size_t>(r - 1)][bin] += 1.0;
        region_size[base + static_cast<std::size_t>(r - 1)] += 1.0;
      }
    }
  }
  if (region_hist.empty()) {
    throw DataError("AUPRO needs at least one anomalous pixel");
  }
  if (normal_total == 0.0) {
    throw DataError("AUPRO needs at least one normal pixel");
  }
  if (region_count != nullptr) {
    *region_count = static_cast<int>(region_hist.size());
  }

  // Walk thresholds from the highest; pixels in bins > t pass threshold thr[t].
  std::vector<double> fpr{0.0}, pro{0.0};
  double normal_pass = 0.0;
  std::vector<double> region_pass(region_hist.size(), 0.0);
  for (std::size_t t = nt; t-- > 0;) {
    normal_pass += normal_hist[t + 1];
    double overlap = 0.0;
    for (std::size_t r = 0; r < region_hist.size(); ++r) {
      region_pass[r] += region_hist[r][t + 1];
      overlap += region_pass[r] / region_size[r];
    }
    fpr.push_back(normal_pass / normal_total);
    pro.push_back(overlap / static_cast<double>(region_hist.size()));
  }

  double area = 0.0;
  for (std::size_t k = 1; k < fpr.size(); ++k) {
    const double x0 = fpr[k - 1], x1 = fpr[k];
    if (x0 >= fpr_limit) {
      break;
    }
    if (x1 <= fpr_limit) {
      area += 0.5 * (x1 - x0) * (pro[k - 1] + pro[k]);
    } else {
      const double y_lim = pro[k - 1] + (pro[k] - pro[k - 1]) * (fpr_limit - x0) / (x1 - x0);
      area += 0.5 * (fpr_limit - x0) * (pro[k - 1] + y_lim);
    }
  }
  return area / fpr_limit;
}

struct EvalReport {
  double image_auroc = 0.0;
  double image_ap = 0.0;
  double pixel_auroc = 0.0;
  double aupro = 0.0;
  std::size_t n_images = 0;
  std::size_t n_pixels = 0;
  int n_regions = 0;
};

struct EvalOptions {
  double fpr_limit = 0.3;
  int n_thresholds = 200;
};

// Pairs results with bundles by position.
inline EvalReport evaluate(const std::vector<AnomalyResult>& results, const std::vector<FeatureBundle>& bundles,
                           const EvalOptions& opt = {}) {
  if (results.size() != bundles.size()) {
    throw UsageError("result and bundle counts differ");
  }
  EvalReport rep;
  rep.n_images = results.size();
  std::vector<double> img_scores;
  std::vector<std::uint8_t> img_labels;
  std::vector<double> px_scores;
  std::vector<std::uint8_t> px_labels;
  std::vector<std::vector<std::uint8_t>> masks(bundles.size());
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    const auto& b = bundles[i];
    const auto& r = results[i];
    if (!b.label) {
      throw DataError("bundle " + b.image_id + " has no label");
    }
    if (r.map.size() != static_cast<Eigen::Index>(b.H) * b.W) {
      throw DataError("prediction for " + b.image_id + " has the wrong size");
    }
    if (b.mask) {
      masks[i] = *b.mask;
    } else if (*b.label == 0) {
      masks[i].assign(static_cast<std::size_t>(b.H) * b.W, 0);
    } else {
      throw DataError("anomalous bundle " + b.image_id + " has no mask");
    }
    img_scores.push_back(r.score);
    img_labels.push_back(static_cast<std::uint8_t>(*b.label));
    px_scores.insert(px_scores.end(), r.map.data(), r.map.data() + r.map.size());
    px_labels.insert(px_labels.end(), masks[i].begin(), masks[i].end());
  }
  rep.n_pixels = px_scores.size();
  rep.image_auroc = auroc(img_scores, img_labels);
  rep.image_ap = average_precision(img_scores, img_labels);
  rep.pixel_auroc = auroc(px_scores, px_labels);
  std::vector<AuproInput> items;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& m = results[i].map;
    items.push_back({std::span<const double>(m.data(), static_cast<std::size_t>(m.size())), masks[i], bundles[i].H,
                     bundles[i].W});
  }
  rep.aupro = aupro(items, opt.fpr_limit, opt.n_thresholds, &rep.n_regions);
  return rep;
}

} // namespace entroad
