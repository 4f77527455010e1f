#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace entroad {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using VecF = Vec<float>;
using VecD = Vec<double>;

// The "small constant for numerical stability" used throughout.
inline constexpr double kEps = 1e-8;

template <class T>
T sigmoid(T x) {
  if (x >= T(0)) {
    return T(1) / (T(1) + std::exp(-x));
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Numerically stable softmax of a vector.
template <class T>
Vec<T> softmax(const Vec<T>& logits) {
  Vec<T> out(logits.size());
  if (logits.size() == 0) {
    return out;
  }
  const T hi = logits.maxCoeff();
  T total = T(0);
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - hi);
    total += out[i];
  }
  return out / total;
}

// Divides every row by its L2 norm. Zero rows stay zero.
template <class T>
Mat<T> l2_normalize_rows(const Mat<T>& m) {
  Mat<T> out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const T n = out.row(i).norm();
    if (n > T(0)) {
      out.row(i) /= n;
    }
  }
  return out;
}

template <class T>
Vec<T> l2_normalize(const Vec<T>& v) {
  const T n = v.norm();
  return n > T(0) ? Vec<T>(v / n) : v;
}

// Adjoint of y -> y / |y| evaluated at y with unit output u.
template <class T>
Vec<T> l2_normalize_backward(const Vec<T>& unit, T norm, const Vec<T>& grad_unit) {
  if (norm <= T(0)) {
    return Vec<T>::Zero(unit.size());
  }
  return (grad_unit - unit * unit.dot(grad_unit)) / norm;
}

template <class To, class From>
Mat<To> cast_mat(const Mat<From>& m) {
  return m.template cast<To>();
}

template <class To, class From>
Vec<To> cast_vec(const Vec<From>& v) {
  return v.template cast<To>();
}

// Separable bilinear resize of a row-major src_h x src_w grid to dst_h x dst_w,
// half-pixel centers with edge clamping (align_corners = false).
class ResizePlan {
public:
  ResizePlan() = default;
  ResizePlan(int src_h, int src_w, int dst_h, int dst_w)
      : src_h_(src_h), src_w_(src_w), dst_h_(dst_h), dst_w_(dst_w) {
    build_axis(src_h, dst_h, y0_, y1_, wy_);
    build_axis(src_w, dst_w, x0_, x1_, wx_);
  }

  int src_h() const { return src_h_; }
  int src_w() const { return src_w_; }
  int dst_h() const { return dst_h_; }
  int dst_w() const { return dst_w_; }

  template <class T>
  Vec<T> apply(const Vec<T>& src) const {
    // Interpolate along x for every source row, then along y.
    Mat<T> tmp(src_h_, dst_w_);
    for (int r = 0; r < src_h_; ++r) {
      for (int x = 0; x < dst_w_; ++x) {
        const T w = T(wx_[x]);
        tmp(r, x) = (T(1) - w) * src[r * src_w_ + x0_[x]] + w * src[r * src_w_ + x1_[x]];
      }
    }
    Vec<T> out(static_cast<Eigen::Index>(dst_h_) * dst_w_);
    for (int y = 0; y < dst_h_; ++y) {
      const T w = T(wy_[y]);
      for (int x = 0; x < dst_w_; ++x) {
        out[y * dst_w_ + x] = (T(1) - w) * tmp(y0_[y], x) + w * tmp(y1_[y], x);
      }
    }
    return out;
  }

  template <class T>
  Vec<T> adjoint(const Vec<T>& grad) const {
    Mat<T> tmp = Mat<T>::Zero(src_h_, dst_w_);
    for (int y = 0; y < dst_h_; ++y) {
      const T w = T(wy_[y]);
      for (int x = 0; x < dst_w_; ++x) {
        const T g = grad[y * dst_w_ + x];
        tmp(y0_[y], x) += (T(1) - w) * g;
        tmp(y1_[y], x) += w * g;
      }
    }
    Vec<T> out = Vec<T>::Zero(static_cast<Eigen::Index>(src_h_) * src_w_);
    for (int r = 0; r < src_h_; ++r) {
      for (int x = 0; x < dst_w_; ++x) {
        const T w = T(wx_[x]);
        out[r * src_w_ + x0_[x]] += (T(1) - w) * tmp(r, x);
        out[r * src_w_ + x1_[x]] += w * tmp(r, x);
      }
    }
    return out;
  }

private:
  static void build_axis(int src, int dst, std::vector<int>& lo, std::vector<int>& hi,
                         std::vector<double>& frac) {
    lo.resize(dst);
    hi.resize(dst);
    frac.resize(dst);
    const double scale = static_cast<double>(src) / static_cast<double>(dst);
    for (int i = 0; i < dst; ++i) {
      double s = (i + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(src - 1));
      const int a = static_cast<int>(std::floor(s));
      const int b = std::min(a + 1, src - 1);
      lo[i] = a;
      hi[i] = b;
      frac[i] = (b == a) ? 0.0 : s - a;
    }
  }

  int src_h_ = 0, src_w_ = 0, dst_h_ = 0, dst_w_ = 0;
  std::vector<int> y0_, y1_, x0_, x1_;
  std::vector<double> wy_, wx_;
};

} // namespace entroad
