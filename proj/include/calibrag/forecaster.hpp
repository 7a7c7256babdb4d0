#pragma once

// Temperature-conditioned forecaster: a linear head over
// feat + W_p * PE(t), with a sigmoid (binary) or softmax (histogram) output.

#include <cmath>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "calibrag/errors.hpp"

namespace calibrag {

/// Decoding temperatures averaged over when no user temperature is known.
inline const std::vector<double> kDefaultTemperatures = {1.0, 1.1, 1.2, 1.3, 1.4, 1.5};

/// Histogram bins 0..10 for the multi head.
inline constexpr int kHistogramBins = 11;

enum class HeadKind { binary, multi };

struct FourierSpec {
  int n = 6;
  double t_min = 1.0;
  double t_max = 2.0;

  int dim() const { return 2 * n; }
  void validate() const {
    if (n < 1) throw ContractViolation("Fourier frequency count must be >= 1");
    if (!(t_max > t_min)) throw ContractViolation("Fourier range requires t_max > t_min");
  }
  /// omega_k = 2^k * 2pi / (t_max - t_min), k = 1..n.
  double omega(int k) const { return std::ldexp(2.0 * std::numbers::pi / (t_max - t_min), k); }
};

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

// Binary mode stores the head as a 1 x h matrix and a length-1 bias so both
// heads share one code path.
template <typename Scalar>
struct ForecasterParams {
  HeadKind kind = HeadKind::binary;
  FourierSpec fourier;
  Mat<Scalar> w_p;     // h x 2N
  Mat<Scalar> head_w;  // C x h (C = 1 for binary)
  Vec<Scalar> head_b;  // C

  static ForecasterParams zeros(HeadKind kind, int h, FourierSpec fourier = {},
                                int classes = kHistogramBins) {
    fourier.validate();
    if (h < 1) throw ContractViolation("feature dimension must be positive");
    const int c = kind == HeadKind::binary ? 1 : classes;
    if (c < 2 && kind == HeadKind::multi) throw ContractViolation("multi head needs >= 2 classes");
    ForecasterParams p;
    p.kind = kind;
    p.fourier = fourier;
    p.w_p = Mat<Scalar>::Zero(h, fourier.dim());
    p.head_w = Mat<Scalar>::Zero(c, h);
    p.head_b = Vec<Scalar>::Zero(c);
    return p;
  }

  int h() const { return static_cast<int>(head_w.cols()); }
  int classes() const { return static_cast<int>(head_w.rows()); }

  void validate() const {
    fourier.validate();
    if (w_p.rows() != head_w.cols() || w_p.cols() != fourier.dim() || head_b.size() != head_w.rows()) {
      throw ContractViolation("forecaster parameter shapes are inconsistent");
    }
    if (kind == HeadKind::binary && head_w.rows() != 1) {
      throw ContractViolation("binary head must have exactly one output row");
    }
    if (kind == HeadKind::multi && head_w.rows() < 2) {
      throw ContractViolation("multi head must have at least two classes");
    }
    if (!w_p.allFinite() || !head_w.allFinite() || !head_b.allFinite()) {
      throw ContractViolation("forecaster parameters contain non-finite values");
    }
  }

  template <typename Other>
  ForecasterParams<Other> cast() const {
    ForecasterParams<Other> p;
    p.kind = kind;
    p.fourier = fourier;
    p.w_p = w_p.template cast<Other>();
    p.head_w = head_w.template cast<Other>();
    p.head_b = head_b.template cast<Other>();
    return p;
  }
};

/// [sin(w_1 t), cos(w_1 t), ..., sin(w_N t), cos(w_N t)]. Total in t.
template <typename Scalar>
Vec<Scalar> encode_temperature(const FourierSpec& spec, Scalar t) {
  Vec<Scalar> pe(spec.dim());
  for (int k = 1; k <= spec.n; ++k) {
    const Scalar arg = static_cast<Scalar>(spec.omega(k)) * t;
    pe[2 * (k - 1)] = std::sin(arg);
    pe[2 * (k - 1) + 1] = std::cos(arg);
  }
  return pe;
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar, typename Derived>
void check_feature_dim(const ForecasterParams<Scalar>& params, const Eigen::MatrixBase<Derived>& feat) {
  if (feat.size() != params.h()) {
    throw ContractViolation("feature length " + std::to_string(feat.size()) +
                            " does not match forecaster h=" + std::to_string(params.h()));
  }
}

/// Head input feat + W_p * PE(t).
template <typename Scalar, typename Derived>
Vec<Scalar> conditioned_features(const ForecasterParams<Scalar>& params,
                                 const Eigen::MatrixBase<Derived>& feat, Scalar t) {
  check_feature_dim(params, feat);
  return feat.template cast<Scalar>() + params.w_p * encode_temperature(params.fourier, t);
}

/// Pre-activation outputs W * (feat + W_p PE(t)) + b.
template <typename Scalar, typename Derived>
Vec<Scalar> logits(const ForecasterParams<Scalar>& params, const Eigen::MatrixBase<Derived>& feat, Scalar t) {
  return params.head_w * conditioned_features(params, feat, t) + params.head_b;
}

template <typename Scalar>
Vec<Scalar> softmax(const Vec<Scalar>& z) {
  const Scalar m = z.maxCoeff();
  Vec<Scalar> e = (z.array() - m).exp().matrix();
  return e / e.sum();
}

/// Binary head confidence, strictly inside (0, 1) for finite logits.
template <typename Scalar, typename Derived>
Scalar predict(const ForecasterParams<Scalar>& params, const Eigen::MatrixBase<Derived>& feat, Scalar t) {
  if (params.kind != HeadKind::binary) throw ContractViolation("predict requires a binary head");
  return sigmoid(logits(params, feat, t)[0]);
}

/// Histogram over correctness bins 0..C-1.
template <typename Scalar, typename Derived>
Vec<Scalar> predict_multi(const ForecasterParams<Scalar>& params, const Eigen::MatrixBase<Derived>& feat,
                          Scalar t) {
  if (params.kind != HeadKind::multi) throw ContractViolation("predict_multi requires a multi head");
  return softmax<Scalar>(logits(params, feat, t));
}

/// Expected correctness fraction sum_c dist[c] * c / (C-1).
template <typename Derived>
typename Derived::Scalar scalar_confidence_multi(const Eigen::MatrixBase<Derived>& dist) {
  using Scalar = typename Derived::Scalar;
  const auto c = dist.size();
  if (c < 2) throw ContractViolation("histogram needs at least two bins");
  if ((dist.array() < Scalar(0)).any() || std::abs(static_cast<double>(dist.sum()) - 1.0) > 1e-6) {
    throw ContractViolation("histogram is not a probability vector");
  }
  Scalar acc = 0;
  for (Eigen::Index i = 0; i < c; ++i) acc += dist[i] * Scalar(i) / Scalar(c - 1);
  return acc;
}

/// Head-agnostic confidence at one temperature.
template <typename Scalar, typename Derived>
Scalar confidence(const ForecasterParams<Scalar>& params, const Eigen::MatrixBase<Derived>& feat, Scalar t) {
  if (params.kind == HeadKind::binary) return predict(params, feat, t);
  return scalar_confidence_multi(predict_multi(params, feat, t));
}

/// Mean confidence over `temps`.
template <typename Scalar, typename Derived>
Scalar marginal_confidence(const ForecasterParams<Scalar>& params, const Eigen::MatrixBase<Derived>& feat,
                           std::span<const double> temps) {
  if (temps.empty()) throw ContractViolation("marginal_confidence needs at least one temperature");
  Scalar sum = 0;
  for (double t : temps) sum += confidence(params, feat, static_cast<Scalar>(t));
  return sum / static_cast<Scalar>(temps.size());
}

// Model file: JSON with 17-significant-digit floats so values round-trip exactly.
//   {"version": 1, "mode": "binary"|"multi", "h": int,
//    "fourier": {"n", "t_min", "t_max"},
//    "w_p": [[...] x h],                                   // h rows of 2N
//    "head": {"w": [...], "b": x}                          // binary
//          | {"w": [[...] x C], "b": [...], "classes": C}  // multi
//   }
std::string serialize_model(const ForecasterParams<double>& params);
ForecasterParams<double> deserialize_model(const std::string& text);
void save_model(const std::filesystem::path& path, const ForecasterParams<double>& params);
ForecasterParams<double> load_model(const std::filesystem::path& path);

}  // namespace calibrag
