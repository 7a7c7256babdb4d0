#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "calibrag/forecaster.hpp"

namespace calibrag {

/// Probability clamp applied before taking logs.
inline constexpr double kProbabilityClamp = 1e-12;

template <typename Scalar>
struct LabeledBatch {
  Mat<Scalar> features;  // n x h
  Vec<Scalar> temps;     // n
  Vec<Scalar> labels;    // n, soft labels in [0, 1]

  Eigen::Index size() const { return features.rows(); }
};

using TrainingSet = LabeledBatch<double>;

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 4;
  long max_steps = 10000;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  long warmup_steps = 500;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  long log_every = 100;
  HeadKind head = HeadKind::binary;
  FourierSpec fourier;

  void validate() const;
  /// Learning rate for 0-based `step`: linear warmup, then linear decay to 0.
  double scheduled_rate(long step) const;
};

struct TrainReport {
  double final_loss = 0.0;
  std::vector<std::pair<long, double>> loss_curve;
  long steps_run = 0;
};

struct TrainResult {
  ForecasterParams<double> params;
  TrainReport report;
};

namespace detail {

template <typename Scalar>
void check_batch(const ForecasterParams<Scalar>& params, const LabeledBatch<Scalar>& batch) {
  if (batch.size() == 0) throw ContractViolation("batch is empty");
  if (batch.features.cols() != params.h()) {
    throw ContractViolation("batch feature width " + std::to_string(batch.features.cols()) +
                            " does not match forecaster h=" + std::to_string(params.h()));
  }
  if (batch.temps.size() != batch.size() || batch.labels.size() != batch.size()) {
    throw ContractViolation("batch columns have different lengths");
  }
  for (Eigen::Index i = 0; i < batch.size(); ++i) {
    const Scalar b = batch.labels[i];
    if (!(b >= Scalar(0) && b <= Scalar(1))) {
      throw ContractViolation("soft label outside [0,1] at row " + std::to_string(i));
    }
  }
}

// Row i: PE(t_i).
template <typename Scalar>
Mat<Scalar> encode_all(const FourierSpec& spec, const Vec<Scalar>& temps) {
  Mat<Scalar> pe(temps.size(), spec.dim());
  for (Eigen::Index i = 0; i < temps.size(); ++i) pe.row(i) = encode_temperature(spec, temps[i]).transpose();
  return pe;
}

template <typename Scalar>
int histogram_bin(Scalar b, int classes) {
  return static_cast<int>(std::lround(static_cast<double>(b) * (classes - 1)));
}

// Forward pass shared by loss and grad. `residual` holds d(loss_i)/d(logits_i)
// before the 1/n batch mean.
template <typename Scalar>
struct Forward {
  Mat<Scalar> pe;        // n x 2N
  Mat<Scalar> inputs;    // n x h, feat + W_p PE
  Mat<Scalar> residual;  // n x C
  Scalar loss = 0;
};

template <typename Scalar>
Forward<Scalar> forward(const ForecasterParams<Scalar>& params, const LabeledBatch<Scalar>& batch) {
  using std::exp;
  using std::log;
  check_batch(params, batch);
  const auto n = batch.size();
  Forward<Scalar> fw;
  fw.pe = encode_all(params.fourier, batch.temps);
  fw.inputs = batch.features + fw.pe * params.w_p.transpose();
  Mat<Scalar> z = fw.inputs * params.head_w.transpose();
  z.rowwise() += params.head_b.transpose();

  const Scalar lo = Scalar(kProbabilityClamp);
  const Scalar hi = Scalar(1) - lo;
  Scalar total = 0;
  fw.residual.resize(n, params.classes());
  if (params.kind == HeadKind::binary) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const Scalar f = sigmoid(z(i, 0));
      const Scalar fc = std::clamp(f, lo, hi);
      const Scalar b = batch.labels[i];
      total -= b * log(fc) + (Scalar(1) - b) * log(Scalar(1) - fc);
      fw.residual(i, 0) = f - b;
    }
  } else {
    const int c = params.classes();
    for (Eigen::Index i = 0; i < n; ++i) {
      const Scalar m = z.row(i).maxCoeff();
      Vec<Scalar> e = (z.row(i).array() - m).exp().matrix().transpose();
      const Scalar s = e.sum();
      const int target = histogram_bin(batch.labels[i], c);
      total -= (z(i, target) - m) - log(s);
      fw.residual.row(i) = (e / s).transpose();
      fw.residual(i, target) -= Scalar(1);
    }
  }
  fw.loss = total / Scalar(n);
  return fw;
}

}  // namespace detail

/// Mean log score over the batch: binary cross-entropy against soft labels,
/// or categorical cross-entropy against the nearest histogram bin.
template <typename Scalar>
Scalar loss(const ForecasterParams<Scalar>& params, const LabeledBatch<Scalar>& batch) {
  return detail::forward(params, batch).loss;
}

/// Exact gradient of `loss`, shaped like the parameters.
template <typename Scalar>
ForecasterParams<Scalar> grad(const ForecasterParams<Scalar>& params, const LabeledBatch<Scalar>& batch) {
  const auto fw = detail::forward(params, batch);
  const Mat<Scalar> dz = fw.residual / Scalar(batch.size());
  ForecasterParams<Scalar> g;
  g.kind = params.kind;
  g.fourier = params.fourier;
  g.head_w = dz.transpose() * fw.inputs;
  g.head_b = dz.colwise().sum().transpose();
  const Mat<Scalar> du = dz * params.head_w;  // n x h
  g.w_p = du.transpose() * fw.pe;
  return g;
}

/// Fits a forecaster from scratch with AdamW. Deterministic for a fixed seed.
/// Throws TrainingDiverged if a batch loss becomes non-finite.
TrainResult train(const TrainingSet& data, const TrainConfig& cfg);

/// {"final_loss", "steps_run", "loss_curve": [[step, loss], ...]}
std::string train_report_json(const TrainReport& report);
void save_train_report(const std::filesystem::path& path, const TrainReport& report);

}  // namespace calibrag
