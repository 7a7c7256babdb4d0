#include "calibrag/trainer.hpp"

#include <cstdio>
#include <fstream>
#include <numeric>

#include "calibrag/rng.hpp"
#include "json.hpp"

namespace calibrag {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ContractViolation("learning_rate must be > 0");
  if (batch_size < 1) throw ContractViolation("batch_size must be >= 1");
  if (max_steps < 1) throw ContractViolation("max_steps must be >= 1");
  if (!(grad_clip > 0.0)) throw ContractViolation("grad_clip must be > 0");
  if (warmup_steps < 0) throw ContractViolation("warmup_steps must be >= 0");
  if (weight_decay < 0.0) throw ContractViolation("weight_decay must be >= 0");
  if (log_every < 1) throw ContractViolation("log_every must be >= 1");
  fourier.validate();
}

double TrainConfig::scheduled_rate(long step) const {
  if (step < warmup_steps) {
    return learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const long decay_span = max_steps - warmup_steps;
  if (decay_span <= 0) return learning_rate;
  return learning_rate * std::max(0.0, static_cast<double>(max_steps - step) / static_cast<double>(decay_span));
}

namespace {

struct AdamState {
  Mat<double> m_wp, v_wp, m_w, v_w;
  Vec<double> m_b, v_b;

  explicit AdamState(const ForecasterParams<double>& p)
      : m_wp(Mat<double>::Zero(p.w_p.rows(), p.w_p.cols())),
        v_wp(m_wp),
        m_w(Mat<double>::Zero(p.head_w.rows(), p.head_w.cols())),
        v_w(m_w),
        m_b(Vec<double>::Zero(p.head_b.size())),
        v_b(m_b) {}
};

template <typename Param, typename Grad, typename Moment>
void adamw_update(Param& theta, const Grad& g, Moment& m, Moment& v, const TrainConfig& cfg, double lr,
                  double bias1, double bias2, bool decay) {
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
  v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
  if (decay) theta *= 1.0 - lr * cfg.weight_decay;
  theta.array() -= lr * (m.array() / bias1) / ((v.array() / bias2).sqrt() + cfg.adam_eps);
}

TrainingSet gather(const TrainingSet& data, std::span<const Eigen::Index> rows) {
  TrainingSet batch;
  const auto n = static_cast<Eigen::Index>(rows.size());
  batch.features.resize(n, data.features.cols());
  batch.temps.resize(n);
  batch.labels.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    batch.features.row(i) = data.features.row(rows[static_cast<std::size_t>(i)]);
    batch.temps[i] = data.temps[rows[static_cast<std::size_t>(i)]];
    batch.labels[i] = data.labels[rows[static_cast<std::size_t>(i)]];
  }
  return batch;
}

}  // namespace

TrainResult train(const TrainingSet& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.size() == 0) throw ContractViolation("training set is empty");
  const int h = static_cast<int>(data.features.cols());

  auto params = ForecasterParams<double>::zeros(cfg.head, h, cfg.fourier);
  {
    Rng init(cfg.seed, "trainer/init");
    auto fill = [&](auto& m) {
      for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = init.uniform(-0.01, 0.01);
    };
    fill(params.w_p);
    fill(params.head_w);
    fill(params.head_b);
  }
  // Surface label problems before the first step.
  detail::check_batch(params, data);

  Rng shuffle(cfg.seed, "trainer/shuffle");
  std::vector<Eigen::Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::size_t cursor = order.size();

  AdamState state(params);
  TrainReport report;
  double window_loss = 0.0;
  long window_count = 0;
  std::vector<Eigen::Index> rows;

  for (long step = 0; step < cfg.max_steps; ++step) {
    rows.clear();
    while (rows.size() < static_cast<std::size_t>(cfg.batch_size)) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
        cursor = 0;
      }
      rows.push_back(order[cursor++]);
    }
    const auto batch = gather(data, rows);
    const auto fw_loss = loss(params, batch);
    if (!std::isfinite(fw_loss)) {
      throw TrainingDiverged("non-finite loss at step " + std::to_string(step), step);
    }
    auto g = grad(params, batch);
    const double gnorm =
        std::sqrt(g.w_p.squaredNorm() + g.head_w.squaredNorm() + g.head_b.squaredNorm());
    if (!std::isfinite(gnorm)) {
      throw TrainingDiverged("non-finite gradient at step " + std::to_string(step), step);
    }
    if (gnorm > cfg.grad_clip) {
      const double scale = cfg.grad_clip / gnorm;
      g.w_p *= scale;
      g.head_w *= scale;
      g.head_b *= scale;
    }
    const double lr = cfg.scheduled_rate(step);
    const double bias1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step + 1));
    const double bias2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step + 1));
    adamw_update(params.w_p, g.w_p, state.m_wp, state.v_wp, cfg, lr, bias1, bias2, true);
    adamw_update(params.head_w, g.head_w, state.m_w, state.v_w, cfg, lr, bias1, bias2, true);
    adamw_update(params.head_b, g.head_b, state.m_b, state.v_b, cfg, lr, bias1, bias2, false);

    window_loss += fw_loss;
    ++window_count;
    report.steps_run = step + 1;
    if ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.max_steps) {
      report.loss_curve.emplace_back(step + 1, window_loss / static_cast<double>(window_count));
      window_loss = 0.0;
      window_count = 0;
    }
  }

  report.final_loss = loss(params, data);
  if (!std::isfinite(report.final_loss)) {
    throw TrainingDiverged("non-finite final loss", report.steps_run);
  }
  return {std::move(params), std::move(report)};
}

std::string train_report_json(const TrainReport& report) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& [step, value] : report.loss_curve) curve.push_back({step, value});
  const nlohmann::json j = {
      {"final_loss", report.final_loss}, {"steps_run", report.steps_run}, {"loss_curve", curve}};
  return j.dump(2) + "\n";
}

void save_train_report(const std::filesystem::path& path, const TrainReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << train_report_json(report);
}

}  // namespace calibrag
