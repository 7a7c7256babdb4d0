#include "calibrag/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "calibrag/errors.hpp"
#include "json.hpp"

namespace calibrag {

namespace {

void require_records(std::span<const PredictionRecord> records, const char* metric) {
  if (records.empty()) throw ContractViolation(std::string(metric) + " needs at least one record");
  for (const auto& r : records) {
    if (!(r.confidence >= 0.0 && r.confidence <= 1.0)) {
      throw ContractViolation(std::string(metric) + ": confidence outside [0,1] for '" + r.id + "'");
    }
    if (r.correct != 0 && r.correct != 1) {
      throw ContractViolation(std::string(metric) + ": correctness must be 0 or 1 for '" + r.id + "'");
    }
  }
}

void require_bins(int bins) {
  if (bins < 1) throw ContractViolation("bin count must be >= 1");
}

}  // namespace

int confidence_bin(double confidence, int bins) {
  const int b = static_cast<int>(std::floor(confidence * bins));
  return std::clamp(b, 0, bins - 1);
}

std::vector<BinStats> reliability_data(std::span<const PredictionRecord> records, int bins) {
  require_records(records, "reliability_data");
  require_bins(bins);
  std::vector<double> conf_sum(static_cast<std::size_t>(bins), 0.0), acc_sum(static_cast<std::size_t>(bins), 0.0);
  std::vector<long> count(static_cast<std::size_t>(bins), 0);
  for (const auto& r : records) {
    const auto b = static_cast<std::size_t>(confidence_bin(r.confidence, bins));
    conf_sum[b] += r.confidence;
    acc_sum[b] += r.correct;
    ++count[b];
  }
  std::vector<BinStats> out;
  out.reserve(static_cast<std::size_t>(bins));
  for (int m = 0; m < bins; ++m) {
    const auto i = static_cast<std::size_t>(m);
    BinStats s;
    s.lo = static_cast<double>(m) / bins;
    s.hi = static_cast<double>(m + 1) / bins;
    s.count = count[i];
    if (count[i] > 0) {
      s.mean_confidence = conf_sum[i] / static_cast<double>(count[i]);
      s.mean_accuracy = acc_sum[i] / static_cast<double>(count[i]);
    }
    out.push_back(s);
  }
  return out;
}

double ece_from_bins(std::span<const BinStats> bins) {
  long n = 0;
  for (const auto& b : bins) n += b.count;
  if (n == 0) throw ContractViolation("ece_from_bins: all bins are empty");
  double total = 0.0;
  for (const auto& b : bins) {
    if (b.count == 0) continue;
    total += static_cast<double>(b.count) / static_cast<double>(n) * std::abs(*b.mean_accuracy - *b.mean_confidence);
  }
  return total;
}

double ece(std::span<const PredictionRecord> records, int bins) {
  const auto stats = reliability_data(records, bins);
  return ece_from_bins(stats);
}

double brier(std::span<const PredictionRecord> records) {
  require_records(records, "brier");
  double total = 0.0;
  for (const auto& r : records) {
    const double d = r.confidence - r.correct;
    total += d * d;
  }
  return total / static_cast<double>(records.size());
}

double nll(std::span<const PredictionRecord> records) {
  require_records(records, "nll");
  constexpr double kClamp = 1e-12;
  double total = 0.0;
  for (const auto& r : records) {
    const double p = std::clamp(r.confidence, kClamp, 1.0 - kClamp);
    total -= std::log(r.correct ? p : 1.0 - p);
  }
  return total / static_cast<double>(records.size());
}

double accuracy(std::span<const PredictionRecord> records) {
  require_records(records, "accuracy");
  long correct = 0;
  for (const auto& r : records) correct += r.correct;
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

// Sorts by confidence and walks tie groups, accumulating twice the
// Mann-Whitney U in integer arithmetic.
double auroc(std::span<const PredictionRecord> records) {
  require_records(records, "auroc");
  std::vector<std::pair<double, int>> v;
  v.reserve(records.size());
  for (const auto& r : records) v.emplace_back(r.confidence, r.correct);
  std::sort(v.begin(), v.end());
  long long negatives_below = 0, positives = 0, negatives = 0;
  long long twice_u = 0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    long long pos = 0, neg = 0;
    while (j < v.size() && v[j].first == v[i].first) {
      (v[j].second ? pos : neg) += 1;
      ++j;
    }
    twice_u += 2 * pos * negatives_below + pos * neg;
    negatives_below += neg;
    positives += pos;
    negatives += neg;
    i = j;
  }
  if (positives == 0 || negatives == 0) {
    throw UndefinedMetric("AUROC needs both correct and incorrect records");
  }
  return static_cast<double>(twice_u) / static_cast<double>(2 * positives * negatives);
}

std::vector<double> cumulative_accuracy_at_k(std::span<const RankedOutcomes> tasks, int k) {
  if (k < 1) throw ContractViolation("K must be >= 1");
  if (tasks.empty()) throw ContractViolation("cumulative accuracy needs at least one task");
  std::vector<long> first_hit_counts(static_cast<std::size_t>(k), 0);
  for (const auto& t : tasks) {
    if (t.outcomes.size() < static_cast<std::size_t>(k)) {
      throw ContractViolation("task '" + t.task_id + "' has " + std::to_string(t.outcomes.size()) +
                              " ranked outcomes, fewer than K=" + std::to_string(k));
    }
    for (int i = 0; i < k; ++i) {
      if (t.outcomes[static_cast<std::size_t>(i)]) {
        ++first_hit_counts[static_cast<std::size_t>(i)];
        break;
      }
    }
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(k));
  long running = 0;
  for (long c : first_hit_counts) {
    running += c;
    out.push_back(static_cast<double>(running) / static_cast<double>(tasks.size()));
  }
  return out;
}

std::string reliability_csv(std::span<const BinStats> bins) {
  std::string out = "bin_lo,bin_hi,count,mean_conf,mean_acc\n";
  char buf[160];
  for (const auto& b : bins) {
    if (b.count > 0) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%ld,%.17g,%.17g\n", b.lo, b.hi, b.count, *b.mean_confidence,
                    *b.mean_accuracy);
    } else {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,0,,\n", b.lo, b.hi);
    }
    out += buf;
  }
  return out;
}

std::vector<PredictionRecord> read_predictions_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open predictions: " + path.string());
  std::vector<PredictionRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.contains("correct") || j["correct"].is_null()) continue;
      PredictionRecord r;
      r.id = j.at("id").get<std::string>();
      r.confidence = j.at("confidence").get<double>();
      const auto& c = j["correct"];
      r.correct = c.is_boolean() ? (c.get<bool>() ? 1 : 0) : c.get<int>();
      if (!(r.confidence >= 0.0 && r.confidence <= 1.0))
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": confidence outside [0,1]");
      if (r.correct != 0 && r.correct != 1)
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": correct must be 0 or 1");
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

}  // namespace calibrag
