#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace calibrag {

struct PredictionRecord {
  std::string id;
  double confidence = 0.0;
  int correct = 0;  // 0 or 1
};

struct BinStats {
  double lo = 0.0;
  double hi = 0.0;
  long count = 0;
  std::optional<double> mean_confidence;  // set iff count > 0
  std::optional<double> mean_accuracy;
};

/// Equal-width bin for a confidence in [0, 1]; 1.0 falls in the last bin.
int confidence_bin(double confidence, int bins);

/// Expected calibration error over `bins` equal-width bins.
double ece(std::span<const PredictionRecord> records, int bins = 10);
double brier(std::span<const PredictionRecord> records);
/// Mean negative log-likelihood of the observed outcome, confidences clamped
/// to [1e-12, 1 - 1e-12].
double nll(std::span<const PredictionRecord> records);
double accuracy(std::span<const PredictionRecord> records);
/// Mann-Whitney AUROC with ties credited 1/2. Throws UndefinedMetric when
/// either class is absent.
double auroc(std::span<const PredictionRecord> records);

std::vector<BinStats> reliability_data(std::span<const PredictionRecord> records, int bins = 10);
/// ECE recomputed from per-bin statistics.
double ece_from_bins(std::span<const BinStats> bins);

struct RankedOutcomes {
  std::string task_id;
  std::vector<int> outcomes;  // outcomes[k] = 1 if the (k+1)-th document leads to a correct decision
};

/// Entry k-1: fraction of tasks with a correct decision among their top k.
std::vector<double> cumulative_accuracy_at_k(std::span<const RankedOutcomes> tasks, int k);

/// bin_lo,bin_hi,count,mean_conf,mean_acc (empty bins leave the means blank).
std::string reliability_csv(std::span<const BinStats> bins);

/// Predictions JSONL {"id","confidence","correct"}: records with a null
/// "correct" are skipped.
std::vector<PredictionRecord> read_predictions_jsonl(const std::filesystem::path& path);

}  // namespace calibrag
