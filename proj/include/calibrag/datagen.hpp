#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calibrag/corpus_index.hpp"
#include "calibrag/feature_extract.hpp"
#include "calibrag/llm_gateway.hpp"
#include "calibrag/rng.hpp"
#include "calibrag/trainer.hpp"

namespace calibrag {

inline constexpr int kDefaultSamplesPerPair = 10;
inline constexpr int kDefaultSupervisionK = 20;

struct SupervisionRecord {
  double t = 0.0;
  std::string query_id;
  std::string doc_id;
  double b = 0.0;  // fraction of r sampled decisions judged correct
  int r = kDefaultSamplesPerPair;
  std::string query;  // retrieval query text the record was built from
};

struct TaskPair {
  std::string id;
  std::string question;
  std::string answer;
  std::optional<std::string> query;

  /// Retrieval query: the open-ended query when present, else the question.
  const std::string& retrieval_query() const { return query ? *query : question; }
};

struct TemperatureRange {
  double lo = 1.0;
  double hi = 2.0;
};

// Surrogate decision-maker with a known probability of deciding correctly.
struct SurrogateUserSpec {
  double alpha = 8.0;
  std::optional<double> tau;  // unset: median relevance over the generated hits
  TemperatureRange temperature;
};

/// t ~ Uniform[lo, hi].
double sample_temperature(Rng& rng, TemperatureRange range = {});

/// 0.5 + (sigmoid(alpha (rel - tau)) - 0.5) / t. Requires a resolved tau and t >= 1.
double true_probability(const SurrogateUserSpec& spec, double rel, double t);

/// Successes in R Bernoulli(p) draws, divided by R.
double label_with_probability(double p, int r, Rng& rng);
double label(const SurrogateUserSpec& spec, double rel, double t, int r, Rng& rng);

/// Relevance of the hit at `position` given the whole hit list. The default
/// min-max normalizes BM25 scores within the list (all-equal lists map to 1).
using RelevanceFn =
    std::function<double(const TaskPair&, std::span<const RetrievalHit> hits, std::size_t position)>;
double normalized_bm25_relevance(const TaskPair&, std::span<const RetrievalHit> hits, std::size_t position);

struct DatagenConfig {
  int k = kDefaultSupervisionK;
  int r = kDefaultSamplesPerPair;
  std::uint64_t seed = 0;
  bool per_document_temperature = false;
  int threads = 1;
  RelevanceFn relevance;  // empty: normalized_bm25_relevance
};

struct DatagenWarning {
  std::string task_id;
  std::string message;
};

struct DatagenFailure {
  std::string task_id;
  std::string doc_id;  // empty when the failure happened before retrieval
  std::string stage;
  std::string error;
};

struct Dataset {
  std::vector<SupervisionRecord> records;
  std::vector<DatagenWarning> warnings;
  std::vector<DatagenFailure> failures;  // live mode only
  double tau = 0.0;                       // surrogate threshold actually used (synthetic mode)
};

/// Synthetic supervision: one record per (task, retrieved hit), labelled by
/// the surrogate user. Each task draws from its own (seed, task id) stream, so
/// the output does not depend on `threads`.
Dataset build_dataset(std::span<const TaskPair> tasks, const InvertedIndex& index, const SurrogateUserSpec& spec,
                      const DatagenConfig& cfg);

/// Live supervision through the gateway: generator writes guidance for each
/// (query, document), the user decides R times at the sampled temperature, the
/// grader marks each decision. Endpoint failures are collected, not thrown.
Dataset live_generate(std::span<const TaskPair> tasks, const InvertedIndex& index, Gateway& gateway,
                      const DatagenConfig& cfg, TemperatureRange range = {});

/// Output line: {"t","query_id","doc_id","label","r","query"}.
void write_dataset_jsonl(const std::filesystem::path& path, std::span<const SupervisionRecord> records);
std::vector<SupervisionRecord> read_dataset_jsonl(const std::filesystem::path& path);

/// Input line: {"id","question","answer","query"?}.
std::vector<TaskPair> read_tasks_jsonl(const std::filesystem::path& path);
void write_tasks_jsonl(const std::filesystem::path& path, std::span<const TaskPair> tasks);

/// Features for every record: extractor(record.query, document(record.doc_id)).
TrainingSet assemble_training_set(std::span<const SupervisionRecord> records, const InvertedIndex& index,
                                  const FeatureExtractor& extractor);

/// Checks b*r integrality (1e-9), b in [0,1], r >= 1 and t inside `range`.
void validate_record(const SupervisionRecord& rec, TemperatureRange range = {});

}  // namespace calibrag
