#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "calibrag/corpus_index.hpp"
#include "calibrag/datagen.hpp"
#include "calibrag/feature_extract.hpp"
#include "calibrag/forecaster.hpp"
#include "calibrag/llm_gateway.hpp"

namespace calibrag {

struct PipelineConfig {
  int k = 20;
  double epsilon = 0.5;
  std::vector<double> temps = kDefaultTemperatures;
  std::optional<double> user_t;  // overrides marginalization when set
  bool reformulate = true;
  int max_reformulations = 1;
  bool grade = true;  // grade the final decision when a grader is configured
  int concurrency = 1;

  void validate() const;
  /// user_t when set, else the midpoint of temps.
  double decision_temperature() const;
};

struct ScoredDoc {
  std::string doc_id;
  double confidence = 0.0;
  double retrieval_score = 0.0;
  int retrieval_rank = 0;
};

struct RetrievalRound {
  std::string query;
  std::vector<ScoredDoc> candidates;  // reranked
};

struct DecisionTrace {
  std::string task_id;
  std::string initial_query;
  std::optional<std::string> reformulated_query;
  std::vector<RetrievalRound> rounds;
  std::vector<ScoredDoc> candidates;  // all rounds merged, best confidence first
  std::optional<std::string> chosen_doc_id;
  std::optional<double> confidence;
  std::string guidance;
  std::string decision;
  std::optional<bool> correct;
  std::vector<std::string> stages_executed;
  std::vector<std::string> flags;  // "no-document", "below-threshold"
  int reformulations = 0;

  bool has_flag(std::string_view f) const;
};

// A gateway or extractor failure inside run(), tagged with the stage.
class PipelineError : public std::runtime_error {
 public:
  PipelineError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// Scores every hit with the forecaster and sorts by confidence (descending,
/// ties by doc id). Retrieval scores play no part in the order.
std::vector<ScoredDoc> rerank(std::span<const RetrievalHit> hits, const InvertedIndex& index,
                              const ForecasterParams<double>& forecaster, const FeatureExtractor& extractor,
                              std::string_view query, const PipelineConfig& cfg);

/// Retrieve, rerank, optionally reformulate and retry, then decide.
DecisionTrace run(const TaskPair& task, const InvertedIndex& index, const ForecasterParams<double>& forecaster,
                  const FeatureExtractor& extractor, Gateway& gateway, const PipelineConfig& cfg);

struct TaskError {
  std::string task_id;
  std::string stage;
  std::string message;
};

struct BatchResult {
  std::vector<DecisionTrace> traces;
  std::vector<TaskError> errors;
};

/// Runs every task; a failing task becomes a TaskError and the rest continue.
/// Output order follows input order regardless of concurrency.
BatchResult batch_run(std::span<const TaskPair> tasks, const InvertedIndex& index,
                      const ForecasterParams<double>& forecaster, const FeatureExtractor& extractor,
                      Gateway& gateway, const PipelineConfig& cfg);

std::string trace_json(const DecisionTrace& trace);
/// One trace per line.
void write_traces_jsonl(const std::filesystem::path& path, std::span<const DecisionTrace> traces);
/// {"task_id","stage","error"} per line.
void write_task_errors_jsonl(const std::filesystem::path& path, std::span<const TaskError> errors);
/// {"id","confidence","correct": 0|1|null} for every trace with a chosen document.
void write_predictions_jsonl(const std::filesystem::path& path, std::span<const DecisionTrace> traces);

}  // namespace calibrag
