#include "calibrag/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <map>
#include <thread>

#include "calibrag/errors.hpp"
#include "json.hpp"

namespace calibrag {

void PipelineConfig::validate() const {
  if (k < 1) throw ContractViolation("pipeline K must be >= 1");
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ContractViolation("epsilon must lie in [0,1]");
  if (!user_t && temps.empty()) throw ContractViolation("temps must be non-empty when user_t is unset");
  if (max_reformulations < 0) throw ContractViolation("max_reformulations must be >= 0");
  if (concurrency < 1) throw ContractViolation("concurrency must be >= 1");
}

double PipelineConfig::decision_temperature() const {
  if (user_t) return *user_t;
  const auto [lo, hi] = std::minmax_element(temps.begin(), temps.end());
  return 0.5 * (*lo + *hi);
}

bool DecisionTrace::has_flag(std::string_view f) const {
  return std::find(flags.begin(), flags.end(), f) != flags.end();
}

namespace {

bool ranks_before(const ScoredDoc& a, const ScoredDoc& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  return a.doc_id < b.doc_id;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename Fn>
auto in_stage(const char* stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception& e) {
    throw PipelineError(stage, e.what());
  }
}

nlohmann::ordered_json scored_json(const ScoredDoc& d) {
  return {{"doc_id", d.doc_id},
          {"confidence", d.confidence},
          {"retrieval_score", d.retrieval_score},
          {"retrieval_rank", d.retrieval_rank}};
}

template <typename T>
nlohmann::ordered_json optional_json(const std::optional<T>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

}  // namespace

std::vector<ScoredDoc> rerank(std::span<const RetrievalHit> hits, const InvertedIndex& index,
                              const ForecasterParams<double>& forecaster, const FeatureExtractor& extractor,
                              std::string_view query, const PipelineConfig& cfg) {
  if (hits.empty()) throw ContractViolation("rerank needs at least one hit");
  std::vector<QueryDocPair> pairs;
  pairs.reserve(hits.size());
  for (const auto& h : hits) pairs.push_back({query, &index.document(h.doc_id)});
  const Eigen::MatrixXd features = extractor.extract_batch(pairs);

  std::vector<ScoredDoc> out;
  out.reserve(hits.size());
  for (std::size_t i = 0; i < hits.size(); ++i) {
    const auto row = features.row(static_cast<Eigen::Index>(i)).transpose();
    const double c = cfg.user_t ? confidence(forecaster, row, *cfg.user_t)
                                : marginal_confidence(forecaster, row, std::span<const double>(cfg.temps));
    out.push_back({hits[i].doc_id, c, hits[i].score, hits[i].rank});
  }
  std::sort(out.begin(), out.end(), ranks_before);
  return out;
}

DecisionTrace run(const TaskPair& task, const InvertedIndex& index, const ForecasterParams<double>& forecaster,
                  const FeatureExtractor& extractor, Gateway& gateway, const PipelineConfig& cfg) {
  cfg.validate();
  DecisionTrace trace;
  trace.task_id = task.id;

  if (task.query) {
    trace.initial_query = *task.query;
  } else {
    trace.stages_executed.push_back("query_gen");
    trace.initial_query = in_stage("query_gen", [&] {
      return trim(gateway.ask(Role::generator, PromptName::query_gen, {{"question", task.question}}).text);
    });
  }

  auto retrieve_and_rerank = [&](const std::string& query) {
    RetrievalRound round;
    round.query = query;
    trace.stages_executed.push_back("retrieve");
    const auto hits = index.retrieve(query, cfg.k);
    if (!hits.empty()) {
      trace.stages_executed.push_back("rerank");
      round.candidates = in_stage("rerank", [&] { return rerank(hits, index, forecaster, extractor, query, cfg); });
    }
    trace.rounds.push_back(std::move(round));
  };

  auto best_confidence = [&]() -> std::optional<double> {
    std::optional<double> best;
    for (const auto& r : trace.rounds)
      if (!r.candidates.empty() && (!best || r.candidates.front().confidence > *best))
        best = r.candidates.front().confidence;
    return best;
  };

  retrieve_and_rerank(trace.initial_query);
  std::string latest_query = trace.initial_query;
  while (cfg.reformulate && trace.reformulations < cfg.max_reformulations) {
    const auto best = best_confidence();
    if (best && *best >= cfg.epsilon) break;
    trace.stages_executed.push_back("reformulate");
    latest_query = in_stage("reformulate", [&] {
      return trim(gateway.ask(Role::generator, PromptName::reformulate, {{"query", latest_query}}).text);
    });
    ++trace.reformulations;
    trace.reformulated_query = latest_query;
    retrieve_and_rerank(latest_query);
  }

  // Merge rounds, keeping each document's best confidence.
  std::map<std::string, ScoredDoc> merged;
  std::map<std::string, std::size_t> round_of;
  for (std::size_t r = 0; r < trace.rounds.size(); ++r) {
    for (const auto& c : trace.rounds[r].candidates) {
      auto [it, inserted] = merged.emplace(c.doc_id, c);
      if (inserted || c.confidence > it->second.confidence) {
        it->second = c;
        round_of[c.doc_id] = r;
      }
    }
  }
  for (auto& [_, d] : merged) trace.candidates.push_back(d);
  std::sort(trace.candidates.begin(), trace.candidates.end(), ranks_before);

  if (trace.candidates.empty()) {
    trace.flags.push_back("no-document");
    return trace;
  }
  const auto& chosen = trace.candidates.front();
  trace.chosen_doc_id = chosen.doc_id;
  trace.confidence = chosen.confidence;
  if (chosen.confidence < cfg.epsilon) trace.flags.push_back("below-threshold");

  const auto& doc = index.document(chosen.doc_id);
  const auto& guidance_query = trace.rounds[round_of.at(chosen.doc_id)].query;
  trace.stages_executed.push_back("guidance");
  trace.guidance = in_stage("guidance", [&] {
    return gateway
        .ask(Role::generator, PromptName::guidance,
             {{"question", guidance_query}, {"title", doc.title}, {"context", doc.body}})
        .text;
  });

  trace.stages_executed.push_back("decide");
  trace.decision = in_stage("decide", [&] {
    const auto prompt = render_decision_prompt(trace.guidance, task.question, chosen.confidence);
    PromptVars vars{{"context", trace.guidance},
                    {"question", task.question},
                    {"confidence", format_confidence(chosen.confidence)}};
    return gateway.send(Role::user, PromptName::decision, prompt, std::move(vars), cfg.decision_temperature()).text;
  });

  if (cfg.grade && !task.answer.empty() && gateway.has_role(Role::grader)) {
    trace.stages_executed.push_back("grade");
    trace.correct = in_stage("grade", [&] { return gateway.grade(task.question, task.answer, trace.decision); });
  }
  return trace;
}

BatchResult batch_run(std::span<const TaskPair> tasks, const InvertedIndex& index,
                      const ForecasterParams<double>& forecaster, const FeatureExtractor& extractor,
                      Gateway& gateway, const PipelineConfig& cfg) {
  cfg.validate();
  std::vector<std::optional<DecisionTrace>> traces(tasks.size());
  std::vector<std::optional<TaskError>> errors(tasks.size());
  auto one = [&](std::size_t i) {
    try {
      traces[i] = run(tasks[i], index, forecaster, extractor, gateway, cfg);
    } catch (const PipelineError& e) {
      errors[i] = TaskError{tasks[i].id, e.stage(), e.what()};
    } catch (const std::exception& e) {
      errors[i] = TaskError{tasks[i].id, "", e.what()};
    }
  };
  if (cfg.concurrency <= 1 || tasks.size() < 2) {
    for (std::size_t i = 0; i < tasks.size(); ++i) one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.concurrency), tasks.size());
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (auto i = next.fetch_add(1); i < tasks.size(); i = next.fetch_add(1)) one(i);
      });
    }
  }
  BatchResult result;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (traces[i]) result.traces.push_back(std::move(*traces[i]));
    if (errors[i]) result.errors.push_back(std::move(*errors[i]));
  }
  return result;
}

std::string trace_json(const DecisionTrace& t) {
  nlohmann::ordered_json rounds = nlohmann::ordered_json::array();
  for (const auto& r : t.rounds) {
    nlohmann::ordered_json cands = nlohmann::ordered_json::array();
    for (const auto& c : r.candidates) cands.push_back(scored_json(c));
    rounds.push_back({{"query", r.query}, {"candidates", cands}});
  }
  nlohmann::ordered_json merged = nlohmann::ordered_json::array();
  for (const auto& c : t.candidates) merged.push_back({{"doc_id", c.doc_id}, {"confidence", c.confidence}});
  const nlohmann::ordered_json j = {{"task_id", t.task_id},
                                    {"initial_query", t.initial_query},
                                    {"reformulated_query", optional_json(t.reformulated_query)},
                                    {"reformulations", t.reformulations},
                                    {"rounds", rounds},
                                    {"candidates", merged},
                                    {"chosen_doc_id", optional_json(t.chosen_doc_id)},
                                    {"confidence", optional_json(t.confidence)},
                                    {"guidance", t.guidance},
                                    {"decision", t.decision},
                                    {"correct", optional_json(t.correct)},
                                    {"stages_executed", t.stages_executed},
                                    {"flags", t.flags}};
  return j.dump();
}

void write_traces_jsonl(const std::filesystem::path& path, std::span<const DecisionTrace> traces) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  for (const auto& t : traces) out << trace_json(t) << '\n';
}

void write_task_errors_jsonl(const std::filesystem::path& path, std::span<const TaskError> errors) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  for (const auto& e : errors) {
    out << nlohmann::ordered_json{{"task_id", e.task_id}, {"stage", e.stage}, {"error", e.message}}.dump() << '\n';
  }
}

void write_predictions_jsonl(const std::filesystem::path& path, std::span<const DecisionTrace> traces) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  for (const auto& t : traces) {
    if (!t.confidence) continue;
    nlohmann::ordered_json j = {{"id", t.task_id}, {"confidence", *t.confidence}};
    j["correct"] = t.correct ? nlohmann::ordered_json(*t.correct ? 1 : 0) : nlohmann::ordered_json(nullptr);
    out << j.dump() << '\n';
  }
}

}  // namespace calibrag
