#include "calibrag/datagen.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <thread>

#include "calibrag/errors.hpp"
#include "json.hpp"

namespace calibrag {

double sample_temperature(Rng& rng, TemperatureRange range) { return rng.uniform(range.lo, range.hi); }

double true_probability(const SurrogateUserSpec& spec, double rel, double t) {
  if (!spec.tau) throw ContractViolation("surrogate threshold tau is unresolved");
  if (!(t >= 1.0)) throw ContractViolation("surrogate user requires t >= 1");
  return 0.5 + (sigmoid(spec.alpha * (rel - *spec.tau)) - 0.5) / t;
}

double label_with_probability(double p, int r, Rng& rng) {
  if (r < 1) throw ContractViolation("R must be >= 1");
  int successes = 0;
  for (int i = 0; i < r; ++i) successes += rng.bernoulli(p) ? 1 : 0;
  return static_cast<double>(successes) / static_cast<double>(r);
}

double label(const SurrogateUserSpec& spec, double rel, double t, int r, Rng& rng) {
  return label_with_probability(true_probability(spec, rel, t), r, rng);
}

double normalized_bm25_relevance(const TaskPair&, std::span<const RetrievalHit> hits, std::size_t position) {
  double lo = hits.front().score, hi = hits.front().score;
  for (const auto& h : hits) {
    lo = std::min(lo, h.score);
    hi = std::max(hi, h.score);
  }
  if (hi == lo) return 1.0;
  return (hits[position].score - lo) / (hi - lo);
}

void validate_record(const SupervisionRecord& rec, TemperatureRange range) {
  if (rec.r < 1) throw ContractViolation("record r must be >= 1");
  if (!(rec.b >= 0.0 && rec.b <= 1.0)) throw ContractViolation("record label outside [0,1]");
  const double scaled = rec.b * rec.r;
  if (std::abs(scaled - std::round(scaled)) > 1e-9) {
    throw ContractViolation("record label is not a multiple of 1/r");
  }
  if (!(rec.t >= range.lo && rec.t <= range.hi)) throw ContractViolation("record temperature outside range");
}

namespace {

struct TaskHits {
  std::vector<RetrievalHit> hits;
  std::vector<double> relevance;
};

template <typename Fn>
void for_each_task(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::exception_ptr failure;
  std::mutex mu;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (auto i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

double median(std::vector<double> values) {
  if (values.empty()) return 0.5;
  const auto mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

std::string task_stream_label(const TaskPair& task) { return "datagen/task/" + task.id; }

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

Dataset build_dataset(std::span<const TaskPair> tasks, const InvertedIndex& index, const SurrogateUserSpec& spec,
                      const DatagenConfig& cfg) {
  if (tasks.empty()) throw ContractViolation("build_dataset needs at least one task");
  if (cfg.k < 1) throw ContractViolation("K must be >= 1");
  if (cfg.r < 1) throw ContractViolation("R must be >= 1");
  const RelevanceFn relevance = cfg.relevance ? cfg.relevance : RelevanceFn(normalized_bm25_relevance);

  std::vector<TaskHits> per_task(tasks.size());
  for_each_task(tasks.size(), cfg.threads, [&](std::size_t i) {
    auto& th = per_task[i];
    th.hits = index.retrieve(tasks[i].retrieval_query(), cfg.k);
    th.relevance.reserve(th.hits.size());
    for (std::size_t j = 0; j < th.hits.size(); ++j) th.relevance.push_back(relevance(tasks[i], th.hits, j));
  });

  SurrogateUserSpec resolved = spec;
  if (!resolved.tau) {
    std::vector<double> all;
    for (const auto& th : per_task) all.insert(all.end(), th.relevance.begin(), th.relevance.end());
    resolved.tau = median(std::move(all));
  }

  std::vector<std::vector<SupervisionRecord>> out(tasks.size());
  for_each_task(tasks.size(), cfg.threads, [&](std::size_t i) {
    const auto& task = tasks[i];
    const auto& th = per_task[i];
    Rng rng(cfg.seed, task_stream_label(task));
    const double shared_t = sample_temperature(rng, resolved.temperature);
    for (std::size_t j = 0; j < th.hits.size(); ++j) {
      const double t = cfg.per_document_temperature ? sample_temperature(rng, resolved.temperature) : shared_t;
      SupervisionRecord rec;
      rec.t = t;
      rec.query_id = task.id;
      rec.doc_id = th.hits[j].doc_id;
      rec.b = label(resolved, th.relevance[j], t, cfg.r, rng);
      rec.r = cfg.r;
      rec.query = task.retrieval_query();
      out[i].push_back(std::move(rec));
    }
  });

  Dataset ds;
  ds.tau = *resolved.tau;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (per_task[i].hits.empty()) {
      ds.warnings.push_back({tasks[i].id, "retrieval returned no documents; task skipped"});
    }
    for (auto& rec : out[i]) ds.records.push_back(std::move(rec));
  }
  return ds;
}

Dataset live_generate(std::span<const TaskPair> tasks, const InvertedIndex& index, Gateway& gateway,
                      const DatagenConfig& cfg, TemperatureRange range) {
  if (tasks.empty()) throw ContractViolation("live_generate needs at least one task");
  if (cfg.k < 1) throw ContractViolation("K must be >= 1");
  if (cfg.r < 1) throw ContractViolation("R must be >= 1");

  Dataset ds;
  for (const auto& task : tasks) {
    Rng rng(cfg.seed, task_stream_label(task));
    std::string query;
    try {
      query = task.query ? *task.query
                         : trim(gateway.ask(Role::generator, PromptName::query_gen, {{"question", task.question}}).text);
    } catch (const std::exception& e) {
      ds.failures.push_back({task.id, "", "query_gen", e.what()});
      continue;
    }
    const double shared_t = sample_temperature(rng, range);
    const auto hits = index.retrieve(query, cfg.k);
    if (hits.empty()) {
      ds.warnings.push_back({task.id, "retrieval returned no documents; task skipped"});
      continue;
    }
    for (const auto& hit : hits) {
      const double t = cfg.per_document_temperature ? sample_temperature(rng, range) : shared_t;
      const auto& doc = index.document(hit.doc_id);
      std::string stage = "guidance";
      try {
        const auto guidance =
            gateway.ask(Role::generator, PromptName::guidance,
                        {{"question", query}, {"title", doc.title}, {"context", doc.body}})
                .text;
        const auto prompt = render_decision_prompt(guidance, task.question, std::nullopt);
        const PromptVars vars{{"context", guidance}, {"question", task.question}};
        int correct = 0;
        for (int s = 0; s < cfg.r; ++s) {
          stage = "decision";
          const auto decision = gateway.send(Role::user, PromptName::decision, prompt, vars, t).text;
          stage = "grading";
          correct += gateway.grade(task.question, task.answer, decision) ? 1 : 0;
        }
        ds.records.push_back({t, task.id, hit.doc_id, static_cast<double>(correct) / cfg.r, cfg.r, query});
      } catch (const std::exception& e) {
        ds.failures.push_back({task.id, hit.doc_id, stage, e.what()});
      }
    }
  }
  return ds;
}

void write_dataset_jsonl(const std::filesystem::path& path, std::span<const SupervisionRecord> records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  for (const auto& rec : records) {
    const nlohmann::ordered_json j = {{"t", rec.t},           {"query_id", rec.query_id}, {"doc_id", rec.doc_id},
                                      {"label", rec.b},       {"r", rec.r},               {"query", rec.query}};
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<SupervisionRecord> read_dataset_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset: " + path.string());
  std::vector<SupervisionRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      SupervisionRecord rec;
      rec.t = j.at("t").get<double>();
      rec.query_id = j.at("query_id").get<std::string>();
      rec.doc_id = j.at("doc_id").get<std::string>();
      rec.b = j.at("label").get<double>();
      rec.r = j.value("r", kDefaultSamplesPerPair);
      rec.query = j.value("query", "");
      // The temperature range is a datagen setting, so only t >= 1 is enforced here.
      validate_record(rec, {1.0, std::numeric_limits<double>::infinity()});
      records.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ContractViolation& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

std::vector<TaskPair> read_tasks_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open tasks: " + path.string());
  std::vector<TaskPair> tasks;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TaskPair t;
      t.id = j.at("id").get<std::string>();
      t.question = j.at("question").get<std::string>();
      t.answer = j.at("answer").get<std::string>();
      if (j.contains("query") && !j["query"].is_null()) t.query = j["query"].get<std::string>();
      if (t.id.empty() || t.question.empty() || t.answer.empty()) {
        throw FormatError("task needs non-empty id, question and answer");
      }
      tasks.push_back(std::move(t));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return tasks;
}

void write_tasks_jsonl(const std::filesystem::path& path, std::span<const TaskPair> tasks) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  for (const auto& t : tasks) {
    nlohmann::ordered_json j = {{"id", t.id}, {"question", t.question}, {"answer", t.answer}};
    if (t.query) j["query"] = *t.query;
    out << j.dump() << '\n';
  }
}

TrainingSet assemble_training_set(std::span<const SupervisionRecord> records, const InvertedIndex& index,
                                  const FeatureExtractor& extractor) {
  std::vector<QueryDocPair> pairs;
  pairs.reserve(records.size());
  for (const auto& rec : records) pairs.push_back({rec.query, &index.document(rec.doc_id)});
  TrainingSet set;
  set.features = extractor.extract_batch(pairs);
  set.temps.resize(static_cast<Eigen::Index>(records.size()));
  set.labels.resize(static_cast<Eigen::Index>(records.size()));
  for (std::size_t i = 0; i < records.size(); ++i) {
    set.temps[static_cast<Eigen::Index>(i)] = records[i].t;
    set.labels[static_cast<Eigen::Index>(i)] = records[i].b;
  }
  return set;
}

}  // namespace calibrag
