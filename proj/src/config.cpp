#include "calibrag/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "calibrag/errors.hpp"
#include "toml.hpp"

namespace calibrag {

namespace {

class Section {
 public:
  Section(const toml::table* table, std::string name) : table_(table), name_(std::move(name)) {}

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!table_) return;
    const auto* node = table_->get(key);
    if (!node) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (auto v = node->value<bool>()) {
        out = *v;
        return;
      }
    } else if constexpr (std::is_integral_v<T>) {
      if (auto v = node->value<std::int64_t>()) {
        out = static_cast<T>(*v);
        return;
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (auto v = node->value<double>()) {
        out = *v;
        return;
      }
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (auto v = node->value<std::string>()) {
        out = *v;
        return;
      }
    }
    fail(key, "has the wrong type");
  }

  template <typename T>
  void get(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!table_ || !table_->get(key)) return;
    T v{};
    get(key, v);
    out = v;
  }

  void get_path(const char* key, std::optional<std::filesystem::path>& out, const std::filesystem::path& base) {
    std::optional<std::string> s;
    get(key, s);
    if (s) out = base.empty() ? std::filesystem::path(*s) : base / *s;
  }

  void get_doubles(const char* key, std::vector<double>& out) {
    seen_.insert(key);
    if (!table_) return;
    const auto* node = table_->get(key);
    if (!node) return;
    const auto* arr = node->as_array();
    if (!arr) fail(key, "must be an array of numbers");
    std::vector<double> values;
    for (const auto& el : *arr) {
      auto v = el.value<double>();
      if (!v) fail(key, "must be an array of numbers");
      values.push_back(*v);
    }
    out = std::move(values);
  }

  void reject_unknown(const std::set<std::string>& nested = {}) const {
    if (!table_) return;
    for (const auto& [key, _] : *table_) {
      const std::string k(key.str());
      if (!seen_.count(k) && !nested.count(k)) fail(k.c_str(), "is not a recognized setting");
    }
  }

  [[noreturn]] void fail(const char* key, const char* why) const {
    const auto where = name_.empty() ? std::string(key) : name_ + "." + key;
    throw ConfigurationError("config key '" + where + "' " + why);
  }

 private:
  const toml::table* table_;
  std::string name_;
  std::set<std::string> seen_;
};

const toml::table* sub_table(const toml::table& root, const char* key) {
  const auto* node = root.get(key);
  if (!node) return nullptr;
  const auto* t = node->as_table();
  if (!t) throw ConfigurationError(std::string("config key '") + key + "' must be a table");
  return t;
}

}  // namespace

RunConfig parse_run_config(const std::string& toml_text, const std::filesystem::path& base_dir) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "config parse error at line " << e.source().begin.line << ": " << e.description();
    throw ConfigurationError(msg.str());
  }

  RunConfig cfg;
  Section top(&root, "");
  top.get("seed", cfg.seed);

  Section paths(sub_table(root, "paths"), "paths");
  paths.get_path("corpus", cfg.paths.corpus, base_dir);
  paths.get_path("index", cfg.paths.index, base_dir);
  paths.get_path("tasks", cfg.paths.tasks, base_dir);
  paths.get_path("dataset", cfg.paths.dataset, base_dir);
  paths.get_path("model", cfg.paths.model, base_dir);
  paths.get_path("predictions", cfg.paths.predictions, base_dir);
  paths.get_path("traces", cfg.paths.traces, base_dir);
  paths.get_path("audit_log", cfg.paths.audit_log, base_dir);
  paths.reject_unknown();

  cfg.train.seed = cfg.seed;
  Section train(sub_table(root, "train"), "train");
  train.get("learning_rate", cfg.train.learning_rate);
  train.get("batch_size", cfg.train.batch_size);
  train.get("max_steps", cfg.train.max_steps);
  train.get("weight_decay", cfg.train.weight_decay);
  train.get("grad_clip", cfg.train.grad_clip);
  train.get("warmup_steps", cfg.train.warmup_steps);
  train.get("seed", cfg.train.seed);
  train.get("log_every", cfg.train.log_every);
  train.get("fourier_n", cfg.train.fourier.n);
  train.get("t_min", cfg.train.fourier.t_min);
  train.get("t_max", cfg.train.fourier.t_max);
  std::string schedule = "linear";
  train.get("schedule", schedule);
  if (schedule != "linear") train.fail("schedule", "must be \"linear\"");
  std::string head = "binary";
  train.get("head", head);
  if (head != "binary" && head != "multi") train.fail("head", "must be \"binary\" or \"multi\"");
  cfg.train.head = head == "multi" ? HeadKind::multi : HeadKind::binary;
  train.reject_unknown();

  Section pipe(sub_table(root, "pipeline"), "pipeline");
  pipe.get("k", cfg.pipeline.k);
  pipe.get("epsilon", cfg.pipeline.epsilon);
  pipe.get_doubles("temps", cfg.pipeline.temps);
  pipe.get("user_t", cfg.pipeline.user_t);
  pipe.get("reformulate", cfg.pipeline.reformulate);
  pipe.get("max_reformulations", cfg.pipeline.max_reformulations);
  pipe.get("grade", cfg.pipeline.grade);
  pipe.get("concurrency", cfg.pipeline.concurrency);
  pipe.reject_unknown();

  cfg.datagen.seed = cfg.seed;
  Section dg(sub_table(root, "datagen"), "datagen");
  dg.get("k", cfg.datagen.k);
  dg.get("r", cfg.datagen.r);
  dg.get("seed", cfg.datagen.seed);
  dg.get("per_document_temperature", cfg.datagen.per_document_temperature);
  dg.get("threads", cfg.datagen.threads);
  dg.get("alpha", cfg.surrogate.alpha);
  dg.get("tau", cfg.surrogate.tau);
  dg.get("t_min", cfg.surrogate.temperature.lo);
  dg.get("t_max", cfg.surrogate.temperature.hi);
  dg.reject_unknown();

  Section ex(sub_table(root, "extractor"), "extractor");
  std::string mode = "hashed";
  ex.get("mode", mode);
  ex.get("h", cfg.extractor.h);
  RemoteEmbeddingSettings remote;
  long timeout_ms = remote.timeout.count();
  ex.get("base_url", remote.base_url);
  ex.get("model", remote.model);
  ex.get("timeout_ms", timeout_ms);
  ex.get("max_in_flight", remote.max_in_flight);
  ex.get("api_key_env", remote.api_key_env);
  remote.timeout = std::chrono::milliseconds(timeout_ms);
  if (mode == "remote") {
    cfg.extractor.mode = ExtractorMode::remote;
    cfg.extractor.remote = remote;
  } else if (mode != "hashed") {
    ex.fail("mode", "must be \"hashed\" or \"remote\"");
  }
  ex.reject_unknown();

  Section gw(sub_table(root, "gateway"), "gateway");
  gw.get("unparseable_grade_is_incorrect", cfg.unparseable_grade_is_incorrect);
  gw.reject_unknown();

  if (const auto* eps = sub_table(root, "endpoints")) {
    for (const auto& [key, node] : *eps) {
      const std::string name(key.str());
      const auto* table = node.as_table();
      if (!table) throw ConfigurationError("config key 'endpoints." + name + "' must be a table");
      Role role;
      try {
        role = role_from_string(name);
      } catch (const ContractViolation&) {
        throw ConfigurationError("unknown endpoint role 'endpoints." + name + "'");
      }
      EndpointSection section;
      auto& e = section.endpoint;
      e.role = role;
      Section s(table, "endpoints." + name);
      long timeout = e.timeout.count();
      long backoff = e.backoff_base.count();
      s.get("base_url", e.base_url);
      s.get("model", e.model);
      s.get("timeout_ms", timeout);
      s.get("max_retries", e.max_retries);
      s.get("temperature", e.temperature);
      s.get("backoff_ms", backoff);
      s.get("max_in_flight", e.max_in_flight);
      s.get("api_key_env", e.api_key_env);
      s.get("mock", e.mock);
      s.get_path("mock_script", section.mock_script, base_dir);
      s.reject_unknown();
      e.timeout = std::chrono::milliseconds(timeout);
      e.backoff_base = std::chrono::milliseconds(backoff);
      cfg.endpoints[role] = std::move(section);
    }
  }

  top.reject_unknown({"paths", "train", "pipeline", "datagen", "extractor", "gateway", "endpoints"});
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.parent_path());
}

}  // namespace calibrag
