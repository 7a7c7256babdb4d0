#include "calibrag/llm_gateway.hpp"

#include <algorithm>
#include <cstdio>
#include <ctime>
#include <thread>

#include "calibrag/corpus_index.hpp"
#include "calibrag/errors.hpp"
#include "calibrag/rng.hpp"
#include "json.hpp"

namespace calibrag {

namespace {

const PromptTemplate kDecision{
    PromptName::decision,
    "The task is to answer questions based on a context generated by a language model in response to a "
    "question about relevant information, along with the model's confidence level in the provided answer.\n"
    "Context: {context}\n"
    "Question: {question}\n"
    "Model Confidence: {confidence}\n"
    "Answer:"};

const PromptTemplate kQueryGen{
    PromptName::query_gen,
    "You are an automated assistant tasked with rephrasing specific questions into open-ended queries to "
    "encourage detailed exploration and discussion of the key topics mentioned.\n"
    "Your goal is to prompt someone to write a paragraph exploring the topic without directly revealing the "
    "answer.\n"
    "Examples for Guidance:\n"
    "Example 1:\n"
    "Question 1: Which sea creature is the world's largest invertebrate?\n"
    "Question 2: Write a paragraph about the world's largest invertebrate.\n"
    "Now, please rephrase the following question:\n"
    "Question 1: {question}\n"
    "Question 2:"};

const PromptTemplate kGuidance{
    PromptName::guidance,
    "Directly state the answer without phrases like 'the correct answer is.\n"
    "Given the retrieved context, answer the question as accurately as possible.\n"
    "Question: {question}\n"
    "Retrieved Context: {title} - {context}\n"
    "Answer: "};

const PromptTemplate kGrading{
    PromptName::grading,
    "The problem is: {question}\n"
    "The correct answer for this problem is: {ground-truth}\n"
    "A student submitted the answer: {prediction}\n"
    "The student's answer must be correct and specific but not overcomplete (for example, if they provide two "
    "different answers, they did not get the question right).\n"
    "However, small differences in formatting should not be penalized (for example, 'New York City' is "
    "equivalent to 'NYC').\n"
    "Did the student provide an equivalent answer to the ground truth? Please answer yes or no without any "
    "explanation:"};

const PromptTemplate kReformulate{
    PromptName::reformulate,
    "You are a language model assistant who specializes in improving queries for document search systems. "
    "Your task is to highlight and clarify the important parts of a given query to make it more precise and "
    "help retrieve relevant documents.\n"
    "Please take the original search query below and rewrite it by emphasizing the important words. Do not "
    "add any new information not included in the original query.\n"
    "Original Retrieval Query: {query}\n"
    "Please generate the new retrieval query without any explanation:"};

constexpr std::string_view kConfidenceLine = "Model Confidence: {confidence}\n";

bool is_placeholder_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
}

// Finds the next {name} at or after `from`. Returns npos when none remain.
std::size_t next_placeholder(std::string_view text, std::size_t from, std::string_view& name) {
  for (auto open = text.find('{', from); open != std::string_view::npos; open = text.find('{', open + 1)) {
    auto close = open + 1;
    while (close < text.size() && is_placeholder_char(text[close])) ++close;
    if (close < text.size() && text[close] == '}' && close > open + 1) {
      name = text.substr(open + 1, close - open - 1);
      return open;
    }
  }
  return std::string_view::npos;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string first_line(std::string_view s) {
  const auto nl = s.find('\n');
  return std::string(nl == std::string_view::npos ? s : s.substr(0, nl));
}

std::string var_or_empty(const PromptVars& vars, std::string_view key) {
  auto it = vars.find(key);
  return it == vars.end() ? std::string() : it->second;
}

// True when the token sequence of `needle` appears contiguously in `hay`.
bool contains_tokens(std::string_view hay, std::string_view needle) {
  const auto h = tokenize(hay);
  const auto n = tokenize(needle);
  if (n.empty()) return false;
  return std::search(h.begin(), h.end(), n.begin(), n.end()) != h.end();
}

}  // namespace

std::string_view to_string(Role role) {
  switch (role) {
    case Role::generator: return "generator";
    case Role::user: return "user";
    case Role::grader: return "grader";
  }
  return "?";
}

std::string_view to_string(PromptName name) {
  switch (name) {
    case PromptName::decision: return "decision";
    case PromptName::query_gen: return "query_gen";
    case PromptName::guidance: return "guidance";
    case PromptName::grading: return "grading";
    case PromptName::reformulate: return "reformulate";
  }
  return "?";
}

Role role_from_string(std::string_view s) {
  for (Role r : {Role::generator, Role::user, Role::grader})
    if (to_string(r) == s) return r;
  throw ContractViolation("unknown role '" + std::string(s) + "'");
}

PromptName prompt_name_from_string(std::string_view s) {
  for (PromptName p : {PromptName::decision, PromptName::query_gen, PromptName::guidance, PromptName::grading,
                       PromptName::reformulate})
    if (to_string(p) == s) return p;
  throw ContractViolation("unknown prompt template '" + std::string(s) + "'");
}

const PromptTemplate& builtin_template(PromptName name) {
  switch (name) {
    case PromptName::decision: return kDecision;
    case PromptName::query_gen: return kQueryGen;
    case PromptName::guidance: return kGuidance;
    case PromptName::grading: return kGrading;
    case PromptName::reformulate: return kReformulate;
  }
  throw ContractViolation("unknown prompt template");
}

std::vector<std::string> placeholders(std::string_view text) {
  std::vector<std::string> names;
  std::string_view name;
  for (auto pos = next_placeholder(text, 0, name); pos != std::string_view::npos;
       pos = next_placeholder(text, pos + name.size() + 2, name)) {
    if (std::find(names.begin(), names.end(), name) == names.end()) names.emplace_back(name);
  }
  return names;
}

std::string render_prompt(const PromptTemplate& tpl, const PromptVars& vars) {
  const std::string_view text = tpl.text;
  std::string out;
  out.reserve(text.size());
  std::size_t cursor = 0;
  std::string_view name;
  for (auto pos = next_placeholder(text, 0, name); pos != std::string_view::npos;
       pos = next_placeholder(text, cursor, name)) {
    auto it = vars.find(name);
    if (it == vars.end()) {
      throw ContractViolation("prompt '" + std::string(to_string(tpl.name)) + "' is missing a value for {" +
                              std::string(name) + "}");
    }
    out.append(text.substr(cursor, pos - cursor));
    out.append(it->second);
    cursor = pos + name.size() + 2;
  }
  out.append(text.substr(cursor));
  return out;
}

std::string format_confidence(double confidence) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", confidence * 100.0);
  return buf;
}

std::string render_decision_prompt(std::string_view context, std::string_view question,
                                   std::optional<double> confidence) {
  PromptTemplate tpl = kDecision;
  PromptVars vars{{"context", std::string(context)}, {"question", std::string(question)}};
  if (confidence) {
    vars["confidence"] = format_confidence(*confidence);
  } else {
    tpl.text.erase(tpl.text.find(kConfidenceLine), kConfidenceLine.size());
  }
  return render_prompt(tpl, vars);
}

std::string prompt_hash(std::string_view prompt) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(prompt)));
  return buf;
}

void EndpointConfig::validate() const {
  if (max_retries < 0) throw ContractViolation("max_retries must be >= 0");
  if (max_in_flight < 1) throw ContractViolation("max_in_flight must be >= 1");
  if (!mock) {
    parse_base_url(base_url);
    if (model.empty()) throw ConfigurationError("endpoint '" + std::string(to_string(role)) + "' has no model");
  }
}

std::string parse_chat_reply(const std::string& body) {
  try {
    const auto j = nlohmann::json::parse(body);
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (!content.is_string()) throw ProtocolError("chat completion content is not a string");
    return content.get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("malformed chat completion response: ") + e.what());
  }
}

Completion complete(const EndpointConfig& cfg, HttpTransport& transport, const std::string& prompt,
                    double decode_temperature, const RetryHooks& hooks) {
  const nlohmann::json request = {
      {"model", cfg.model},
      {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
      {"temperature", decode_temperature}};
  const auto body = request.dump();
  Rng jitter(hooks.jitter_seed, prompt_hash(prompt));
  auto sleep = hooks.sleep ? hooks.sleep : [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };

  for (int attempt = 1;; ++attempt) {
    const auto res = transport.post_json("/chat/completions", body);
    const bool ok = res.status >= 200 && res.status < 300;
    if (ok) return {parse_chat_reply(res.body), attempt};
    const bool retryable = res.status == 0 || res.status == 429 || res.status >= 500;
    if (!retryable) {
      throw ConfigurationError("endpoint '" + std::string(to_string(cfg.role)) + "' rejected the request with HTTP " +
                                   std::to_string(res.status),
                               res.status);
    }
    if (attempt > cfg.max_retries) {
      const auto detail = res.status == 0 ? res.error : "HTTP " + std::to_string(res.status);
      throw TransportError("endpoint '" + std::string(to_string(cfg.role)) + "' failed after " +
                               std::to_string(attempt) + " attempts: " + detail,
                           res.status);
    }
    const auto base = cfg.backoff_base.count() << (attempt - 1);
    const auto extra = static_cast<long long>(static_cast<double>(base) * 0.5 * jitter.uniform());
    sleep(std::chrono::milliseconds(base + extra));
  }
}

bool parse_grade(std::string_view reply) {
  for (const auto& tok : tokenize(reply)) {
    if (tok == "yes") return true;
    if (tok == "no") return false;
  }
  throw GradingParseError("grader reply has no yes/no token: '" + std::string(reply.substr(0, 80)) + "'");
}

void MockResponder::script(PromptName tpl, std::string_view prompt_hash_hex, std::vector<std::string> replies) {
  if (replies.empty()) throw ContractViolation("mock script entry needs at least one reply");
  std::lock_guard lock(mu_);
  exact_[{tpl, std::string(prompt_hash_hex)}] = Entry{std::move(replies), 0};
}

void MockResponder::script(PromptName tpl, std::vector<std::string> replies) {
  if (replies.empty()) throw ContractViolation("mock script entry needs at least one reply");
  std::lock_guard lock(mu_);
  by_template_[tpl] = Entry{std::move(replies), 0};
}

void MockResponder::load_script(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open mock script: " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto tpl = prompt_name_from_string(j.at("template").get<std::string>());
      std::vector<std::string> replies;
      const auto& r = j.at("replies");
      if (r.is_string()) {
        replies.push_back(r.get<std::string>());
      } else {
        replies = r.get<std::vector<std::string>>();
      }
      if (j.contains("prompt_hash")) {
        script(tpl, j["prompt_hash"].get<std::string>(), std::move(replies));
      } else {
        script(tpl, std::move(replies));
      }
    } catch (const std::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::string MockResponder::take(Entry& e) {
  const auto& r = e.replies[e.next % e.replies.size()];
  ++e.next;
  return r;
}

std::string MockResponder::reply(const ChatRequest& request) {
  {
    std::lock_guard lock(mu_);
    if (auto it = exact_.find({request.tpl, prompt_hash(request.prompt)}); it != exact_.end()) {
      return take(it->second);
    }
    if (auto it = by_template_.find(request.tpl); it != by_template_.end()) return take(it->second);
  }
  if (handler_) {
    if (auto r = handler_(request)) return *r;
  }
  return builtin_reply(request);
}

std::string MockResponder::builtin_reply(const ChatRequest& request) {
  const auto& v = request.vars;
  switch (request.tpl) {
    case PromptName::query_gen:
      return "Write a paragraph about " + var_or_empty(v, "question");
    case PromptName::reformulate:
      return var_or_empty(v, "query");
    case PromptName::guidance: {
      auto ctx = var_or_empty(v, "context");
      if (ctx.size() > 400) ctx.resize(400);
      return var_or_empty(v, "title") + ": " + ctx;
    }
    case PromptName::decision:
      return first_line(var_or_empty(v, "context"));
    case PromptName::grading:
      return contains_tokens(var_or_empty(v, "prediction"), var_or_empty(v, "ground-truth")) ? "yes" : "no";
  }
  return {};
}

AuditLog::AuditLog(const std::filesystem::path& path) : out_(path, std::ios::app) {
  if (!out_) throw std::runtime_error("cannot open audit log: " + path.string());
}

void AuditLog::append(const ChatRequest& request, const Completion& completion) {
  const nlohmann::json j = {{"timestamp", utc_timestamp()},
                            {"role", to_string(request.role)},
                            {"template", to_string(request.tpl)},
                            {"prompt_hash", prompt_hash(request.prompt)},
                            {"temperature", request.temperature},
                            {"attempts", completion.attempts},
                            {"reply", completion.text}};
  std::lock_guard lock(mu_);
  out_ << j.dump() << '\n';
  out_.flush();
}

Gateway::Gateway(std::vector<EndpointConfig> endpoints, std::shared_ptr<MockResponder> mock,
                 std::shared_ptr<AuditLog> audit, GatewayOptions options, TransportFactory factory)
    : factory_(std::move(factory)), mock_(std::move(mock)), audit_(std::move(audit)), options_(std::move(options)) {
  for (auto& cfg : endpoints) {
    cfg.validate();
    auto slot = std::make_unique<Slot>();
    slot->in_flight = std::make_unique<std::counting_semaphore<>>(cfg.max_in_flight);
    slot->cfg = std::move(cfg);
    if (slot->cfg.mock && !mock_) mock_ = std::make_shared<MockResponder>();
    const auto role = slot->cfg.role;
    if (!slots_.emplace(role, std::move(slot)).second) {
      throw ContractViolation("endpoint role '" + std::string(to_string(role)) + "' configured twice");
    }
  }
  if (!factory_) {
    factory_ = [](const EndpointConfig& cfg) {
      return make_http_transport(cfg.base_url, cfg.timeout, api_key_from_env(cfg.api_key_env));
    };
  }
}

std::vector<EndpointConfig> Gateway::mock_endpoints() {
  std::vector<EndpointConfig> eps;
  for (Role r : {Role::generator, Role::user, Role::grader}) {
    EndpointConfig cfg;
    cfg.role = r;
    cfg.mock = true;
    eps.push_back(cfg);
  }
  return eps;
}

Gateway Gateway::mock_only(std::shared_ptr<MockResponder> mock, std::shared_ptr<AuditLog> audit) {
  return Gateway(mock_endpoints(), std::move(mock), std::move(audit));
}

bool Gateway::has_role(Role role) const { return slots_.count(role) > 0; }

const EndpointConfig& Gateway::endpoint(Role role) const {
  auto it = slots_.find(role);
  if (it == slots_.end()) {
    throw ConfigurationError("no endpoint configured for role '" + std::string(to_string(role)) + "'");
  }
  return it->second->cfg;
}

Completion Gateway::call_endpoint(Slot& slot, const std::string& prompt, double temperature) {
  std::unique_ptr<HttpTransport> transport;
  {
    std::lock_guard lock(slot.pool_mu);
    if (!slot.idle.empty()) {
      transport = std::move(slot.idle.back());
      slot.idle.pop_back();
    }
  }
  if (!transport) transport = factory_(slot.cfg);
  auto result = complete(slot.cfg, *transport, prompt, temperature, options_.retry);
  std::lock_guard lock(slot.pool_mu);
  slot.idle.push_back(std::move(transport));
  return result;
}

Completion Gateway::send(Role role, PromptName tpl, std::string prompt, PromptVars vars,
                         std::optional<double> temperature) {
  auto it = slots_.find(role);
  if (it == slots_.end()) {
    throw ConfigurationError("no endpoint configured for role '" + std::string(to_string(role)) + "'");
  }
  Slot& slot = *it->second;
  ChatRequest request{role, tpl, std::move(prompt), temperature.value_or(slot.cfg.temperature), std::move(vars)};

  Completion completion;
  if (slot.cfg.mock) {
    completion = {mock_->reply(request), 1};
  } else {
    slot.in_flight->acquire();
    try {
      completion = call_endpoint(slot, request.prompt, request.temperature);
    } catch (...) {
      slot.in_flight->release();
      throw;
    }
    slot.in_flight->release();
  }
  attempts_ += completion.attempts;
  if (audit_) audit_->append(request, completion);
  return completion;
}

Completion Gateway::ask(Role role, PromptName tpl, const PromptVars& vars, std::optional<double> temperature) {
  return send(role, tpl, render_prompt(builtin_template(tpl), vars), vars, temperature);
}

bool Gateway::grade(std::string_view question, std::string_view truth, std::string_view prediction) {
  const auto reply = ask(Role::grader, PromptName::grading,
                         {{"question", std::string(question)},
                          {"ground-truth", std::string(truth)},
                          {"prediction", std::string(prediction)}});
  try {
    return parse_grade(reply.text);
  } catch (const GradingParseError&) {
    ++parse_failures_;
    if (options_.unparseable_grade_is_incorrect) return false;
    throw;
  }
}

}  // namespace calibrag
