#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <vector>

#include "calibrag/http_transport.hpp"

namespace calibrag {

enum class Role { generator, user, grader };
enum class PromptName { decision, query_gen, guidance, grading, reformulate };

std::string_view to_string(Role role);
std::string_view to_string(PromptName name);
Role role_from_string(std::string_view s);
PromptName prompt_name_from_string(std::string_view s);

struct PromptTemplate {
  PromptName name;
  std::string text;  // {placeholder} markers
};

using PromptVars = std::map<std::string, std::string, std::less<>>;

/// Built-in template bodies (decision prompt, open-ended query generation,
/// guidance generation, grading, query reformulation).
const PromptTemplate& builtin_template(PromptName name);

/// Names of the {placeholders} in order of first appearance.
std::vector<std::string> placeholders(std::string_view text);

/// Substitutes every {name}. Throws ContractViolation naming the first
/// placeholder without a value. Unused vars are ignored.
std::string render_prompt(const PromptTemplate& tpl, const PromptVars& vars);

/// Confidence as shown to the user: percentage with two decimals, "81.41%".
std::string format_confidence(double confidence);

/// Decision prompt; with no confidence the "Model Confidence" line is dropped.
std::string render_decision_prompt(std::string_view context, std::string_view question,
                                   std::optional<double> confidence);

/// FNV-1a of the rendered prompt as 16 lowercase hex digits.
std::string prompt_hash(std::string_view prompt);

struct EndpointConfig {
  Role role = Role::generator;
  std::string base_url;
  std::string model;
  std::chrono::milliseconds timeout{60000};
  int max_retries = 3;
  double temperature = 0.0;  // default request temperature for this role
  std::chrono::milliseconds backoff_base{500};
  int max_in_flight = 4;
  std::string api_key_env;  // optional override of CALIBRAG_API_KEY
  bool mock = false;

  void validate() const;
};

struct ChatRequest {
  Role role;
  PromptName tpl;
  std::string prompt;
  double temperature;
  PromptVars vars;  // values the prompt was rendered from (used by the mock)
};

struct Completion {
  std::string text;
  int attempts = 1;
};

struct RetryHooks {
  std::function<void(std::chrono::milliseconds)> sleep;  // default: sleep_for
  std::uint64_t jitter_seed = 0;
};

/// One chat completion over `transport` with retries on transport errors and
/// 5xx/429 responses: delay base * 2^k plus up to 50% jitter. Throws
/// TransportError when retries run out and ConfigurationError on other 4xx.
Completion complete(const EndpointConfig& cfg, HttpTransport& transport, const std::string& prompt,
                    double decode_temperature, const RetryHooks& hooks = {});

/// Pulls choices[0].message.content out of a chat completion response.
std::string parse_chat_reply(const std::string& body);

/// First "yes"/"no" token of a grader reply, case-insensitive.
/// Throws GradingParseError when neither appears.
bool parse_grade(std::string_view reply);

// Offline responder. Lookup order: exact (template, prompt hash) script entry,
// then per-template script entry, then the handler, then built-in rules.
// Script replies given as a list are served cyclically.
class MockResponder {
 public:
  using Handler = std::function<std::optional<std::string>(const ChatRequest&)>;

  void script(PromptName tpl, std::string_view prompt_hash_hex, std::vector<std::string> replies);
  void script(PromptName tpl, std::vector<std::string> replies);
  void set_handler(Handler handler) { handler_ = std::move(handler); }

  /// JSONL lines: {"template": name, "prompt_hash"?: hex, "replies": [..]}.
  void load_script(const std::filesystem::path& path);

  std::string reply(const ChatRequest& request);

  /// Deterministic default replies derived from the prompt variables.
  static std::string builtin_reply(const ChatRequest& request);

 private:
  struct Entry {
    std::vector<std::string> replies;
    std::size_t next = 0;
  };
  std::string take(Entry& e);

  std::mutex mu_;
  std::map<std::pair<PromptName, std::string>, Entry> exact_;
  std::map<PromptName, Entry> by_template_;
  Handler handler_;
};

// Append-only JSONL of every exchange: timestamp, role, template, prompt hash,
// temperature, attempts, reply.
class AuditLog {
 public:
  explicit AuditLog(const std::filesystem::path& path);
  void append(const ChatRequest& request, const Completion& completion);

 private:
  std::mutex mu_;
  std::ofstream out_;
};

struct GatewayOptions {
  bool unparseable_grade_is_incorrect = false;
  RetryHooks retry;
};

// Role-addressed access to the generator, user and grader endpoints.
class Gateway {
 public:
  using TransportFactory = std::function<std::unique_ptr<HttpTransport>(const EndpointConfig&)>;

  Gateway(std::vector<EndpointConfig> endpoints, std::shared_ptr<MockResponder> mock = nullptr,
          std::shared_ptr<AuditLog> audit = nullptr, GatewayOptions options = {},
          TransportFactory factory = nullptr);

  /// Fully offline gateway: every role answered by `mock`.
  static Gateway mock_only(std::shared_ptr<MockResponder> mock, std::shared_ptr<AuditLog> audit = nullptr);
  /// Mock endpoint configs for generator, user and grader.
  static std::vector<EndpointConfig> mock_endpoints();

  bool has_role(Role role) const;
  const EndpointConfig& endpoint(Role role) const;

  /// Renders `tpl` with `vars` and sends it to `role`.
  Completion ask(Role role, PromptName tpl, const PromptVars& vars, std::optional<double> temperature = {});
  /// Sends an already-rendered prompt.
  Completion send(Role role, PromptName tpl, std::string prompt, PromptVars vars,
                  std::optional<double> temperature = {});

  /// Grader verdict. Unparseable replies throw GradingParseError unless
  /// GatewayOptions::unparseable_grade_is_incorrect is set.
  bool grade(std::string_view question, std::string_view truth, std::string_view prediction);

  long total_attempts() const { return attempts_.load(); }
  long grading_parse_failures() const { return parse_failures_.load(); }

 private:
  struct Slot {
    EndpointConfig cfg;
    std::unique_ptr<std::counting_semaphore<>> in_flight;
    std::mutex pool_mu;
    std::vector<std::unique_ptr<HttpTransport>> idle;  // reusable connections
  };
  Completion call_endpoint(Slot& slot, const std::string& prompt, double temperature);

  std::map<Role, std::unique_ptr<Slot>> slots_;
  TransportFactory factory_;
  std::shared_ptr<MockResponder> mock_;
  std::shared_ptr<AuditLog> audit_;
  GatewayOptions options_;
  std::atomic<long> attempts_{0};
  std::atomic<long> parse_failures_{0};
};

}  // namespace calibrag
