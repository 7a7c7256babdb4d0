#include <atomic>
#include <filesystem>
#include <fstream>
#include <mutex>

#include "calibrag/errors.hpp"
#include "calibrag/llm_gateway.hpp"
#include "doctest.h"
#include "http_stub.hpp"
#include "json.hpp"

using namespace calibrag;
namespace fs = std::filesystem;

namespace {

// Replays canned statuses, then succeeds with `reply`.
class ScriptedTransport : public HttpTransport {
 public:
  ScriptedTransport(std::vector<int> statuses, std::string reply)
      : statuses_(std::move(statuses)), reply_(std::move(reply)) {}
  HttpResponse post_json(const std::string& path, const std::string& body) override {
    paths.push_back(path);
    bodies.push_back(body);
    if (calls_ < statuses_.size()) {
      const int s = statuses_[calls_++];
      return {s, "", s == 0 ? "connection refused" : ""};
    }
    ++calls_;
    return {200, nlohmann::json{{"choices", {{{"message", {{"content", reply_}}}}}}}.dump(), ""};
  }
  std::vector<std::string> paths, bodies;

 private:
  std::vector<int> statuses_;
  std::string reply_;
  std::size_t calls_ = 0;
};

EndpointConfig endpoint(Role role, std::string url = "http://127.0.0.1:1") {
  EndpointConfig c;
  c.role = role;
  c.base_url = std::move(url);
  c.model = "m";
  c.backoff_base = std::chrono::milliseconds(100);
  return c;
}

std::string chat_body(const std::string& content) {
  return nlohmann::json{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}}}.dump();
}

}  // namespace

TEST_SUITE("llm_gateway") {
  TEST_CASE("decision prompt rendering") {
    const auto p = render_decision_prompt("C", "Q?", 0.81);
    CHECK(p.find("Context: C\n") != std::string::npos);
    CHECK(p.find("Question: Q?\n") != std::string::npos);
    CHECK(p.find("Model Confidence: 81.00%") != std::string::npos);
    CHECK(p.substr(p.size() - 7) == "Answer:");
    const auto without = render_decision_prompt("C", "Q?", std::nullopt);
    CHECK(without.find("Model Confidence") == std::string::npos);
    CHECK(without.find("Context: C\nQuestion: Q?\nAnswer:") != std::string::npos);
  }

  TEST_CASE("confidence formatting") {
    CHECK(format_confidence(0.8141) == "81.41%");
    CHECK(format_confidence(0.81) == "81.00%");
    CHECK(format_confidence(0.0) == "0.00%");
    CHECK(format_confidence(1.0) == "100.00%");
    CHECK(format_confidence(0.123456) == "12.35%");
  }

  TEST_CASE("guidance rendering joins title and context") {
    const auto p = render_prompt(builtin_template(PromptName::guidance),
                                 {{"question", "who?"}, {"title", "T"}, {"context", "X"}});
    CHECK(p.find("Retrieved Context: T - X\n") != std::string::npos);
    CHECK(p.find("Question: who?\n") != std::string::npos);
  }

  TEST_CASE("placeholders") {
    CHECK(placeholders("{a} and {b-c} then {a}") == std::vector<std::string>{"a", "b-c"});
    CHECK(placeholders("no braces { here }").empty());
    const PromptTemplate plain{PromptName::decision, "nothing to fill {"};
    CHECK(render_prompt(plain, {{"x", "y"}}) == "nothing to fill {");
    for (auto name : {PromptName::decision, PromptName::query_gen, PromptName::guidance, PromptName::grading,
                      PromptName::reformulate})
      CHECK(!placeholders(builtin_template(name).text).empty());
  }

  TEST_CASE("missing placeholder is named") {
    try {
      render_prompt(builtin_template(PromptName::grading), {{"question", "q"}, {"prediction", "p"}});
      FAIL("expected ContractViolation");
    } catch (const ContractViolation& e) {
      CHECK(std::string(e.what()).find("ground-truth") != std::string::npos);
    }
  }

  TEST_CASE("grade parsing") {
    CHECK(parse_grade("yes"));
    CHECK(parse_grade("Yes, it matches."));
    CHECK_FALSE(parse_grade("No."));
    CHECK_FALSE(parse_grade("  no  "));
    CHECK_THROWS_AS(parse_grade("maybe"), GradingParseError);
    CHECK_THROWS_AS(parse_grade(""), GradingParseError);
  }

  TEST_CASE("role and template names round trip") {
    for (auto r : {Role::generator, Role::user, Role::grader}) CHECK(role_from_string(to_string(r)) == r);
    for (auto n : {PromptName::decision, PromptName::query_gen, PromptName::guidance, PromptName::grading,
                   PromptName::reformulate})
      CHECK(prompt_name_from_string(to_string(n)) == n);
    CHECK_THROWS(role_from_string("critic"));
  }

  TEST_CASE("prompt hash is 16 hex digits of FNV-1a") {
    CHECK(prompt_hash("a") == "af63dc4c8601ec8c");
    CHECK(prompt_hash("foobar") == "85944171f73967e8");
  }

  TEST_CASE("chat reply parsing") {
    CHECK(parse_chat_reply(chat_body("hi")) == "hi");
    CHECK_THROWS_AS(parse_chat_reply("{}"), ProtocolError);
    CHECK_THROWS_AS(parse_chat_reply("not json"), ProtocolError);
    CHECK_THROWS_AS(parse_chat_reply(R"({"choices":[]})"), ProtocolError);
  }

  TEST_CASE("retries back off and then succeed") {
    ScriptedTransport tr({503, 0}, "done");
    std::vector<long long> slept;
    RetryHooks hooks;
    hooks.sleep = [&](std::chrono::milliseconds d) { slept.push_back(d.count()); };
    const auto c = complete(endpoint(Role::generator), tr, "prompt", 0.7, hooks);
    CHECK(c.text == "done");
    CHECK(c.attempts == 3);
    REQUIRE(slept.size() == 2);
    CHECK(slept[0] >= 100);
    CHECK(slept[0] <= 150);
    CHECK(slept[1] >= 200);
    CHECK(slept[1] <= 300);
    CHECK(tr.paths[0] == "/chat/completions");
    const auto body = nlohmann::json::parse(tr.bodies[0]);
    CHECK(body["model"] == "m");
    CHECK(body["temperature"] == 0.7);
    CHECK(body["messages"][0]["content"] == "prompt");
  }

  TEST_CASE("jitter is reproducible for a seed") {
    auto delays = [](std::uint64_t seed) {
      ScriptedTransport tr({503, 503, 503}, "ok");
      std::vector<long long> slept;
      RetryHooks hooks{[&](std::chrono::milliseconds d) { slept.push_back(d.count()); }, seed};
      complete(endpoint(Role::user), tr, "p", 1.0, hooks);
      return slept;
    };
    CHECK(delays(1) == delays(1));
  }

  TEST_CASE("retries run out") {
    ScriptedTransport tr({500, 500, 500, 500, 500}, "never");
    RetryHooks hooks{[](std::chrono::milliseconds) {}, 0};
    try {
      complete(endpoint(Role::grader), tr, "p", 0.0, hooks);
      FAIL("expected TransportError");
    } catch (const TransportError& e) {
      CHECK(e.status() == 500);
      CHECK(std::string(e.what()).find("grader") != std::string::npos);
    }
    CHECK(tr.paths.size() == 4);  // 1 + max_retries
  }

  TEST_CASE("client errors are not retried") {
    ScriptedTransport tr({404}, "never");
    int sleeps = 0;
    RetryHooks hooks{[&](std::chrono::milliseconds) { ++sleeps; }, 0};
    CHECK_THROWS_AS(complete(endpoint(Role::user), tr, "p", 1.0, hooks), ConfigurationError);
    CHECK(tr.paths.size() == 1);
    CHECK(sleeps == 0);
    ScriptedTransport limited({429}, "fine");
    CHECK(complete(endpoint(Role::user), limited, "p", 1.0, hooks).attempts == 2);
  }

  TEST_CASE("gateway over HTTP with retries") {
    testing::StubServer server;
    std::atomic<int> calls{0};
    std::mutex mu;
    double seen_temp = -1;
    std::string seen_auth;
    server.post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
      if (++calls <= 2) {
        res.status = 503;
        return;
      }
      const auto j = nlohmann::json::parse(req.body);
      std::lock_guard lock(mu);
      seen_temp = j["temperature"];
      seen_auth = req.get_header_value("Authorization");
      res.set_content(chat_body("Paris"), "application/json");
    });
    server.post("/gone/chat/completions", [](const httplib::Request&, httplib::Response& res) { res.status = 404; });
    server.start();
    setenv("CALIBRAG_GATEWAY_TEST_KEY", "tok", 1);

    auto user = endpoint(Role::user, server.url("/v1"));
    user.temperature = 1.3;
    user.api_key_env = "CALIBRAG_GATEWAY_TEST_KEY";
    auto gone = endpoint(Role::generator, server.url("/gone"));
    GatewayOptions opts;
    int sleeps = 0;
    opts.retry.sleep = [&](std::chrono::milliseconds) { ++sleeps; };
    Gateway gw({user, gone}, nullptr, nullptr, opts);

    const auto c = gw.send(Role::user, PromptName::decision, "Q", {});
    CHECK(c.text == "Paris");
    CHECK(c.attempts == 3);
    CHECK(sleeps == 2);
    CHECK(seen_temp == 1.3);
    CHECK(seen_auth == "Bearer tok");
    CHECK(gw.total_attempts() == 3);

    try {
      gw.ask(Role::generator, PromptName::reformulate, {{"query", "x"}});
      FAIL("expected ConfigurationError");
    } catch (const ConfigurationError& e) {
      CHECK(e.status() == 404);
    }
    CHECK(calls == 3);
    CHECK_THROWS_AS(gw.grade("q", "a", "p"), ConfigurationError);  // no grader role
  }

  TEST_CASE("unreachable endpoint") {
    auto cfg = endpoint(Role::user, "http://127.0.0.1:1");
    cfg.timeout = std::chrono::milliseconds(300);
    cfg.max_retries = 1;
    GatewayOptions opts;
    opts.retry.sleep = [](std::chrono::milliseconds) {};
    Gateway gw({cfg}, nullptr, nullptr, opts);
    try {
      gw.send(Role::user, PromptName::decision, "Q", {});
      FAIL("expected TransportError");
    } catch (const TransportError& e) {
      CHECK(e.status() == 0);
    }
  }

  TEST_CASE("base URL parsing") {
    const auto a = parse_base_url("https://api.example.com/v1/");
    CHECK(a.origin == "https://api.example.com");
    CHECK(a.prefix == "/v1");
    const auto b = parse_base_url("http://localhost:8080");
    CHECK(b.origin == "http://localhost:8080");
    CHECK(b.prefix.empty());
    CHECK_THROWS_AS(parse_base_url("ftp://x"), ConfigurationError);
    CHECK_THROWS_AS(parse_base_url("localhost:8080"), ConfigurationError);
    CHECK_THROWS_AS(parse_base_url(""), ConfigurationError);
  }

  TEST_CASE("endpoint validation") {
    auto c = endpoint(Role::user);
    CHECK_NOTHROW(c.validate());
    c.max_retries = -1;
    CHECK_THROWS(c.validate());
    c = endpoint(Role::user);
    c.max_in_flight = 0;
    CHECK_THROWS(c.validate());
  }

  TEST_CASE("mock lookup order") {
    MockResponder m;
    const auto prompt = render_prompt(builtin_template(PromptName::reformulate), {{"query", "q1"}});
    ChatRequest req{Role::generator, PromptName::reformulate, prompt, 0.0, {{"query", "q1"}}};
    CHECK(m.reply(req) == "q1");  // built-in rule
    m.set_handler([](const ChatRequest&) { return std::optional<std::string>("handled"); });
    CHECK(m.reply(req) == "handled");
    m.script(PromptName::reformulate, {"a", "b"});
    CHECK(m.reply(req) == "a");
    CHECK(m.reply(req) == "b");
    CHECK(m.reply(req) == "a");
    m.script(PromptName::reformulate, prompt_hash(prompt), {"exact"});
    CHECK(m.reply(req) == "exact");
    ChatRequest other{Role::generator, PromptName::reformulate, "different", 0.0, {{"query", "q2"}}};
    CHECK(m.reply(other) == "b");
    CHECK_THROWS_AS(m.script(PromptName::decision, {}), ContractViolation);
  }

  TEST_CASE("mock script file") {
    const auto dir = fs::temp_directory_path() / "calibrag_unit";
    fs::create_directories(dir);
    const auto path = dir / "mock.jsonl";
    {
      std::ofstream out(path);
      out << R"({"template":"grading","replies":["no"]})" << "\n"
          << R"({"template":"decision","prompt_hash":")" << prompt_hash("P") << R"(","replies":["forty"]})" << "\n";
    }
    auto m = std::make_shared<MockResponder>();
    m->load_script(path);
    auto gw = Gateway::mock_only(m);
    CHECK_FALSE(gw.grade("q", "a", "a"));
    CHECK(gw.send(Role::user, PromptName::decision, "P", {}).text == "forty");
    {
      std::ofstream out(path);
      out << R"({"template":"nonsense","replies":["x"]})" << "\n";
    }
    CHECK_THROWS(MockResponder().load_script(path));
  }

  TEST_CASE("built-in mock grading") {
    auto gw = Gateway::mock_only(std::make_shared<MockResponder>());
    CHECK(gw.grade("capital?", "New York", "it is new york city"));
    CHECK_FALSE(gw.grade("capital?", "New York", "Boston"));
  }

  TEST_CASE("unparseable grades") {
    auto m = std::make_shared<MockResponder>();
    m->script(PromptName::grading, {"perhaps"});
    auto strict = Gateway::mock_only(m);
    CHECK_THROWS_AS(strict.grade("q", "a", "p"), GradingParseError);
    CHECK(strict.grading_parse_failures() == 1);
    GatewayOptions lenient;
    lenient.unparseable_grade_is_incorrect = true;
    Gateway gw(Gateway::mock_endpoints(), m, nullptr, lenient);
    CHECK_FALSE(gw.grade("q", "a", "p"));
    CHECK(gw.grading_parse_failures() == 1);
  }

  TEST_CASE("audit log records every exchange") {
    const auto dir = fs::temp_directory_path() / "calibrag_unit";
    fs::create_directories(dir);
    const auto path = dir / "gateway_audit.jsonl";
    fs::remove(path);
    auto gw = Gateway::mock_only(std::make_shared<MockResponder>(), std::make_shared<AuditLog>(path));
    gw.ask(Role::generator, PromptName::reformulate, {{"query", "abc"}}, 0.2);
    gw.send(Role::user, PromptName::decision, "prompt text", {{"context", "ctx"}}, 1.4);
    std::ifstream in(path);
    std::vector<nlohmann::json> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(nlohmann::json::parse(line));
    REQUIRE(lines.size() == 2);
    CHECK(lines[0]["role"] == "generator");
    CHECK(lines[0]["template"] == "reformulate");
    CHECK(lines[0]["reply"] == "abc");
    CHECK(lines[0]["temperature"] == 0.2);
    CHECK(lines[1]["prompt_hash"] == prompt_hash("prompt text"));
    CHECK(lines[1]["attempts"] == 1);
    CHECK(lines[1]["timestamp"].get<std::string>().size() == 20);
  }

  TEST_CASE("missing role") {
    Gateway gw({}, nullptr);
    CHECK_FALSE(gw.has_role(Role::user));
    CHECK_THROWS_AS(gw.send(Role::user, PromptName::decision, "p", {}), ConfigurationError);
  }
}
