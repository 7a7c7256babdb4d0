#include <atomic>
#include <cmath>
#include <set>

#include "calibrag/errors.hpp"
#include "calibrag/feature_extract.hpp"
#include "doctest.h"
#include "http_stub.hpp"
#include "json.hpp"
#include "oracles.hpp"

using namespace calibrag;

namespace {

const Document kDoc{"d1", "Paris", "The capital of France is Paris."};

// Hand-run of the hashing recipe for a given n-gram list.
Eigen::VectorXd hand_hash(const std::vector<std::string>& grams, int h) {
  Eigen::VectorXd v = Eigen::VectorXd::Zero(h);
  for (const auto& g : grams) {
    const auto bucket = testing::ref_fnv1a(g) % static_cast<std::uint64_t>(h);
    const double sign = (testing::ref_fnv1a(g, 0x84222325CBF29CE4ULL) & 1u) ? -1.0 : 1.0;
    v[static_cast<Eigen::Index>(bucket)] += sign;
  }
  return v / v.norm();
}

}  // namespace

TEST_SUITE("feature_extract") {
  TEST_CASE("hash oracle agrees with published FNV-1a vectors") {
    CHECK(testing::ref_fnv1a("") == 0xcbf29ce484222325ULL);
    CHECK(testing::ref_fnv1a("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(testing::ref_fnv1a("foobar") == 0x85944171f73967e8ULL);
    CHECK(fnv1a64("foobar") == testing::ref_fnv1a("foobar"));
  }

  TEST_CASE("identical inputs give identical vectors") {
    HashedExtractor ex(256);
    const auto a = ex.extract("capital of france", kDoc);
    const auto b = ex.extract("capital of france", kDoc);
    CHECK((a.array() == b.array()).all());
  }

  TEST_CASE("hashed vectors have unit norm and length h") {
    for (int h : {8, 64, 256, 1000}) {
      HashedExtractor ex(h);
      const auto v = ex.extract("some query words", kDoc);
      CHECK(v.size() == h);
      CHECK(std::abs(v.norm() - 1.0) <= 1e-9);
      CHECK(v.allFinite());
    }
  }

  TEST_CASE("h=8 buckets follow the hashing recipe") {
    HashedExtractor ex(8);
    const Document doc{"x", "", "b"};
    const auto v = ex.extract("a", doc);
    const auto expected = hand_hash({"a", "[SEP]", "b", "a [SEP]", "[SEP] b"}, 8);
    for (int i = 0; i < 8; ++i) CHECK(v[i] == doctest::Approx(expected[i]).epsilon(1e-15));
  }

  TEST_CASE("token stream puts the separator between query and document") {
    const auto tokens = HashedExtractor::feature_tokens("Who wrote it?", {"x", "Title", "Body text"});
    CHECK(tokens == std::vector<std::string>{"who", "wrote", "it", "[SEP]", "title", "body", "text"});
  }

  TEST_CASE("word order matters through bigrams") {
    HashedExtractor ex(256);
    const Document doc{"x", "", "c"};
    const auto ab = ex.extract("a b", doc);
    const auto ba = ex.extract("b a", doc);
    CHECK((ab - ba).norm() > 1e-6);
  }

  TEST_CASE("config validation") {
    ExtractorConfig cfg;
    cfg.h = 4;
    CHECK_THROWS_AS(cfg.validate(), ContractViolation);
    cfg.h = 8;
    CHECK_NOTHROW(cfg.validate());
    cfg.mode = ExtractorMode::remote;
    CHECK_THROWS_AS(cfg.validate(), ContractViolation);
    cfg.remote = RemoteEmbeddingSettings{"http://localhost:1", "m"};
    CHECK_NOTHROW(cfg.validate());
    cfg.mode = ExtractorMode::hashed;
    CHECK_THROWS_AS(cfg.validate(), ContractViolation);
  }

  TEST_CASE("fit_and_normalize truncates and zero-pads") {
    const std::vector<double> raw{3, 4, 12};
    const auto a = fit_and_normalize(raw, 2);
    CHECK(a[0] == doctest::Approx(0.6));
    CHECK(a[1] == doctest::Approx(0.8));
    const auto b = fit_and_normalize(raw, 5);
    CHECK(b.size() == 5);
    CHECK(b[2] == doctest::Approx(12.0 / 13.0));
    CHECK(b[4] == 0.0);
    const std::vector<double> zeros{0, 0};
    CHECK(fit_and_normalize(zeros, 3).norm() == 0.0);
  }

  TEST_CASE("batch extraction matches single extraction") {
    HashedExtractor ex(64);
    const Document d2{"d2", "Other", "words here"};
    std::vector<QueryDocPair> pairs{{"q one", &kDoc}, {"q two", &d2}};
    const auto m = ex.extract_batch(pairs);
    CHECK((m.row(0).transpose() - ex.extract("q one", kDoc)).norm() == 0.0);
    CHECK((m.row(1).transpose() - ex.extract("q two", d2)).norm() == 0.0);
  }

  TEST_CASE("remote extractor speaks the embeddings protocol") {
    testing::StubServer server;
    std::atomic<int> calls{0};
    std::string seen_model, seen_input, seen_auth;
    std::mutex mu;
    server.post("/v1/embeddings", [&](const httplib::Request& req, httplib::Response& res) {
      ++calls;
      const auto j = nlohmann::json::parse(req.body);
      {
        std::lock_guard lock(mu);
        seen_model = j.at("model");
        seen_input = j.at("input").at(0);
        seen_auth = req.get_header_value("Authorization");
      }
      // Length of the text decides the vector so order can be checked.
      const double n = static_cast<double>(seen_input.size());
      res.set_content(nlohmann::json{{"data", {{{"embedding", {n, 1.0, 2.0}}}}}}.dump(), "application/json");
    });
    server.start();
    setenv("CALIBRAG_TEST_KEY", "secret", 1);

    RemoteEmbeddingSettings s;
    s.base_url = server.url("/v1");
    s.model = "embed-small";
    s.api_key_env = "CALIBRAG_TEST_KEY";
    RemoteExtractor ex(8, s);
    const auto v = ex.extract("who", kDoc);
    CHECK(seen_model == "embed-small");
    CHECK(seen_input == RemoteExtractor::request_text("who", kDoc));
    CHECK(seen_input.find("[SEP]") != std::string::npos);
    CHECK(seen_auth == "Bearer secret");
    CHECK(v.size() == 8);
    CHECK(std::abs(v.norm() - 1.0) <= 1e-12);
    CHECK(v.tail(5).isZero(0.0));  // zero-padded past the 3 returned values

    std::vector<Document> docs;
    for (int i = 0; i < 12; ++i) docs.push_back({"d" + std::to_string(i), "", std::string(static_cast<std::size_t>(i + 1), 'x')});
    std::vector<QueryDocPair> pairs;
    for (const auto& d : docs) pairs.push_back({"q", &d});
    const auto m = ex.extract_batch(pairs);
    for (std::size_t i = 0; i < docs.size(); ++i) {
      const auto single = ex.extract("q", docs[i]);
      CHECK((m.row(static_cast<Eigen::Index>(i)).transpose() - single).norm() <= 1e-15);
    }
    CHECK(calls.load() == 1 + 12 + 12);
  }

  TEST_CASE("remote extractor errors") {
    testing::StubServer server;
    server.post("/bad/embeddings", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"data":[{"embedding":[1,"x"]}]})", "application/json");
    });
    server.post("/down/embeddings", [](const httplib::Request&, httplib::Response& res) {
      res.status = 503;
    });
    server.start();

    RemoteEmbeddingSettings s;
    s.model = "m";
    s.base_url = server.url("/bad");
    CHECK_THROWS_AS(RemoteExtractor(8, s).extract("q", kDoc), ProtocolError);
    s.base_url = server.url("/down");
    try {
      RemoteExtractor(8, s).extract("q", kDoc);
      FAIL("expected TransportError");
    } catch (const TransportError& e) {
      CHECK(e.status() == 503);
    }
    s.base_url = "http://127.0.0.1:1";
    s.timeout = std::chrono::milliseconds(500);
    CHECK_THROWS_AS(RemoteExtractor(8, s).extract("q", kDoc), TransportError);
  }
}
