#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "calibrag/corpus_index.hpp"
#include "calibrag/errors.hpp"
#include "calibrag/rng.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace calibrag;
namespace fs = std::filesystem;

namespace {

std::vector<Document> random_corpus(int n, std::uint64_t seed) {
  Rng rng(seed, "corpus");
  std::vector<Document> docs;
  for (int d = 0; d < n; ++d) {
    Document doc{"d" + std::to_string(d), "", ""};
    doc.title = "w" + std::to_string(rng.below(50));
    const auto len = 1 + rng.below(40);
    for (std::uint64_t i = 0; i < len; ++i) doc.body += "w" + std::to_string(rng.below(200)) + " ";
    docs.push_back(doc);
  }
  return docs;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "calibrag_unit";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_SUITE("corpus_index") {
  TEST_CASE("tokenize splits on non-alphanumerics and lowercases") {
    CHECK(tokenize("Hello, World!") == std::vector<std::string>{"hello", "world"});
    CHECK(tokenize("").empty());
    CHECK(tokenize("BM25-scores: 3") == std::vector<std::string>{"bm25", "scores", "3"});
    CHECK(tokenize("  \t\n ").empty());
  }

  TEST_CASE("tokenize handles non-ASCII letters") {
    CHECK(tokenize("École Ünïcode") == std::vector<std::string>{"école", "ünïcode"});
    CHECK(tokenize("ΑΘΗΝΑ\u2014Москва") == std::vector<std::string>{"αθηνα", "москва"});
    CHECK(tokenize("naïve…café") == std::vector<std::string>{"naïve", "café"});
  }

  TEST_CASE("single document postings and lengths") {
    const auto idx = InvertedIndex::build({{"x", "", "a a b"}});
    REQUIRE(idx.doc_lengths().size() == 1);
    CHECK(idx.doc_lengths()[0] == 3);
    const auto a = idx.postings("a");
    REQUIRE(a.size() == 1);
    CHECK(a[0].doc == 0);
    CHECK(a[0].tf == 2);
    const auto b = idx.postings("b");
    REQUIRE(b.size() == 1);
    CHECK(b[0].tf == 1);
    CHECK(idx.postings("zzz").empty());
  }

  TEST_CASE("average document length") {
    const auto idx = InvertedIndex::build({{"1", "", "a"}, {"2", "", "a b"}});
    CHECK(idx.avg_doc_len() == doctest::Approx(1.5).epsilon(1e-15));
  }

  TEST_CASE("title and body are indexed together") {
    const auto idx = InvertedIndex::build({{"1", "Alpha", "beta"}});
    CHECK(idx.postings("alpha").size() == 1);
    CHECK(idx.postings("beta").size() == 1);
    CHECK(idx.doc_lengths()[0] == 2);
  }

  TEST_CASE("build rejects bad corpora") {
    CHECK_THROWS_AS(InvertedIndex::build({}), ContractViolation);
    try {
      InvertedIndex::build({{"dup", "", "a"}, {"dup", "", "b"}});
      FAIL("expected rejection");
    } catch (const ContractViolation& e) {
      CHECK(std::string(e.what()).find("dup") != std::string::npos);
    }
    CHECK_THROWS_AS(InvertedIndex::build({{"", "", "a"}}), ContractViolation);
    CHECK_THROWS_AS(InvertedIndex::build({{"e", "", ""}}), ContractViolation);
  }

  TEST_CASE("higher term frequency ranks first") {
    const auto idx = InvertedIndex::build({{"a", "", "x y"}, {"b", "", "x x"}});
    const auto hits = idx.retrieve("x", 2);
    REQUIRE(hits.size() == 2);
    CHECK(hits[0].doc_id == "b");
    CHECK(hits[0].rank == 1);
    CHECK(hits[1].rank == 2);
    CHECK(hits[0].score > hits[1].score);
    // By hand: idf = ln(1 + 0.5/2.5); avgdl = 2 so the length factor is 1.
    const double idf = std::log(1.0 + 0.5 / 2.5);
    CHECK(hits[0].score == doctest::Approx(idf * 2 * 2.2 / (2 + 1.2)).epsilon(1e-14));
    CHECK(hits[1].score == doctest::Approx(idf * 1 * 2.2 / (1 + 1.2)).epsilon(1e-14));
  }

  TEST_CASE("queries without corpus terms return nothing") {
    const auto idx = InvertedIndex::build({{"a", "", "x y"}});
    CHECK(idx.retrieve("nothing here", 5).empty());
    CHECK(idx.retrieve("", 5).empty());
    CHECK(idx.retrieve("!!!", 5).empty());
  }

  TEST_CASE("equal scores break ties by id") {
    const auto idx = InvertedIndex::build({{"c", "", "x"}, {"a", "", "x"}, {"b", "", "x"}});
    const auto hits = idx.retrieve("x", 3);
    REQUIRE(hits.size() == 3);
    CHECK(hits[0].doc_id == "a");
    CHECK(hits[1].doc_id == "b");
    CHECK(hits[2].doc_id == "c");
  }

  TEST_CASE("k must be positive") {
    const auto idx = InvertedIndex::build({{"a", "", "x"}});
    CHECK_THROWS_AS(idx.retrieve("x", 0), ContractViolation);
  }

  TEST_CASE("postings match a recount on a 500-doc corpus") {
    const auto docs = random_corpus(500, 1);
    const auto idx = InvertedIndex::build(docs);
    std::map<std::string, std::map<std::uint32_t, std::uint32_t>> counts;
    for (std::uint32_t d = 0; d < docs.size(); ++d) {
      std::istringstream in(docs[d].title + " " + docs[d].body);
      for (std::string w; in >> w;) ++counts[w][d];
    }
    CHECK(idx.vocabulary_size() == counts.size());
    for (const auto& [term, per_doc] : counts) {
      const auto p = idx.postings(term);
      REQUIRE(p.size() == per_doc.size());
      std::size_t i = 0;
      for (const auto& [d, tf] : per_doc) {
        CHECK(p[i].doc == d);
        CHECK(p[i].tf == tf);
        ++i;
      }
    }
  }

  TEST_CASE("retrieve equals exhaustive scoring on a 500-doc corpus") {
    const auto docs = random_corpus(500, 2);
    const auto idx = InvertedIndex::build(docs);
    Rng rng(3, "queries");
    for (int q = 0; q < 40; ++q) {
      std::string query;
      for (int i = 0; i < 3; ++i) query += "w" + std::to_string(rng.below(220)) + " ";
      const auto expected = testing::brute_bm25(docs, query, 20);
      const auto hits = idx.retrieve(query, 20);
      REQUIRE(hits.size() == expected.size());
      for (std::size_t i = 0; i < hits.size(); ++i) {
        CHECK(hits[i].doc_id == expected[i].second);
        CHECK(std::abs(hits[i].score - expected[i].first) <= 1e-12);
        CHECK(hits[i].rank == static_cast<int>(i + 1));
      }
    }
  }

  TEST_CASE("result for K is a prefix of the result for K+1") {
    const auto docs = random_corpus(200, 4);
    const auto idx = InvertedIndex::build(docs);
    for (int k = 1; k < 25; ++k) {
      const auto a = idx.retrieve("w1 w2 w3 w40", k);
      const auto b = idx.retrieve("w1 w2 w3 w40", k + 1);
      REQUIRE(a.size() <= b.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].doc_id == b[i].doc_id);
        CHECK(a[i].score == b[i].score);
      }
    }
  }

  TEST_CASE("repeated query terms count once") {
    const auto idx = InvertedIndex::build({{"a", "", "x y"}, {"b", "", "y z"}});
    const auto once = idx.retrieve("x", 2);
    const auto twice = idx.retrieve("x x", 2);
    REQUIRE(once.size() == twice.size());
    CHECK(once[0].score == twice[0].score);
  }

  TEST_CASE("index file round trip") {
    const auto docs = random_corpus(60, 5);
    const auto idx = InvertedIndex::build(docs);
    const auto path = scratch("roundtrip.idx");
    idx.save(path);
    const auto back = InvertedIndex::load(path);
    CHECK(back.doc_count() == idx.doc_count());
    CHECK(back.avg_doc_len() == idx.avg_doc_len());
    CHECK(back.corpus_hash() == idx.corpus_hash());
    CHECK(back.vocabulary_size() == idx.vocabulary_size());
    const auto a = idx.retrieve("w1 w7 w30", 10), b = back.retrieve("w1 w7 w30", 10);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].doc_id == b[i].doc_id);
      CHECK(a[i].score == b[i].score);
    }
    CHECK(back.document("d3").body == docs[3].body);
  }

  TEST_CASE("corrupt index files are rejected") {
    const auto path = scratch("corrupt.idx");
    {
      std::ofstream out(path, std::ios::binary);
      out << "not an index";
    }
    CHECK_THROWS_AS(InvertedIndex::load(path), FormatError);

    const auto good = scratch("truncated.idx");
    InvertedIndex::build(random_corpus(10, 6)).save(good);
    const auto size = fs::file_size(good);
    fs::resize_file(good, size / 2);
    CHECK_THROWS_AS(InvertedIndex::load(good), FormatError);
  }

  TEST_CASE("corpus JSONL round trip") {
    const std::vector<Document> docs{{"a", "Title A", "Body with \"quotes\""}, {"b", "", "ünïcode body"}};
    const auto path = scratch("corpus.jsonl");
    write_corpus_jsonl(path, docs);
    const auto back = read_corpus_jsonl(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].title == "Title A");
    CHECK(back[0].body == docs[0].body);
    CHECK(back[1].body == docs[1].body);
  }

  TEST_CASE("malformed corpus lines name the line") {
    const auto path = scratch("bad_corpus.jsonl");
    {
      std::ofstream out(path);
      out << "{\"id\":\"a\",\"title\":\"t\",\"text\":\"x\"}\n{\"title\":\"no id\"}\n";
    }
    try {
      read_corpus_jsonl(path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find(":2") != std::string::npos);
    }
  }

  TEST_CASE("corpus hash changes with content") {
    const auto a = InvertedIndex::build({{"a", "", "x"}});
    const auto b = InvertedIndex::build({{"a", "", "y"}});
    CHECK(a.corpus_hash() != b.corpus_hash());
  }
}
