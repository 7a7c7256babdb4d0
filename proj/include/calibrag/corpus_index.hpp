#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace calibrag {

struct Document {
  std::string id;
  std::string title;
  std::string body;
};

struct Posting {
  std::uint32_t doc;  // ordinal
  std::uint32_t tf;
  friend bool operator==(const Posting&, const Posting&) = default;
};

struct RetrievalHit {
  std::string doc_id;
  double score = 0.0;
  int rank = 0;  // 1-based
};

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
};

/// Lowercased runs of Unicode letters and digits; everything else separates.
/// Input is UTF-8; malformed bytes act as separators.
std::vector<std::string> tokenize(std::string_view text);

/// Text that gets indexed for a document: title and body joined by one space.
std::string indexed_text(const Document& doc);

/// BM25 idf with +1 smoothing; never negative.
double bm25_idf(std::size_t doc_count, std::size_t doc_freq);

// Immutable after construction; concurrent reads are safe.
class InvertedIndex {
 public:
  /// Throws ContractViolation on an empty corpus, a duplicate or empty id, or
  /// a document with neither title nor body.
  static InvertedIndex build(std::vector<Document> docs);

  static InvertedIndex load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::vector<RetrievalHit> retrieve(std::string_view query, int k,
                                     Bm25Params params = {}) const;

  std::size_t doc_count() const { return docs_.size(); }
  double avg_doc_len() const { return avg_doc_len_; }
  std::span<const std::uint32_t> doc_lengths() const { return doc_lengths_; }
  std::span<const Document> documents() const { return docs_; }
  const Document& document(std::uint32_t ordinal) const { return docs_.at(ordinal); }
  /// Throws std::out_of_range for unknown ids.
  const Document& document(std::string_view id) const;
  std::uint32_t ordinal(std::string_view id) const;

  /// Empty span for unknown terms.
  std::span<const Posting> postings(std::string_view term) const;
  std::size_t vocabulary_size() const { return postings_.size(); }

  /// FNV-1a over every document's id, title and body in ordinal order.
  std::uint64_t corpus_hash() const;

 private:
  InvertedIndex() = default;
  void finalize();

  std::vector<Document> docs_;
  std::vector<std::uint32_t> doc_lengths_;
  double avg_doc_len_ = 0.0;
  std::unordered_map<std::string, std::vector<Posting>> postings_;
  std::unordered_map<std::string, std::uint32_t> ordinal_of_;
};

inline InvertedIndex build_index(std::vector<Document> docs) {
  return InvertedIndex::build(std::move(docs));
}

/// JSONL with one {"id","title","text"} object per line. Blank lines skipped.
std::vector<Document> read_corpus_jsonl(const std::filesystem::path& path);
void write_corpus_jsonl(const std::filesystem::path& path, std::span<const Document> docs);

}  // namespace calibrag
