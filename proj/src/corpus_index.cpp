#include "calibrag/corpus_index.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>

#include "calibrag/errors.hpp"
#include "calibrag/rng.hpp"
#include "json.hpp"

namespace calibrag {

namespace {

constexpr char32_t kInvalid = 0xFFFFFFFF;

// Decodes one code point starting at `i`; advances `i`. Malformed sequences
// consume one byte and yield kInvalid.
char32_t next_code_point(std::string_view s, std::size_t& i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  if (b0 < 0x80) {
    ++i;
    return b0;
  }
  int len = 0;
  char32_t cp = 0;
  if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07;
  } else {
    ++i;
    return kInvalid;
  }
  if (i + len > s.size()) {
    ++i;
    return kInvalid;
  }
  for (int k = 1; k < len; ++k) {
    const auto bk = static_cast<unsigned char>(s[i + k]);
    if ((bk & 0xC0) != 0x80) {
      ++i;
      return kInvalid;
    }
    cp = (cp << 6) | (bk & 0x3F);
  }
  constexpr char32_t kMin[5] = {0, 0, 0x80, 0x800, 0x10000};
  if (cp < kMin[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
    ++i;
    return kInvalid;
  }
  i += len;
  return cp;
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

// Non-ASCII code points count as word characters unless they fall in a
// punctuation, symbol, whitespace or private-use block.
bool is_word_char(char32_t cp) {
  if (cp < 0x80) {
    return (cp >= '0' && cp <= '9') || (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z');
  }
  if (cp == kInvalid) return false;
  if (cp <= 0xBF) return cp == 0xAA || cp == 0xB5 || cp == 0xBA;
  if (cp == 0xD7 || cp == 0xF7) return false;
  struct Range {
    char32_t lo, hi;
  };
  static constexpr Range kSeparators[] = {
      {0x037E, 0x037E}, {0x0387, 0x0387}, {0x055A, 0x055F}, {0x0589, 0x058A},
      {0x05BE, 0x05BE}, {0x05C0, 0x05C0}, {0x05C3, 0x05C3}, {0x060C, 0x060D},
      {0x061B, 0x061F}, {0x066A, 0x066D}, {0x06D4, 0x06D4}, {0x0964, 0x0965},
      {0x0E2F, 0x0E2F}, {0x0E5A, 0x0E5B}, {0x1680, 0x1680}, {0x2000, 0x206F},
      {0x20A0, 0x20CF}, {0x2190, 0x2BFF}, {0x2E00, 0x2E7F}, {0x3000, 0x3003},
      {0x3008, 0x3020}, {0x3030, 0x3030}, {0xE000, 0xF8FF}, {0xFE10, 0xFE1F},
      {0xFE30, 0xFE6F}, {0xFEFF, 0xFEFF}, {0xFF00, 0xFF0F}, {0xFF1A, 0xFF20},
      {0xFF3B, 0xFF40}, {0xFF5B, 0xFF65}, {0xFFF0, 0xFFFF}, {0x1F000, 0x1FAFF},
      {0xF0000, 0x10FFFF},
  };
  for (const auto& r : kSeparators) {
    if (cp >= r.lo && cp <= r.hi) return false;
  }
  return true;
}

// Simple case folding for ASCII, Latin-1, Latin Extended-A, basic Greek and
// Cyrillic. Other scripts pass through unchanged.
char32_t to_lower(char32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 0x20;
  if (cp < 0xC0) return cp;
  if (cp <= 0xDE) return cp == 0xD7 ? cp : cp + 0x20;
  if (cp >= 0x0100 && cp <= 0x0137) return cp | 1u;
  if (cp >= 0x0139 && cp <= 0x0148) return (cp & 1u) ? cp + 1 : cp;
  if (cp >= 0x014A && cp <= 0x0177) return cp | 1u;
  if (cp == 0x0178) return 0x00FF;
  if (cp >= 0x0179 && cp <= 0x017E) return (cp & 1u) ? cp + 1 : cp;
  if (cp >= 0x0391 && cp <= 0x03A9 && cp != 0x03A2) return cp + 0x20;
  if (cp == 0x0386) return 0x03AC;
  if (cp >= 0x0388 && cp <= 0x038A) return cp + 0x25;
  if (cp == 0x038C) return 0x03CC;
  if (cp == 0x038E || cp == 0x038F) return cp + 0x3F;
  if (cp >= 0x0400 && cp <= 0x040F) return cp + 0x50;
  if (cp >= 0x0410 && cp <= 0x042F) return cp + 0x20;
  return cp;
}

constexpr char kIndexMagic[8] = {'C', 'R', 'A', 'G', 'I', 'D', 'X', '\0'};
constexpr std::uint32_t kIndexVersion = 1;

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ofstream& out) : out_(out) {}
  void u32(std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out_.write(reinterpret_cast<const char*>(b), 4);
  }
  void u64(std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out_.write(reinterpret_cast<const char*>(b), 8);
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    u64(bits);
  }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

 private:
  std::ofstream& out_;
};

class BinaryReader {
 public:
  BinaryReader(std::ifstream& in, const std::filesystem::path& path) : in_(in), path_(path) {}
  std::uint32_t u32() {
    unsigned char b[4];
    read(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    unsigned char b[8];
    read(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  void read(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError("index file truncated: " + path_.string());
    }
  }

 private:
  std::ifstream& in_;
  const std::filesystem::path& path_;
};

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  std::size_t i = 0;
  while (i < text.size()) {
    const char32_t cp = next_code_point(text, i);
    if (is_word_char(cp)) {
      append_utf8(current, to_lower(cp));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

std::string indexed_text(const Document& doc) { return doc.title + " " + doc.body; }

double bm25_idf(std::size_t doc_count, std::size_t doc_freq) {
  const double n = static_cast<double>(doc_count);
  const double df = static_cast<double>(doc_freq);
  return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
}

InvertedIndex InvertedIndex::build(std::vector<Document> docs) {
  if (docs.empty()) throw ContractViolation("cannot index an empty corpus");
  if (docs.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw ContractViolation("corpus too large for 32-bit ordinals");
  }
  InvertedIndex index;
  index.docs_ = std::move(docs);
  index.finalize();
  for (std::uint32_t ord = 0; ord < index.docs_.size(); ++ord) {
    std::map<std::string, std::uint32_t> counts;
    const auto tokens = tokenize(indexed_text(index.docs_[ord]));
    for (const auto& tok : tokens) ++counts[tok];
    index.doc_lengths_.push_back(static_cast<std::uint32_t>(tokens.size()));
    for (auto& [term, tf] : counts) index.postings_[term].push_back({ord, tf});
  }
  double total = 0.0;
  for (auto len : index.doc_lengths_) total += len;
  index.avg_doc_len_ = total / static_cast<double>(index.doc_lengths_.size());
  if (!(index.avg_doc_len_ > 0.0)) {
    throw ContractViolation("corpus contains no tokens");
  }
  return index;
}

void InvertedIndex::finalize() {
  ordinal_of_.clear();
  ordinal_of_.reserve(docs_.size());
  for (std::uint32_t ord = 0; ord < docs_.size(); ++ord) {
    const auto& d = docs_[ord];
    if (d.id.empty()) throw ContractViolation("document at ordinal " + std::to_string(ord) + " has an empty id");
    if (d.title.empty() && d.body.empty()) {
      throw ContractViolation("document '" + d.id + "' has neither title nor body");
    }
    if (!ordinal_of_.emplace(d.id, ord).second) {
      throw ContractViolation("duplicate document id '" + d.id + "'");
    }
  }
}

const Document& InvertedIndex::document(std::string_view id) const {
  return docs_[ordinal(id)];
}

std::uint32_t InvertedIndex::ordinal(std::string_view id) const {
  auto it = ordinal_of_.find(std::string(id));
  if (it == ordinal_of_.end()) throw std::out_of_range("unknown document id '" + std::string(id) + "'");
  return it->second;
}

std::span<const Posting> InvertedIndex::postings(std::string_view term) const {
  auto it = postings_.find(std::string(term));
  if (it == postings_.end()) return {};
  return it->second;
}

std::uint64_t InvertedIndex::corpus_hash() const {
  std::uint64_t h = kFnvOffsetBasis;
  for (const auto& d : docs_) {
    for (std::string_view field : {std::string_view(d.id), std::string_view(d.title), std::string_view(d.body)}) {
      h = fnv1a64(field, h);
      h = fnv1a64(std::string_view("\x1f", 1), h);
    }
  }
  return h;
}

std::vector<RetrievalHit> InvertedIndex::retrieve(std::string_view query, int k,
                                                  Bm25Params params) const {
  if (k < 1) throw ContractViolation("retrieve: K must be >= 1");
  auto terms = tokenize(query);
  std::sort(terms.begin(), terms.end());
  terms.erase(std::unique(terms.begin(), terms.end()), terms.end());

  std::vector<double> scores(docs_.size(), 0.0);
  std::vector<std::uint32_t> touched;
  std::vector<char> seen(docs_.size(), 0);
  for (const auto& term : terms) {
    const auto plist = postings(term);
    if (plist.empty()) continue;
    const double idf = bm25_idf(docs_.size(), plist.size());
    for (const auto& p : plist) {
      const double tf = p.tf;
      const double norm = params.k1 * (1.0 - params.b + params.b * doc_lengths_[p.doc] / avg_doc_len_);
      scores[p.doc] += idf * tf * (params.k1 + 1.0) / (tf + norm);
      if (!seen[p.doc]) {
        seen[p.doc] = 1;
        touched.push_back(p.doc);
      }
    }
  }

  auto before = [&](std::uint32_t a, std::uint32_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return docs_[a].id < docs_[b].id;
  };
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(k), touched.size());
  std::partial_sort(touched.begin(), touched.begin() + static_cast<std::ptrdiff_t>(take), touched.end(), before);

  std::vector<RetrievalHit> hits;
  hits.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    hits.push_back({docs_[touched[i]].id, scores[touched[i]], static_cast<int>(i + 1)});
  }
  return hits;
}

// Layout (little-endian):
//   magic[8] "CRAGIDX\0", u32 version
//   u32 doc_count, then per doc: str id, str title, str body, u32 length
//   f64 avg_doc_len
//   u32 term_count, then per term (sorted): str term, u32 n, n × (u32 doc, u32 tf)
// where str is u32 byte length followed by UTF-8 bytes.
void InvertedIndex::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  BinaryWriter w(out);
  out.write(kIndexMagic, sizeof kIndexMagic);
  w.u32(kIndexVersion);
  w.u32(static_cast<std::uint32_t>(docs_.size()));
  for (std::size_t i = 0; i < docs_.size(); ++i) {
    w.str(docs_[i].id);
    w.str(docs_[i].title);
    w.str(docs_[i].body);
    w.u32(doc_lengths_[i]);
  }
  w.f64(avg_doc_len_);
  std::vector<const std::string*> terms;
  terms.reserve(postings_.size());
  for (const auto& [term, _] : postings_) terms.push_back(&term);
  std::sort(terms.begin(), terms.end(), [](auto* a, auto* b) { return *a < *b; });
  w.u32(static_cast<std::uint32_t>(terms.size()));
  for (const auto* term : terms) {
    const auto& plist = postings_.at(*term);
    w.str(*term);
    w.u32(static_cast<std::uint32_t>(plist.size()));
    for (const auto& p : plist) {
      w.u32(p.doc);
      w.u32(p.tf);
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

InvertedIndex InvertedIndex::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open index: " + path.string());
  BinaryReader r(in, path);
  char magic[8];
  r.read(magic, sizeof magic);
  if (std::memcmp(magic, kIndexMagic, sizeof magic) != 0) {
    throw FormatError("not an index file: " + path.string());
  }
  const auto version = r.u32();
  if (version != kIndexVersion) {
    throw FormatError("unsupported index version " + std::to_string(version) + " in " + path.string());
  }
  InvertedIndex index;
  const auto n = r.u32();
  if (n == 0) throw FormatError("index has no documents: " + path.string());
  index.docs_.reserve(n);
  index.doc_lengths_.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    Document d;
    d.id = r.str();
    d.title = r.str();
    d.body = r.str();
    index.docs_.push_back(std::move(d));
    index.doc_lengths_.push_back(r.u32());
  }
  index.avg_doc_len_ = r.f64();
  const auto terms = r.u32();
  index.postings_.reserve(terms);
  for (std::uint32_t t = 0; t < terms; ++t) {
    auto term = r.str();
    const auto count = r.u32();
    std::vector<Posting> plist(count);
    for (auto& p : plist) {
      p.doc = r.u32();
      p.tf = r.u32();
      if (p.doc >= n) throw FormatError("posting ordinal out of range in " + path.string());
    }
    index.postings_.emplace(std::move(term), std::move(plist));
  }
  try {
    index.finalize();
  } catch (const ContractViolation& e) {
    throw FormatError(std::string("corrupt index: ") + e.what());
  }
  return index;
}

std::vector<Document> read_corpus_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus: " + path.string());
  std::vector<Document> docs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Document d;
      d.id = j.at("id").get<std::string>();
      d.title = j.value("title", "");
      d.body = j.value("text", "");
      docs.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return docs;
}

void write_corpus_jsonl(const std::filesystem::path& path, std::span<const Document> docs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  for (const auto& d : docs) {
    out << nlohmann::json{{"id", d.id}, {"title", d.title}, {"text", d.body}}.dump() << '\n';
  }
}

}  // namespace calibrag
