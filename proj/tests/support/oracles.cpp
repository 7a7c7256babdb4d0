#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

namespace calibrag::testing {

std::uint64_t ref_fnv1a(std::string_view bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<std::pair<double, std::string>> brute_bm25(const std::vector<Document>& docs, const std::string& query,
                                                       std::size_t k) {
  std::vector<std::map<std::string, int>> tf(docs.size());
  std::vector<double> len(docs.size());
  std::map<std::string, int> df;
  double total = 0;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    std::istringstream in(docs[d].title + " " + docs[d].body);
    std::string w;
    while (in >> w) {
      ++tf[d][w];
      ++len[d];
    }
    total += len[d];
    for (const auto& entry : tf[d]) ++df[entry.first];
  }
  const double avgdl = total / static_cast<double>(docs.size());
  const double n = static_cast<double>(docs.size());

  std::set<std::string> terms;
  std::istringstream q(query);
  for (std::string w; q >> w;) terms.insert(w);

  std::vector<std::pair<double, std::string>> scored;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    double s = 0.0;
    bool any = false;
    for (const auto& t : terms) {
      const auto it = tf[d].find(t);
      if (it == tf[d].end()) continue;
      any = true;
      const double nq = df[t];
      const double idf = std::log(1.0 + (n - nq + 0.5) / (nq + 0.5));
      const double f = it->second;
      s += idf * f * 2.2 / (f + 1.2 * (1.0 - 0.75 + 0.75 * len[d] / avgdl));
    }
    if (any) scored.emplace_back(s, docs[d].id);
  }
  std::sort(scored.begin(), scored.end(),
            [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  if (scored.size() > k) scored.resize(k);
  return scored;
}

double brute_auroc(const std::vector<PredictionRecord>& recs) {
  long half_credits = 0;
  long pairs = 0;
  for (const auto& a : recs) {
    if (!a.correct) continue;
    for (const auto& b : recs) {
      if (b.correct) continue;
      ++pairs;
      half_credits += a.confidence > b.confidence ? 2 : (a.confidence == b.confidence ? 1 : 0);
    }
  }
  return static_cast<double>(half_credits) / static_cast<double>(2 * pairs);
}

}  // namespace calibrag::testing
