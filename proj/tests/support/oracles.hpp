#pragma once

// Straight-line reference implementations used as test oracles. They share no
// code with the library.

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "calibrag/corpus_index.hpp"
#include "calibrag/metrics.hpp"

namespace calibrag::testing {

std::uint64_t ref_fnv1a(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

/// Exhaustive BM25 (k1 1.2, b 0.75) over whitespace-split lowercase ASCII text.
/// Returns (score, doc id) sorted best first, ties by id, truncated to k.
std::vector<std::pair<double, std::string>> brute_bm25(const std::vector<Document>& docs, const std::string& query,
                                                       std::size_t k);

/// Pairwise Mann-Whitney count; half credits are integers so only the final division rounds.
double brute_auroc(const std::vector<PredictionRecord>& recs);

}  // namespace calibrag::testing
