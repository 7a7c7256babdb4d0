#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "calibrag/corpus_index.hpp"
#include "calibrag/datagen.hpp"

namespace calibrag::testing {

// Small synthetic retrieval world. Every topic has an anchor word and a set of
// keywords; a query is the anchor plus two keywords, so it retrieves exactly
// its topic's documents, ordered by keyword frequency. Each document also has
// a hidden helpfulness level, written into the text as a repeated marker
// token and drawn independently of its keyword frequencies.
struct WorldSpec {
  int topics = 10;
  int docs_per_topic = 20;
  int keywords_per_topic = 8;
  int levels = 10;
  int marker_repeat = 40;
  int tasks = 1200;
  std::uint64_t seed = 7;
};

struct World {
  WorldSpec spec;
  std::vector<Document> docs;
  std::map<std::string, int> level;  // doc id -> helpfulness level
  std::vector<TaskPair> tasks;

  double helpfulness(const std::string& doc_id) const;
  /// Relevance hook for build_dataset: the hidden level scaled to [0,1].
  RelevanceFn relevance_fn() const;
};

World make_world(const WorldSpec& spec = {});

std::string marker_token(int level);

}  // namespace calibrag::testing
