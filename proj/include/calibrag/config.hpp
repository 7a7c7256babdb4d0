#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "calibrag/datagen.hpp"
#include "calibrag/feature_extract.hpp"
#include "calibrag/llm_gateway.hpp"
#include "calibrag/pipeline.hpp"
#include "calibrag/trainer.hpp"

namespace calibrag {

struct RunPaths {
  std::optional<std::filesystem::path> corpus, index, tasks, dataset, model, predictions, traces, audit_log;
};

struct EndpointSection {
  EndpointConfig endpoint;
  std::optional<std::filesystem::path> mock_script;
};

// Everything a CLI run can take from the TOML file. Command-line flags are
// applied on top by the caller.
struct RunConfig {
  std::uint64_t seed = 0;
  RunPaths paths;
  TrainConfig train;
  PipelineConfig pipeline;
  DatagenConfig datagen;
  SurrogateUserSpec surrogate;
  ExtractorConfig extractor;
  std::map<Role, EndpointSection> endpoints;
  bool unparseable_grade_is_incorrect = false;
};

/// Parses TOML text. Relative paths in [paths] and mock_script resolve
/// against `base_dir`. Unknown keys are rejected.
RunConfig parse_run_config(const std::string& toml_text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace calibrag
