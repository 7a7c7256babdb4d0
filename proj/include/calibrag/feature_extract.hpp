#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "calibrag/corpus_index.hpp"
#include "calibrag/http_transport.hpp"
#include "calibrag/rng.hpp"

namespace calibrag {

using FeatureVector = Eigen::VectorXd;

// Hash-family seeds for signed feature hashing. The bucket hash is plain
// FNV-1a; the sign hash starts from a different offset basis.
inline constexpr std::uint64_t kBucketHashBasis = kFnvOffsetBasis;
inline constexpr std::uint64_t kSignHashBasis = 0x84222325CBF29CE4ULL;

/// Delimiter placed between query and document tokens.
inline constexpr std::string_view kSeparatorToken = "[SEP]";

enum class ExtractorMode { hashed, remote };

struct RemoteEmbeddingSettings {
  std::string base_url;
  std::string model;
  std::chrono::milliseconds timeout{30000};
  int max_in_flight = 4;
  std::string api_key_env;  // optional override of CALIBRAG_API_KEY
};

struct ExtractorConfig {
  ExtractorMode mode = ExtractorMode::hashed;
  int h = 256;
  std::optional<RemoteEmbeddingSettings> remote;

  /// Throws ContractViolation when h < 8 or remote settings do not match mode.
  void validate() const;
};

struct QueryDocPair {
  std::string_view query;
  const Document* doc;
};

// Frozen map from a (query, document) pair to a fixed-length vector.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual int dim() const = 0;
  virtual FeatureVector extract(std::string_view query, const Document& doc) const = 0;
  /// Default implementation extracts sequentially; row i of the result is pair i.
  virtual Eigen::MatrixXd extract_batch(std::span<const QueryDocPair> pairs) const;
};

// Signed unigram + bigram hashing, L2-normalized.
class HashedExtractor final : public FeatureExtractor {
 public:
  explicit HashedExtractor(int h);
  int dim() const override { return h_; }
  FeatureVector extract(std::string_view query, const Document& doc) const override;

  /// Token stream that gets hashed: query tokens, "[SEP]", title+body tokens.
  static std::vector<std::string> feature_tokens(std::string_view query, const Document& doc);

 private:
  int h_;
};

// OpenAI-compatible embeddings client. Vectors are truncated or zero-padded
// to h, then L2-normalized.
class RemoteExtractor final : public FeatureExtractor {
 public:
  using TransportFactory = std::function<std::unique_ptr<HttpTransport>()>;

  RemoteExtractor(int h, RemoteEmbeddingSettings settings);
  /// Test seam: every worker thread gets its own transport from `factory`.
  RemoteExtractor(int h, RemoteEmbeddingSettings settings, TransportFactory factory);

  int dim() const override { return h_; }
  FeatureVector extract(std::string_view query, const Document& doc) const override;
  /// Runs up to settings.max_in_flight requests concurrently; output order
  /// matches input order.
  Eigen::MatrixXd extract_batch(std::span<const QueryDocPair> pairs) const override;

  static std::string request_text(std::string_view query, const Document& doc);

 private:
  FeatureVector embed(HttpTransport& transport, const std::string& text) const;

  int h_;
  RemoteEmbeddingSettings settings_;
  TransportFactory factory_;
};

std::unique_ptr<FeatureExtractor> make_extractor(const ExtractorConfig& cfg);

/// Truncate/zero-pad to h and L2-normalize (all-zero stays all-zero).
FeatureVector fit_and_normalize(std::span<const double> raw, int h);

}  // namespace calibrag
