#include "calibrag/feature_extract.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include "calibrag/errors.hpp"
#include "json.hpp"

namespace calibrag {

void ExtractorConfig::validate() const {
  if (h < 8) throw ContractViolation("extractor h must be >= 8, got " + std::to_string(h));
  if (mode == ExtractorMode::remote && !remote) {
    throw ContractViolation("remote extractor requires endpoint settings");
  }
  if (mode == ExtractorMode::hashed && remote) {
    throw ContractViolation("hashed extractor does not take endpoint settings");
  }
  if (remote && remote->max_in_flight < 1) {
    throw ContractViolation("max_in_flight must be >= 1");
  }
}

Eigen::MatrixXd FeatureExtractor::extract_batch(std::span<const QueryDocPair> pairs) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(pairs.size()), dim());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = extract(pairs[i].query, *pairs[i].doc).transpose();
  }
  return out;
}

FeatureVector fit_and_normalize(std::span<const double> raw, int h) {
  FeatureVector v = FeatureVector::Zero(h);
  const auto n = std::min<std::size_t>(raw.size(), static_cast<std::size_t>(h));
  for (std::size_t i = 0; i < n; ++i) v[static_cast<Eigen::Index>(i)] = raw[i];
  const double norm = v.norm();
  if (norm > 0.0) v /= norm;
  return v;
}

HashedExtractor::HashedExtractor(int h) : h_(h) {
  if (h < 8) throw ContractViolation("extractor h must be >= 8, got " + std::to_string(h));
}

std::vector<std::string> HashedExtractor::feature_tokens(std::string_view query, const Document& doc) {
  auto tokens = tokenize(query);
  tokens.emplace_back(kSeparatorToken);
  auto doc_tokens = tokenize(indexed_text(doc));
  tokens.insert(tokens.end(), std::make_move_iterator(doc_tokens.begin()),
                std::make_move_iterator(doc_tokens.end()));
  return tokens;
}

FeatureVector HashedExtractor::extract(std::string_view query, const Document& doc) const {
  const auto tokens = feature_tokens(query, doc);
  FeatureVector v = FeatureVector::Zero(h_);
  auto add = [&](std::string_view gram) {
    const auto bucket = fnv1a64(gram, kBucketHashBasis) % static_cast<std::uint64_t>(h_);
    const double sign = (fnv1a64(gram, kSignHashBasis) & 1u) ? -1.0 : 1.0;
    v[static_cast<Eigen::Index>(bucket)] += sign;
  };
  std::string bigram;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    add(tokens[i]);
    if (i + 1 < tokens.size()) {
      bigram.assign(tokens[i]).append(" ").append(tokens[i + 1]);
      add(bigram);
    }
  }
  const double norm = v.norm();
  if (norm > 0.0) v /= norm;
  return v;
}

RemoteExtractor::RemoteExtractor(int h, RemoteEmbeddingSettings settings)
    : RemoteExtractor(h, settings, nullptr) {}

RemoteExtractor::RemoteExtractor(int h, RemoteEmbeddingSettings settings, TransportFactory factory)
    : h_(h), settings_(std::move(settings)), factory_(std::move(factory)) {
  if (h < 8) throw ContractViolation("extractor h must be >= 8, got " + std::to_string(h));
  if (settings_.max_in_flight < 1) throw ContractViolation("max_in_flight must be >= 1");
  if (!factory_) {
    parse_base_url(settings_.base_url);
    factory_ = [s = settings_] {
      return make_http_transport(s.base_url, s.timeout, api_key_from_env(s.api_key_env));
    };
  }
}

std::string RemoteExtractor::request_text(std::string_view query, const Document& doc) {
  std::string text(query);
  text.append(" ").append(kSeparatorToken).append(" ").append(indexed_text(doc));
  return text;
}

FeatureVector RemoteExtractor::embed(HttpTransport& transport, const std::string& text) const {
  const nlohmann::json request = {{"model", settings_.model}, {"input", nlohmann::json::array({text})}};
  const auto res = transport.post_json("/embeddings", request.dump());
  if (res.status == 0) throw TransportError("embeddings request failed: " + res.error, 0);
  if (res.status >= 400) {
    throw TransportError("embeddings endpoint returned HTTP " + std::to_string(res.status), res.status);
  }
  std::vector<double> raw;
  try {
    const auto body = nlohmann::json::parse(res.body);
    const auto& emb = body.at("data").at(0).at("embedding");
    if (!emb.is_array()) throw ProtocolError("embedding is not an array");
    raw.reserve(emb.size());
    for (const auto& x : emb) {
      if (!x.is_number()) throw ProtocolError("embedding contains a non-numeric entry");
      raw.push_back(x.get<double>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("malformed embeddings response: ") + e.what());
  }
  for (double x : raw) {
    if (!std::isfinite(x)) throw ProtocolError("embedding contains a non-finite entry");
  }
  return fit_and_normalize(raw, h_);
}

FeatureVector RemoteExtractor::extract(std::string_view query, const Document& doc) const {
  auto transport = factory_();
  return embed(*transport, request_text(query, doc));
}

Eigen::MatrixXd RemoteExtractor::extract_batch(std::span<const QueryDocPair> pairs) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(pairs.size()), h_);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    auto transport = factory_();
    for (;;) {
      const auto i = next.fetch_add(1);
      if (i >= pairs.size()) return;
      {
        std::lock_guard lock(failure_mu);
        if (failure) return;
      }
      try {
        out.row(static_cast<Eigen::Index>(i)) =
            embed(*transport, request_text(pairs[i].query, *pairs[i].doc)).transpose();
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(settings_.max_in_flight), pairs.size());
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

std::unique_ptr<FeatureExtractor> make_extractor(const ExtractorConfig& cfg) {
  cfg.validate();
  if (cfg.mode == ExtractorMode::hashed) return std::make_unique<HashedExtractor>(cfg.h);
  return std::make_unique<RemoteExtractor>(cfg.h, *cfg.remote);
}

}  // namespace calibrag
