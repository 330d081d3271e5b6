#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cekg/embedding.hpp"
#include "cekg/grpo.hpp"
#include "cekg/kg.hpp"
#include "cekg/metrics.hpp"

namespace cekg {

struct Thresholds {
  double tau = 0.55;
  std::size_t max_retries = 3;
  double cultural_relevance = 0.2;
  double history_relevance = 0.3;
  // Above this emotional intensity, intensity_shift moves from alpha1 to alpha2.
  double high_intensity = 0.5;
  double intensity_shift = 0.1;
};

struct Paths {
  std::filesystem::path graph;
  std::filesystem::path lexicon;
  std::filesystem::path templates;
  std::filesystem::path anchors;
  std::filesystem::path documents;
  std::filesystem::path sessions;
  std::filesystem::path policy;      // optional
  std::filesystem::path embeddings;  // optional
  std::filesystem::path report;      // optional
};

struct Seeds {
  std::uint64_t embedding = 7;
  std::uint64_t server = 42;
  std::uint64_t attention = 11;
};

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::optional<std::string> auth_token;
};

struct Config {
  std::vector<kg::CultureInfo> cultures;
  Paths paths;
  Seeds seeds;
  hyp::EmbeddingConfig embedding;
  grpo::GrpoConfig grpo;
  std::vector<double> initial_theta;
  std::array<double, 4> context_weights{0.4, 0.3, 0.15, 0.15};
  Thresholds thresholds;
  grpo::RewardWeightTable reward_weights;
  std::size_t retrieval_k = 5;
  std::size_t candidates = 6;
  ServerConfig server;
  double csd_calibration = 1.0;
  metrics::LogBase log_base = metrics::LogBase::Natural;
  std::string fallback_text = "Thank you for sharing that with me. Could you tell me a little more?";
  // FNV-1a of the canonical JSON text, 16 hex digits.
  std::string hash;

  kg::CultureRegistry registry() const { return kg::CultureRegistry(cultures); }

  // Relative paths resolve against the config file's directory. Throws
  // ConfigInvalid (bad values), IoFailure, FormatError.
  static Config load(const std::filesystem::path& path);
  static Config parse(std::string_view json_text, const std::filesystem::path& base_dir);
};

std::string hex64(std::uint64_t v);

}  // namespace cekg
