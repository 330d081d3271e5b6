#include "cekg/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cekg/error.hpp"
#include "cekg/random.hpp"

namespace cekg {

using nlohmann::json;

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

namespace {

std::filesystem::path resolve(const json& j, const char* key, const std::filesystem::path& base) {
  if (!j.contains(key) || j.at(key).is_null()) return {};
  std::filesystem::path p = j.at(key).get<std::string>();
  return p.is_absolute() ? p : base / p;
}

grpo::RewardWeights weights_from(const json& j) {
  if (j.is_array() && j.size() == 3) return grpo::RewardWeights::make(j[0], j[1], j[2]);
  return grpo::RewardWeights::make(j.at("alpha"), j.at("beta"), j.at("gamma"));
}

void require(bool ok, const std::string& msg) {
  if (!ok) fail(ErrorCode::ConfigInvalid, msg);
}

}  // namespace

Config Config::parse(std::string_view text, const std::filesystem::path& base) {
  Config c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError, std::string("config is not valid JSON: ") + e.what());
  }
  try {
    for (const auto& cj : j.at("cultures")) {
      kg::CultureInfo info;
      info.code = cj.at("code").get<std::string>();
      info.names = cj.value("names", std::vector<std::string>{});
      c.cultures.push_back(std::move(info));
    }
    require(!c.cultures.empty(), "config must declare at least one culture");
    (void)kg::CultureRegistry(c.cultures);

    const auto pj = j.value("paths", json::object());
    c.paths.graph = resolve(pj, "graph", base);
    c.paths.lexicon = resolve(pj, "lexicon", base);
    c.paths.templates = resolve(pj, "templates", base);
    c.paths.anchors = resolve(pj, "anchors", base);
    c.paths.documents = resolve(pj, "documents", base);
    c.paths.sessions = resolve(pj, "sessions", base);
    c.paths.policy = resolve(pj, "policy", base);
    c.paths.embeddings = resolve(pj, "embeddings", base);
    c.paths.report = resolve(pj, "report", base);

    const auto sj = j.value("seeds", json::object());
    c.seeds.embedding = sj.value("embedding", c.seeds.embedding);
    c.seeds.server = sj.value("server", c.seeds.server);
    c.seeds.attention = sj.value("attention", c.seeds.attention);

    const auto ej = j.value("embedding", json::object());
    c.embedding.dim = ej.value("dim", c.embedding.dim);
    c.embedding.epochs = ej.value("epochs", c.embedding.epochs);
    c.embedding.learning_rate = ej.value("learning_rate", c.embedding.learning_rate);
    c.embedding.negatives_per_positive = ej.value("negatives_per_positive", c.embedding.negatives_per_positive);
    c.embedding.margin = ej.value("margin", c.embedding.margin);
    c.embedding.max_radius = ej.value("max_radius", c.embedding.max_radius);
    c.embedding.init_scale = ej.value("init_scale", c.embedding.init_scale);
    if (ej.contains("geometry")) c.embedding.geometry = hyp::parse_geometry(ej.at("geometry").get<std::string>());
    c.embedding.seed = c.seeds.embedding;

    const auto gj = j.value("grpo", json::object());
    c.grpo.epsilon = gj.value("epsilon", c.grpo.epsilon);
    c.grpo.lambda_ptx = gj.value("lambda_ptx", c.grpo.lambda_ptx);
    c.grpo.lr = gj.value("lr", c.grpo.lr);
    c.grpo.inner_steps = gj.value("inner_steps", c.grpo.inner_steps);
    c.grpo.batch_size = gj.value("batch_size", c.grpo.batch_size);
    c.grpo.baseline_decay = gj.value("baseline_decay", c.grpo.baseline_decay);
    require(c.grpo.epsilon > 0.0 && c.grpo.epsilon < 1.0, "grpo.epsilon must lie in (0, 1)");
    require(c.grpo.batch_size >= 1, "grpo.batch_size must be >= 1");
    require(c.grpo.inner_steps >= 1, "grpo.inner_steps must be >= 1");
    require(c.grpo.baseline_decay > 0.0 && c.grpo.baseline_decay < 1.0, "grpo.baseline_decay must lie in (0, 1)");
    c.initial_theta = gj.value("initial_theta", std::vector<double>(grpo::kDefaultFeatureNames.size(), 0.0));
    require(c.initial_theta.size() == grpo::kDefaultFeatureNames.size(),
            "grpo.initial_theta must have one entry per policy feature");

    if (j.contains("context_weights")) {
      const auto w = j.at("context_weights").get<std::vector<double>>();
      require(w.size() == 4, "context_weights must have four entries");
      for (std::size_t i = 0; i < 4; ++i) c.context_weights[i] = w[i];
    }

    const auto tj = j.value("thresholds", json::object());
    c.thresholds.tau = tj.value("tau", c.thresholds.tau);
    c.thresholds.max_retries = tj.value("max_retries", c.thresholds.max_retries);
    c.thresholds.cultural_relevance = tj.value("cultural_relevance", c.thresholds.cultural_relevance);
    c.thresholds.history_relevance = tj.value("history_relevance", c.thresholds.history_relevance);
    c.thresholds.high_intensity = tj.value("high_intensity", c.thresholds.high_intensity);
    c.thresholds.intensity_shift = tj.value("intensity_shift", c.thresholds.intensity_shift);
    require(c.thresholds.tau >= 0.0 && c.thresholds.tau <= 1.0, "thresholds.tau must lie in [0, 1]");

    if (j.contains("reward_weights")) {
      const auto& rw = j.at("reward_weights");
      if (rw.contains("default")) c.reward_weights.fallback = weights_from(rw.at("default"));
      for (const auto& [code, w] : rw.items()) {
        if (code == "default") continue;
        require(c.registry().contains(code), "reward_weights names unknown culture " + code);
        c.reward_weights.by_culture.emplace(code, weights_from(w));
      }
    }

    c.retrieval_k = j.value("retrieval_k", c.retrieval_k);
    c.candidates = j.value("candidates", c.candidates);
    require(c.retrieval_k >= 1 && c.candidates >= 1, "retrieval_k and candidates must be >= 1");

    const auto srv = j.value("server", json::object());
    c.server.host = srv.value("host", c.server.host);
    c.server.port = srv.value("port", c.server.port);
    if (srv.contains("auth_token") && !srv.at("auth_token").is_null())
      c.server.auth_token = srv.at("auth_token").get<std::string>();

    c.csd_calibration = j.value("csd_calibration", c.csd_calibration);
    require(c.csd_calibration > 0.0, "csd_calibration must be positive");
    const std::string base_name = j.value("log_base", std::string("natural"));
    require(base_name == "natural" || base_name == "2", "log_base must be \"natural\" or \"2\"");
    c.log_base = base_name == "2" ? metrics::LogBase::Two : metrics::LogBase::Natural;
    c.fallback_text = j.value("fallback_text", c.fallback_text);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigInvalid, std::string("config: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ConfigInvalid) throw;
    fail(ErrorCode::ConfigInvalid, std::string("config: ") + e.what());
  }
  // nlohmann::json keeps object keys sorted, so dump() is canonical.
  c.hash = hex64(fnv1a64(j.dump()));
  c.embedding.config_hash = c.hash;
  return c;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

}  // namespace cekg
