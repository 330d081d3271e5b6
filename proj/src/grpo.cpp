#include "cekg/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cekg/error.hpp"

namespace cekg::grpo {

using nlohmann::json;
using nlohmann::ordered_json;

RewardWeights RewardWeights::make(double alpha, double beta, double gamma) {
  if (!(alpha >= 0.0) || !(beta >= 0.0) || !(gamma >= 0.0))
    fail(ErrorCode::InvalidArgument, "reward weights must be non-negative");
  const double s = alpha + beta + gamma;
  if (!(s > 0.0) || !std::isfinite(s)) fail(ErrorCode::InvalidArgument, "reward weights must not all be zero");
  return RewardWeights(alpha / s, beta / s, gamma / s);
}

RewardWeights RewardWeights::restore(double alpha, double beta, double gamma) {
  if (!(alpha >= 0.0) || !(beta >= 0.0) || !(gamma >= 0.0) || std::abs(alpha + beta + gamma - 1.0) > 1e-9)
    fail(ErrorCode::InvalidArgument, "stored reward weights must be a convex combination");
  return RewardWeights(alpha, beta, gamma);
}

std::vector<double> culture_vad_vector(const std::set<std::string>& culture_tags, const std::optional<kg::Vad>& vad,
                                       const kg::CultureRegistry& registry) {
  const auto& cultures = registry.cultures();
  std::vector<double> v(cultures.size() + 3, 0.0);
  for (std::size_t i = 0; i < cultures.size(); ++i) v[i] = culture_tags.count(cultures[i].code) ? 1.0 : 0.0;
  if (vad) {
    v[cultures.size()] = vad->valence();
    v[cultures.size() + 1] = vad->arousal();
    v[cultures.size() + 2] = vad->dominance();
  }
  return v;
}

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

}  // namespace

CulturalReward reward_cultural(const std::set<std::string>& candidate_tags, const kg::Vad& candidate_vad,
                               const std::vector<kg::QueryHit>& retrieval, const kg::CultureRegistry& registry) {
  if (retrieval.empty()) return {0.5, true};
  const auto cand = culture_vad_vector(candidate_tags, candidate_vad, registry);
  std::vector<double> centroid(cand.size(), 0.0);
  for (const auto& hit : retrieval) {
    const auto v = culture_vad_vector(hit.entity.culture_tags, hit.entity.vad, registry);
    for (std::size_t i = 0; i < v.size(); ++i) centroid[i] += v[i];
  }
  for (auto& c : centroid) c /= static_cast<double>(retrieval.size());
  return {(cosine(cand, centroid) + 1.0) / 2.0, false};
}

double reward_emotional(const kg::Vad& action, const kg::Vad& expected) {
  static const double diagonal = std::sqrt(6.0);
  return std::clamp(1.0 - kg::vad_distance(action, expected) / diagonal, 0.0, 1.0);
}

double reward_total(const RewardComponents& c, const RewardWeights& w) {
  return w.alpha() * c.cultural + w.beta() * c.emotional + w.gamma() * c.feedback;
}

const RewardWeights& RewardWeightTable::lookup(const std::optional<std::string>& culture) const {
  if (culture) {
    auto it = by_culture.find(*culture);
    if (it != by_culture.end()) return it->second;
  }
  return fallback;
}

double feedback_to_reward(int rating) {
  if (rating < 1 || rating > 5) fail(ErrorCode::OutOfRangeRating, "rating must be an integer in 1..5");
  return (static_cast<double>(rating) - 3.0) / 2.0;
}

// ---------------------------------------------------------------------------
// Policy

const std::vector<std::string> kDefaultFeatureNames = {"cultural_similarity", "vad_proximity", "history_affinity",
                                                       "embedding_score", "length_penalty"};

PolicyParams PolicyParams::initial(std::vector<std::string> feature_names, std::vector<double> theta) {
  if (feature_names.size() != theta.size())
    fail(ErrorCode::DimensionMismatch, "theta and feature_names must have equal length");
  PolicyParams p;
  p.feature_names = std::move(feature_names);
  p.theta = std::move(theta);
  return p;
}

void PolicyParams::save(const std::filesystem::path& path) const {
  ordered_json j;
  j["format"] = "cekg-policy-v1";
  j["feature_names"] = feature_names;
  j["theta"] = theta;
  j["update_count"] = update_count;
  j["config_hash"] = config_hash;
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) fail(ErrorCode::IoFailure, "cannot write policy " + path.string());
    out << j.dump(2) << '\n';
    if (!out) fail(ErrorCode::IoFailure, "write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

PolicyParams PolicyParams::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open policy " + path.string());
  try {
    json j;
    in >> j;
    if (j.at("format") != "cekg-policy-v1") fail(ErrorCode::FormatError, "not a cekg-policy-v1 file");
    PolicyParams p = initial(j.at("feature_names").get<std::vector<std::string>>(),
                             j.at("theta").get<std::vector<double>>());
    p.update_count = j.at("update_count").get<std::uint64_t>();
    p.config_hash = j.value("config_hash", "");
    for (double t : p.theta)
      if (!std::isfinite(t)) fail(ErrorCode::FormatError, "policy theta must be finite");
    return p;
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError, path.string() + ": " + e.what());
  }
}

namespace {

std::vector<double> logits(std::span<const double> theta, const FeatureMatrix& candidates) {
  std::vector<double> z(candidates.size(), 0.0);
  for (std::size_t b = 0; b < candidates.size(); ++b) {
    if (candidates[b].size() != theta.size())
      fail(ErrorCode::DimensionMismatch, "candidate feature length differs from theta");
    for (std::size_t i = 0; i < theta.size(); ++i) z[b] += theta[i] * candidates[b][i];
  }
  return z;
}

double log_sum_exp(const std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

// grad log pi(action) = phi_action - sum_b pi_b phi_b
std::vector<double> grad_log_prob(std::span<const double> theta, const FeatureMatrix& candidates, std::size_t action,
                                  double* log_prob_out) {
  const auto z = logits(theta, candidates);
  const double lse = log_sum_exp(z);
  std::vector<double> g(candidates[action].begin(), candidates[action].end());
  for (std::size_t b = 0; b < candidates.size(); ++b) {
    const double p = std::exp(z[b] - lse);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= p * candidates[b][i];
  }
  if (log_prob_out) *log_prob_out = z[action] - lse;
  return g;
}

}  // namespace

std::vector<double> policy_probabilities(std::span<const double> theta, const FeatureMatrix& candidates) {
  if (candidates.empty()) fail(ErrorCode::InvalidArgument, "policy needs at least one candidate");
  const auto z = logits(theta, candidates);
  const double lse = log_sum_exp(z);
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) p[i] = std::exp(z[i] - lse);
  return p;
}

double log_probability(std::span<const double> theta, const FeatureMatrix& candidates, std::size_t action) {
  if (action >= candidates.size()) fail(ErrorCode::InvalidArgument, "action index out of range");
  const auto z = logits(theta, candidates);
  return z[action] - log_sum_exp(z);
}

double advantage(const Transition& t) { return t.reward_total() - t.value_baseline; }

std::vector<AnchorExample> load_anchors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open anchors " + path.string());
  try {
    json j;
    in >> j;
    std::vector<AnchorExample> out;
    for (const auto& a : j.at("anchors")) {
      AnchorExample ex;
      ex.candidate_features = a.at("candidate_features").get<FeatureMatrix>();
      ex.reference = a.at("reference").get<std::size_t>();
      if (ex.reference >= ex.candidate_features.size())
        fail(ErrorCode::FormatError, "anchor reference index out of range");
      out.push_back(std::move(ex));
    }
    return out;
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError, path.string() + ": " + e.what());
  }
}

ObjectiveEvaluation grpo_objective(std::span<const double> theta, const std::vector<Transition>& batch,
                                   const GrpoConfig& config) {
  if (batch.empty()) fail(ErrorCode::EmptyBatch, "grpo update needs a non-empty batch");
  ObjectiveEvaluation ev;
  ev.gradient.assign(theta.size(), 0.0);
  const double lo = 1.0 - config.epsilon;
  const double hi = 1.0 + config.epsilon;
  std::size_t clipped = 0;
  for (const auto& t : batch) {
    double lp = 0.0;
    const auto g = grad_log_prob(theta, t.candidate_features, t.action, &lp);
    const double ratio = std::exp(lp - t.old_log_prob);
    const double a = advantage(t);
    ev.mean_ratio += ratio;
    // min(r A, clip(r) A): for A >= 0 the clipped branch binds above 1+eps,
    // for A < 0 below 1-eps; a binding clip contributes no gradient.
    bool binds = false;
    double term = 0.0;
    if (a >= 0.0) {
      binds = ratio > hi;
      term = std::min(ratio, hi) * a;
    } else {
      binds = ratio < lo;
      term = std::max(ratio, lo) * a;
    }
    ev.surrogate += term;
    if (binds && a != 0.0) {
      ++clipped;
    } else if (!binds) {
      for (std::size_t i = 0; i < g.size(); ++i) ev.gradient[i] += a * ratio * g[i];
    }
  }
  const double n = static_cast<double>(batch.size());
  ev.surrogate /= n;
  ev.mean_ratio /= n;
  ev.clip_fraction = static_cast<double>(clipped) / n;
  for (auto& g : ev.gradient) g /= n;

  if (config.lambda_ptx != 0.0 && !config.anchors.empty()) {
    std::vector<double> ptx_grad(theta.size(), 0.0);
    for (const auto& anchor : config.anchors) {
      double lp = 0.0;
      const auto g = grad_log_prob(theta, anchor.candidate_features, anchor.reference, &lp);
      ev.ptx_nll -= lp;
      for (std::size_t i = 0; i < g.size(); ++i) ptx_grad[i] += g[i];
    }
    const double m = static_cast<double>(config.anchors.size());
    ev.ptx_nll /= m;
    for (std::size_t i = 0; i < theta.size(); ++i) ev.gradient[i] += config.lambda_ptx * ptx_grad[i] / m;
  }
  ev.objective = ev.surrogate - config.lambda_ptx * ev.ptx_nll;
  return ev;
}

UpdateResult grpo_update(const PolicyParams& policy, const std::vector<Transition>& batch, const GrpoConfig& config) {
  if (batch.empty()) fail(ErrorCode::EmptyBatch, "grpo update needs a non-empty batch");
  if (!(config.epsilon > 0.0 && config.epsilon < 1.0))
    fail(ErrorCode::InvalidArgument, "epsilon must lie in (0, 1)");
  if (config.inner_steps == 0) fail(ErrorCode::InvalidArgument, "inner_steps must be >= 1");
  UpdateResult out{policy, {}};
  std::vector<double> theta = policy.theta;
  double clip_sum = 0.0, ratio_sum = 0.0;
  for (std::size_t step = 0; step < config.inner_steps; ++step) {
    const auto ev = grpo_objective(theta, batch, config);
    if (step == 0) out.diagnostics.objective_before = ev.objective;
    for (double g : ev.gradient)
      if (!std::isfinite(g)) fail(ErrorCode::NonFiniteGradient, "non-finite policy gradient; update rejected");
    clip_sum += ev.clip_fraction;
    ratio_sum += ev.mean_ratio;
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] += config.lr * ev.gradient[i];
  }
  for (double t : theta)
    if (!std::isfinite(t)) fail(ErrorCode::NonFiniteGradient, "non-finite policy parameters; update rejected");
  const auto final_ev = grpo_objective(theta, batch, config);
  out.policy.theta = std::move(theta);
  ++out.policy.update_count;
  const double steps = static_cast<double>(config.inner_steps);
  out.diagnostics.clip_fraction = clip_sum / steps;
  out.diagnostics.mean_ratio = ratio_sum / steps;
  out.diagnostics.objective = final_ev.objective;
  out.diagnostics.ptx_nll = final_ev.ptx_nll;
  return out;
}

// ---------------------------------------------------------------------------
// Baselines

std::string baseline_bucket(const std::optional<std::string>& culture, const kg::Vad& vad) {
  const char* v = vad.valence() >= 0.0 ? "pos" : "neg";
  const char* a = vad.arousal() >= 0.5 ? "high" : "low";
  return culture.value_or("*") + "|" + v + "-" + a;
}

ValueBaselines::ValueBaselines(double decay) : decay_(decay) {
  if (!(decay > 0.0 && decay < 1.0)) fail(ErrorCode::InvalidArgument, "baseline decay must lie in (0, 1)");
}

std::optional<double> ValueBaselines::value(const std::string& bucket) const {
  auto it = values_.find(bucket);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

ValueBaselines value_update(ValueBaselines b, const std::string& bucket, double reward_total) {
  auto [it, inserted] = b.values_.emplace(bucket, reward_total);
  if (!inserted) it->second = b.decay_ * it->second + (1.0 - b.decay_) * reward_total;
  return b;
}

// ---------------------------------------------------------------------------
// Trainer

PolicyTrainer::PolicyTrainer(PolicyParams policy, GrpoConfig config)
    : policy_(std::move(policy)), config_(std::move(config)), baselines_(config_.baseline_decay) {
  if (config_.batch_size == 0) fail(ErrorCode::ConfigInvalid, "batch_size must be >= 1");
}

SubmitOutcome PolicyTrainer::submit(Transition t) {
  baselines_ = value_update(std::move(baselines_), t.bucket, t.reward_total());
  buffer_.push_back(std::move(t));
  SubmitOutcome out;
  if (buffer_.size() < config_.batch_size) return out;
  out.update_triggered = true;
  try {
    auto r = grpo_update(policy_, buffer_, config_);
    policy_ = std::move(r.policy);
    out.diagnostics = r.diagnostics;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NonFiniteGradient) throw;
    out.rejected = true;
    ++rejected_;
  }
  buffer_.clear();
  return out;
}

bool PolicyTrainer::replace(const Transition& t) {
  for (auto& b : buffer_) {
    if (b.state_id == t.state_id) {
      b = t;
      return true;
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// Transition log

namespace {

ordered_json to_json(const Transition& t) {
  ordered_json j;
  j["state_id"] = t.state_id;
  j["action"] = t.action;
  j["candidate_features"] = t.candidate_features;
  j["old_log_prob"] = t.old_log_prob;
  j["reward_components"] = {
      {"cultural", t.reward.cultural}, {"emotional", t.reward.emotional}, {"feedback", t.reward.feedback}};
  j["value_baseline"] = t.value_baseline;
  j["weights"] = {{"alpha", t.weights.alpha()}, {"beta", t.weights.beta()}, {"gamma", t.weights.gamma()}};
  j["bucket"] = t.bucket;
  return j;
}

Transition from_json(const json& j) {
  Transition t;
  t.state_id = j.at("state_id").get<std::string>();
  t.action = j.at("action").get<std::size_t>();
  t.candidate_features = j.at("candidate_features").get<FeatureMatrix>();
  t.old_log_prob = j.at("old_log_prob").get<double>();
  const auto& rc = j.at("reward_components");
  t.reward = {rc.at("cultural").get<double>(), rc.at("emotional").get<double>(), rc.at("feedback").get<double>()};
  t.value_baseline = j.at("value_baseline").get<double>();
  const auto& w = j.at("weights");
  t.weights = RewardWeights::restore(w.at("alpha").get<double>(), w.at("beta").get<double>(), w.at("gamma").get<double>());
  t.bucket = j.at("bucket").get<std::string>();
  if (t.action >= t.candidate_features.size()) fail(ErrorCode::FormatError, "transition action out of range");
  if (t.old_log_prob > 0.0) fail(ErrorCode::FormatError, "old_log_prob must be <= 0");
  return t;
}

}  // namespace

std::string transition_json(const Transition& t) { return to_json(t).dump(); }

Transition transition_from_json(std::string_view text) {
  try {
    return from_json(json::parse(text));
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError, std::string("malformed transition: ") + e.what());
  }
}

std::vector<LoggedEvent> load_transition_log(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open transition log " + path.string());
  std::vector<LoggedEvent> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      out.push_back({j.at("event").get<std::string>(), from_json(j.at("transition"))});
    } catch (const json::exception& e) {
      fail(ErrorCode::FormatError, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      fail(ErrorCode::FormatError, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void replay(PolicyTrainer& trainer, const std::vector<LoggedEvent>& events) {
  for (const auto& e : events) {
    if (e.event == "submit") {
      trainer.submit(e.transition);
    } else if (e.event == "replace") {
      trainer.replace(e.transition);
    } else {
      fail(ErrorCode::FormatError, "unknown transition log event '" + e.event + "'");
    }
  }
}

}  // namespace cekg::grpo
