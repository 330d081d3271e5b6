#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cekg/kg.hpp"

namespace cekg::grpo {

// Convex reward mixture, normalized to sum to 1 at construction.
class RewardWeights {
 public:
  RewardWeights() = default;
  // Throws InvalidArgument on negative or all-zero weights.
  static RewardWeights make(double alpha, double beta, double gamma);
  // Already-normalized weights read back from a log, kept bit-exact.
  static RewardWeights restore(double alpha, double beta, double gamma);

  double alpha() const { return alpha_; }
  double beta() const { return beta_; }
  double gamma() const { return gamma_; }

  friend bool operator==(const RewardWeights&, const RewardWeights&) = default;

 private:
  RewardWeights(double a, double b, double g) : alpha_(a), beta_(b), gamma_(g) {}
  double alpha_ = 0.4, beta_ = 0.4, gamma_ = 0.2;
};

struct RewardComponents {
  double cultural = 0.0;
  double emotional = 0.0;
  double feedback = 0.0;
  friend bool operator==(const RewardComponents&, const RewardComponents&) = default;
};

// Culture one-hot block in registry order followed by (V, A, D). Shared by
// the cultural reward and the refinement gate.
std::vector<double> culture_vad_vector(const std::set<std::string>& culture_tags, const std::optional<kg::Vad>& vad,
                                       const kg::CultureRegistry& registry);

struct CulturalReward {
  double value = 0.5;
  bool low_confidence = false;
};

// Cosine between the candidate's culture/VAD vector and the centroid of the
// retrieved entries, mapped from [-1, 1] to [0, 1]. Empty retrieval gives a
// neutral 0.5 flagged low-confidence.
CulturalReward reward_cultural(const std::set<std::string>& candidate_tags, const kg::Vad& candidate_vad,
                               const std::vector<kg::QueryHit>& retrieval, const kg::CultureRegistry& registry);

// 1 - |vad(a) - vad_expected| / |(2, 1, 1)|
double reward_emotional(const kg::Vad& action, const kg::Vad& expected);

double reward_total(const RewardComponents& c, const RewardWeights& w);

// Per-culture weight table with a default row.
struct RewardWeightTable {
  RewardWeights fallback = RewardWeights::make(0.4, 0.4, 0.2);
  std::map<std::string, RewardWeights> by_culture;

  const RewardWeights& lookup(const std::optional<std::string>& culture) const;
};

// (rating - 3) / 2; throws OutOfRangeRating outside 1..5.
double feedback_to_reward(int rating);

// ---------------------------------------------------------------------------
// Policy

extern const std::vector<std::string> kDefaultFeatureNames;

struct PolicyParams {
  std::vector<double> theta;
  std::vector<std::string> feature_names;
  std::uint64_t update_count = 0;
  std::string config_hash;

  static PolicyParams initial(std::vector<std::string> feature_names, std::vector<double> theta);

  void save(const std::filesystem::path& path) const;
  static PolicyParams load(const std::filesystem::path& path);

  friend bool operator==(const PolicyParams& a, const PolicyParams& b) {
    return a.theta == b.theta && a.feature_names == b.feature_names && a.update_count == b.update_count;
  }
};

using FeatureMatrix = std::vector<std::vector<double>>;

std::vector<double> policy_probabilities(std::span<const double> theta, const FeatureMatrix& candidates);
double log_probability(std::span<const double> theta, const FeatureMatrix& candidates, std::size_t action);

struct Transition {
  std::string state_id;
  std::size_t action = 0;
  FeatureMatrix candidate_features;
  double old_log_prob = 0.0;
  RewardComponents reward;
  double value_baseline = 0.0;
  RewardWeights weights;
  std::string bucket;

  std::span<const double> features() const { return candidate_features.at(action); }
  double reward_total() const { return grpo::reward_total(reward, weights); }

  friend bool operator==(const Transition&, const Transition&) = default;
};

// R_total - V(s)
double advantage(const Transition& t);

struct AnchorExample {
  FeatureMatrix candidate_features;
  std::size_t reference = 0;
};

std::vector<AnchorExample> load_anchors(const std::filesystem::path& path);

struct GrpoConfig {
  double epsilon = 0.2;
  double lambda_ptx = 0.05;
  double lr = 0.05;
  // Gradient-ascent steps per batch against the same logged probabilities.
  std::size_t inner_steps = 4;
  std::size_t batch_size = 16;
  double baseline_decay = 0.9;
  std::vector<AnchorExample> anchors;
};

struct ObjectiveEvaluation {
  double objective = 0.0;
  double surrogate = 0.0;
  // Mean negative log-likelihood of anchor reference actions.
  double ptx_nll = 0.0;
  std::vector<double> gradient;
  double clip_fraction = 0.0;
  double mean_ratio = 0.0;
};

// Clipped surrogate minus lambda * anchor NLL, with its analytic gradient.
ObjectiveEvaluation grpo_objective(std::span<const double> theta, const std::vector<Transition>& batch,
                                   const GrpoConfig& config);

struct UpdateDiagnostics {
  double clip_fraction = 0.0;
  double mean_ratio = 0.0;
  double objective_before = 0.0;
  double objective = 0.0;
  double ptx_nll = 0.0;
};

struct UpdateResult {
  PolicyParams policy;
  UpdateDiagnostics diagnostics;
};

// Throws EmptyBatch, InvalidArgument (epsilon outside (0,1)), NonFiniteGradient.
UpdateResult grpo_update(const PolicyParams& policy, const std::vector<Transition>& batch, const GrpoConfig& config);

// ---------------------------------------------------------------------------
// Value baseline: EMA per (culture, VAD quadrant) bucket.

std::string baseline_bucket(const std::optional<std::string>& culture, const kg::Vad& vad);

class ValueBaselines {
 public:
  explicit ValueBaselines(double decay = 0.9);

  std::optional<double> value(const std::string& bucket) const;
  // Baseline used for a new transition; unseen buckets default to 0.
  double baseline(const std::string& bucket) const { return value(bucket).value_or(0.0); }
  double decay() const { return decay_; }
  const std::map<std::string, double>& values() const { return values_; }

  friend bool operator==(const ValueBaselines&, const ValueBaselines&) = default;

 private:
  friend ValueBaselines value_update(ValueBaselines, const std::string&, double);
  double decay_;
  std::map<std::string, double> values_;
};

// V <- decay V + (1 - decay) R; an unseen bucket starts at R.
ValueBaselines value_update(ValueBaselines baselines, const std::string& bucket, double reward_total);

// ---------------------------------------------------------------------------
// Online trainer shared by the service and the offline replay.

struct SubmitOutcome {
  bool update_triggered = false;
  std::optional<UpdateDiagnostics> diagnostics;
  bool rejected = false;
};

class PolicyTrainer {
 public:
  PolicyTrainer(PolicyParams policy, GrpoConfig config);

  const PolicyParams& policy() const { return policy_; }
  const ValueBaselines& baselines() const { return baselines_; }
  const std::vector<Transition>& buffer() const { return buffer_; }
  const GrpoConfig& config() const { return config_; }
  std::size_t rejected_updates() const { return rejected_; }

  // Observes the reward in the baseline table, buffers the transition and
  // runs one grpo_update when the buffer reaches batch_size.
  SubmitOutcome submit(Transition t);
  // Replaces a still-buffered transition with the same state id; false if it
  // was already consumed by an update.
  bool replace(const Transition& t);

 private:
  PolicyParams policy_;
  GrpoConfig config_;
  ValueBaselines baselines_;
  std::vector<Transition> buffer_;
  std::size_t rejected_ = 0;
};

// Transition log: JSON Lines of {"event": "submit"|"replace", "transition": {...}}.
std::string transition_json(const Transition& t);
Transition transition_from_json(std::string_view text);

struct LoggedEvent {
  std::string event;
  Transition transition;
};

std::vector<LoggedEvent> load_transition_log(const std::filesystem::path& path);
void replay(PolicyTrainer& trainer, const std::vector<LoggedEvent>& events);

}  // namespace cekg::grpo
