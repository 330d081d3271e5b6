#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cekg/config.hpp"
#include "cekg/embedding.hpp"
#include "cekg/grpo.hpp"
#include "cekg/kg.hpp"
#include "cekg/narrative.hpp"

namespace cekg::carm {

using narrative::Vector;

// ---------------------------------------------------------------------------
// Context recurrence C_t = a1 C_{t-1} + a2 I_t + a3 U_t + a4 K_t

class ContextWeights {
 public:
  ContextWeights() = default;
  // Normalises to sum 1; throws InvalidArgument on negative or all-zero input.
  static ContextWeights make(double a1, double a2, double a3, double a4);
  static ContextWeights make(const std::array<double, 4>& a) { return make(a[0], a[1], a[2], a[3]); }
  // Stored, already-normalised weights kept bit-exact.
  static ContextWeights restore(const std::array<double, 4>& a);

  const std::array<double, 4>& values() const { return a_; }
  double operator[](std::size_t i) const { return a_.at(i); }

  friend bool operator==(const ContextWeights&, const ContextWeights&) = default;

 private:
  explicit ContextWeights(std::array<double, 4> a) : a_(a) {}
  std::array<double, 4> a_{0.4, 0.3, 0.15, 0.15};
};

struct ContextState {
  Vector c_vec;
  std::optional<Vector> prev;
  Vector interaction;  // I_t
  Vector user;         // U_t
  Vector knowledge;    // K_t
  ContextWeights weights;
  std::size_t turn_index = 0;

  friend bool operator==(const ContextState&, const ContextState&) = default;
};

// Without a previous state C_0 is the zero vector and turn_index becomes 1.
// Throws DimensionMismatch when the vectors disagree in length.
ContextState update_context(const std::optional<ContextState>& prev, const Vector& interaction, const Vector& user,
                            const Vector& knowledge, const ContextWeights& weights);

// ---------------------------------------------------------------------------
// Decision cascade

inline constexpr std::string_view kComponentKg = "kg-store";
inline constexpr std::string_view kComponentHistory = "history";
inline constexpr std::string_view kComponentGeneration = "generation";
inline constexpr std::string_view kComponentPolicy = "policy";
inline constexpr std::string_view kComponentRefinement = "refinement";

struct TurnDecision {
  double cultural_relevance = 0.0;
  double emotional_intensity = 0.0;
  bool needs_knowledge = false;
  bool history_relevant = false;
  // Which rule set needs_knowledge: "relevance", "question", "declared_culture" or "".
  std::string knowledge_reason;
  std::set<std::string> activated_components;
};

struct TurnRecord;

struct Session {
  std::string session_id;
  std::optional<std::string> declared_culture;
  std::string created_at;
  std::vector<TurnRecord> turns;

  std::size_t turn_count() const;
};

// Ordered threshold cascade:
//   cultural_relevance = culture-term hits / tokens (clamped to 1)
//   emotional_intensity = |mean VAD| / sqrt(3)
//   needs_knowledge = relevance > threshold, or question form, or the first
//                     turn of a session with a declared culture
//   history_relevant = cos(I_t, centroid of earlier I) > threshold (never on turn 1)
TurnDecision assess(const narrative::TextAnalysis& analysis, const Vector& interaction, const Session& session,
                    const Thresholds& thresholds);

// High emotional intensity moves `shift` of mass from a1 to a2.
ContextWeights adapt_weights(const ContextWeights& base, const TurnDecision& decision, const Thresholds& thresholds);

// ---------------------------------------------------------------------------
// Turns and sessions

struct FeedbackRecord {
  std::size_t turn_index = 0;
  int rating = 0;
  std::string submitted_at;
};

struct TurnRecord {
  std::size_t turn_index = 0;
  std::string user_text;
  std::string response_text;
  kg::Vad response_vad = kg::Vad::neutral();
  std::optional<kg::Vad> input_vad;
  kg::Vad expected_vad = kg::Vad::neutral();
  std::optional<std::string> culture;
  std::string bucket;
  ContextState context;
  std::vector<std::string> retrieved;
  // Policy bookkeeping for the transition built when feedback arrives; empty
  // features mean the turn used the safe fallback text.
  grpo::FeatureMatrix candidate_features;
  std::size_t action = 0;
  double old_log_prob = 0.0;
  grpo::RewardComponents reward;
  grpo::RewardWeights weights;
  bool fallback = false;
  std::optional<int> rating;
  // Full decision trace, JSON text.
  std::string trace;
};

std::string turn_record_json(const TurnRecord& r);
TurnRecord turn_record_from_json(std::string_view text);

// JSON Lines session store: <dir>/index.jsonl lists sessions, <dir>/<id>.jsonl
// holds one session's turn and feedback records. Appends are fsync'ed before
// returning. Not internally synchronised.
class SessionStore {
 public:
  explicit SessionStore(std::filesystem::path dir);

  const std::filesystem::path& dir() const { return dir_; }
  Session& create(const std::string& session_id, std::optional<std::string> declared_culture, std::string created_at);
  Session* find(std::string_view id);
  const Session* find(std::string_view id) const;
  std::size_t size() const { return sessions_.size(); }
  std::vector<std::string> ids() const;

  void append_turn(Session& session, TurnRecord record);
  void append_feedback(Session& session, const FeedbackRecord& feedback);

 private:
  std::filesystem::path dir_;
  std::map<std::string, std::unique_ptr<Session>, std::less<>> sessions_;
};

// ---------------------------------------------------------------------------
// Orchestration

struct CitedEntity {
  std::string entity_id;
  std::string label;
  std::string kind;
  std::set<std::string> culture_tags;
  bool used_in_response = false;
};

struct ResponseDiagnostics {
  double comp_k = 0.0;
  double coh_e = 0.0;
  std::size_t retries = 0;
  std::size_t candidates_considered = 0;
  bool fallback = false;
  bool low_confidence = false;
};

struct FinalResponse {
  std::string text;
  kg::Vad vad = kg::Vad::neutral();
  std::vector<CitedEntity> culture_trace;
  ResponseDiagnostics diagnostics;
};

struct TurnOutcome {
  FinalResponse response;
  TurnRecord record;
};

// Loaded resources plus the fixed fusion and projection parameters. Read-only
// once constructed, so one engine serves concurrent sessions.
class Engine {
 public:
  Engine(Config config, kg::Graph graph, kg::Lexicon lexicon, narrative::TemplateRegistry templates,
         std::optional<hyp::EmbeddingModel> model);
  // Loads graph, lexicon, templates and (if configured) embeddings.
  static Engine from_config(const Config& config);

  const Config& config() const { return config_; }
  const kg::Graph& graph() const { return graph_; }
  const kg::Lexicon& lexicon() const { return lexicon_; }
  const kg::CultureRegistry& registry() const { return registry_; }
  const narrative::TemplateRegistry& templates() const { return templates_; }
  const std::optional<hyp::EmbeddingModel>& model() const { return model_; }

  Vector user_vector(const Session& session, const std::optional<kg::Vad>& current_vad) const;
  Vector knowledge_vector(const std::vector<kg::QueryHit>& retrieval) const;

  // One turn: assess -> (conditional) retrieval -> fusion -> generation ->
  // policy selection -> refinement. Does not modify the session; the caller
  // appends result.record. Errors carry the failing stage label; a generation
  // failure yields the configured fallback text instead.
  TurnOutcome orchestrate(const Session& session, std::string_view user_text, const grpo::PolicyParams& policy) const;

 private:
  Config config_;
  kg::Graph graph_;
  kg::Lexicon lexicon_;
  kg::CultureRegistry registry_;
  narrative::TemplateRegistry templates_;
  std::optional<hyp::EmbeddingModel> model_;
  narrative::MultiHeadAttention attention_;
  narrative::Matrix projection_;  // kContextDim x embedding dim
};

// Transition for a rated turn (feedback component from the rating).
grpo::Transition make_transition(const Session& session, const TurnRecord& turn, int rating, double value_baseline);

// Response body of POST /sessions/{id}/message; also the chat transcript line.
std::string response_json(const TurnOutcome& outcome);

}  // namespace cekg::carm
