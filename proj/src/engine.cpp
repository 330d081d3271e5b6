#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "cekg/carm.hpp"
#include "cekg/error.hpp"
#include "cekg/random.hpp"

namespace cekg::carm {

using nlohmann::ordered_json;

namespace {

narrative::Matrix knowledge_projection(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  narrative::Matrix p(rows, Vector(cols, 0.0));
  if (cols == 0) return p;
  Rng rng(splitmix64(seed ^ 0x6b70726fULL));
  const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
  for (auto& row : p)
    for (auto& x : row) x = rng.normal() * scale;
  return p;
}

std::size_t embedding_width(const std::optional<hyp::EmbeddingModel>& m) {
  if (!m) return 0;
  return m->dim;
}

// Spatial part of a hyperbolic point, or the Euclidean coordinates.
Vector spatial_coords(const hyp::EmbeddingModel& m, std::size_t entity) {
  const auto& c = m.entity_coords.at(entity);
  if (m.geometry == hyp::Geometry::Hyperbolic) return Vector(c.begin() + 1, c.end());
  return c;
}

ordered_json vad_json(const kg::Vad& v) {
  return {{"valence", v.valence()}, {"arousal", v.arousal()}, {"dominance", v.dominance()}};
}

template <typename F>
auto run_stage(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    if (!e.stage().empty()) throw;
    throw e.with_stage(stage);
  }
}

std::uint64_t turn_seed(std::uint64_t server_seed, const std::string& session_id, std::size_t turn) {
  return splitmix64(server_seed ^ fnv1a64(session_id) ^ splitmix64(static_cast<std::uint64_t>(turn)));
}

}  // namespace

Engine::Engine(Config config, kg::Graph graph, kg::Lexicon lexicon, narrative::TemplateRegistry templates,
               std::optional<hyp::EmbeddingModel> model)
    : config_(std::move(config)),
      graph_(std::move(graph)),
      lexicon_(std::move(lexicon)),
      registry_(config_.cultures),
      templates_(std::move(templates)),
      model_(std::move(model)),
      attention_(narrative::AttentionParams{narrative::kContextDim, 4, config_.seeds.attention}),
      projection_(knowledge_projection(narrative::kContextDim, embedding_width(model_), config_.seeds.attention)) {}

Engine Engine::from_config(const Config& config) {
  auto graph = kg::load(config.paths.graph);
  auto lexicon = kg::Lexicon::load_tsv(config.paths.lexicon);
  auto templates = narrative::TemplateRegistry::load(config.paths.templates);
  std::optional<hyp::EmbeddingModel> model;
  if (!config.paths.embeddings.empty()) model = hyp::EmbeddingModel::load(config.paths.embeddings);
  return Engine(config, std::move(graph), std::move(lexicon), std::move(templates), std::move(model));
}

Vector Engine::user_vector(const Session& session, const std::optional<kg::Vad>& current_vad) const {
  const std::size_t dim = narrative::kContextDim;
  const std::size_t slots = dim - 3;
  Vector u(dim, 0.0);
  if (session.declared_culture) u[fnv1a64("c:" + *session.declared_culture) % slots] = 1.0;
  double v = 0.0, a = 0.0, d = 0.0;
  std::size_t n = 0;
  auto add = [&](const kg::Vad& x) {
    v += x.valence();
    a += x.arousal();
    d += x.dominance();
    ++n;
  };
  for (const auto& t : session.turns)
    if (t.input_vad) add(*t.input_vad);
  if (current_vad) add(*current_vad);
  if (n) {
    const double k = static_cast<double>(n);
    u[slots] = v / k;
    u[slots + 1] = a / k;
    u[slots + 2] = d / k;
  }
  return u;
}

Vector Engine::knowledge_vector(const std::vector<kg::QueryHit>& retrieval) const {
  Vector k(narrative::kContextDim, 0.0);
  if (!model_ || retrieval.empty()) return k;
  Vector centroid(model_->dim, 0.0);
  std::size_t n = 0;
  for (const auto& h : retrieval) {
    if (!model_->has_entity(h.entity.id)) continue;
    const auto c = spatial_coords(*model_, model_->entity_index(h.entity.id));
    for (std::size_t i = 0; i < centroid.size(); ++i) centroid[i] += c[i];
    ++n;
  }
  if (!n) return k;
  for (auto& c : centroid) c /= static_cast<double>(n);
  return narrative::mat_vec(projection_, centroid);
}

TurnOutcome Engine::orchestrate(const Session& session, std::string_view user_text,
                                const grpo::PolicyParams& policy) const {
  const std::size_t turn_index = session.turns.size() + 1;
  ordered_json stages = ordered_json::array();
  auto stage = [&](const char* name, const char* status, ordered_json detail = ordered_json::object()) {
    stages.push_back({{"stage", name}, {"status", status}, {"detail", std::move(detail)}});
  };

  // assess
  const auto analysis = run_stage("assess", [&] { return narrative::analyze_text(user_text, lexicon_, registry_); });
  const Vector interaction = narrative::text_vector(analysis);
  const TurnDecision decision = assess(analysis, interaction, session, config_.thresholds);
  stage("assess", "executed",
        {{"cultural_relevance", decision.cultural_relevance},
         {"emotional_intensity", decision.emotional_intensity},
         {"needs_knowledge", decision.needs_knowledge},
         {"knowledge_reason", decision.knowledge_reason},
         {"history_relevant", decision.history_relevant},
         {"question", analysis.question}});

  std::set<std::string> cultures = analysis.mentioned_cultures;
  if (session.declared_culture) cultures.insert(*session.declared_culture);
  std::optional<std::string> primary = session.declared_culture;
  if (!primary && !analysis.mentioned_cultures.empty()) primary = *analysis.mentioned_cultures.begin();

  // retrieval
  std::vector<kg::QueryHit> retrieval;
  if (decision.needs_knowledge) {
    try {
      retrieval = kg::query_cultural(graph_, cultures, analysis.mean_vad, config_.retrieval_k);
      ordered_json ids = ordered_json::array();
      for (const auto& h : retrieval) ids.push_back(h.entity.id);
      stage("kg_query", "executed",
            {{"cultures", cultures}, {"k", config_.retrieval_k}, {"retrieved", std::move(ids)}});
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptyGraph) throw e.with_stage("kg_query");
      stage("kg_query", "empty", {{"reason", "no knowledge available; culture-neutral generation"}});
    }
  } else {
    stage("kg_query", "skipped", {{"reason", "cultural relevance below threshold and no question form"}});
  }

  // context recurrence and fusion
  const Vector user = user_vector(session, analysis.mean_vad);
  const Vector knowledge = knowledge_vector(retrieval);
  const ContextWeights weights =
      adapt_weights(ContextWeights::make(config_.context_weights), decision, config_.thresholds);
  std::optional<ContextState> prev;
  if (!session.turns.empty()) prev = session.turns.back().context;
  const ContextState context =
      run_stage("context", [&] { return update_context(prev, interaction, user, knowledge, weights); });
  stage("context", "executed", {{"weights", weights.values()}, {"turn_index", context.turn_index}});

  std::vector<Vector> keys, values;
  if (decision.history_relevant) {
    for (const auto& t : session.turns) {
      keys.push_back(t.context.interaction);
      values.push_back(t.context.knowledge);
    }
  }
  keys.push_back(interaction);
  values.push_back(knowledge);
  const auto fused = run_stage("fusion", [&] { return attention_.forward(interaction, keys, values); });
  stage("history", decision.history_relevant ? "executed" : "skipped",
        {{"history_turns", decision.history_relevant ? session.turns.size() : 0}});
  stage("fusion", "executed", {{"keys", keys.size()}, {"attention_weights", fused.attention_weights}});

  const kg::Vad expected = analysis.mean_vad.value_or(kg::Vad::neutral());
  const auto reward_weights = config_.reward_weights.lookup(primary);
  const std::uint64_t seed = turn_seed(config_.seeds.server, session.session_id, turn_index);

  TurnOutcome out;
  TurnRecord& rec = out.record;
  rec.turn_index = turn_index;
  rec.user_text = std::string(user_text);
  rec.input_vad = analysis.mean_vad;
  rec.expected_vad = expected;
  rec.culture = primary;
  rec.bucket = grpo::baseline_bucket(primary, expected);
  rec.context = context;
  for (const auto& h : retrieval) rec.retrieved.push_back(h.entity.id);
  rec.weights = reward_weights;

  FinalResponse& resp = out.response;
  for (const auto& h : retrieval)
    resp.culture_trace.push_back({h.entity.id, h.entity.label, std::string(kg::to_string(h.entity.kind)),
                                  h.entity.culture_tags, false});

  // generation
  std::vector<narrative::ResponseCandidate> candidates;
  try {
    narrative::GenerationInputs in;
    in.registry = &registry_;
    in.lexicon = &lexicon_;
    in.model = model_ ? &*model_ : nullptr;
    in.target_cultures = cultures;
    in.context = context.c_vec;
    in.seed = seed;
    candidates = narrative::generate_candidates(templates_, fused, retrieval, expected, config_.candidates, in);
  } catch (const Error& e) {
    stage("generation", "failed", {{"error_code", to_string(e.code())}, {"message", e.what()}});
  }

  ordered_json policy_detail, refine_detail;
  if (candidates.empty()) {
    // Total generation failure: the configured safe response.
    narrative::ResponseCandidate safe;
    safe.text = config_.fallback_text;
    const auto g = narrative::gate_score(safe, retrieval, expected, registry_);
    resp.text = safe.text;
    resp.vad = safe.vad;
    resp.diagnostics = {g.comp_k, g.coh_e, 0, 0, true, g.low_confidence};
    rec.fallback = true;
    stage("policy", "skipped", {{"reason", "no candidates"}});
    stage("refinement", "skipped", {{"reason", "no candidates"}});
  } else {
    ordered_json gen = ordered_json::array();
    for (const auto& c : candidates)
      gen.push_back({{"template_id", c.template_id}, {"text", c.text}, {"intensity", narrative::to_string(c.intensity)},
                     {"features", c.features}});
    stage("generation", "executed", {{"candidates", std::move(gen)}});

    // policy selection
    grpo::FeatureMatrix features;
    for (const auto& c : candidates) features.push_back(c.features);
    const auto probs = run_stage("policy", [&] { return grpo::policy_probabilities(policy.theta, features); });
    Rng rng(seed);
    const double u = rng.uniform();
    std::size_t sampled = probs.size() - 1;
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) {
        sampled = i;
        break;
      }
    }
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if ((a == sampled) != (b == sampled)) return a == sampled;
      return probs[a] > probs[b];
    });
    std::vector<narrative::ResponseCandidate> ranked;
    for (std::size_t i : order) ranked.push_back(candidates[i]);
    stage("policy", "executed", {{"probabilities", probs}, {"sampled", sampled}, {"order", order}});

    // refinement gate
    const auto result = run_stage("refinement", [&] {
      return narrative::refine(ranked, retrieval, expected, registry_,
                               {config_.thresholds.tau, config_.thresholds.max_retries});
    });
    ordered_json considered = ordered_json::array();
    for (const auto& g : result.considered) considered.push_back({{"comp_k", g.comp_k}, {"coh_e", g.coh_e}});
    stage("refinement", "executed",
          {{"tau", config_.thresholds.tau},
           {"considered", std::move(considered)},
           {"accepted_rank", result.index},
           {"fallback", result.fallback}});

    const std::size_t action = order[result.index];
    const auto& chosen = result.candidate;
    resp.text = chosen.text;
    resp.vad = chosen.vad;
    resp.diagnostics = {result.score.comp_k, result.score.coh_e, result.retries, result.candidates_considered,
                        result.fallback, result.score.low_confidence};
    for (auto& ce : resp.culture_trace)
      ce.used_in_response = std::find(chosen.cited.begin(), chosen.cited.end(), ce.entity_id) != chosen.cited.end();

    rec.candidate_features = std::move(features);
    rec.action = action;
    rec.old_log_prob = std::log(probs[action]);
    rec.reward = {result.score.comp_k, result.score.coh_e, 0.0};
    rec.fallback = result.fallback;
    policy_detail = {{"template_id", chosen.template_id}, {"action", action}, {"probability", probs[action]}};
  }

  rec.response_text = resp.text;
  rec.response_vad = resp.vad;

  ordered_json trace;
  trace["turn_index"] = turn_index;
  trace["stages"] = std::move(stages);
  trace["activated_components"] = decision.activated_components;
  ordered_json ct = ordered_json::array();
  for (const auto& c : resp.culture_trace)
    ct.push_back({{"entity_id", c.entity_id},
                  {"label", c.label},
                  {"kind", c.kind},
                  {"culture_tags", c.culture_tags},
                  {"used_in_response", c.used_in_response}});
  trace["culture_trace"] = std::move(ct);
  trace["selection"] = policy_detail.is_null() ? ordered_json(nullptr) : policy_detail;
  trace["reward_components"] = {{"cultural", rec.reward.cultural}, {"emotional", rec.reward.emotional}};
  trace["reward_weights"] = {
      {"alpha", reward_weights.alpha()}, {"beta", reward_weights.beta()}, {"gamma", reward_weights.gamma()}};
  trace["expected_vad"] = vad_json(expected);
  rec.trace = trace.dump();
  return out;
}

grpo::Transition make_transition(const Session& session, const TurnRecord& turn, int rating, double value_baseline) {
  if (turn.candidate_features.empty())
    fail(ErrorCode::InvalidArgument, "turn " + std::to_string(turn.turn_index) + " has no policy decision");
  grpo::Transition t;
  t.state_id = session.session_id + ":" + std::to_string(turn.turn_index);
  t.action = turn.action;
  t.candidate_features = turn.candidate_features;
  t.old_log_prob = turn.old_log_prob;
  t.reward = {turn.reward.cultural, turn.reward.emotional, grpo::feedback_to_reward(rating)};
  t.value_baseline = value_baseline;
  t.weights = turn.weights;
  t.bucket = turn.bucket;
  return t;
}

std::string response_json(const TurnOutcome& o) {
  ordered_json j;
  j["turn_index"] = o.record.turn_index;
  j["response_text"] = o.response.text;
  j["vad"] = vad_json(o.response.vad);
  ordered_json ct = ordered_json::array();
  for (const auto& c : o.response.culture_trace)
    ct.push_back({{"entity_id", c.entity_id},
                  {"label", c.label},
                  {"kind", c.kind},
                  {"culture_tags", c.culture_tags},
                  {"used_in_response", c.used_in_response}});
  j["culture_trace"] = std::move(ct);
  const auto& d = o.response.diagnostics;
  const auto trace = ordered_json::parse(o.record.trace);
  j["diagnostics"] = {{"comp_k", d.comp_k},
                      {"coh_e", d.coh_e},
                      {"retries", d.retries},
                      {"candidates_considered", d.candidates_considered},
                      {"fallback", d.fallback},
                      {"low_confidence", d.low_confidence},
                      {"reward_components", trace.at("reward_components")},
                      {"activated_components", trace.at("activated_components")},
                      {"stages", trace.at("stages")}};
  return j.dump();
}

}  // namespace cekg::carm
