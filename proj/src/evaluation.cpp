#include "cekg/evaluation.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cekg/error.hpp"

namespace cekg::eval {

using nlohmann::json;

std::vector<Dialogue> parse_dialogues(std::string_view jsonl, std::string_view source) {
  std::vector<Dialogue> out;
  std::istringstream in{std::string(jsonl)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const std::string where = std::string(source) + ":" + std::to_string(lineno);
    try {
      const auto j = json::parse(line);
      Dialogue d;
      d.dialogue_id = j.at("dialogue_id").get<std::string>();
      if (j.contains("declared_culture") && !j.at("declared_culture").is_null())
        d.declared_culture = j.at("declared_culture").get<std::string>();
      for (const auto& t : j.at("turns")) {
        DialogueTurn turn;
        turn.text = t.at("text").get<std::string>();
        turn.reference = t.value("reference", std::string());
        if (t.contains("emotion") && !t.at("emotion").is_null()) turn.emotion = t.at("emotion").get<std::string>();
        d.turns.push_back(std::move(turn));
      }
      out.push_back(std::move(d));
    } catch (const json::exception& e) {
      fail(ErrorCode::MalformedRecord, where + ": " + e.what());
    }
  }
  return out;
}

std::vector<Dialogue> load_dialogues(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open dialogues " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_dialogues(ss.str(), path.string());
}

std::set<std::string> lexicon_concepts(const kg::Lexicon& lexicon, const kg::CultureRegistry& registry) {
  std::set<std::string> out;
  for (const auto& e : lexicon.entries()) {
    if (e.kind != kg::EntityKind::EmotionPrototype && e.kind != kg::EntityKind::CulturalExpression &&
        e.kind != kg::EntityKind::CulturalValue)
      continue;
    for (const auto& c : e.culture_tags)
      if (registry.contains(c)) out.insert(c + "/" + kg::term_id(e.term));
  }
  return out;
}

std::set<std::string> entailed_concepts(const kg::Graph& graph, const std::set<std::string>& concepts) {
  // Entities one equivalence link away, in both directions.
  std::map<std::string, std::set<std::string>> equivalent;
  for (const auto& [key, t] : graph.triples()) {
    const auto* r = graph.find_relation(t.relation);
    if (!r || r->name != kg::RelationName::EquivalentTo) continue;
    equivalent[t.head].insert(t.tail);
    equivalent[t.tail].insert(t.head);
  }
  auto holds = [&](const std::string& id, const std::string& culture) {
    const auto* e = graph.find_entity(id);
    return e && (culture.empty() || e->culture_tags.count(culture));
  };
  std::set<std::string> out;
  for (const auto& c : concepts) {
    const auto slash = c.find('/');
    const std::string culture = slash == std::string::npos ? "" : c.substr(0, slash);
    const std::string id = slash == std::string::npos ? c : c.substr(slash + 1);
    bool ok = holds(id, culture);
    if (!ok && graph.find_entity(id)) {
      const auto it = equivalent.find(id);
      if (it != equivalent.end())
        for (const auto& other : it->second) ok = ok || holds(other, culture);
    }
    if (ok) out.insert(c);
  }
  return out;
}

std::string nearest_emotion(const kg::Lexicon& lexicon, const kg::Vad& vad) {
  std::string best;
  double best_d = 0.0;
  for (const auto& e : lexicon.entries()) {
    if (e.kind != kg::EntityKind::EmotionPrototype || !e.vad) continue;
    const double d = kg::vad_distance(*e.vad, vad);
    const std::string id = kg::term_id(e.term);
    if (best.empty() || d < best_d || (d == best_d && id < best)) {
      best = id;
      best_d = d;
    }
  }
  return best;
}

EvaluationResult evaluate(const carm::Engine& engine, const std::vector<Dialogue>& dialogues,
                          const grpo::PolicyParams& policy) {
  const auto& config = engine.config();
  const auto& registry = engine.registry();
  EvaluationResult result;
  metrics::MetricsBundle& b = result.bundle;
  b.config_hash = config.hash;
  b.log_base = config.log_base == metrics::LogBase::Two ? "2" : "natural";
  b.csd_calibration = config.csd_calibration;

  std::map<std::string, double> ideal;
  for (const auto& c : registry.codes()) ideal[c] = 1.0 / static_cast<double>(registry.codes().size());
  result.alignment = kg::align_cross_cultural(engine.graph());
  b.kl_before = result.alignment.kl_before;
  b.kl_after = result.alignment.kl_after;
  b.kl_reduction = b.kl_before > 0.0 ? 1.0 - b.kl_after / b.kl_before : 0.0;

  metrics::ConceptCoverage coverage;
  coverage.concepts = lexicon_concepts(engine.lexicon(), registry);
  coverage.entailed = entailed_concepts(result.alignment.graph, coverage.concepts);
  b.concepts_total = coverage.concepts.size();
  b.concepts_entailed = coverage.entailed.size();
  if (!coverage.concepts.empty()) {
    b.csd_raw = metrics::csd(coverage, config.log_base);
    b.csd_display = metrics::csd_display(b.csd_raw, config.csd_calibration);
  }

  std::vector<std::string> predictions, gold, culture_of;
  std::map<std::string, double> response_cultures;
  double bleu = 0.0, rouge = 0.0;
  std::size_t scored = 0;
  for (const auto& d : dialogues) {
    carm::Session session;
    session.session_id = d.dialogue_id;
    session.declared_culture = d.declared_culture;
    for (const auto& turn : d.turns) {
      auto outcome = engine.orchestrate(session, turn.text, policy);
      result.transcript.push_back(carm::response_json(outcome));
      const auto hyp = metrics::tokenize(outcome.response.text);
      const auto ref = metrics::tokenize(turn.reference);
      if (!hyp.empty() && !ref.empty()) {
        bleu += metrics::bleu4(hyp, {ref});
        rouge += metrics::rouge_l(hyp, ref).f1;
        ++scored;
      }
      if (turn.emotion) {
        predictions.push_back(nearest_emotion(engine.lexicon(), outcome.record.expected_vad));
        gold.push_back(*turn.emotion);
        culture_of.push_back(d.declared_culture.value_or("none"));
      }
      const auto trace = json::parse(outcome.record.trace);
      if (trace.at("selection").is_object()) {
        const auto* t = engine.templates().find(trace.at("selection").at("template_id").get<std::string>());
        if (t)
          for (const auto& c : t->culture_tags) response_cultures[c] += 1.0 / static_cast<double>(t->culture_tags.size());
      }
      session.turns.push_back(std::move(outcome.record));
    }
  }
  b.dialogues = dialogues.size();
  if (scored) {
    b.bleu4 = bleu / static_cast<double>(scored);
    b.rouge_l = rouge / static_cast<double>(scored);
  }
  if (!predictions.empty()) b.f1 = metrics::f1_by_culture(predictions, gold, culture_of);
  if (!response_cultures.empty()) {
    metrics::CultureDistribution dist;
    dist.counts = response_cultures;
    dist.ideal = ideal;
    b.kl_responses = metrics::kl_bias(dist, config.log_base);
  }
  return result;
}

}  // namespace cekg::eval
