#include <cmath>

#include "doctest.h"

#include "cekg/error.hpp"
#include "cekg/evaluation.hpp"
#include "fixtures.hpp"

using namespace cekg;

namespace {

const carm::Engine& engine() {
  static const carm::Engine e = carm::Engine::from_config(fixtures::config());
  return e;
}

grpo::PolicyParams initial_policy() {
  return grpo::PolicyParams::initial(grpo::kDefaultFeatureNames, fixtures::config().initial_theta);
}

}  // namespace

TEST_CASE("parse_dialogues") {
  const auto d = eval::parse_dialogues(
      "# comment\n\n"
      R"({"dialogue_id": "a", "declared_culture": "JP", "turns": [{"text": "hi", "reference": "hello", "emotion": "joy"}]})"
      "\n"
      R"({"dialogue_id": "b", "turns": [{"text": "x"}]})");
  REQUIRE(d.size() == 2);
  CHECK(d[0].declared_culture == std::optional<std::string>("JP"));
  CHECK(d[0].turns[0].emotion == std::optional<std::string>("joy"));
  CHECK_FALSE(d[1].declared_culture);
  CHECK(d[1].turns[0].reference.empty());
  try {
    eval::parse_dialogues(R"({"dialogue_id": "a", "turns": []})" "\n{\"turns\": 3}", "dlg.jsonl");
    FAIL("expected MalformedRecord");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MalformedRecord);
    CHECK(std::string(e.what()).find("dlg.jsonl:2") != std::string::npos);
  }
  CHECK_THROWS_AS(eval::load_dialogues("/nonexistent/dialogues.jsonl"), Error);
}

TEST_CASE("concept sets") {
  const auto registry = fixtures::config().registry();
  const auto lex = kg::Lexicon::parse_tsv(
      "#cekg-v1\nterm\tkind\tvalence\tarousal\tdominance\tculture_tags\n"
      "joy\tEmotionPrototype\t0.9\t0.7\t0.6\tJP,US\n"
      "Tea Ceremony\tCulturalExpression\t0.5\t0.2\t0.5\tJP\n"
      "grief\tEmotionPrototype\t-0.8\t0.4\t0.2\t\n");
  const auto concepts = eval::lexicon_concepts(lex, registry);
  CHECK(concepts == std::set<std::string>{"JP/joy", "US/joy", "JP/tea_ceremony"});

  kg::Graph g;
  g.add_entity(fixtures::entity("joy", kg::EntityKind::EmotionPrototype, {"JP"}, kg::Vad::make(0.9, 0.7, 0.6)));
  g.add_entity(fixtures::entity("tea_ceremony", kg::EntityKind::CulturalExpression, {"JP"}, kg::Vad::make(0.5, 0.2, 0.5)));
  CHECK(eval::entailed_concepts(g, concepts) == std::set<std::string>{"JP/joy", "JP/tea_ceremony"});
  CHECK(eval::entailed_concepts(kg::Graph{}, concepts).empty());

  CHECK(eval::nearest_emotion(lex, kg::Vad::make(0.9, 0.7, 0.6)) == "joy");
  CHECK(eval::nearest_emotion(lex, kg::Vad::make(-0.7, 0.4, 0.2)) == "grief");
}

TEST_CASE("equivalence links extend entailment by one hop") {
  // Aligned sample graph against an oracle that walks the triples directly.
  const auto& e = engine();
  const auto aligned = kg::align_cross_cultural(e.graph()).graph;
  const auto concepts = eval::lexicon_concepts(e.lexicon(), e.registry());
  const auto got = eval::entailed_concepts(aligned, concepts);
  std::size_t via_link = 0;
  for (const auto& c : concepts) {
    const std::string culture = c.substr(0, c.find('/'));
    const std::string id = c.substr(c.find('/') + 1);
    const auto* ent = aligned.find_entity(id);
    bool direct = ent && ent->culture_tags.count(culture);
    bool linked = false;
    if (ent && !direct)
      for (const auto& [key, t] : aligned.triples()) {
        if (aligned.find_relation(t.relation)->name != kg::RelationName::EquivalentTo) continue;
        const std::string other = t.head == id ? t.tail : t.tail == id ? t.head : "";
        if (other.empty()) continue;
        const auto* o = aligned.find_entity(other);
        linked = linked || (o && o->culture_tags.count(culture));
      }
    via_link += linked;
    CHECK_MESSAGE(got.count(c) == static_cast<std::size_t>(direct || linked), c);
  }
  MESSAGE("concepts entailed only through an equivalence link: " << via_link);
}

TEST_CASE("alignment reduces KL on the skewed corpus") {
  const auto& cfg = fixtures::config();
  const auto& e = engine();
  const auto graph = kg::ingest(kg::load_documents(fixtures::data("documents_skewed.jsonl")), e.lexicon(), e.registry());
  const carm::Engine skewed(cfg, graph, e.lexicon(), e.templates(), std::nullopt);
  const auto r = eval::evaluate(skewed, {}, initial_policy());
  const auto& b = r.bundle;
  CHECK(b.kl_before > 0.0);
  CHECK(b.kl_after < b.kl_before);
  CHECK(b.kl_reduction == 1.0 - b.kl_after / b.kl_before);
  CHECK(b.kl_reduction > 0.0);
  CHECK(b.dialogues == 0);
  CHECK(r.transcript.empty());
  CHECK_FALSE(b.kl_responses.has_value());
  CHECK(b.concepts_entailed <= b.concepts_total);
  // Alignment never drops an entity.
  CHECK(r.alignment.graph.entity_count() == graph.entity_count());
}

TEST_CASE("evaluate on the dialogue fixture") {
  const auto dialogues = eval::load_dialogues(fixtures::data("eval_dialogues.jsonl"));
  const auto a = eval::evaluate(engine(), dialogues, initial_policy());
  const auto b = eval::evaluate(engine(), dialogues, initial_policy());
  CHECK(a.bundle == b.bundle);
  CHECK(a.transcript == b.transcript);

  std::size_t turns = 0, labelled = 0;
  for (const auto& d : dialogues) {
    turns += d.turns.size();
    for (const auto& t : d.turns) labelled += t.emotion.has_value();
  }
  const auto& m = a.bundle;
  CHECK(a.transcript.size() == turns);
  CHECK(m.dialogues == dialogues.size());
  CHECK(m.f1.macro.samples == labelled);
  CHECK(m.bleu4 > 0.0);
  CHECK(m.bleu4 <= 1.0);
  CHECK(m.rouge_l > 0.0);
  CHECK(m.rouge_l <= 1.0);
  CHECK(m.kl_responses.has_value());
  CHECK(m.config_hash == fixtures::config().hash);
  CHECK(m.csd_raw >= 0.0);
  CHECK(m.csd_display >= 0.0);
  CHECK(m.csd_display <= 10.0);
  CHECK(metrics::parse_report(metrics::report_json(m)) == m);
}
