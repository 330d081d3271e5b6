#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cekg/error.hpp"
#include "cekg/kg.hpp"
#include "cekg/metrics.hpp"

namespace cekg::kg {

// ---------------------------------------------------------------------------
// Documents

std::vector<Document> parse_documents(std::string_view jsonl, std::string_view source) {
  std::vector<Document> docs;
  std::istringstream in{std::string(jsonl)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const std::string where = std::string(source) + ":" + std::to_string(lineno);
    try {
      const auto j = nlohmann::json::parse(line);
      Document d;
      d.doc_id = j.at("doc_id").get<std::string>();
      d.culture_tag = j.at("culture_tag").get<std::string>();
      d.text = j.at("text").get<std::string>();
      d.confidence = j.value("confidence", 1.0);
      if (d.doc_id.empty()) fail(ErrorCode::MalformedRecord, where + ": empty doc_id");
      if (!(d.confidence >= 0.0 && d.confidence <= 1.0))
        fail(ErrorCode::MalformedRecord, where + ": confidence must lie in [0, 1]");
      docs.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::MalformedRecord, where + ": " + e.what());
    }
  }
  return docs;
}

std::vector<Document> load_documents(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open documents " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_documents(ss.str(), path.string());
}

// ---------------------------------------------------------------------------
// Ingestion

namespace {

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == '.' || c == '!' || c == '?' || c == ';') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

bool match_at(const std::vector<std::string>& toks, std::size_t pos, const std::vector<std::string>& pattern) {
  if (pos + pattern.size() > toks.size()) return false;
  return std::equal(pattern.begin(), pattern.end(), toks.begin() + pos);
}

}  // namespace

TokenScan scan_tokens(const std::vector<std::string>& toks, const Lexicon& lexicon, const CultureRegistry& registry) {
  TokenScan scan;
  for (std::size_t pos = 0; pos < toks.size();) {
    bool consumed = false;
    for (const auto& [pattern, code] : registry.name_patterns()) {
      if (match_at(toks, pos, pattern)) {
        scan.cultures.push_back({pos, pattern.size(), code});
        pos += pattern.size();
        consumed = true;
        break;
      }
    }
    if (consumed) continue;
    if (const LexiconEntry* e = lexicon.match(toks, pos)) {
      scan.terms.push_back({pos, e});
      pos += e->tokens.size();
      continue;
    }
    ++pos;
  }
  return scan;
}

Graph ingest(const std::vector<Document>& documents, const Lexicon& lexicon, const CultureRegistry& registry) {
  Graph g;
  for (const auto& doc : documents) {
    if (doc.doc_id.empty()) fail(ErrorCode::MalformedRecord, "document without doc_id");
    if (!registry.contains(doc.culture_tag))
      fail(ErrorCode::UnknownCulture, "document " + doc.doc_id + " has unknown culture tag '" + doc.culture_tag + "'");

    for (const auto& sentence : split_sentences(doc.text)) {
      const auto toks = metrics::tokenize(sentence);
      const auto scan = scan_tokens(toks, lexicon, registry);
      std::set<std::string> mentioned;
      for (const auto& c : scan.cultures) mentioned.insert(c.code);
      const auto& hits = scan.terms;
      if (hits.empty()) continue;

      const std::set<std::string> subjects = mentioned.empty() ? std::set<std::string>{doc.culture_tag} : mentioned;
      for (const auto& code : subjects) {
        const auto& info = registry.at(code);
        Entity c;
        c.id = code;
        c.kind = EntityKind::CulturalEntity;
        c.label = info.names.empty() ? code : info.names.front();
        c.culture_tags = {code};
        c.provenance = doc.doc_id;
        g.upsert_entity(std::move(c));
      }

      for (const auto& h : hits) {
        Entity e;
        e.id = term_id(h.entry->term);
        e.kind = h.entry->kind;
        e.label = h.entry->term;
        e.culture_tags = subjects;
        e.vad = h.entry->vad;
        e.provenance = doc.doc_id;
        e.unique = h.entry->culture_tags.size() == 1;
        g.upsert_entity(std::move(e));
      }

      auto emit = [&](const std::string& head, RelationName rel, const std::string& tail) {
        g.ensure_relation(rel);
        g.add_triple(Triple{head, std::string(to_string(rel)), tail, doc.confidence, doc.doc_id});
      };

      std::vector<const TermHit*> emotions;
      for (const auto& h : hits)
        if (h.entry->kind == EntityKind::EmotionPrototype) emotions.push_back(&h);

      for (const auto& h : hits) {
        const std::string id = term_id(h.entry->term);
        switch (h.entry->kind) {
          case EntityKind::EmotionPrototype:
            for (const auto& c : subjects) emit(c, RelationName::HasEmotion, id);
            break;
          case EntityKind::CulturalValue:
            for (const auto& c : subjects) emit(c, RelationName::HasValue, id);
            break;
          case EntityKind::CulturalExpression: {
            const TermHit* best = nullptr;
            std::size_t best_gap = 0;
            for (const TermHit* e : emotions) {
              const std::size_t gap = e->pos < h.pos ? h.pos - e->pos : e->pos - h.pos;
              // Preceding emotion wins ties.
              if (!best || gap < best_gap || (gap == best_gap && e->pos < h.pos)) {
                best = e;
                best_gap = gap;
              }
            }
            if (best) emit(term_id(best->entry->term), RelationName::ExpressedAs, id);
            break;
          }
          case EntityKind::ContextIndicator:
            for (const TermHit* e : emotions) {
              for (const auto& c : subjects) {
                const std::string emotion_id = term_id(e->entry->term);
                Entity m;
                m.id = "map:" + c + ":" + emotion_id;
                m.kind = EntityKind::CulturalEmotionalMapping;
                m.label = e->entry->term + " in " + g.find_entity(c)->label;
                m.culture_tags = {c};
                m.vad = e->entry->vad;
                m.provenance = doc.doc_id;
                g.upsert_entity(std::move(m));
                emit(id, RelationName::Modifies, "map:" + c + ":" + emotion_id);
              }
            }
            break;
          default:
            break;
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Alignment

std::map<std::string, double> culture_mass(const Graph& graph) {
  std::map<std::string, double> mass;
  for (const auto& [key, t] : graph.triples()) {
    const Relation* r = graph.find_relation(t.relation);
    if (r->name == RelationName::EquivalentTo) continue;
    const auto cultures = graph.triple_cultures(t);
    if (cultures.empty()) continue;
    const double share = t.confidence / static_cast<double>(cultures.size());
    for (const auto& c : cultures) mass[c] += share;
  }
  return mass;
}

namespace {

std::map<std::string, double> resolve_ideal(const std::map<std::string, double>& mass,
                                            const std::map<std::string, double>& ideal) {
  if (!ideal.empty()) return ideal;
  std::map<std::string, double> out;
  for (const auto& [c, _] : mass) out[c] = 1.0 / static_cast<double>(mass.size());
  return out;
}

}  // namespace

double graph_kl(const Graph& graph, const std::map<std::string, double>& ideal) {
  const auto mass = culture_mass(graph);
  metrics::CultureDistribution d;
  d.counts = mass;
  d.ideal = resolve_ideal(mass, ideal);
  return metrics::kl_bias(d);
}

AlignmentResult align_cross_cultural(const Graph& graph, const std::map<std::string, double>& ideal_in,
                                     const AlignmentOptions& options) {
  AlignmentResult result;
  result.graph = graph;
  const auto mass = culture_mass(graph);
  if (mass.size() < 2) {
    result.warnings.push_back("SingleCulture: fewer than two cultures present, alignment is a no-op");
    if (!mass.empty()) result.kl_before = result.kl_after = graph_kl(graph, ideal_in);
    return result;
  }
  const auto ideal = resolve_ideal(mass, ideal_in);
  result.kl_before = graph_kl(graph, ideal);
  result.kl_after = result.kl_before;
  if (result.kl_before == 0.0) return result;

  double total = 0.0;
  for (const auto& [c, m] : mass) total += m;
  for (const auto& [c, m] : mass) {
    const double p = m / total;
    const auto it = ideal.find(c);
    const double target = it == ideal.end() ? 0.0 : it->second;
    result.weights[c] = std::clamp(target / p, options.min_weight, options.max_weight);
  }

  // Reweight with w^s, halving s until KL does not increase. s = 0 is the
  // identity, so the loop always terminates with a non-increasing result.
  auto reweighted = [&](double exponent) {
    Graph g = graph;
    std::vector<std::pair<TripleKey, double>> updated;
    double max_conf = 0.0;
    for (const auto& [key, t] : graph.triples()) {
      const Relation* r = graph.find_relation(t.relation);
      double factor = 1.0;
      if (r->name != RelationName::EquivalentTo) {
        const auto cultures = graph.triple_cultures(t);
        if (!cultures.empty()) {
          factor = 0.0;
          for (const auto& c : cultures) factor += std::pow(result.weights.at(c), exponent);
          factor /= static_cast<double>(cultures.size());
        }
      }
      updated.emplace_back(key, t.confidence * factor);
      max_conf = std::max(max_conf, t.confidence * factor);
    }
    const double rescale = max_conf > 1.0 ? 1.0 / max_conf : 1.0;
    for (const auto& [key, c] : updated) g.set_confidence(key, std::min(1.0, c * rescale));
    return g;
  };

  Graph best = graph;
  result.weight_exponent = 0.0;
  double exponent = 1.0;
  for (int attempt = 0; attempt < 12; ++attempt, exponent *= 0.5) {
    Graph candidate = reweighted(exponent);
    if (graph_kl(candidate, ideal) <= result.kl_before) {
      best = std::move(candidate);
      result.weight_exponent = exponent;
      break;
    }
  }

  // Cross-culture equivalences between near-identical emotion prototypes.
  std::vector<const Entity*> prototypes;
  for (const auto& [id, e] : best.entities())
    if (e.kind == EntityKind::EmotionPrototype && e.vad) prototypes.push_back(&e);
  std::vector<Triple> links;
  for (std::size_t i = 0; i < prototypes.size(); ++i) {
    for (std::size_t j = i + 1; j < prototypes.size(); ++j) {
      const Entity& a = *prototypes[i];
      const Entity& b = *prototypes[j];
      if (a.culture_tags == b.culture_tags) continue;
      const double cos = vad_cosine(*a.vad, *b.vad);
      if (cos < options.equivalence_cosine) continue;
      if (best.find_triple(a.id, "equivalent_to", b.id) || best.find_triple(b.id, "equivalent_to", a.id)) continue;
      links.push_back(Triple{a.id, "equivalent_to", b.id, std::clamp(cos, 0.0, 1.0), "alignment"});
    }
  }
  if (!links.empty()) best.ensure_relation(RelationName::EquivalentTo);
  for (auto& l : links) best.add_triple(std::move(l));
  result.links_added = links.size();

  result.kl_after = graph_kl(best, ideal);
  result.graph = std::move(best);
  return result;
}

}  // namespace cekg::kg
