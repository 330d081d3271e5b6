#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cekg/error.hpp"
#include "cekg/kg.hpp"
#include "cekg/metrics.hpp"

namespace cekg::kg {

using nlohmann::ordered_json;

bool Vad::in_range(double v, double a, double d) {
  return v >= -1.0 && v <= 1.0 && a >= 0.0 && a <= 1.0 && d >= 0.0 && d <= 1.0;
}

Vad Vad::make(double v, double a, double d) {
  if (!in_range(v, a, d)) {
    std::ostringstream os;
    os << "VAD out of range: (" << v << ", " << a << ", " << d << ")";
    fail(ErrorCode::InvalidArgument, os.str());
  }
  return Vad(v, a, d);
}

double vad_distance(const Vad& a, const Vad& b) {
  const double dv = a.valence() - b.valence();
  const double da = a.arousal() - b.arousal();
  const double dd = a.dominance() - b.dominance();
  return std::sqrt(dv * dv + da * da + dd * dd);
}

double vad_cosine(const Vad& a, const Vad& b) {
  const auto x = a.as_array();
  const auto y = b.as_array();
  double xy = 0.0, xx = 0.0, yy = 0.0;
  for (int i = 0; i < 3; ++i) {
    xy += x[i] * y[i];
    xx += x[i] * x[i];
    yy += y[i] * y[i];
  }
  if (xx == 0.0 || yy == 0.0) return 0.0;
  return xy / std::sqrt(xx * yy);
}

std::string_view to_string(EntityKind k) {
  switch (k) {
    case EntityKind::CulturalEntity: return "CulturalEntity";
    case EntityKind::EmotionPrototype: return "EmotionPrototype";
    case EntityKind::CulturalExpression: return "CulturalExpression";
    case EntityKind::ContextIndicator: return "ContextIndicator";
    case EntityKind::CulturalValue: return "CulturalValue";
    case EntityKind::CulturalEmotionalMapping: return "CulturalEmotionalMapping";
  }
  return "?";
}

std::string_view to_string(RelationName r) {
  switch (r) {
    case RelationName::HasEmotion: return "has_emotion";
    case RelationName::ExpressedAs: return "expressed_as";
    case RelationName::Modifies: return "modifies";
    case RelationName::HasValue: return "has_value";
    case RelationName::EquivalentTo: return "equivalent_to";
  }
  return "?";
}

std::optional<EntityKind> parse_entity_kind(std::string_view s) {
  for (auto k : {EntityKind::CulturalEntity, EntityKind::EmotionPrototype, EntityKind::CulturalExpression,
                 EntityKind::ContextIndicator, EntityKind::CulturalValue, EntityKind::CulturalEmotionalMapping}) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

std::optional<RelationName> parse_relation_name(std::string_view s) {
  for (auto r : {RelationName::HasEmotion, RelationName::ExpressedAs, RelationName::Modifies, RelationName::HasValue,
                 RelationName::EquivalentTo}) {
    if (to_string(r) == s) return r;
  }
  return std::nullopt;
}

bool schema_allows(EntityKind head, RelationName relation, EntityKind tail) {
  switch (relation) {
    case RelationName::HasEmotion:
      return head == EntityKind::CulturalEntity && tail == EntityKind::EmotionPrototype;
    case RelationName::ExpressedAs:
      return head == EntityKind::EmotionPrototype && tail == EntityKind::CulturalExpression;
    case RelationName::Modifies:
      return head == EntityKind::ContextIndicator && tail == EntityKind::CulturalEmotionalMapping;
    case RelationName::HasValue:
      return head == EntityKind::CulturalEntity && tail == EntityKind::CulturalValue;
    case RelationName::EquivalentTo:
      return head == EntityKind::EmotionPrototype && tail == EntityKind::EmotionPrototype;
  }
  return false;
}

namespace {

bool requires_vad(EntityKind k) { return k == EntityKind::EmotionPrototype || k == EntityKind::CulturalExpression; }

void validate_entity(const Entity& e) {
  if (e.id.empty()) fail(ErrorCode::SchemaViolation, "entity id must be non-empty");
  if (requires_vad(e.kind) && !e.vad)
    fail(ErrorCode::SchemaViolation, std::string(to_string(e.kind)) + " '" + e.id + "' must carry a VAD");
}

}  // namespace

// ---------------------------------------------------------------------------
// Graph

void Graph::add_entity(Entity entity) {
  validate_entity(entity);
  if (entities_.count(entity.id)) fail(ErrorCode::DuplicateId, "entity '" + entity.id + "' already exists");
  const std::string id = entity.id;
  entities_.emplace(id, std::move(entity));
}

Entity& Graph::upsert_entity(Entity entity) {
  validate_entity(entity);
  auto it = entities_.find(entity.id);
  if (it == entities_.end()) {
    const std::string id = entity.id;
    return entities_.emplace(id, std::move(entity)).first->second;
  }
  if (it->second.kind != entity.kind)
    fail(ErrorCode::SchemaViolation, "entity '" + entity.id + "' redeclared with a different kind");
  it->second.culture_tags.insert(entity.culture_tags.begin(), entity.culture_tags.end());
  it->second.unique = it->second.unique || entity.unique;
  return it->second;
}

void Graph::add_relation(Relation relation) {
  if (relation.id.empty()) fail(ErrorCode::SchemaViolation, "relation id must be non-empty");
  if (relations_.count(relation.id)) fail(ErrorCode::DuplicateId, "relation '" + relation.id + "' already exists");
  const std::string id = relation.id;
  relations_.emplace(id, std::move(relation));
}

const Relation& Graph::ensure_relation(RelationName name) {
  const std::string id(to_string(name));
  auto it = relations_.find(id);
  if (it != relations_.end()) {
    if (it->second.name != name) fail(ErrorCode::SchemaViolation, "relation id '" + id + "' has a different name");
    return it->second;
  }
  return relations_.emplace(id, Relation{id, name, std::nullopt}).first->second;
}

void Graph::add_triple(Triple triple) {
  const Entity* h = find_entity(triple.head);
  const Entity* t = find_entity(triple.tail);
  const Relation* r = find_relation(triple.relation);
  if (!h) fail(ErrorCode::DanglingReference, "unknown head entity '" + triple.head + "'");
  if (!t) fail(ErrorCode::DanglingReference, "unknown tail entity '" + triple.tail + "'");
  if (!r) fail(ErrorCode::DanglingReference, "unknown relation '" + triple.relation + "'");
  if (!schema_allows(h->kind, r->name, t->kind)) {
    fail(ErrorCode::SchemaViolation, "(" + std::string(to_string(h->kind)) + ", " + std::string(to_string(r->name)) +
                                         ", " + std::string(to_string(t->kind)) + ") is not a legal triple");
  }
  if (!(triple.confidence >= 0.0 && triple.confidence <= 1.0))
    fail(ErrorCode::SchemaViolation, "triple confidence must lie in [0, 1]");
  TripleKey key{triple.head, triple.relation, triple.tail};
  auto it = triples_.find(key);
  if (it == triples_.end()) {
    triples_.emplace(std::move(key), std::move(triple));
  } else if (triple.confidence > it->second.confidence) {
    it->second = std::move(triple);
  }
}

const Entity* Graph::find_entity(std::string_view id) const {
  auto it = entities_.find(id);
  return it == entities_.end() ? nullptr : &it->second;
}

const Relation* Graph::find_relation(std::string_view id) const {
  auto it = relations_.find(id);
  return it == relations_.end() ? nullptr : &it->second;
}

Relation* Graph::find_relation_mut(std::string_view id) {
  auto it = relations_.find(id);
  return it == relations_.end() ? nullptr : &it->second;
}

const Triple* Graph::find_triple(std::string_view h, std::string_view r, std::string_view t) const {
  auto it = triples_.find(TripleKey{std::string(h), std::string(r), std::string(t)});
  return it == triples_.end() ? nullptr : &it->second;
}

void Graph::set_confidence(const TripleKey& key, double confidence) {
  auto it = triples_.find(key);
  if (it == triples_.end()) fail(ErrorCode::DanglingReference, "no such triple");
  if (!(confidence >= 0.0 && confidence <= 1.0)) fail(ErrorCode::SchemaViolation, "confidence must lie in [0, 1]");
  it->second.confidence = confidence;
}

std::set<std::string> Graph::triple_cultures(const Triple& t) const {
  const Entity* h = find_entity(t.head);
  const Entity* tl = find_entity(t.tail);
  const auto& ht = h->culture_tags;
  const auto& tt = tl->culture_tags;
  if (ht.empty()) return tt;
  if (tt.empty()) return ht;
  return tt.size() < ht.size() ? tt : ht;
}

// ---------------------------------------------------------------------------
// Culture registry

CultureRegistry::CultureRegistry(std::vector<CultureInfo> cultures) : cultures_(std::move(cultures)) {
  std::set<std::string> seen;
  for (const auto& c : cultures_) {
    if (c.code.empty() || !seen.insert(c.code).second)
      fail(ErrorCode::ConfigInvalid, "culture registry codes must be unique and non-empty");
    // Only surface names are matched; a bare code such as "US" collides with
    // ordinary words.
    for (const auto& n : c.names) {
      auto toks = metrics::tokenize(n);
      if (!toks.empty()) patterns_.emplace_back(std::move(toks), c.code);
    }
  }
  std::stable_sort(patterns_.begin(), patterns_.end(),
                   [](const auto& a, const auto& b) { return a.first.size() > b.first.size(); });
}

bool CultureRegistry::contains(std::string_view code) const {
  return std::any_of(cultures_.begin(), cultures_.end(), [&](const CultureInfo& c) { return c.code == code; });
}

const CultureInfo& CultureRegistry::at(std::string_view code) const {
  for (const auto& c : cultures_)
    if (c.code == code) return c;
  fail(ErrorCode::UnknownCulture, "culture '" + std::string(code) + "' is not in the registry");
}

std::vector<std::string> CultureRegistry::codes() const {
  std::vector<std::string> out;
  for (const auto& c : cultures_) out.push_back(c.code);
  return out;
}

std::size_t CultureRegistry::index_of(std::string_view code) const {
  for (std::size_t i = 0; i < cultures_.size(); ++i)
    if (cultures_[i].code == code) return i;
  fail(ErrorCode::UnknownCulture, "culture '" + std::string(code) + "' is not in the registry");
}

// ---------------------------------------------------------------------------
// Lexicon

std::string term_id(std::string_view term) {
  std::string out;
  for (const auto& tok : metrics::tokenize(term)) {
    if (!out.empty()) out.push_back('_');
    out += tok;
  }
  return out;
}

void Lexicon::add(LexiconEntry entry) {
  if (entry.tokens.empty()) entry.tokens = metrics::tokenize(entry.term);
  if (entry.tokens.empty()) fail(ErrorCode::FormatError, "lexicon term '" + entry.term + "' has no tokens");
  if (requires_vad(entry.kind) && !entry.vad)
    fail(ErrorCode::FormatError, "lexicon term '" + entry.term + "' needs a VAD for its kind");
  if (entry.kind == EntityKind::CulturalEntity || entry.kind == EntityKind::CulturalEmotionalMapping)
    fail(ErrorCode::FormatError, "lexicon term '" + entry.term + "': cultures and mappings are not lexicon kinds");
  auto [it, inserted] = by_tokens_.emplace(entry.tokens, entries_.size());
  if (!inserted) fail(ErrorCode::FormatError, "duplicate lexicon term '" + entry.term + "'");
  max_tokens_ = std::max(max_tokens_, entry.tokens.size());
  entries_.push_back(std::move(entry));
}

const LexiconEntry* Lexicon::match(const std::vector<std::string>& tokens, std::size_t pos) const {
  const std::size_t longest = std::min(max_tokens_, tokens.size() - pos);
  for (std::size_t n = longest; n >= 1; --n) {
    std::vector<std::string> key(tokens.begin() + pos, tokens.begin() + pos + n);
    auto it = by_tokens_.find(key);
    if (it != by_tokens_.end()) return &entries_[it->second];
  }
  return nullptr;
}

namespace {

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

double parse_real(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    fail(ErrorCode::FormatError, where + ": '" + s + "' is not a number");
  }
}

}  // namespace

Lexicon Lexicon::parse_tsv(std::string_view text, std::string_view source) {
  Lexicon lex;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string where = std::string(source) + ":" + std::to_string(lineno);
    if (!header_seen) {
      if (trim(line) != kGraphHeader) fail(ErrorCode::FormatError, where + ": expected header line #cekg-v1");
      header_seen = true;
      continue;
    }
    if (trim(line).empty() || line[0] == '#') continue;
    auto cols = split(line, '\t');
    if (cols.size() == 6 && trim(cols[0]) == "term") continue;
    if (cols.size() != 6) fail(ErrorCode::FormatError, where + ": expected 6 tab-separated columns");
    LexiconEntry e;
    e.term = trim(cols[0]);
    auto kind = parse_entity_kind(trim(cols[1]));
    if (!kind) fail(ErrorCode::FormatError, where + ": unknown entity kind '" + cols[1] + "'");
    e.kind = *kind;
    const auto v = trim(cols[2]), a = trim(cols[3]), d = trim(cols[4]);
    if (!v.empty() || !a.empty() || !d.empty()) {
      const double vv = parse_real(v, where), av = parse_real(a, where), dv = parse_real(d, where);
      if (!Vad::in_range(vv, av, dv)) fail(ErrorCode::FormatError, where + ": VAD out of range");
      e.vad = Vad::make(vv, av, dv);
    }
    for (const auto& tag : split(cols[5], ',')) {
      auto t = trim(tag);
      if (!t.empty()) e.culture_tags.insert(t);
    }
    try {
      lex.add(std::move(e));
    } catch (const Error& err) {
      fail(ErrorCode::FormatError, where + ": " + err.what());
    }
  }
  if (!header_seen) fail(ErrorCode::FormatError, std::string(source) + ": empty lexicon (missing #cekg-v1 header)");
  return lex;
}

Lexicon Lexicon::load_tsv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open lexicon " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_tsv(ss.str(), path.string());
}

// ---------------------------------------------------------------------------
// Retrieval

std::vector<QueryHit> query_cultural(const Graph& graph, const std::set<std::string>& culture_tags,
                                     const std::optional<Vad>& emotion, std::size_t k) {
  if (k == 0) fail(ErrorCode::InvalidArgument, "query_cultural needs k >= 1");
  std::vector<QueryHit> hits;
  for (const auto& [id, e] : graph.entities()) {
    if (e.kind == EntityKind::CulturalEntity) continue;
    QueryHit h;
    h.entity = e;
    for (const auto& tag : e.culture_tags) h.overlap += culture_tags.count(tag);
    if (emotion && e.vad) h.vad_distance = vad_distance(*emotion, *e.vad);
    hits.push_back(std::move(h));
  }
  if (hits.empty()) fail(ErrorCode::EmptyGraph, "graph holds no retrievable knowledge");
  const bool use_vad = emotion.has_value();
  std::sort(hits.begin(), hits.end(), [use_vad](const QueryHit& a, const QueryHit& b) {
    if (a.overlap != b.overlap) return a.overlap > b.overlap;
    if (use_vad) {
      const double da = a.vad_distance.value_or(INFINITY);
      const double db = b.vad_distance.value_or(INFINITY);
      if (da != db) return da < db;
    }
    return a.entity.id < b.entity.id;
  });
  if (hits.size() > k) hits.resize(k);
  // Attach the strongest triple pointing at (else from) each hit.
  for (auto& h : hits) {
    const Triple* best = nullptr;
    const Triple* best_out = nullptr;
    for (const auto& [key, t] : graph.triples()) {
      if (t.tail == h.entity.id && (!best || t.confidence > best->confidence)) best = &t;
      if (t.head == h.entity.id && (!best_out || t.confidence > best_out->confidence)) best_out = &t;
    }
    if (!best) best = best_out;
    if (best) h.triple = *best;
  }
  return hits;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

ordered_json entity_json(const Entity& e) {
  ordered_json j;
  j["record_kind"] = "entity";
  j["id"] = e.id;
  j["kind"] = to_string(e.kind);
  j["label"] = e.label;
  j["culture_tags"] = e.culture_tags;
  if (e.vad) {
    j["vad"] = {{"valence", e.vad->valence()}, {"arousal", e.vad->arousal()}, {"dominance", e.vad->dominance()}};
  } else {
    j["vad"] = nullptr;
  }
  j["provenance"] = e.provenance;
  j["unique"] = e.unique;
  return j;
}

}  // namespace

std::string serialize(const Graph& graph) {
  std::string out(kGraphHeader);
  out.push_back('\n');
  if (!graph.meta().empty()) {
    ordered_json j;
    j["record_kind"] = "meta";
    j["values"] = graph.meta();
    out += j.dump() + "\n";
  }
  for (const auto& [id, e] : graph.entities()) out += entity_json(e).dump() + "\n";
  for (const auto& [id, r] : graph.relations()) {
    ordered_json j;
    j["record_kind"] = "relation";
    j["id"] = r.id;
    j["name"] = to_string(r.name);
    j["rotation"] = r.rotation ? ordered_json(*r.rotation) : ordered_json(nullptr);
    out += j.dump() + "\n";
  }
  for (const auto& [key, t] : graph.triples()) {
    ordered_json j;
    j["record_kind"] = "triple";
    j["head"] = t.head;
    j["relation"] = t.relation;
    j["tail"] = t.tail;
    j["confidence"] = t.confidence;
    j["provenance"] = t.provenance;
    out += j.dump() + "\n";
  }
  return out;
}

Graph parse(std::string_view text, std::string_view source) {
  Graph g;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string where = std::string(source) + ":" + std::to_string(lineno);
    if (!header_seen) {
      if (line != kGraphHeader) fail(ErrorCode::FormatError, where + ": expected header line #cekg-v1");
      header_seen = true;
      continue;
    }
    if (trim(line).empty()) continue;
    try {
      const auto j = ordered_json::parse(line);
      const std::string rk = j.at("record_kind").get<std::string>();
      if (rk == "meta") {
        for (const auto& [k, v] : j.at("values").items()) g.meta()[k] = v.get<std::string>();
      } else if (rk == "entity") {
        Entity e;
        e.id = j.at("id").get<std::string>();
        auto kind = parse_entity_kind(j.at("kind").get<std::string>());
        if (!kind) fail(ErrorCode::FormatError, "unknown entity kind");
        e.kind = *kind;
        e.label = j.at("label").get<std::string>();
        e.culture_tags = j.at("culture_tags").get<std::set<std::string>>();
        if (!j.at("vad").is_null()) {
          const auto& v = j.at("vad");
          const double vv = v.at("valence").get<double>(), av = v.at("arousal").get<double>(),
                       dv = v.at("dominance").get<double>();
          if (!Vad::in_range(vv, av, dv)) fail(ErrorCode::FormatError, "VAD out of range");
          e.vad = Vad::make(vv, av, dv);
        }
        e.provenance = j.at("provenance").get<std::string>();
        e.unique = j.value("unique", false);
        g.add_entity(std::move(e));
      } else if (rk == "relation") {
        Relation r;
        r.id = j.at("id").get<std::string>();
        auto name = parse_relation_name(j.at("name").get<std::string>());
        if (!name) fail(ErrorCode::FormatError, "unknown relation name");
        r.name = *name;
        if (!j.at("rotation").is_null()) r.rotation = j.at("rotation").get<std::vector<double>>();
        g.add_relation(std::move(r));
      } else if (rk == "triple") {
        Triple t;
        t.head = j.at("head").get<std::string>();
        t.relation = j.at("relation").get<std::string>();
        t.tail = j.at("tail").get<std::string>();
        t.confidence = j.at("confidence").get<double>();
        t.provenance = j.at("provenance").get<std::string>();
        if (g.find_triple(t.head, t.relation, t.tail)) fail(ErrorCode::FormatError, "duplicate triple");
        g.add_triple(std::move(t));
      } else {
        fail(ErrorCode::FormatError, "unknown record_kind '" + rk + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::FormatError, where + ": " + e.what());
    } catch (const Error& e) {
      fail(ErrorCode::FormatError, where + ": " + e.what());
    }
  }
  if (!header_seen) fail(ErrorCode::FormatError, std::string(source) + ":1: expected header line #cekg-v1");
  return g;
}

void save(const Graph& graph, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoFailure, "cannot write graph " + path.string());
  out << serialize(graph);
  if (!out) fail(ErrorCode::IoFailure, "write failed for " + path.string());
}

Graph load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open graph " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

}  // namespace cekg::kg
