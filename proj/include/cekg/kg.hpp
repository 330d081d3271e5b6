#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

// Cultural Emotion Knowledge Graph: schema, ingestion, retrieval, alignment
// and JSON Lines persistence.
namespace cekg::kg {

class Vad {
 public:
  // Throws InvalidArgument unless valence in [-1,1], arousal and dominance in [0,1].
  static Vad make(double valence, double arousal, double dominance);
  static bool in_range(double valence, double arousal, double dominance);
  static Vad neutral() { return Vad(0.0, 0.5, 0.5); }

  double valence() const { return v_; }
  double arousal() const { return a_; }
  double dominance() const { return d_; }
  std::array<double, 3> as_array() const { return {v_, a_, d_}; }

  friend bool operator==(const Vad&, const Vad&) = default;

 private:
  Vad(double v, double a, double d) : v_(v), a_(a), d_(d) {}
  double v_ = 0.0, a_ = 0.5, d_ = 0.5;
};

double vad_distance(const Vad& a, const Vad& b);
double vad_cosine(const Vad& a, const Vad& b);

enum class EntityKind {
  CulturalEntity,
  EmotionPrototype,
  CulturalExpression,
  ContextIndicator,
  CulturalValue,
  CulturalEmotionalMapping,
};

enum class RelationName { HasEmotion, ExpressedAs, Modifies, HasValue, EquivalentTo };

std::string_view to_string(EntityKind k);
std::string_view to_string(RelationName r);
std::optional<EntityKind> parse_entity_kind(std::string_view s);
std::optional<RelationName> parse_relation_name(std::string_view s);

// Legal (head kind, relation, tail kind) combinations.
bool schema_allows(EntityKind head, RelationName relation, EntityKind tail);

struct Entity {
  std::string id;
  EntityKind kind = EntityKind::EmotionPrototype;
  std::string label;
  std::set<std::string> culture_tags;
  std::optional<Vad> vad;
  std::string provenance;
  // Culture-specific concept; alignment never removes it.
  bool unique = false;

  friend bool operator==(const Entity&, const Entity&) = default;
};

struct Relation {
  std::string id;
  RelationName name = RelationName::HasEmotion;
  // Givens angles, filled from a trained embedding.
  std::optional<std::vector<double>> rotation;

  friend bool operator==(const Relation&, const Relation&) = default;
};

struct Triple {
  std::string head;
  std::string relation;
  std::string tail;
  double confidence = 1.0;
  std::string provenance;

  friend bool operator==(const Triple&, const Triple&) = default;
};

using TripleKey = std::tuple<std::string, std::string, std::string>;

class Graph {
 public:
  // Throws DuplicateId for an existing id, SchemaViolation for a missing VAD
  // on kinds that require one.
  void add_entity(Entity entity);
  // Inserts or merges: culture tags are unioned, first provenance is kept.
  Entity& upsert_entity(Entity entity);
  void add_relation(Relation relation);
  // Ensures a relation whose id equals its schema name exists.
  const Relation& ensure_relation(RelationName name);

  // Validates references and schema; a duplicate (head, relation, tail) keeps
  // the maximum confidence (and that triple's provenance).
  void add_triple(Triple triple);

  const Entity* find_entity(std::string_view id) const;
  const Relation* find_relation(std::string_view id) const;
  Relation* find_relation_mut(std::string_view id);
  const Triple* find_triple(std::string_view h, std::string_view r, std::string_view t) const;
  void set_confidence(const TripleKey& key, double confidence);

  const std::map<std::string, Entity, std::less<>>& entities() const { return entities_; }
  const std::map<std::string, Relation, std::less<>>& relations() const { return relations_; }
  const std::map<TripleKey, Triple>& triples() const { return triples_; }

  std::map<std::string, std::string>& meta() { return meta_; }
  const std::map<std::string, std::string>& meta() const { return meta_; }

  std::size_t entity_count() const { return entities_.size(); }
  std::size_t triple_count() const { return triples_.size(); }
  bool empty() const { return entities_.empty(); }

  // Culture tags attributed to a triple: the smaller non-empty tag set of its
  // two endpoints (head preferred on equal size).
  std::set<std::string> triple_cultures(const Triple& t) const;

  friend bool operator==(const Graph&, const Graph&) = default;

 private:
  std::map<std::string, Entity, std::less<>> entities_;
  std::map<std::string, Relation, std::less<>> relations_;
  std::map<TripleKey, Triple> triples_;
  std::map<std::string, std::string> meta_;
};

// ---------------------------------------------------------------------------
// Culture registry (closed list from the config file)

struct CultureInfo {
  std::string code;
  // Surface names matched in text, e.g. "Japan", "Japanese".
  std::vector<std::string> names;
};

class CultureRegistry {
 public:
  CultureRegistry() = default;
  explicit CultureRegistry(std::vector<CultureInfo> cultures);

  bool contains(std::string_view code) const;
  const CultureInfo& at(std::string_view code) const;
  const std::vector<CultureInfo>& cultures() const { return cultures_; }
  std::vector<std::string> codes() const;
  std::size_t index_of(std::string_view code) const;

  // Token-sequence names mapped to culture codes, longest first.
  const std::vector<std::pair<std::vector<std::string>, std::string>>& name_patterns() const { return patterns_; }

 private:
  std::vector<CultureInfo> cultures_;
  std::vector<std::pair<std::vector<std::string>, std::string>> patterns_;
};

// ---------------------------------------------------------------------------
// VAD lexicon (TSV)

struct LexiconEntry {
  std::string term;
  std::vector<std::string> tokens;
  EntityKind kind = EntityKind::EmotionPrototype;
  std::optional<Vad> vad;
  std::set<std::string> culture_tags;
};

class Lexicon {
 public:
  void add(LexiconEntry entry);
  static Lexicon load_tsv(const std::filesystem::path& path);
  static Lexicon parse_tsv(std::string_view text, std::string_view source = "<lexicon>");

  const std::vector<LexiconEntry>& entries() const { return entries_; }
  std::size_t max_tokens() const { return max_tokens_; }
  // Longest entry whose token sequence starts at tokens[pos], if any.
  const LexiconEntry* match(const std::vector<std::string>& tokens, std::size_t pos) const;

 private:
  std::vector<LexiconEntry> entries_;
  std::map<std::vector<std::string>, std::size_t> by_tokens_;
  std::size_t max_tokens_ = 0;
};

struct CultureMention {
  std::size_t pos = 0;
  std::size_t length = 0;
  std::string code;
};

struct TermHit {
  std::size_t pos = 0;
  const LexiconEntry* entry = nullptr;
};

// Left-to-right scan: registry culture names first, then the longest lexicon
// term at each position; unmatched tokens are skipped.
struct TokenScan {
  std::vector<CultureMention> cultures;
  std::vector<TermHit> terms;
};

TokenScan scan_tokens(const std::vector<std::string>& tokens, const Lexicon& lexicon, const CultureRegistry& registry);

// Stable entity id for a surface term: lower-case, spaces -> '_'.
std::string term_id(std::string_view term);

// ---------------------------------------------------------------------------
// Retrieval

struct QueryHit {
  Entity entity;
  std::optional<Triple> triple;
  std::size_t overlap = 0;
  std::optional<double> vad_distance;
};

// Non-culture entities ranked by tag overlap (desc), VAD distance to `emotion`
// when given (asc, entities without VAD last), then entity id. Throws
// EmptyGraph when there is nothing to retrieve.
std::vector<QueryHit> query_cultural(const Graph& graph, const std::set<std::string>& culture_tags,
                                     const std::optional<Vad>& emotion, std::size_t k);

// ---------------------------------------------------------------------------
// Ingestion (pipeline stages 1-3)

struct Document {
  std::string doc_id;
  std::string culture_tag;
  std::string text;
  double confidence = 1.0;
};

std::vector<Document> load_documents(const std::filesystem::path& path);
std::vector<Document> parse_documents(std::string_view jsonl, std::string_view source = "<documents>");

// Lexicon matching plus three sentence-scoped rules:
//  1. a sentence naming a registry culture ("In Japan, ...") is attributed to
//     that culture, otherwise to the document's culture_tag;
//  2. an expression term is linked (expressed_as) from the nearest emotion
//     term in its sentence;
//  3. a context term co-occurring with an emotion term modifies a reified
//     culture-emotion mapping node "map:<CULTURE>:<emotion>".
Graph ingest(const std::vector<Document>& documents, const Lexicon& lexicon, const CultureRegistry& registry);

// ---------------------------------------------------------------------------
// Alignment

// Confidence mass per culture over all non-equivalence triples.
std::map<std::string, double> culture_mass(const Graph& graph);

double graph_kl(const Graph& graph, const std::map<std::string, double>& ideal);

struct AlignmentOptions {
  double min_weight = 0.25;
  double max_weight = 4.0;
  double equivalence_cosine = 0.95;
};

struct AlignmentResult {
  Graph graph;
  double kl_before = 0.0;
  double kl_after = 0.0;
  std::map<std::string, double> weights;
  // Exponent applied to the clamped weights (1 unless backtracking was needed).
  double weight_exponent = 1.0;
  std::size_t links_added = 0;
  std::vector<std::string> warnings;
};

// Reweights triple confidences toward the ideal culture distribution (uniform
// over present cultures when `ideal` is empty) and links cross-culture
// emotion prototypes with near-identical VAD. Never removes entities.
AlignmentResult align_cross_cultural(const Graph& graph, const std::map<std::string, double>& ideal = {},
                                     const AlignmentOptions& options = {});

// ---------------------------------------------------------------------------
// Persistence

inline constexpr std::string_view kGraphHeader = "#cekg-v1";

std::string serialize(const Graph& graph);
Graph parse(std::string_view text, std::string_view source = "<graph>");
void save(const Graph& graph, const std::filesystem::path& path);
Graph load(const std::filesystem::path& path);

}  // namespace cekg::kg
