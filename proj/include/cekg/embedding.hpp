#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cekg/lorentz.hpp"

namespace cekg::kg {
class Graph;
}

namespace cekg::hyp {

enum class Geometry { Hyperbolic, Euclidean };

std::string_view to_string(Geometry g);
Geometry parse_geometry(std::string_view s);

struct IndexedTriple {
  std::size_t head = 0;
  std::size_t relation = 0;
  std::size_t tail = 0;
  friend auto operator<=>(const IndexedTriple&, const IndexedTriple&) = default;
};

// Vocabulary-indexed triple list; the trainer's input. Built from a CEKG graph
// or from a plain head<TAB>relation<TAB>tail file.
struct TripleSet {
  std::vector<std::string> entities;
  std::vector<std::string> relations;
  std::vector<IndexedTriple> triples;

  static TripleSet from_graph(const kg::Graph& graph);
  static TripleSet load_tsv(const std::filesystem::path& path);
  // Complete tree with the given branching factor and depth below the root,
  // linked by a single `has_child` relation. branching 3, depth 3 -> 40 nodes.
  static TripleSet synthetic_tree(std::size_t branching, std::size_t depth);

  std::size_t entity_index(std::string_view id) const;
  std::size_t relation_index(std::string_view id) const;
};

struct EmbeddingConfig {
  std::size_t dim = 8;
  std::size_t epochs = 500;
  double learning_rate = 0.05;  // initial step, decayed linearly to 0 over the epochs
  std::size_t negatives_per_positive = 5;
  double margin = 1.0;
  std::optional<std::uint64_t> seed;
  Geometry geometry = Geometry::Hyperbolic;
  double init_scale = 0.1;
  // Entity points are kept inside a ball of this radius around the origin
  // (geodesic radius on the hyperboloid, L2 norm for the Euclidean baseline).
  double max_radius = 1.0;
  std::string config_hash;
};

class EmbeddingModel {
 public:
  Geometry geometry = Geometry::Hyperbolic;
  std::size_t dim = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<std::string> entity_ids;
  std::vector<std::string> relation_ids;
  // Hyperbolic: dim+1 ambient coordinates per entity, dim/2 angles per relation.
  // Euclidean: dim coordinates per entity, dim translation entries per relation.
  std::vector<std::vector<double>> entity_coords;
  std::vector<std::vector<double>> relation_params;
  std::vector<double> epoch_losses;

  std::size_t entity_index(std::string_view id) const;
  std::size_t relation_index(std::string_view id) const;
  bool has_entity(std::string_view id) const { return entity_lookup_.count(std::string(id)) > 0; }

  double score(std::size_t h, std::size_t r, std::size_t t) const;
  // Distance used by the margin loss; score = -distance.
  double distance(std::size_t h, std::size_t r, std::size_t t) const;

  LorentzPoint point(std::size_t entity) const;
  LorentzRotation rotation(std::size_t relation) const;

  void rebuild_index();

  void save(const std::filesystem::path& path) const;
  static EmbeddingModel load(const std::filesystem::path& path);

  friend bool operator==(const EmbeddingModel& a, const EmbeddingModel& b) {
    return a.geometry == b.geometry && a.dim == b.dim && a.seed == b.seed && a.entity_ids == b.entity_ids &&
           a.relation_ids == b.relation_ids && a.entity_coords == b.entity_coords &&
           a.relation_params == b.relation_params;
  }

 private:
  std::map<std::string, std::size_t, std::less<>> entity_lookup_;
  std::map<std::string, std::size_t, std::less<>> relation_lookup_;
};

// -d_L(R_r h, t) for the hyperbolic geometry, -|h + r - t| for the baseline.
double score_triple(const EmbeddingModel& model, std::string_view h, std::string_view r, std::string_view t);

// Randomly initialised model over the set's vocabulary.
EmbeddingModel init_model(const TripleSet& set, const EmbeddingConfig& config);

EmbeddingModel train(const TripleSet& set, const EmbeddingConfig& config);
EmbeddingModel train(const kg::Graph& graph, const EmbeddingConfig& config);

// Ambient Euclidean gradients of one margin term
// max(0, margin + d(positive) - d(negative)), keyed by entity / relation index.
struct SampleGradient {
  double loss = 0.0;
  std::map<std::size_t, std::vector<double>> entity;
  std::map<std::size_t, std::vector<double>> relation;
};

double margin_loss(const EmbeddingModel& model, const IndexedTriple& positive, const IndexedTriple& negative,
                   double margin);
SampleGradient margin_gradient(const EmbeddingModel& model, const IndexedTriple& positive,
                               const IndexedTriple& negative, double margin);

struct RankedTail {
  std::string entity;
  double score = 0.0;
};

// Tails ranked by descending score (ties by id). With a `target` tail, the
// other known true tails of (h, r) are filtered out; without one the raw
// ranking is returned.
std::vector<RankedTail> link_predict(const EmbeddingModel& model, const TripleSet& known, std::string_view h,
                                     std::string_view r, std::size_t k,
                                     std::optional<std::string_view> target = std::nullopt);

struct LinkMetrics {
  double mrr = 0.0;
  double hits1 = 0.0;
  double hits3 = 0.0;
  double hits10 = 0.0;
  std::size_t queries = 0;
};

// Filtered tail-prediction over every triple in `known`. The rank of the
// true tail counts every surviving candidate scoring >= it (ties pessimistic).
LinkMetrics evaluate(const EmbeddingModel& model, const TripleSet& known);

}  // namespace cekg::hyp
