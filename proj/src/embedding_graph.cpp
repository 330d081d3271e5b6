#include "cekg/embedding.hpp"
#include "cekg/error.hpp"
#include "cekg/kg.hpp"

namespace cekg::hyp {

TripleSet TripleSet::from_graph(const kg::Graph& graph) {
  TripleSet set;
  std::map<std::string, std::size_t, std::less<>> ents, rels;
  for (const auto& [id, e] : graph.entities()) {
    ents.emplace(id, set.entities.size());
    set.entities.push_back(id);
  }
  for (const auto& [id, r] : graph.relations()) {
    rels.emplace(id, set.relations.size());
    set.relations.push_back(id);
  }
  for (const auto& [key, t] : graph.triples())
    set.triples.push_back({ents.at(t.head), rels.at(t.relation), ents.at(t.tail)});
  return set;
}

EmbeddingModel train(const kg::Graph& graph, const EmbeddingConfig& config) {
  if (graph.empty()) fail(ErrorCode::EmptyGraph, "cannot embed an empty graph");
  return train(TripleSet::from_graph(graph), config);
}

}  // namespace cekg::hyp
