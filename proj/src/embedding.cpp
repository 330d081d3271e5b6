#include "cekg/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cekg/error.hpp"
#include "cekg/random.hpp"

namespace cekg::hyp {

using nlohmann::json;

std::string_view to_string(Geometry g) { return g == Geometry::Hyperbolic ? "hyperbolic" : "euclidean"; }

Geometry parse_geometry(std::string_view s) {
  if (s == "hyperbolic") return Geometry::Hyperbolic;
  if (s == "euclidean") return Geometry::Euclidean;
  fail(ErrorCode::ConfigInvalid, "unknown geometry '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// TripleSet

std::size_t TripleSet::entity_index(std::string_view id) const {
  auto it = std::find(entities.begin(), entities.end(), id);
  if (it == entities.end()) fail(ErrorCode::UnknownId, "unknown entity '" + std::string(id) + "'");
  return static_cast<std::size_t>(it - entities.begin());
}

std::size_t TripleSet::relation_index(std::string_view id) const {
  auto it = std::find(relations.begin(), relations.end(), id);
  if (it == relations.end()) fail(ErrorCode::UnknownId, "unknown relation '" + std::string(id) + "'");
  return static_cast<std::size_t>(it - relations.begin());
}

TripleSet TripleSet::load_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + path.string());
  TripleSet set;
  std::map<std::string, std::size_t> ents, rels;
  auto intern = [](std::map<std::string, std::size_t>& m, std::vector<std::string>& v, const std::string& s) {
    auto [it, inserted] = m.emplace(s, v.size());
    if (inserted) v.push_back(s);
    return it->second;
  };
  std::string line;
  std::size_t lineno = 0;
  std::set<IndexedTriple> seen;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string h, r, t;
    if (!std::getline(ls, h, '\t') || !std::getline(ls, r, '\t') || !std::getline(ls, t, '\t')) {
      fail(ErrorCode::FormatError, path.string() + ":" + std::to_string(lineno) + ": expected head<TAB>relation<TAB>tail");
    }
    if (!t.empty() && t.back() == '\r') t.pop_back();
    IndexedTriple tr{intern(ents, set.entities, h), intern(rels, set.relations, r), intern(ents, set.entities, t)};
    if (seen.insert(tr).second) set.triples.push_back(tr);
  }
  return set;
}

TripleSet TripleSet::synthetic_tree(std::size_t branching, std::size_t depth) {
  TripleSet set;
  set.relations.push_back("has_child");
  set.entities.push_back("n0");
  std::vector<std::size_t> frontier{0};
  for (std::size_t level = 0; level < depth; ++level) {
    std::vector<std::size_t> next;
    for (std::size_t parent : frontier) {
      for (std::size_t b = 0; b < branching; ++b) {
        const std::size_t child = set.entities.size();
        set.entities.push_back("n" + std::to_string(child));
        set.triples.push_back({parent, 0, child});
        next.push_back(child);
      }
    }
    frontier = std::move(next);
  }
  return set;
}

// ---------------------------------------------------------------------------
// EmbeddingModel

void EmbeddingModel::rebuild_index() {
  entity_lookup_.clear();
  relation_lookup_.clear();
  for (std::size_t i = 0; i < entity_ids.size(); ++i) entity_lookup_.emplace(entity_ids[i], i);
  for (std::size_t i = 0; i < relation_ids.size(); ++i) relation_lookup_.emplace(relation_ids[i], i);
}

std::size_t EmbeddingModel::entity_index(std::string_view id) const {
  auto it = entity_lookup_.find(id);
  if (it == entity_lookup_.end()) fail(ErrorCode::UnknownId, "entity '" + std::string(id) + "' is not embedded");
  return it->second;
}

std::size_t EmbeddingModel::relation_index(std::string_view id) const {
  auto it = relation_lookup_.find(id);
  if (it == relation_lookup_.end()) fail(ErrorCode::UnknownId, "relation '" + std::string(id) + "' is not embedded");
  return it->second;
}

LorentzPoint EmbeddingModel::point(std::size_t entity) const {
  if (geometry != Geometry::Hyperbolic) fail(ErrorCode::InvalidArgument, "euclidean model has no Lorentz points");
  return LorentzPoint::from_coords(entity_coords.at(entity));
}

LorentzRotation EmbeddingModel::rotation(std::size_t relation) const {
  if (geometry != Geometry::Hyperbolic) fail(ErrorCode::InvalidArgument, "euclidean model has no rotations");
  return LorentzRotation(dim, relation_params.at(relation));
}

namespace {

double euclidean_distance(const std::vector<double>& h, const std::vector<double>& r, const std::vector<double>& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double d = h[i] + r[i] - t[i];
    s += d * d;
  }
  return std::sqrt(s);
}

// Unchecked hyperbolic distance between rotated head and tail; trainer-internal.
double hyperbolic_distance(const LorentzRotation& rot, const std::vector<double>& h, const std::vector<double>& t,
                           std::vector<double>& rotated) {
  rotated.resize(h.size());
  rot.apply(h, rotated);
  double inner = -rotated[0] * t[0];
  for (std::size_t i = 1; i < t.size(); ++i) inner += rotated[i] * t[i];
  return std::acosh(std::max(1.0, -inner));
}

}  // namespace

double EmbeddingModel::distance(std::size_t h, std::size_t r, std::size_t t) const {
  if (geometry == Geometry::Euclidean) {
    return euclidean_distance(entity_coords.at(h), relation_params.at(r), entity_coords.at(t));
  }
  std::vector<double> rotated;
  return hyperbolic_distance(rotation(r), entity_coords.at(h), entity_coords.at(t), rotated);
}

double EmbeddingModel::score(std::size_t h, std::size_t r, std::size_t t) const { return -distance(h, r, t); }

double score_triple(const EmbeddingModel& model, std::string_view h, std::string_view r, std::string_view t) {
  const std::size_t hi = model.entity_index(h);
  const std::size_t ri = model.relation_index(r);
  const std::size_t ti = model.entity_index(t);
  if (model.geometry == Geometry::Hyperbolic) {
    return -lorentz_distance(apply_rotation(model.rotation(ri), model.point(hi)), model.point(ti));
  }
  return model.score(hi, ri, ti);
}

void EmbeddingModel::save(const std::filesystem::path& path) const {
  json j;
  j["format"] = "cekg-emb-v1";
  j["dim"] = dim;
  j["geometry"] = to_string(geometry);
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  json ents = json::array();
  for (std::size_t i = 0; i < entity_ids.size(); ++i) ents.push_back({{"id", entity_ids[i]}, {"coords", entity_coords[i]}});
  json rels = json::array();
  for (std::size_t i = 0; i < relation_ids.size(); ++i)
    rels.push_back({{"id", relation_ids[i]}, {"params", relation_params[i]}});
  j["entities"] = std::move(ents);
  j["relations"] = std::move(rels);
  j["epoch_losses"] = epoch_losses;
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
  out << j.dump(1) << '\n';
  if (!out) fail(ErrorCode::IoFailure, "write failed for " + path.string());
}

EmbeddingModel EmbeddingModel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError, path.string() + ": " + e.what());
  }
  try {
    if (j.at("format") != "cekg-emb-v1") fail(ErrorCode::FormatError, "unsupported model format");
    EmbeddingModel m;
    m.dim = j.at("dim").get<std::size_t>();
    m.geometry = parse_geometry(j.at("geometry").get<std::string>());
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config_hash = j.value("config_hash", "");
    for (const auto& e : j.at("entities")) {
      m.entity_ids.push_back(e.at("id").get<std::string>());
      m.entity_coords.push_back(e.at("coords").get<std::vector<double>>());
    }
    for (const auto& r : j.at("relations")) {
      m.relation_ids.push_back(r.at("id").get<std::string>());
      m.relation_params.push_back(r.at("params").get<std::vector<double>>());
    }
    if (j.contains("epoch_losses")) m.epoch_losses = j.at("epoch_losses").get<std::vector<double>>();
    const std::size_t ent_len = m.geometry == Geometry::Hyperbolic ? m.dim + 1 : m.dim;
    const std::size_t rel_len = m.geometry == Geometry::Hyperbolic ? LorentzRotation::angle_count(m.dim) : m.dim;
    for (const auto& c : m.entity_coords) {
      if (c.size() != ent_len) fail(ErrorCode::FormatError, "entity coordinate length mismatch");
      if (m.geometry == Geometry::Hyperbolic) (void)LorentzPoint::from_coords(c);
    }
    for (const auto& p : m.relation_params)
      if (p.size() != rel_len) fail(ErrorCode::FormatError, "relation parameter length mismatch");
    m.rebuild_index();
    return m;
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Training

EmbeddingModel init_model(const TripleSet& set, const EmbeddingConfig& config) {
  if (config.dim < 2) fail(ErrorCode::ConfigInvalid, "embedding dim must be >= 2");
  if (!config.seed) fail(ErrorCode::ConfigInvalid, "embedding training requires a seed");
  EmbeddingModel m;
  m.geometry = config.geometry;
  m.dim = config.dim;
  m.seed = *config.seed;
  m.config_hash = config.config_hash;
  m.entity_ids = set.entities;
  m.relation_ids = set.relations;
  Rng rng(*config.seed);
  for (std::size_t e = 0; e < set.entities.size(); ++e) {
    std::vector<double> spatial(config.dim);
    for (auto& x : spatial) x = rng.normal(0.0, config.init_scale);
    if (config.geometry == Geometry::Hyperbolic) {
      const auto p = LorentzPoint::from_spatial(spatial);
      m.entity_coords.emplace_back(p.coords().begin(), p.coords().end());
    } else {
      m.entity_coords.push_back(std::move(spatial));
    }
  }
  for (std::size_t r = 0; r < set.relations.size(); ++r) {
    if (config.geometry == Geometry::Hyperbolic) {
      std::vector<double> angles(LorentzRotation::angle_count(config.dim));
      for (auto& a : angles) a = rng.uniform(-std::numbers::pi, std::numbers::pi);
      m.relation_params.push_back(std::move(angles));
    } else {
      std::vector<double> t(config.dim);
      for (auto& x : t) x = rng.normal(0.0, config.init_scale);
      m.relation_params.push_back(std::move(t));
    }
  }
  m.rebuild_index();
  return m;
}

namespace {

void add_into(std::map<std::size_t, std::vector<double>>& acc, std::size_t key, const std::vector<double>& g,
              double scale) {
  auto& slot = acc[key];
  if (slot.empty()) slot.assign(g.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) slot[i] += scale * g[i];
}

// Gradient of d(triple) accumulated with the given sign.
void distance_gradient_into(const EmbeddingModel& m, const IndexedTriple& tr, double sign, SampleGradient& out) {
  const auto& h = m.entity_coords[tr.head];
  const auto& t = m.entity_coords[tr.tail];
  const auto& rp = m.relation_params[tr.relation];
  if (m.geometry == Geometry::Euclidean) {
    std::vector<double> diff(h.size());
    double norm = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i) {
      diff[i] = h[i] + rp[i] - t[i];
      norm += diff[i] * diff[i];
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) return;
    for (auto& d : diff) d /= norm;
    add_into(out.entity, tr.head, diff, sign);
    add_into(out.relation, tr.relation, diff, sign);
    add_into(out.entity, tr.tail, diff, -sign);
    return;
  }
  const LorentzRotation rot(m.dim, rp);
  std::vector<double> z(h.size());
  rot.apply(h, z);
  const auto gz = distance_gradient(z, t);
  const auto gt = distance_gradient(t, z);
  // z = R h with R orthogonal on the spatial block, so dL/dh = R^T dL/dz.
  std::vector<double> gh(h.size());
  rot.inverse().apply(gz, gh);
  std::vector<double> ga(rp.size());
  for (std::size_t k = 0; k < rp.size(); ++k) {
    const std::size_t a = 2 * k + 1;
    const std::size_t b = a + 1;
    ga[k] = -gz[a] * z[b] + gz[b] * z[a];
  }
  add_into(out.entity, tr.head, gh, sign);
  add_into(out.entity, tr.tail, gt, sign);
  add_into(out.relation, tr.relation, ga, sign);
}

void clamp_radius(std::vector<double>& x, double max_radius) {
  const double max_x0 = std::cosh(max_radius);
  if (x[0] <= max_x0) return;
  double s = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) s += x[i] * x[i];
  const double target = std::sqrt(max_x0 * max_x0 - 1.0);
  const double scale = target / std::sqrt(s);
  for (std::size_t i = 1; i < x.size(); ++i) x[i] *= scale;
  x[0] = max_x0;
}

void clamp_norm(std::vector<double>& x, double max_radius) {
  double s = 0.0;
  for (double v : x) s += v * v;
  const double n = std::sqrt(s);
  if (n <= max_radius) return;
  for (auto& v : x) v *= max_radius / n;
}

}  // namespace

double margin_loss(const EmbeddingModel& model, const IndexedTriple& positive, const IndexedTriple& negative,
                   double margin) {
  return std::max(0.0, margin + model.distance(positive.head, positive.relation, positive.tail) -
                           model.distance(negative.head, negative.relation, negative.tail));
}

SampleGradient margin_gradient(const EmbeddingModel& model, const IndexedTriple& positive,
                               const IndexedTriple& negative, double margin) {
  SampleGradient g;
  g.loss = margin_loss(model, positive, negative, margin);
  if (g.loss <= 0.0) return g;
  distance_gradient_into(model, positive, 1.0, g);
  distance_gradient_into(model, negative, -1.0, g);
  return g;
}

EmbeddingModel train(const TripleSet& set, const EmbeddingConfig& config) {
  if (set.triples.empty() || set.entities.size() < 2) fail(ErrorCode::EmptyGraph, "nothing to embed");
  if (config.learning_rate <= 0.0 || config.margin < 0.0 || config.negatives_per_positive == 0)
    fail(ErrorCode::ConfigInvalid, "learning_rate > 0, margin >= 0 and negatives >= 1 are required");
  EmbeddingModel m = init_model(set, config);
  Rng rng(splitmix64(*config.seed));
  const std::set<IndexedTriple> known(set.triples.begin(), set.triples.end());
  std::vector<std::size_t> order(set.triples.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t n_ent = set.entities.size();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    // Fisher-Yates with the portable generator.
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    // Linear decay to zero; with a constant step the sampled-negative loss
    // plateaus and drifts upward.
    const double lr =
        config.learning_rate * (1.0 - static_cast<double>(epoch) / static_cast<double>(config.epochs));
    double epoch_loss = 0.0;
    std::size_t samples = 0;
    for (std::size_t idx : order) {
      const IndexedTriple& pos = set.triples[idx];
      SampleGradient acc;
      for (std::size_t k = 0; k < config.negatives_per_positive; ++k) {
        IndexedTriple neg = pos;
        const bool corrupt_head = rng.uniform() < 0.5;
        for (int attempt = 0; attempt < 10; ++attempt) {
          std::size_t e = rng.index(n_ent - 1);
          const std::size_t original = corrupt_head ? pos.head : pos.tail;
          if (e >= original) ++e;
          (corrupt_head ? neg.head : neg.tail) = e;
          if (!known.count(neg)) break;
        }
        auto g = margin_gradient(m, pos, neg, config.margin);
        epoch_loss += g.loss;
        ++samples;
        for (auto& [e, v] : g.entity) add_into(acc.entity, e, v, 1.0);
        for (auto& [r, v] : g.relation) add_into(acc.relation, r, v, 1.0);
      }
      for (auto& [e, g] : acc.entity) {
        auto& x = m.entity_coords[e];
        if (m.geometry == Geometry::Hyperbolic) {
          const auto p = riemannian_step(LorentzPoint::from_coords(x), g, lr);
          x.assign(p.coords().begin(), p.coords().end());
          clamp_radius(x, config.max_radius);
        } else {
          for (std::size_t i = 0; i < x.size(); ++i) x[i] -= lr * g[i];
          clamp_norm(x, config.max_radius);
        }
      }
      for (auto& [r, g] : acc.relation) {
        auto& p = m.relation_params[r];
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
      }
    }
    m.epoch_losses.push_back(samples ? epoch_loss / static_cast<double>(samples) : 0.0);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<RankedTail> link_predict(const EmbeddingModel& model, const TripleSet& known, std::string_view h,
                                     std::string_view r, std::size_t k, std::optional<std::string_view> target) {
  const std::size_t hi = model.entity_index(h);
  const std::size_t ri = model.relation_index(r);
  std::set<std::string> filtered;
  if (target) {
    model.entity_index(*target);
    for (const auto& t : known.triples) {
      if (known.entities[t.head] != h || known.relations[t.relation] != r) continue;
      if (known.entities[t.tail] != *target) filtered.insert(known.entities[t.tail]);
    }
  }
  std::vector<RankedTail> out;
  out.reserve(model.entity_ids.size());
  for (std::size_t e = 0; e < model.entity_ids.size(); ++e) {
    if (filtered.count(model.entity_ids[e])) continue;
    out.push_back({model.entity_ids[e], model.score(hi, ri, e)});
  }
  std::stable_sort(out.begin(), out.end(), [](const RankedTail& a, const RankedTail& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.entity < b.entity;
  });
  if (out.size() > k) out.resize(k);
  return out;
}

LinkMetrics evaluate(const EmbeddingModel& model, const TripleSet& known) {
  LinkMetrics lm;
  std::map<std::pair<std::size_t, std::size_t>, std::set<std::size_t>> tails;
  // Map the set's vocabulary onto the model's.
  std::vector<std::size_t> ent_map(known.entities.size()), rel_map(known.relations.size());
  for (std::size_t i = 0; i < known.entities.size(); ++i) ent_map[i] = model.entity_index(known.entities[i]);
  for (std::size_t i = 0; i < known.relations.size(); ++i) rel_map[i] = model.relation_index(known.relations[i]);
  for (const auto& t : known.triples) tails[{ent_map[t.head], rel_map[t.relation]}].insert(ent_map[t.tail]);
  for (const auto& t : known.triples) {
    const std::size_t h = ent_map[t.head], r = rel_map[t.relation], tail = ent_map[t.tail];
    const auto& filter = tails[{h, r}];
    const double target = model.score(h, r, tail);
    std::size_t rank = 1;
    for (std::size_t e = 0; e < model.entity_ids.size(); ++e) {
      if (e == tail || filter.count(e)) continue;
      if (model.score(h, r, e) >= target) ++rank;
    }
    lm.mrr += 1.0 / static_cast<double>(rank);
    lm.hits1 += rank <= 1 ? 1.0 : 0.0;
    lm.hits3 += rank <= 3 ? 1.0 : 0.0;
    lm.hits10 += rank <= 10 ? 1.0 : 0.0;
    ++lm.queries;
  }
  if (lm.queries) {
    const double n = static_cast<double>(lm.queries);
    lm.mrr /= n;
    lm.hits1 /= n;
    lm.hits3 /= n;
    lm.hits10 /= n;
  }
  return lm;
}

}  // namespace cekg::hyp
