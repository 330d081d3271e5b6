// Acceptance suite: one PASS/FAIL line per criterion, each against its time
// budget. Exit status 1 if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cekg/carm.hpp"
#include "cekg/config.hpp"
#include "cekg/embedding.hpp"
#include "cekg/error.hpp"
#include "cekg/grpo.hpp"
#include "cekg/kg.hpp"
#include "cekg/lorentz.hpp"
#include "cekg/metrics.hpp"
#include "cekg/random.hpp"
#include "cekg/service.hpp"

namespace fs = std::filesystem;
using namespace cekg;

namespace {

const fs::path kSource = CEKG_SOURCE_DIR;

const Config& config() {
  static const Config c = Config::load(kSource / "data" / "config.json");
  return c;
}

struct Outcome {
  bool ok = true;
  std::ostringstream detail;
};

void need(Outcome& o, bool cond, const std::string& what) {
  if (!cond && o.ok) {
    o.ok = false;
    o.detail << "failed: " << what << "; ";
  }
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cekg-acceptance-" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

hyp::EmbeddingConfig embedding_config(hyp::Geometry g, std::uint64_t seed) {
  hyp::EmbeddingConfig c = config().embedding;
  c.geometry = g;
  c.seed = seed;
  c.dim = 8;
  return c;
}

hyp::LorentzPoint random_point(Rng& rng, std::size_t n) {
  std::vector<double> s(n);
  for (auto& x : s) x = rng.normal();
  return hyp::LorentzPoint::from_spatial(s);
}

// ---------------------------------------------------------------------------

void manifold(Outcome& o) {
  double worst = 0.0;
  std::size_t points = 0;
  const auto tree = hyp::TripleSet::synthetic_tree(3, 3);
  const auto graph = kg::load(config().paths.graph);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    for (const auto& m : {hyp::train(tree, embedding_config(hyp::Geometry::Hyperbolic, seed)),
                          hyp::train(hyp::TripleSet::from_graph(graph), embedding_config(hyp::Geometry::Hyperbolic, seed))}) {
      for (const auto& c : m.entity_coords) {
        worst = std::max(worst, hyp::constraint_residual(c));
        need(o, c[0] > 0.0, "x0 > 0");
        ++points;
      }
    }
  }
  need(o, worst < 1e-6, "constraint residual < 1e-6");
  Rng rng(2024);
  double iso = 0.0;
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> angles(4);
    for (auto& a : angles) a = rng.uniform(-3.2, 3.2);
    const hyp::LorentzRotation r(8, angles);
    const auto x = random_point(rng, 8), y = random_point(rng, 8);
    iso = std::max(iso, std::fabs(hyp::lorentz_distance(hyp::apply_rotation(r, x), hyp::apply_rotation(r, y)) -
                                  hyp::lorentz_distance(x, y)));
  }
  need(o, iso < 1e-9, "rotation isometry within 1e-9");
  o.detail << points << " trained points, max |<x,x>+1| " << worst << ", max isometry error " << iso;
}

// |fd - an| / max(1, |an|): relative, with a unit floor so near-zero
// components do not divide by ~0.
double rel_err(double fd, double an) { return std::fabs(fd - an) / std::max(1.0, std::fabs(an)); }

void gradients(Outcome& o) {
  Rng rng(99);
  const double h = 1e-6;
  double worst_emb = 0.0;
  for (int inst = 0; inst < 50; ++inst) {
    hyp::TripleSet set;
    const std::size_t n = 3 + rng.index(4);
    for (std::size_t i = 0; i < n; ++i) set.entities.push_back("e" + std::to_string(i));
    set.relations = {"r", "s"};
    const std::size_t head = rng.index(n), tail = (head + 1 + rng.index(n - 1)) % n;
    std::size_t corrupt = rng.index(n);
    while (corrupt == tail) corrupt = rng.index(n);
    const hyp::IndexedTriple pos{head, rng.index(2), tail}, neg{head, pos.relation, corrupt};
    set.triples = {pos};
    auto cfg = embedding_config(hyp::Geometry::Hyperbolic, 500 + inst);
    cfg.dim = 2 + 2 * rng.index(3);
    cfg.init_scale = 0.6;
    const auto m = hyp::init_model(set, cfg);
    const double margin = 10.0;  // keeps the hinge active
    const auto g = hyp::margin_gradient(m, pos, neg, margin);
    if (g.loss <= 0.0) {
      need(o, false, "hinge inactive on a gradient instance");
      continue;
    }
    for (const auto& [e, eg] : g.entity) {
      const auto x = m.point(e);
      const auto rg = hyp::riemannian_gradient(x.coords(), eg);
      for (int dir = 0; dir < 3; ++dir) {
        std::vector<double> u(m.dim + 1);
        for (auto& v : u) v = rng.normal();
        const auto v = hyp::tangent_project(x.coords(), u);
        auto loss_at = [&](double s) {
          auto mm = m;
          std::vector<double> sv(v);
          for (auto& c : sv) c *= s;
          const auto p = hyp::exp_map(x, sv);
          mm.entity_coords[e].assign(p.coords().begin(), p.coords().end());
          return hyp::margin_loss(mm, pos, neg, margin);
        };
        worst_emb = std::max(worst_emb, rel_err((loss_at(h) - loss_at(-h)) / (2 * h), hyp::lorentz_inner(rg, v)));
      }
    }
    for (const auto& [r, rgv] : g.relation)
      for (std::size_t i = 0; i < rgv.size(); ++i) {
        auto mp = m, mm = m;
        mp.relation_params[r][i] += h;
        mm.relation_params[r][i] -= h;
        worst_emb = std::max(worst_emb, rel_err((hyp::margin_loss(mp, pos, neg, margin) -
                                                 hyp::margin_loss(mm, pos, neg, margin)) / (2 * h), rgv[i]));
      }
  }

  double worst_pol = 0.0;
  grpo::GrpoConfig cfg;
  cfg.lambda_ptx = 0.3;
  for (int i = 0; i < 4; ++i) {
    grpo::AnchorExample a;
    a.candidate_features.assign(3, std::vector<double>(5));
    for (auto& row : a.candidate_features)
      for (auto& x : row) x = rng.uniform(-1, 1);
    a.reference = rng.index(3);
    cfg.anchors.push_back(a);
  }
  int instances = 0, skipped = 0;
  while (instances < 50) {
    std::vector<double> theta(5);
    for (auto& t : theta) t = rng.normal(0, 0.5);
    std::vector<grpo::Transition> batch;
    bool near_kink = false;
    for (int b = 0; b < 8; ++b) {
      grpo::Transition t;
      t.candidate_features.assign(2 + rng.index(3), std::vector<double>(5));
      for (auto& row : t.candidate_features)
        for (auto& x : row) x = rng.uniform(-1, 1);
      t.action = rng.index(t.candidate_features.size());
      t.old_log_prob =
          std::min(0.0, grpo::log_probability(theta, t.candidate_features, t.action) + rng.uniform(-0.4, 0.4));
      t.reward = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
      t.value_baseline = rng.uniform(-0.5, 0.5);
      t.weights = grpo::RewardWeights::make(1, 1, 1);
      const double ratio = std::exp(grpo::log_probability(theta, t.candidate_features, t.action) - t.old_log_prob);
      // The clipped objective is not differentiable at ratio = 1 +/- epsilon.
      near_kink = near_kink || std::fabs(ratio - 0.8) < 1e-3 || std::fabs(ratio - 1.2) < 1e-3;
      batch.push_back(std::move(t));
    }
    if (near_kink) {
      ++skipped;
      continue;
    }
    const auto ev = grpo::grpo_objective(theta, batch, cfg);
    for (std::size_t k = 0; k < theta.size(); ++k) {
      auto tp = theta, tm = theta;
      tp[k] += h;
      tm[k] -= h;
      const double fd =
          (grpo::grpo_objective(tp, batch, cfg).objective - grpo::grpo_objective(tm, batch, cfg).objective) / (2 * h);
      worst_pol = std::max(worst_pol, rel_err(fd, ev.gradient[k]));
    }
    ++instances;
  }
  need(o, worst_emb <= 1e-4, "embedding gradients within 1e-4");
  need(o, worst_pol <= 1e-4, "GRPO gradients within 1e-4");
  o.detail << "50+50 instances, max rel. error embedding " << worst_emb << ", GRPO " << worst_pol << " (" << skipped
           << " GRPO draws on a clip kink redrawn)";
}

void ablation(Outcome& o) {
  const auto tree = hyp::TripleSet::synthetic_tree(3, 3);
  need(o, tree.entities.size() == 40, "40-node tree");
  int wins = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const double h = hyp::evaluate(hyp::train(tree, embedding_config(hyp::Geometry::Hyperbolic, seed)), tree).mrr;
    const double e = hyp::evaluate(hyp::train(tree, embedding_config(hyp::Geometry::Euclidean, seed)), tree).mrr;
    wins += h > e;
    o.detail << "seed " << seed << ": " << h << " vs " << e << "; ";
  }
  need(o, wins == 5, "hyperbolic MRR above Euclidean on all 5 seeds");
  o.detail << wins << "/5 seeds";
}

void bias(Outcome& o) {
  const auto registry = config().registry();
  const auto lexicon = kg::Lexicon::load_tsv(config().paths.lexicon);
  const auto graph = kg::ingest(kg::load_documents(kSource / "data" / "documents_skewed.jsonl"), lexicon, registry);
  const auto r = kg::align_cross_cultural(graph);
  const double reduction = 1.0 - r.kl_after / r.kl_before;
  std::size_t unique = 0, kept = 0;
  for (const auto& [id, e] : graph.entities()) {
    if (!e.unique) continue;
    ++unique;
    const auto* after = r.graph.find_entity(id);
    kept += after && after->unique && after->culture_tags == e.culture_tags;
  }
  need(o, r.kl_before > 0.0, "skewed corpus has KL > 0");
  need(o, reduction >= 0.5, "KL reduced by at least 50%");
  need(o, unique > 0 && kept == unique, "unique concepts preserved");
  need(o, r.graph.entity_count() >= graph.entity_count(), "no entity dropped");
  o.detail << "KL " << r.kl_before << " -> " << r.kl_after << " (" << 100.0 * reduction << "% reduction), unique kept "
           << kept << "/" << unique;
}

void bandit(Outcome& o) {
  grpo::GrpoConfig cfg;
  cfg.lambda_ptx = 0.0;
  grpo::PolicyTrainer trainer(grpo::PolicyParams::initial({"first", "second"}, {0.0, 0.0}), cfg);
  const grpo::FeatureMatrix f{{1.0, 0.0}, {0.0, 1.0}};
  Rng rng(123);
  std::size_t updates = 0, reached_at = 0;
  double lo = 1.0, hi = 0.0;
  while (updates < 200) {
    const auto p = grpo::policy_probabilities(trainer.policy().theta, f);
    const std::size_t a = rng.uniform() < p[0] ? 0 : 1;
    grpo::Transition t;
    t.state_id = "bandit";
    t.candidate_features = f;
    t.action = a;
    t.old_log_prob = std::log(p[a]);
    t.reward = {a == 0 ? 1.0 : 0.0, 0.0, 0.0};
    t.weights = grpo::RewardWeights::make(1, 0, 0);
    t.bucket = "bandit";
    t.value_baseline = trainer.baselines().baseline(t.bucket);
    const auto out = trainer.submit(t);
    if (!out.update_triggered) continue;
    ++updates;
    need(o, out.diagnostics.has_value() && !out.rejected, "update diagnostics present");
    if (out.diagnostics) {
      lo = std::min(lo, out.diagnostics->clip_fraction);
      hi = std::max(hi, out.diagnostics->clip_fraction);
    }
    if (!reached_at && grpo::policy_probabilities(trainer.policy().theta, f)[0] >= 0.95) reached_at = updates;
  }
  need(o, reached_at > 0, "optimal-action probability reaches 0.95 within 200 updates");

  // At the default step size the ratios stay inside the trust region, so the
  // same bandit is rerun with a large step where clipping binds.
  auto stressed = cfg;
  stressed.lr = 2.0;
  grpo::PolicyTrainer hot(grpo::PolicyParams::initial({"first", "second"}, {0.0, 0.0}), stressed);
  for (std::size_t u = 0; u < 200;) {
    const auto p = grpo::policy_probabilities(hot.policy().theta, f);
    const std::size_t a = rng.uniform() < p[0] ? 0 : 1;
    grpo::Transition t;
    t.state_id = "hot";
    t.candidate_features = f;
    t.action = a;
    t.old_log_prob = std::log(p[a]);
    t.reward = {a == 0 ? 1.0 : 0.0, 0.0, 0.0};
    t.weights = grpo::RewardWeights::make(1, 0, 0);
    t.bucket = "hot";
    t.value_baseline = hot.baselines().baseline(t.bucket);
    const auto out = hot.submit(t);
    if (!out.update_triggered) continue;
    ++u;
    if (out.diagnostics) {
      lo = std::min(lo, out.diagnostics->clip_fraction);
      hi = std::max(hi, out.diagnostics->clip_fraction);
    }
  }
  need(o, lo >= 0.0 && hi <= 1.0, "clip_fraction within [0, 1]");

  // Zero advantages and no anchor term: the parameters must not move at all.
  auto p = grpo::PolicyParams::initial({"a", "b", "c"}, {0.3, -0.2, 0.7});
  const auto theta0 = p.theta;
  Rng r2(5);
  for (int i = 0; i < 50; ++i) {
    std::vector<grpo::Transition> batch;
    for (int b = 0; b < 16; ++b) {
      grpo::Transition t;
      t.candidate_features.assign(3, std::vector<double>(3));
      for (auto& row : t.candidate_features)
        for (auto& x : row) x = r2.uniform(-1, 1);
      t.action = r2.index(3);
      t.old_log_prob = std::log(r2.uniform(0.1, 0.9));
      t.reward = {0.5, 0.25, 0.0};
      t.weights = grpo::RewardWeights::make(1, 1, 0);
      t.value_baseline = t.reward_total();
      batch.push_back(std::move(t));
    }
    p = grpo::grpo_update(p, batch, cfg).policy;
  }
  need(o, p.theta == theta0, "zero-advantage policy bit-stable");
  o.detail << "p(optimal) >= 0.95 after " << reached_at << " updates, clip_fraction in [" << lo << ", " << hi
           << "] (incl. a lr 2.0 rerun), zero-advantage theta bit-stable over 50 updates";
}

void gate(Outcome& o) {
  const auto engine = carm::Engine::from_config(config());
  Rng rng(31337);
  const std::vector<std::string> words{
      "I",      "feel",    "joy",      "grief",   "anxiety",   "gratitude", "shame",  "pride",  "Japan",
      "India",  "Brazil",  "America",  "family",  "workplace", "funeral",   "wedding", "why",   "how",
      "the",    "and",     "my",       "at",      "?",         "bowing",    "carnival", "calm", "angry",
      "lonely", "hopeful", "festival", "teacher", "harmony",   "friends",   "hug",     "smile", "celebrate"};
  const std::vector<std::optional<std::string>> declared{std::nullopt, "JP", "US", "IN", "BR"};
  const double tau = config().thresholds.tau;
  std::size_t runs = 0, violations = 0, flagged = 0;
  while (runs < 10000) {
    carm::Session s;
    s.session_id = "g" + std::to_string(runs);
    s.declared_culture = declared[rng.index(declared.size())];
    grpo::PolicyParams policy = grpo::PolicyParams::initial(grpo::kDefaultFeatureNames, config().initial_theta);
    for (auto& t : policy.theta) t += rng.normal(0.0, 1.0);
    const std::size_t turns = 1 + rng.index(5);
    for (std::size_t t = 0; t < turns && runs < 10000; ++t, ++runs) {
      std::string text;
      const std::size_t n = rng.index(16);
      for (std::size_t j = 0; j < n; ++j) text += words[rng.index(words.size())] + " ";
      auto out = engine.orchestrate(s, text, policy);
      const auto& d = out.response.diagnostics;
      if (d.fallback) {
        ++flagged;
      } else if (std::min(d.comp_k, d.coh_e) < tau) {
        ++violations;
      }
      s.turns.push_back(std::move(out.record));
    }
  }
  need(o, violations == 0, "no unflagged response below tau");
  o.detail << runs << " orchestrations, " << violations << " unflagged below tau, " << flagged << " flagged fallback";
}

// Independent reference implementations for the metric oracles.
namespace oracle {

long double kl(const std::map<std::string, double>& counts, const std::map<std::string, double>& ideal) {
  long double total = 0, zi = 0, out = 0;
  for (const auto& [c, v] : counts) total += v;
  for (const auto& [c, v] : ideal) zi += v;
  for (const auto& [c, v] : counts) {
    if (v == 0) continue;
    const long double p = v / total, q = ideal.at(c) / zi;
    out += p * std::log(p / q);
  }
  return out;
}

// Clipped n-gram matches by explicit window comparison.
std::pair<std::size_t, std::size_t> matches(const std::vector<std::string>& h, const std::vector<std::string>& r,
                                            std::size_t n) {
  if (h.size() < n) return {0, 0};
  auto window = [](const std::vector<std::string>& v, std::size_t i, std::size_t n) {
    return std::vector<std::string>(v.begin() + static_cast<long>(i), v.begin() + static_cast<long>(i + n));
  };
  auto count = [&](const std::vector<std::string>& v, const std::vector<std::string>& g) {
    std::size_t c = 0;
    for (std::size_t i = 0; i + n <= v.size(); ++i) c += window(v, i, n) == g;
    return c;
  };
  std::size_t m = 0;
  std::vector<std::vector<std::string>> seen;
  for (std::size_t i = 0; i + n <= h.size(); ++i) {
    const auto g = window(h, i, n);
    if (std::find(seen.begin(), seen.end(), g) != seen.end()) continue;
    seen.push_back(g);
    m += std::min(count(h, g), count(r, g));
  }
  return {m, h.size() - n + 1};
}

long double bleu(const std::vector<std::string>& h, const std::vector<std::string>& r) {
  const std::size_t orders = std::min<std::size_t>(4, h.size());
  long double s = 0;
  for (std::size_t n = 1; n <= orders; ++n) {
    const auto [m, total] = matches(h, r, n);
    s += std::log((m ? static_cast<long double>(m) : 1e-9L) / total);
  }
  const long double bp = h.size() > r.size() ? 1.0L : std::exp(1.0L - static_cast<long double>(r.size()) / h.size());
  return bp * std::exp(s / orders);
}

// Longest common subsequence by enumerating subsequences of the shorter list.
std::size_t lcs(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  const auto& s = a.size() <= b.size() ? a : b;
  const auto& t = a.size() <= b.size() ? b : a;
  std::size_t best = 0;
  for (std::uint32_t mask = 0; mask < (1u << s.size()); ++mask) {
    std::size_t j = 0, len = 0;
    bool ok = true;
    for (std::size_t i = 0; i < s.size() && ok; ++i) {
      if (!(mask >> i & 1u)) continue;
      while (j < t.size() && t[j] != s[i]) ++j;
      if (j == t.size()) ok = false;
      else ++j, ++len;
    }
    if (ok) best = std::max(best, len);
  }
  return best;
}

}  // namespace oracle

void metric_oracles(Outcome& o) {
  Rng rng(4242);
  double worst = 0.0;
  auto track = [&](long double expected, double got) {
    worst = std::max(worst, static_cast<double>(std::fabs(expected - static_cast<long double>(got))));
  };

  // CSD on the embedded examples and on random coverages.
  auto cov = [](std::size_t total, std::size_t entailed) {
    metrics::ConceptCoverage c;
    for (std::size_t i = 0; i < total; ++i) {
      c.concepts.insert("c" + std::to_string(i));
      if (i < entailed) c.entailed.insert("c" + std::to_string(i));
    }
    return c;
  };
  need(o, std::fabs(metrics::csd(cov(3, 2)) - 1.4427) < 5e-5, "CSD example 1.4427");
  need(o, std::fabs(metrics::csd(cov(9, 9)) - 3.9087) < 5e-5, "CSD example 3.9087");
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = 1 + rng.index(60), e = rng.index(n + 1);
    track(static_cast<long double>(e) / std::log(static_cast<long double>(n) + 1), metrics::csd(cov(n, e)));
    track(static_cast<long double>(e) / std::log2(static_cast<long double>(n) + 1),
          metrics::csd(cov(n, e), metrics::LogBase::Two));
  }

  // KL bias.
  need(o, std::fabs(metrics::kl_bias(metrics::CultureDistribution::with_uniform_ideal({{"A", 3}, {"B", 1}})) - 0.13081) <
              5e-6, "KL example 0.13081");
  for (int i = 0; i < 500; ++i) {
    metrics::CultureDistribution d;
    const std::size_t k = 1 + rng.index(5);
    for (std::size_t c = 0; c < k; ++c) {
      const std::string code = "C" + std::to_string(c);
      d.counts[code] = rng.uniform() < 0.2 ? 0.0 : static_cast<double>(1 + rng.index(50));
      d.ideal[code] = rng.uniform(0.05, 1.0);
    }
    double z = 0.0;
    for (const auto& [c, v] : d.ideal) z += v;
    for (auto& [c, v] : d.ideal) v /= z;
    if (std::all_of(d.counts.begin(), d.counts.end(), [](const auto& kv) { return kv.second == 0.0; }))
      d.counts.begin()->second = 1;
    track(oracle::kl(d.counts, d.ideal), metrics::kl_bias(d));
  }

  // Per-culture macro F1 against direct confusion counting in long double.
  const std::vector<std::string> labels{"joy", "grief", "anxiety", "pride"}, cultures{"JP", "US", "IN"};
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = 1 + rng.index(40);
    std::vector<std::string> pred, gold, cult;
    for (std::size_t j = 0; j < n; ++j) {
      gold.push_back(labels[rng.index(labels.size())]);
      pred.push_back(rng.uniform() < 0.5 ? gold.back() : labels[rng.index(labels.size())]);
      cult.push_back(cultures[rng.index(cultures.size())]);
    }
    const auto got = metrics::f1_by_culture(pred, gold, cult);
    long double macro_f = 0;
    std::size_t present = 0;
    for (const auto& c : cultures) {
      std::set<std::string> cl;
      for (std::size_t j = 0; j < n; ++j)
        if (cult[j] == c) cl.insert({pred[j], gold[j]});
      if (cl.empty()) continue;
      ++present;
      long double p = 0, r = 0, f = 0;
      for (const auto& l : cl) {
        long double tp = 0, fp = 0, fn = 0;
        for (std::size_t j = 0; j < n; ++j) {
          if (cult[j] != c) continue;
          tp += pred[j] == l && gold[j] == l;
          fp += pred[j] == l && gold[j] != l;
          fn += pred[j] != l && gold[j] == l;
        }
        const long double pl = tp + fp > 0 ? tp / (tp + fp) : 0, rl = tp + fn > 0 ? tp / (tp + fn) : 0;
        p += pl;
        r += rl;
        f += pl + rl > 0 ? 2 * pl * rl / (pl + rl) : 0;
      }
      const auto& s = got.by_culture.at(c);
      track(p / cl.size(), s.precision);
      track(r / cl.size(), s.recall);
      track(f / cl.size(), s.f1);
      macro_f += f / cl.size();
    }
    need(o, got.by_culture.size() == present, "F1 culture set");
    track(macro_f / present, got.macro.f1);
  }

  // BLEU-4 and ROUGE-L.
  const auto r = metrics::rouge_l(metrics::tokenize("the cat sat"), metrics::tokenize("the cat sat down"));
  need(o, std::fabs(r.f1 - 6.0 / 7.0) < 1e-9 && std::fabs(r.f1 - 0.857) < 5e-4, "ROUGE-L example 0.857");
  const std::vector<std::string> vocab{"a", "b", "c", "d", "e"};
  for (int i = 0; i < 300; ++i) {
    std::vector<std::string> h(1 + rng.index(10)), ref(1 + rng.index(10));
    for (auto& w : h) w = vocab[rng.index(vocab.size())];
    for (auto& w : ref) w = vocab[rng.index(vocab.size())];
    track(oracle::bleu(h, ref), metrics::bleu4(h, {ref}));
    const long double l = oracle::lcs(h, ref);
    const long double p = l / h.size(), rc = l / ref.size();
    const auto got = metrics::rouge_l(h, ref);
    track(p, got.precision);
    track(rc, got.recall);
    track(p + rc > 0 ? 2 * p * rc / (p + rc) : 0, got.f1);
  }
  need(o, worst <= 1e-9, "all metric oracles within 1e-9");
  o.detail << "CSD, KL, F1, BLEU-4, ROUGE-L vs brute force: max abs. deviation " << worst;
}

void online_offline(Outcome& o) {
  Config cfg = config();
  const auto dir = scratch("replay");
  cfg.paths.sessions = dir / "sessions";
  cfg.paths.policy.clear();
  grpo::PolicyParams served;
  std::size_t feedbacks = 0;
  {
    auto svc = service::Service::from_config(cfg);
    svc->set_clock([] { return std::string("1970-01-01T00:00:00Z"); });
    auto call = [&](const std::string& path, const std::string& body) {
      return svc->handle({"POST", path, {}, {}, body});
    };
    const std::vector<std::string> prompts{"I feel joy in Japan", "why do we bow at a funeral?",
                                           "I am proud of my work in America", "my family in Brazil is celebrating",
                                           "I feel anxiety at the workplace", "how do people in India show gratitude?"};
    std::vector<std::string> ids;
    for (const char* c : {R"({"declared_culture": "JP"})", "{}"}) {
      const auto r = call("/sessions", c);
      ids.push_back(nlohmann::json::parse(r.body).at("session_id"));
    }
    for (int t = 1; t <= 16; ++t)
      for (std::size_t s = 0; s < ids.size(); ++s) {
        const auto m = call("/sessions/" + ids[s] + "/message", nlohmann::json{{"text", prompts[(t + s) % prompts.size()]}}.dump());
        need(o, m.status == 200, "message accepted");
        const int rating = 1 + (t * 7 + static_cast<int>(s) * 3) % 5;
        const auto f = call("/sessions/" + ids[s] + "/feedback", nlohmann::json{{"turn_index", t}, {"rating", rating}}.dump());
        need(o, f.status == 200, "feedback accepted");
        ++feedbacks;
      }
    served = svc->policy();
  }
  grpo::PolicyTrainer offline(service::start_policy(cfg), service::training_config(cfg));
  grpo::replay(offline, grpo::load_transition_log(cfg.paths.sessions / "transitions.jsonl"));
  double worst = 0.0;
  need(o, offline.policy().theta.size() == served.theta.size(), "theta sizes agree");
  for (std::size_t i = 0; i < served.theta.size() && i < offline.policy().theta.size(); ++i)
    worst = std::max(worst, std::fabs(served.theta[i] - offline.policy().theta[i]));
  need(o, served.update_count == 2, "two online updates from 32 ratings");
  need(o, offline.policy().update_count == served.update_count, "same update count");
  need(o, worst <= 1e-12, "offline theta within 1e-12");
  o.detail << feedbacks << " ratings, " << served.update_count << " updates, max |theta_online - theta_offline| "
           << worst;
}

std::string chat_transcript(const std::string& input, const fs::path& sessions) {
  Config cfg = config();
  cfg.paths.sessions = sessions;
  auto svc = service::Service::from_config(cfg);
  svc->set_clock([] { return std::string("1970-01-01T00:00:00Z"); });
  std::istringstream in(input);
  std::ostringstream out, err;
  service::run_chat(*svc, "JP", in, out, err, true);
  return out.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void determinism(Outcome& o) {
  const auto golden = kSource / "tests" / "golden";
  const std::string input = slurp(golden / "chat_input.txt");
  const std::string expected = slurp(golden / "chat_transcript.jsonl");
  const auto a = chat_transcript(input, scratch("golden-a"));
  const auto b = chat_transcript(input, scratch("golden-b"));
  std::size_t turns = 0;
  for (char c : expected) turns += c == '\n';
  need(o, !expected.empty(), "golden transcript present");
  need(o, a == b, "two runs identical");
  need(o, a == expected, "byte-identical to the recorded transcript");
  o.detail << expected.size() << " bytes, " << turns << " lines; built with -ffp-contract=off";
}

struct Criterion {
  const char* name;
  double budget_s;
  void (*run)(Outcome&);
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {"manifold", 10, manifold},
      {"gradients", 30, gradients},
      {"ablation-direction", 120, ablation},
      {"bias-reduction", 10, bias},
      {"grpo-bandit", 10, bandit},
      {"gate-soundness", 60, gate},
      {"metric-oracles", 60, metric_oracles},
      {"online-offline-equivalence", 60, online_offline},
      {"determinism", 60, determinism},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(o);
    } catch (const std::exception& e) {
      o.ok = false;
      o.detail << "exception: " << e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > c.budget_s) {
      o.ok = false;
      o.detail << "; over the time budget";
    }
    failures += !o.ok;
    std::printf("%s %-27s %7.2fs / %4.0fs  %s\n", o.ok ? "PASS" : "FAIL", c.name, secs, c.budget_s, o.detail.str().c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures ? 1 : 0;
}
