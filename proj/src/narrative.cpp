#include "cekg/narrative.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cekg/error.hpp"
#include "cekg/metrics.hpp"
#include "cekg/random.hpp"

namespace cekg::narrative {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Text features

namespace {

const std::set<std::string> kQuestionWords = {"what", "how", "why", "when", "where", "who", "which"};

double norm(const Vector& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double dot(const Vector& a, const Vector& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double cosine(const Vector& a, const Vector& b) {
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

}  // namespace

TextAnalysis analyze_text(std::string_view text, const kg::Lexicon& lexicon, const kg::CultureRegistry& registry) {
  TextAnalysis a;
  a.tokens = metrics::tokenize(text);
  a.scan = kg::scan_tokens(a.tokens, lexicon, registry);
  a.culture_term_hits = a.scan.cultures.size();
  for (const auto& c : a.scan.cultures) a.mentioned_cultures.insert(c.code);
  double v = 0.0, ar = 0.0, d = 0.0;
  std::size_t with_vad = 0;
  for (const auto& h : a.scan.terms) {
    if (h.entry->culture_tags.size() == 1) ++a.culture_term_hits;
    if (h.entry->vad) {
      v += h.entry->vad->valence();
      ar += h.entry->vad->arousal();
      d += h.entry->vad->dominance();
      ++with_vad;
    }
  }
  if (with_vad) {
    const double n = static_cast<double>(with_vad);
    a.mean_vad = kg::Vad::make(v / n, ar / n, d / n);
  }
  a.question = text.find('?') != std::string_view::npos || (!a.tokens.empty() && kQuestionWords.count(a.tokens[0]));
  return a;
}

Vector text_vector(const TextAnalysis& a, std::size_t dim) {
  if (dim < 4) fail(ErrorCode::InvalidArgument, "text vector needs at least 4 dimensions");
  Vector out(dim, 0.0);
  const std::size_t slots = dim - 3;
  std::vector<bool> covered(a.tokens.size(), false);
  auto bump = [&](std::string_view key, double w) { out[fnv1a64(key) % slots] += w; };
  for (const auto& c : a.scan.cultures) {
    bump("c:" + c.code, 1.0);
    for (std::size_t i = 0; i < c.length; ++i) covered[c.pos + i] = true;
  }
  for (const auto& h : a.scan.terms) {
    bump("t:" + kg::term_id(h.entry->term), 1.0);
    for (std::size_t i = 0; i < h.entry->tokens.size(); ++i) covered[h.pos + i] = true;
  }
  for (std::size_t i = 0; i < a.tokens.size(); ++i)
    if (!covered[i]) bump("w:" + a.tokens[i], 0.25);
  double n = 0.0;
  for (std::size_t i = 0; i < slots; ++i) n += out[i] * out[i];
  if (n > 0.0) {
    n = std::sqrt(n);
    for (std::size_t i = 0; i < slots; ++i) out[i] /= n;
  }
  if (a.mean_vad) {
    out[slots] = a.mean_vad->valence();
    out[slots + 1] = a.mean_vad->arousal();
    out[slots + 2] = a.mean_vad->dominance();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention

Vector mat_vec(const Matrix& m, const Vector& v) {
  Vector out(m.size(), 0.0);
  for (std::size_t r = 0; r < m.size(); ++r) {
    if (m[r].size() != v.size()) fail(ErrorCode::DimensionMismatch, "matrix/vector size mismatch");
    out[r] = dot(m[r], v);
  }
  return out;
}

namespace {

// Gaussian rows orthonormalised by modified Gram-Schmidt.
Matrix random_orthonormal(std::size_t d, Rng& rng) {
  Matrix m(d, Vector(d));
  for (std::size_t r = 0; r < d; ++r) {
    for (;;) {
      for (auto& x : m[r]) x = rng.normal();
      for (std::size_t p = 0; p < r; ++p) {
        const double proj = dot(m[r], m[p]);
        for (std::size_t i = 0; i < d; ++i) m[r][i] -= proj * m[p][i];
      }
      const double n = norm(m[r]);
      if (n > 1e-8) {
        for (auto& x : m[r]) x /= n;
        break;
      }
    }
  }
  return m;
}

void check_square(const Matrix& m, std::size_t d, const char* name) {
  if (m.size() != d) fail(ErrorCode::DimensionMismatch, std::string(name) + " must be d_model x d_model");
  for (const auto& row : m)
    if (row.size() != d) fail(ErrorCode::DimensionMismatch, std::string(name) + " must be d_model x d_model");
}

}  // namespace

MultiHeadAttention::MultiHeadAttention(const AttentionParams& params)
    : d_model_(params.d_model), heads_(params.heads) {
  if (heads_ == 0 || d_model_ == 0 || d_model_ % heads_ != 0)
    fail(ErrorCode::InvalidArgument, "d_model must be a positive multiple of heads");
  Rng rng(splitmix64(params.seed ^ 0x6174746eULL));
  w_q_ = random_orthonormal(d_model_, rng);
  w_k_ = random_orthonormal(d_model_, rng);
  w_v_ = random_orthonormal(d_model_, rng);
  w_o_ = random_orthonormal(d_model_, rng);
}

MultiHeadAttention::MultiHeadAttention(std::size_t heads, Matrix w_q, Matrix w_k, Matrix w_v, Matrix w_o)
    : d_model_(w_q.size()), heads_(heads), w_q_(std::move(w_q)), w_k_(std::move(w_k)), w_v_(std::move(w_v)),
      w_o_(std::move(w_o)) {
  if (heads_ == 0 || d_model_ == 0 || d_model_ % heads_ != 0)
    fail(ErrorCode::InvalidArgument, "d_model must be a positive multiple of heads");
  check_square(w_q_, d_model_, "W_Q");
  check_square(w_k_, d_model_, "W_K");
  check_square(w_v_, d_model_, "W_V");
  check_square(w_o_, d_model_, "W_O");
}

FusedContext MultiHeadAttention::forward(const Vector& query, const std::vector<Vector>& keys,
                                         const std::vector<Vector>& values) const {
  if (query.size() != d_model_) fail(ErrorCode::DimensionMismatch, "query length must equal d_model");
  if (!keys.empty() && keys.size() != values.size())
    fail(ErrorCode::DimensionMismatch, "keys and values must have equal counts");
  for (const auto& k : keys)
    if (k.size() != d_model_) fail(ErrorCode::DimensionMismatch, "key length must equal d_model");
  for (const auto& v : values)
    if (v.size() != d_model_) fail(ErrorCode::DimensionMismatch, "value length must equal d_model");

  FusedContext out;
  const std::size_t n = values.size();
  const std::size_t dk = d_model_ / heads_;
  out.attention_weights.assign(heads_, Vector(n, 0.0));
  if (keys.empty()) {
    out.knowledge_only = true;
    if (n == 0) {
      out.f_vec.assign(d_model_, 0.0);
      return out;
    }
    for (auto& row : out.attention_weights) std::fill(row.begin(), row.end(), 1.0 / static_cast<double>(n));
  }

  std::vector<Vector> vproj;
  vproj.reserve(n);
  for (const auto& v : values) vproj.push_back(mat_vec(w_v_, v));

  if (!keys.empty()) {
    const Vector q = mat_vec(w_q_, query);
    std::vector<Vector> kproj;
    kproj.reserve(n);
    for (const auto& k : keys) kproj.push_back(mat_vec(w_k_, k));
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    for (std::size_t h = 0; h < heads_; ++h) {
      auto& row = out.attention_weights[h];
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = h * dk; i < (h + 1) * dk; ++i) s += q[i] * kproj[j][i];
        row[j] = s * scale;
      }
      const double m = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (auto& w : row) {
        w = std::exp(w - m);
        z += w;
      }
      for (auto& w : row) w /= z;
    }
  }

  Vector concat(d_model_, 0.0);
  for (std::size_t h = 0; h < heads_; ++h)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = h * dk; i < (h + 1) * dk; ++i) concat[i] += out.attention_weights[h][j] * vproj[j][i];
  out.f_vec = mat_vec(w_o_, concat);
  return out;
}

FusedContext fuse_context(const Vector& query, const std::vector<Vector>& keys, const std::vector<Vector>& values,
                          const AttentionParams& params) {
  return MultiHeadAttention(params).forward(query, keys, values);
}

// ---------------------------------------------------------------------------
// Templates

std::string_view to_string(Intensity i) {
  switch (i) {
    case Intensity::Low: return "low";
    case Intensity::Medium: return "medium";
    case Intensity::High: return "high";
  }
  return "medium";
}

Intensity intensity_for(double arousal) {
  if (arousal >= 0.7) return Intensity::High;
  if (arousal >= 0.4) return Intensity::Medium;
  return Intensity::Low;
}

namespace {

const std::set<std::string> kSlots = {"culture", "emotion", "expression", "value", "intensifier"};

std::vector<std::string> slots_in(const std::string& text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while ((pos = text.find('{', pos)) != std::string::npos) {
    const auto end = text.find('}', pos);
    if (end == std::string::npos) fail(ErrorCode::FormatError, "unterminated slot in template text");
    out.push_back(text.substr(pos + 1, end - pos - 1));
    pos = end + 1;
  }
  return out;
}

}  // namespace

void TemplateRegistry::add(Template t) {
  if (t.template_id.empty()) fail(ErrorCode::FormatError, "template without template_id");
  if (find(t.template_id)) fail(ErrorCode::DuplicateId, "duplicate template id " + t.template_id);
  for (const auto& s : slots_in(t.text))
    if (!kSlots.count(s)) fail(ErrorCode::FormatError, "template " + t.template_id + " uses unknown slot {" + s + "}");
  for (Intensity i : {Intensity::Low, Intensity::Medium, Intensity::High}) {
    auto it = t.intensity_variants.find(i);
    if (it == t.intensity_variants.end() || it->second.empty())
      fail(ErrorCode::FormatError,
           "template " + t.template_id + " lacks " + std::string(to_string(i)) + " intensity variants");
  }
  templates_.push_back(std::move(t));
}

const Template* TemplateRegistry::find(std::string_view id) const {
  for (const auto& t : templates_)
    if (t.template_id == id) return &t;
  return nullptr;
}

TemplateRegistry TemplateRegistry::parse(std::string_view json_text, std::string_view source) {
  TemplateRegistry reg;
  try {
    const auto j = json::parse(json_text);
    if (j.at("format") != "cekg-tpl-v1") fail(ErrorCode::FormatError, std::string(source) + ": not cekg-tpl-v1");
    for (const auto& e : j.at("templates")) {
      Template t;
      t.template_id = e.at("template_id").get<std::string>();
      t.text = e.at("text").get<std::string>();
      for (const auto& c : e.value("culture_tags", json::array())) t.culture_tags.insert(c.get<std::string>());
      const auto& v = e.at("vad_slots");
      const double va = v.at("valence").get<double>(), ar = v.at("arousal").get<double>(),
                   d = v.at("dominance").get<double>();
      if (!kg::Vad::in_range(va, ar, d))
        fail(ErrorCode::FormatError, std::string(source) + ": template " + t.template_id + " has out-of-range VAD");
      t.vad_slots = kg::Vad::make(va, ar, d);
      const auto& iv = e.at("intensity_variants");
      t.intensity_variants[Intensity::Low] = iv.at("low").get<std::vector<std::string>>();
      t.intensity_variants[Intensity::Medium] = iv.at("medium").get<std::vector<std::string>>();
      t.intensity_variants[Intensity::High] = iv.at("high").get<std::vector<std::string>>();
      reg.add(std::move(t));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError, std::string(source) + ": " + e.what());
  }
  return reg;
}

TemplateRegistry TemplateRegistry::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open templates " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

// ---------------------------------------------------------------------------
// Generation

TemplateScore score_template(const Template& t, const std::set<std::string>& target_cultures, const kg::Vad& target) {
  TemplateScore s;
  for (const auto& c : t.culture_tags) s.culture_matches += target_cultures.count(c);
  s.vad_distance = kg::vad_distance(t.vad_slots, target);
  return s;
}

namespace {

std::string replace_all(std::string text, const std::string& slot, const std::string& value) {
  const std::string marker = "{" + slot + "}";
  std::size_t pos = 0;
  while ((pos = text.find(marker, pos)) != std::string::npos) {
    text.replace(pos, marker.size(), value);
    pos += value.size();
  }
  return text;
}

const kg::QueryHit* first_of_kind(const std::vector<kg::QueryHit>& retrieval, kg::EntityKind kind) {
  for (const auto& h : retrieval)
    if (h.entity.kind == kind) return &h;
  return nullptr;
}

double shifted_arousal(double a, Intensity i) {
  const double delta = i == Intensity::High ? 0.1 : i == Intensity::Low ? -0.1 : 0.0;
  return std::clamp(a + delta, 0.0, 1.0);
}

// exp(score) of the retrieved triples behind the cited entities, averaged.
double embedding_feature(const hyp::EmbeddingModel* model, const std::vector<const kg::QueryHit*>& cited) {
  if (!model) return 0.0;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto* h : cited) {
    if (!h->triple) continue;
    const auto& t = *h->triple;
    if (!model->has_entity(t.head) || !model->has_entity(t.tail)) continue;
    if (std::find(model->relation_ids.begin(), model->relation_ids.end(), t.relation) == model->relation_ids.end())
      continue;
    sum += std::exp(hyp::score_triple(*model, t.head, t.relation, t.tail));
    ++n;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace

std::vector<ResponseCandidate> generate_candidates(const TemplateRegistry& registry, const FusedContext& fused,
                                                   const std::vector<kg::QueryHit>& retrieval,
                                                   const kg::Vad& target_vad, std::size_t n,
                                                   const GenerationInputs& in) {
  if (registry.empty()) fail(ErrorCode::NoTemplates, "template registry is empty");
  if (n == 0) fail(ErrorCode::InvalidArgument, "candidate count must be >= 1");
  if (!in.registry || !in.lexicon) fail(ErrorCode::InvalidArgument, "generation needs a culture registry and lexicon");

  // Stage 1: template selection.
  const auto& all = registry.templates();
  std::vector<std::size_t> order(all.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<TemplateScore> scores;
  scores.reserve(all.size());
  for (const auto& t : all) scores.push_back(score_template(t, in.target_cultures, target_vad));
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a].culture_matches != scores[b].culture_matches)
      return scores[a].culture_matches > scores[b].culture_matches;
    if (scores[a].vad_distance != scores[b].vad_distance) return scores[a].vad_distance < scores[b].vad_distance;
    return all[a].template_id < all[b].template_id;
  });
  if (order.size() > n) order.resize(n);

  // Slot fillers shared by every candidate of this turn.
  std::string culture_name = "your community";
  std::optional<std::string> culture_code;
  for (const auto& c : in.registry->cultures()) {
    if (in.target_cultures.count(c.code)) {
      culture_code = c.code;
      if (!c.names.empty()) culture_name = c.names.front();
      break;
    }
  }
  const auto* emotion = first_of_kind(retrieval, kg::EntityKind::EmotionPrototype);
  const auto* expression = first_of_kind(retrieval, kg::EntityKind::CulturalExpression);
  const auto* value = first_of_kind(retrieval, kg::EntityKind::CulturalValue);

  Vector affinity_ref = fused.f_vec;
  if (in.context.size() == affinity_ref.size())
    for (std::size_t i = 0; i < affinity_ref.size(); ++i) affinity_ref[i] += in.context[i];

  // Stage 2: instantiation with VAD-conditioned intensifiers.
  const Intensity level = intensity_for(target_vad.arousal());
  std::vector<ResponseCandidate> out;
  out.reserve(order.size());
  for (std::size_t idx : order) {
    const Template& t = all[idx];
    ResponseCandidate c;
    c.template_id = t.template_id;
    c.intensity = level;
    std::vector<const kg::QueryHit*> cited;
    std::string text = t.text;
    const auto slots = slots_in(t.text);
    auto uses = [&](const char* s) { return std::find(slots.begin(), slots.end(), s) != slots.end(); };
    if (uses("emotion")) {
      text = replace_all(text, "emotion", emotion ? emotion->entity.label : "what you are feeling");
      if (emotion) cited.push_back(emotion);
    }
    if (uses("expression")) {
      text = replace_all(text, "expression", expression ? expression->entity.label : "sharing it with someone you trust");
      if (expression) cited.push_back(expression);
    }
    if (uses("value")) {
      text = replace_all(text, "value", value ? value->entity.label : "mutual respect");
      if (value) cited.push_back(value);
    }
    if (uses("culture")) text = replace_all(text, "culture", culture_name);
    const auto& variants = t.intensity_variants.at(level);
    const std::uint64_t pick = splitmix64(in.seed ^ fnv1a64(t.template_id));
    text = replace_all(text, "intensifier", variants[pick % variants.size()]);
    c.text = std::move(text);

    c.vad = kg::Vad::make(t.vad_slots.valence(), shifted_arousal(t.vad_slots.arousal(), level),
                          t.vad_slots.dominance());
    if (!t.culture_tags.empty()) {
      c.culture_tags = t.culture_tags;
    } else if (uses("culture") && culture_code) {
      c.culture_tags = {*culture_code};
    }
    for (const auto* h : cited) c.cited.push_back(h->entity.id);

    const auto analysis = analyze_text(c.text, *in.lexicon, *in.registry);
    const Vector iv = text_vector(analysis, affinity_ref.empty() ? kContextDim : affinity_ref.size());
    const double affinity = affinity_ref.empty() ? 0.5 : (1.0 + cosine(iv, affinity_ref)) / 2.0;
    c.features = {
        grpo::reward_cultural(c.culture_tags, c.vad, retrieval, *in.registry).value,
        grpo::reward_emotional(c.vad, target_vad),
        affinity,
        embedding_feature(in.model, cited),
        std::min(1.0, static_cast<double>(analysis.tokens.size()) / 40.0),
    };
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Refinement

GateScore gate_score(const ResponseCandidate& c, const std::vector<kg::QueryHit>& retrieval,
                     const kg::Vad& expected_vad, const kg::CultureRegistry& registry) {
  const auto cultural = grpo::reward_cultural(c.culture_tags, c.vad, retrieval, registry);
  return {cultural.value, grpo::reward_emotional(c.vad, expected_vad), cultural.low_confidence};
}

RefineResult refine_scored(const std::vector<ResponseCandidate>& ranked, const std::vector<GateScore>& scores,
                           const RefineConfig& config) {
  if (ranked.empty()) fail(ErrorCode::InvalidArgument, "refine needs at least one candidate");
  if (scores.size() < std::min(ranked.size(), config.max_retries + 1))
    fail(ErrorCode::LengthMismatch, "one gate score per considered candidate is required");
  const std::size_t limit = std::min(ranked.size(), config.max_retries + 1);
  RefineResult r;
  std::size_t best = 0;
  for (std::size_t i = 0; i < limit; ++i) {
    r.considered.push_back(scores[i]);
    if (scores[i].min() >= config.tau) {
      r.index = i;
      r.candidate = ranked[i];
      r.score = scores[i];
      r.retries = i;
      r.candidates_considered = i + 1;
      return r;
    }
    if (scores[i].min() > scores[best].min()) best = i;
  }
  r.index = best;
  r.candidate = ranked[best];
  r.score = scores[best];
  r.retries = limit - 1;
  r.candidates_considered = limit;
  r.fallback = true;
  return r;
}

RefineResult refine(const std::vector<ResponseCandidate>& ranked, const std::vector<kg::QueryHit>& retrieval,
                    const kg::Vad& expected_vad, const kg::CultureRegistry& registry, const RefineConfig& config) {
  if (ranked.empty()) fail(ErrorCode::InvalidArgument, "refine needs at least one candidate");
  const std::size_t limit = std::min(ranked.size(), config.max_retries + 1);
  std::vector<GateScore> scores;
  scores.reserve(limit);
  for (std::size_t i = 0; i < limit; ++i) {
    scores.push_back(gate_score(ranked[i], retrieval, expected_vad, registry));
    if (scores.back().min() >= config.tau) break;
  }
  // Padding after an accepted score is never read.
  scores.resize(limit, GateScore{});
  return refine_scored(ranked, scores, config);
}

}  // namespace cekg::narrative
