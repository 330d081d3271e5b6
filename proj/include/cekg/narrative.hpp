#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cekg/embedding.hpp"
#include "cekg/grpo.hpp"
#include "cekg/kg.hpp"

namespace cekg::narrative {

using Vector = std::vector<double>;
using Matrix = std::vector<Vector>;  // row-major, rows x cols

inline constexpr std::size_t kContextDim = 32;

// ---------------------------------------------------------------------------
// Text features shared by the orchestrator and the generator.

struct TextAnalysis {
  std::vector<std::string> tokens;
  kg::TokenScan scan;
  // Culture names plus lexicon terms tagged with exactly one culture.
  std::size_t culture_term_hits = 0;
  std::set<std::string> mentioned_cultures;
  // Mean VAD over lexicon hits that carry one.
  std::optional<kg::Vad> mean_vad;
  bool question = false;
};

TextAnalysis analyze_text(std::string_view text, const kg::Lexicon& lexicon, const kg::CultureRegistry& registry);

// Feature-hashed bag of terms in the first dim-3 slots (lexicon terms and
// culture mentions weigh 1, other tokens 0.25, L2-normalised) followed by the
// mean VAD. Zero vector for empty text.
Vector text_vector(const TextAnalysis& analysis, std::size_t dim = kContextDim);

// ---------------------------------------------------------------------------
// Context fusion

struct AttentionParams {
  std::size_t d_model = kContextDim;
  std::size_t heads = 4;
  std::uint64_t seed = 0;
};

struct FusedContext {
  Vector f_vec;
  // heads x keys; each row sums to 1.
  Matrix attention_weights;
  // No keys were given: uniform weights over the values.
  bool knowledge_only = false;
};

// Scaled dot-product multi-head attention with fixed projections.
class MultiHeadAttention {
 public:
  // Seeded random orthonormal W_Q, W_K, W_V, W_O (d_model x d_model each).
  explicit MultiHeadAttention(const AttentionParams& params);
  MultiHeadAttention(std::size_t heads, Matrix w_q, Matrix w_k, Matrix w_v, Matrix w_o);

  std::size_t d_model() const { return d_model_; }
  std::size_t heads() const { return heads_; }
  const Matrix& w_q() const { return w_q_; }
  const Matrix& w_k() const { return w_k_; }
  const Matrix& w_v() const { return w_v_; }
  const Matrix& w_o() const { return w_o_; }

  // Throws DimensionMismatch on inconsistent sizes or keys/values count mismatch.
  FusedContext forward(const Vector& query, const std::vector<Vector>& keys, const std::vector<Vector>& values) const;

 private:
  std::size_t d_model_ = 0;
  std::size_t heads_ = 0;
  Matrix w_q_, w_k_, w_v_, w_o_;
};

FusedContext fuse_context(const Vector& query, const std::vector<Vector>& keys, const std::vector<Vector>& values,
                          const AttentionParams& params);

Vector mat_vec(const Matrix& m, const Vector& v);

// ---------------------------------------------------------------------------
// Template registry

enum class Intensity { Low, Medium, High };

std::string_view to_string(Intensity i);

// arousal >= 0.7 high, >= 0.4 medium, otherwise low.
Intensity intensity_for(double arousal);

struct Template {
  std::string template_id;
  std::string text;
  std::set<std::string> culture_tags;
  kg::Vad vad_slots = kg::Vad::neutral();
  std::map<Intensity, std::vector<std::string>> intensity_variants;
};

class TemplateRegistry {
 public:
  void add(Template t);
  static TemplateRegistry load(const std::filesystem::path& path);
  static TemplateRegistry parse(std::string_view json_text, std::string_view source = "<templates>");

  const std::vector<Template>& templates() const { return templates_; }
  const Template* find(std::string_view id) const;
  bool empty() const { return templates_.empty(); }

 private:
  std::vector<Template> templates_;
};

// ---------------------------------------------------------------------------
// Candidate generation

struct ResponseCandidate {
  std::string text;
  kg::Vad vad = kg::Vad::neutral();
  std::set<std::string> culture_tags;
  std::string template_id;
  Intensity intensity = Intensity::Medium;
  Vector features;
  // Retrieved entity ids whose labels fill the template's slots.
  std::vector<std::string> cited;

  friend bool operator==(const ResponseCandidate&, const ResponseCandidate&) = default;
};

struct GenerationInputs {
  const kg::CultureRegistry* registry = nullptr;
  const kg::Lexicon* lexicon = nullptr;
  const hyp::EmbeddingModel* model = nullptr;  // optional
  std::set<std::string> target_cultures;
  // C_t; added to f_vec for the history-affinity feature.
  Vector context;
  std::uint64_t seed = 0;
};

// Stage-1 ranking key of a template: culture-tag matches (desc), VAD-slot
// distance to the target (asc), template id.
struct TemplateScore {
  std::size_t culture_matches = 0;
  double vad_distance = 0.0;
};

TemplateScore score_template(const Template& t, const std::set<std::string>& target_cultures, const kg::Vad& target);

// Two stages: pick the n best templates, then fill {culture}, {emotion},
// {expression}, {value} from the retrieval and {intensifier} from the
// arousal-selected lexical set. Throws NoTemplates on an empty registry and
// InvalidArgument for n = 0.
std::vector<ResponseCandidate> generate_candidates(const TemplateRegistry& registry, const FusedContext& fused,
                                                   const std::vector<kg::QueryHit>& retrieval,
                                                   const kg::Vad& target_vad, std::size_t n,
                                                   const GenerationInputs& inputs);

// ---------------------------------------------------------------------------
// Refinement gate

struct RefineConfig {
  double tau = 0.55;
  std::size_t max_retries = 3;
};

struct GateScore {
  double comp_k = 0.0;
  double coh_e = 0.0;
  bool low_confidence = false;
  double min() const { return comp_k < coh_e ? comp_k : coh_e; }
};

GateScore gate_score(const ResponseCandidate& c, const std::vector<kg::QueryHit>& retrieval,
                     const kg::Vad& expected_vad, const kg::CultureRegistry& registry);

struct RefineResult {
  std::size_t index = 0;  // into the ranked list
  ResponseCandidate candidate;
  GateScore score;
  std::size_t retries = 0;
  std::size_t candidates_considered = 0;
  bool fallback = false;
  std::vector<GateScore> considered;
};

// Walks the ranked candidates until one has min(comp_k, coh_e) >= tau, giving
// up after max_retries regenerations; the fallback is the considered candidate
// with the largest min(comp_k, coh_e) (earliest on ties), flagged.
RefineResult refine(const std::vector<ResponseCandidate>& ranked, const std::vector<kg::QueryHit>& retrieval,
                    const kg::Vad& expected_vad, const kg::CultureRegistry& registry, const RefineConfig& config);

// Same walk over precomputed gate scores, one per ranked candidate.
RefineResult refine_scored(const std::vector<ResponseCandidate>& ranked, const std::vector<GateScore>& scores,
                           const RefineConfig& config);

}  // namespace cekg::narrative
