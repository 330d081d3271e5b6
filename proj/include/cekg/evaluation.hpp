#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cekg/carm.hpp"
#include "cekg/metrics.hpp"

// Offline evaluation: scripted dialogues through the engine plus graph-level
// coverage and bias measurements, collected into a metrics bundle.
namespace cekg::eval {

struct DialogueTurn {
  std::string text;
  std::string reference;
  // Gold emotion label for the per-culture F1.
  std::optional<std::string> emotion;
};

struct Dialogue {
  std::string dialogue_id;
  std::optional<std::string> declared_culture;
  std::vector<DialogueTurn> turns;
};

// JSON Lines: {"dialogue_id", "declared_culture"?, "turns": [{"text", "reference", "emotion"?}]}
std::vector<Dialogue> parse_dialogues(std::string_view jsonl, std::string_view source = "<dialogues>");
std::vector<Dialogue> load_dialogues(const std::filesystem::path& path);

// "<CULTURE>/<term id>" for every lexicon emotion, expression and value and
// every culture it is tagged with.
std::set<std::string> lexicon_concepts(const kg::Lexicon& lexicon, const kg::CultureRegistry& registry);

// A concept is entailed when its entity exists (and, for "<CULTURE>/<id>",
// carries that culture tag) or is one equivalent_to link away from an entity
// that does.
std::set<std::string> entailed_concepts(const kg::Graph& graph, const std::set<std::string>& concepts);

// Emotion prototype of the lexicon closest to `vad` (ties by term).
std::string nearest_emotion(const kg::Lexicon& lexicon, const kg::Vad& vad);

struct EvaluationResult {
  metrics::MetricsBundle bundle;
  kg::AlignmentResult alignment;
  // One response_json line per turn, in dialogue order.
  std::vector<std::string> transcript;
};

// Alignment targets a uniform ideal over the cultures present in the graph;
// the response-culture KL uses a uniform ideal over the whole registry.
EvaluationResult evaluate(const carm::Engine& engine, const std::vector<Dialogue>& dialogues,
                          const grpo::PolicyParams& policy);

}  // namespace cekg::eval
