#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace cekg::metrics {

enum class LogBase { Natural, Two };

double log_in(double x, LogBase base);

// Observed culture mass and the ideal distribution it is compared against.
// Masses are non-negative reals: integer counts, or confidence-weighted
// triple mass when measuring a graph.
struct CultureDistribution {
  std::map<std::string, double> counts;
  std::map<std::string, double> ideal;

  static CultureDistribution with_uniform_ideal(std::map<std::string, double> counts);
};

// A concept id is either "<entity-id>" or "<CULTURE>/<entity-id>".
struct ConceptCoverage {
  std::set<std::string> concepts;
  std::set<std::string> entailed;
};

// |entailed| / log(|C| + 1)
double csd(const ConceptCoverage& coverage, LogBase base = LogBase::Natural);

// Raw CSD divided by a calibration constant and clamped to [0, 10]. The scale
// is not derivable from the raw formula; callers label it uncalibrated.
double csd_display(double raw, double calibration);

// sum_c P(c) log(P(c) / P_ideal(c)), 0 log 0 := 0.
double kl_bias(const CultureDistribution& dist, LogBase base = LogBase::Natural);

struct PrfScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t samples = 0;
  friend bool operator==(const PrfScore&, const PrfScore&) = default;
};

struct CultureF1 {
  std::map<std::string, PrfScore> by_culture;
  // Unweighted mean over the cultures present.
  PrfScore macro;
};

// Per-culture multi-class macro precision/recall/F1. Classes are the labels
// appearing in a culture's gold or predicted entries; cultures with no
// samples are absent from the result.
CultureF1 f1_by_culture(const std::vector<std::string>& predictions, const std::vector<std::string>& gold,
                        const std::vector<std::string>& culture_of);

std::vector<std::string> tokenize(std::string_view text);

inline constexpr double kBleuEpsilon = 1e-9;

// Corpus-free sentence BLEU with up-to-4-gram clipped precision, brevity
// penalty against the closest reference length (shorter wins ties), and
// add-epsilon smoothing for orders with zero matches. Orders longer than the
// hypothesis are left out of the geometric mean.
double bleu4(const std::vector<std::string>& hypothesis, const std::vector<std::vector<std::string>>& references);

struct RougeL {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

RougeL rouge_l(const std::vector<std::string>& hypothesis, const std::vector<std::string>& reference);

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b);

// Everything the evaluation report carries.
struct MetricsBundle {
  std::string config_hash;
  double csd_raw = 0.0;
  double csd_display = 0.0;
  double csd_calibration = 1.0;
  std::size_t concepts_total = 0;
  std::size_t concepts_entailed = 0;
  double kl_before = 0.0;
  double kl_after = 0.0;
  double kl_reduction = 0.0;
  std::optional<double> kl_responses;
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  std::size_t dialogues = 0;
  CultureF1 f1;
  std::string log_base = "natural";

  friend bool operator==(const MetricsBundle& a, const MetricsBundle& b);
};

inline constexpr std::string_view kHumanEvalNote = "requires human eval \xe2\x80\x94 not computed";

std::string report_json(const MetricsBundle& bundle);
MetricsBundle parse_report(std::string_view json_text);
std::string report_table(const MetricsBundle& bundle);

// Writes <path> (JSON) and <path>.txt (table). Throws IoFailure.
void emit_report(const MetricsBundle& bundle, const std::filesystem::path& path);

}  // namespace cekg::metrics
