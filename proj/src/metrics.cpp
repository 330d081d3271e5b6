#include "cekg/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cekg/error.hpp"

namespace cekg::metrics {

using nlohmann::ordered_json;

double log_in(double x, LogBase base) { return base == LogBase::Natural ? std::log(x) : std::log2(x); }

CultureDistribution CultureDistribution::with_uniform_ideal(std::map<std::string, double> counts) {
  CultureDistribution d;
  d.counts = std::move(counts);
  for (const auto& [c, _] : d.counts) d.ideal[c] = 1.0 / static_cast<double>(d.counts.size());
  return d;
}

double csd(const ConceptCoverage& coverage, LogBase base) {
  if (coverage.concepts.empty()) fail(ErrorCode::EmptyConceptSet, "CSD needs at least one concept");
  for (const auto& c : coverage.entailed) {
    if (!coverage.concepts.count(c)) fail(ErrorCode::InvalidArgument, "entailed concept '" + c + "' not in C");
  }
  const double n = static_cast<double>(coverage.concepts.size());
  return static_cast<double>(coverage.entailed.size()) / log_in(n + 1.0, base);
}

double csd_display(double raw, double calibration) {
  if (!(calibration > 0.0)) fail(ErrorCode::InvalidArgument, "CSD calibration constant must be positive");
  return std::clamp(raw / calibration, 0.0, 10.0);
}

double kl_bias(const CultureDistribution& dist, LogBase base) {
  double ideal_sum = 0.0;
  for (const auto& [c, p] : dist.ideal) {
    if (!(p >= 0.0)) fail(ErrorCode::InvalidArgument, "ideal probability for " + c + " is negative");
    ideal_sum += p;
  }
  if (std::abs(ideal_sum - 1.0) > 1e-9) fail(ErrorCode::InvalidArgument, "ideal distribution does not sum to 1");
  double total = 0.0;
  for (const auto& [c, n] : dist.counts) {
    if (!(n >= 0.0)) fail(ErrorCode::InvalidArgument, "negative count for culture " + c);
    total += n;
  }
  if (!(total > 0.0)) fail(ErrorCode::EmptyInput, "culture distribution has no mass");
  double kl = 0.0;
  for (const auto& [c, n] : dist.counts) {
    if (n == 0.0) continue;
    auto it = dist.ideal.find(c);
    if (it == dist.ideal.end() || it->second == 0.0)
      fail(ErrorCode::IdealZeroMass, "observed culture " + c + " has zero ideal probability");
    const double p = n / total;
    kl += p * log_in(p / it->second, base);
  }
  // Rounding can leave a tiny negative residue for identical distributions.
  return std::max(kl, 0.0);
}

namespace {

PrfScore macro_prf(const std::vector<std::string>& pred, const std::vector<std::string>& gold) {
  std::set<std::string> labels(gold.begin(), gold.end());
  labels.insert(pred.begin(), pred.end());
  PrfScore out;
  out.samples = gold.size();
  for (const auto& label : labels) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      const bool p = pred[i] == label;
      const bool g = gold[i] == label;
      tp += p && g;
      fp += p && !g;
      fn += !p && g;
    }
    const double precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    const double recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    const double f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    out.precision += precision;
    out.recall += recall;
    out.f1 += f1;
  }
  const double n = static_cast<double>(labels.size());
  out.precision /= n;
  out.recall /= n;
  out.f1 /= n;
  return out;
}

}  // namespace

CultureF1 f1_by_culture(const std::vector<std::string>& predictions, const std::vector<std::string>& gold,
                        const std::vector<std::string>& culture_of) {
  if (predictions.size() != gold.size() || gold.size() != culture_of.size())
    fail(ErrorCode::LengthMismatch, "predictions, gold and culture lists must be aligned");
  std::map<std::string, std::pair<std::vector<std::string>, std::vector<std::string>>> buckets;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    auto& b = buckets[culture_of[i]];
    b.first.push_back(predictions[i]);
    b.second.push_back(gold[i]);
  }
  CultureF1 out;
  for (const auto& [culture, b] : buckets) {
    const auto s = macro_prf(b.first, b.second);
    out.by_culture[culture] = s;
    out.macro.precision += s.precision;
    out.macro.recall += s.recall;
    out.macro.f1 += s.f1;
    out.macro.samples += s.samples;
  }
  if (!buckets.empty()) {
    const double n = static_cast<double>(buckets.size());
    out.macro.precision /= n;
    out.macro.recall /= n;
    out.macro.f1 /= n;
  }
  return out;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c == '\'' || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace {

using Ngram = std::vector<std::string>;

std::map<Ngram, std::size_t> ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
  std::map<Ngram, std::size_t> out;
  if (toks.size() < n) return out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) ++out[Ngram(toks.begin() + i, toks.begin() + i + n)];
  return out;
}

}  // namespace

double bleu4(const std::vector<std::string>& hypothesis, const std::vector<std::vector<std::string>>& references) {
  if (hypothesis.empty() || references.empty()) fail(ErrorCode::EmptyInput, "BLEU needs a hypothesis and references");
  for (const auto& r : references)
    if (r.empty()) fail(ErrorCode::EmptyInput, "BLEU reference is empty");
  const std::size_t max_order = std::min<std::size_t>(4, hypothesis.size());
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_order; ++n) {
    const auto hyp = ngram_counts(hypothesis, n);
    std::map<Ngram, std::size_t> max_ref;
    for (const auto& ref : references)
      for (const auto& [g, c] : ngram_counts(ref, n)) max_ref[g] = std::max(max_ref[g], c);
    std::size_t matched = 0, total = 0;
    for (const auto& [g, c] : hyp) {
      total += c;
      auto it = max_ref.find(g);
      if (it != max_ref.end()) matched += std::min(c, it->second);
    }
    const double numerator = matched ? static_cast<double>(matched) : kBleuEpsilon;
    log_sum += std::log(numerator / static_cast<double>(total));
  }
  const double c = static_cast<double>(hypothesis.size());
  std::size_t best = references.front().size();
  for (const auto& ref : references) {
    const auto diff = [&](std::size_t len) { return std::abs(static_cast<double>(len) - c); };
    if (diff(ref.size()) < diff(best) || (diff(ref.size()) == diff(best) && ref.size() < best)) best = ref.size();
  }
  const double r = static_cast<double>(best);
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(max_order));
}

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeL rouge_l(const std::vector<std::string>& hypothesis, const std::vector<std::string>& reference) {
  if (hypothesis.empty() || reference.empty()) fail(ErrorCode::EmptyInput, "ROUGE-L needs non-empty token lists");
  const double l = static_cast<double>(lcs_length(hypothesis, reference));
  RougeL out;
  out.precision = l / static_cast<double>(hypothesis.size());
  out.recall = l / static_cast<double>(reference.size());
  out.f1 = l > 0.0 ? 2.0 * out.precision * out.recall / (out.precision + out.recall) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Report

bool operator==(const MetricsBundle& a, const MetricsBundle& b) {
  auto prf_eq = [](const PrfScore& x, const PrfScore& y) { return x == y; };
  if (a.f1.by_culture.size() != b.f1.by_culture.size()) return false;
  for (const auto& [c, s] : a.f1.by_culture) {
    auto it = b.f1.by_culture.find(c);
    if (it == b.f1.by_culture.end() || !prf_eq(s, it->second)) return false;
  }
  return a.config_hash == b.config_hash && a.csd_raw == b.csd_raw && a.csd_display == b.csd_display &&
         a.csd_calibration == b.csd_calibration && a.concepts_total == b.concepts_total &&
         a.concepts_entailed == b.concepts_entailed && a.kl_before == b.kl_before && a.kl_after == b.kl_after &&
         a.kl_reduction == b.kl_reduction && a.kl_responses == b.kl_responses && a.bleu4 == b.bleu4 &&
         a.rouge_l == b.rouge_l && a.dialogues == b.dialogues && prf_eq(a.f1.macro, b.f1.macro) &&
         a.log_base == b.log_base;
}

namespace {

ordered_json prf_json(const PrfScore& s) {
  return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}, {"samples", s.samples}};
}

PrfScore prf_from(const ordered_json& j) {
  PrfScore s;
  s.precision = j.at("precision").get<double>();
  s.recall = j.at("recall").get<double>();
  s.f1 = j.at("f1").get<double>();
  s.samples = j.at("samples").get<std::size_t>();
  return s;
}

}  // namespace

std::string report_json(const MetricsBundle& b) {
  ordered_json j;
  j["format"] = "cekg-report-v1";
  j["config_hash"] = b.config_hash;
  j["log_base"] = b.log_base;
  j["csd"] = {{"raw", b.csd_raw},
              {"concepts_total", b.concepts_total},
              {"concepts_entailed", b.concepts_entailed},
              {"display_0_10", b.csd_display},
              {"display_calibration", b.csd_calibration},
              {"display_label", "uncalibrated (raw / calibration constant, clamped to [0, 10])"}};
  j["kl_divergence"] = {{"before_alignment", b.kl_before},
                        {"after_alignment", b.kl_after},
                        {"reduction", b.kl_reduction},
                        {"responses", b.kl_responses ? ordered_json(*b.kl_responses) : ordered_json(nullptr)}};
  j["emotional_appropriateness"] = kHumanEvalNote;
  j["bleu4"] = b.bleu4;
  j["rouge_l"] = b.rouge_l;
  j["dialogues"] = b.dialogues;
  ordered_json f1 = ordered_json::object();
  for (const auto& [c, s] : b.f1.by_culture) f1[c] = prf_json(s);
  j["f1_by_culture"] = {{"cultures", f1}, {"macro", prf_json(b.f1.macro)}};
  return j.dump(2) + "\n";
}

MetricsBundle parse_report(std::string_view text) {
  try {
    const auto j = ordered_json::parse(text);
    if (j.at("format") != "cekg-report-v1") fail(ErrorCode::FormatError, "not a cekg-report-v1 document");
    MetricsBundle b;
    b.config_hash = j.at("config_hash").get<std::string>();
    b.log_base = j.at("log_base").get<std::string>();
    const auto& csd = j.at("csd");
    b.csd_raw = csd.at("raw").get<double>();
    b.concepts_total = csd.at("concepts_total").get<std::size_t>();
    b.concepts_entailed = csd.at("concepts_entailed").get<std::size_t>();
    b.csd_display = csd.at("display_0_10").get<double>();
    b.csd_calibration = csd.at("display_calibration").get<double>();
    const auto& kl = j.at("kl_divergence");
    b.kl_before = kl.at("before_alignment").get<double>();
    b.kl_after = kl.at("after_alignment").get<double>();
    b.kl_reduction = kl.at("reduction").get<double>();
    if (!kl.at("responses").is_null()) b.kl_responses = kl.at("responses").get<double>();
    b.bleu4 = j.at("bleu4").get<double>();
    b.rouge_l = j.at("rouge_l").get<double>();
    b.dialogues = j.at("dialogues").get<std::size_t>();
    for (const auto& [c, s] : j.at("f1_by_culture").at("cultures").items()) b.f1.by_culture[c] = prf_from(s);
    b.f1.macro = prf_from(j.at("f1_by_culture").at("macro"));
    return b;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, std::string("malformed report: ") + e.what());
  }
}

std::string report_table(const MetricsBundle& b) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "System        | CSD (raw) | CSD (0-10, uncal.) | KL-Div. | Emo. Approp.                         | BLEU-4 | ROUGE-L\n";
  os << "--------------+-----------+--------------------+---------+--------------------------------------+--------+--------\n";
  os << "cekg          | " << std::setw(9) << b.csd_raw << " | " << std::setw(18) << b.csd_display << " | "
     << std::setw(7) << b.kl_after << " | " << std::setw(36) << "requires human eval - not computed"
     << " | " << std::setw(6) << b.bleu4 << " | " << std::setw(7) << b.rouge_l << "\n\n";
  os << "KL before alignment " << b.kl_before << ", after " << b.kl_after << ", reduction " << std::setprecision(2)
     << 100.0 * b.kl_reduction << "%\n" << std::setprecision(4);
  os << "\nCulture | Precision | Recall | F1     | n\n";
  for (const auto& [c, s] : b.f1.by_culture)
    os << std::left << std::setw(7) << c << std::right << " | " << std::setw(9) << s.precision << " | " << std::setw(6)
       << s.recall << " | " << std::setw(6) << s.f1 << " | " << s.samples << "\n";
  os << "macro   | " << std::setw(9) << b.f1.macro.precision << " | " << std::setw(6) << b.f1.macro.recall << " | "
     << std::setw(6) << b.f1.macro.f1 << " | " << b.f1.macro.samples << "\n";
  os << "\nconfig " << b.config_hash << "\n";
  return os.str();
}

void emit_report(const MetricsBundle& bundle, const std::filesystem::path& path) {
  {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::IoFailure, "cannot write report " + path.string());
    out << report_json(bundle);
    if (!out) fail(ErrorCode::IoFailure, "write failed for " + path.string());
  }
  auto table_path = path;
  table_path += ".txt";
  std::ofstream out(table_path, std::ios::binary);
  if (!out) fail(ErrorCode::IoFailure, "cannot write report table " + table_path.string());
  out << report_table(bundle);
}

}  // namespace cekg::metrics
