#include "cekg/carm.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cekg/error.hpp"

namespace cekg::carm {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Context

ContextWeights ContextWeights::make(double a1, double a2, double a3, double a4) {
  const std::array<double, 4> a{a1, a2, a3, a4};
  double s = 0.0;
  for (double x : a) {
    if (!(x >= 0.0) || !std::isfinite(x)) fail(ErrorCode::InvalidArgument, "context weights must be finite and >= 0");
    s += x;
  }
  if (!(s > 0.0)) fail(ErrorCode::InvalidArgument, "context weights must not all be zero");
  if (s == 1.0) return ContextWeights(a);
  return ContextWeights({a1 / s, a2 / s, a3 / s, a4 / s});
}

ContextWeights ContextWeights::restore(const std::array<double, 4>& a) {
  double s = 0.0;
  for (double x : a) {
    if (!(x >= 0.0)) fail(ErrorCode::InvalidArgument, "context weights must be >= 0");
    s += x;
  }
  if (std::abs(s - 1.0) > 1e-9) fail(ErrorCode::InvalidArgument, "stored context weights must sum to 1");
  return ContextWeights(a);
}

ContextState update_context(const std::optional<ContextState>& prev, const Vector& interaction, const Vector& user,
                            const Vector& knowledge, const ContextWeights& w) {
  const std::size_t d = interaction.size();
  if (user.size() != d || knowledge.size() != d)
    fail(ErrorCode::DimensionMismatch, "I_t, U_t and K_t must share one dimension");
  if (prev && prev->c_vec.size() != d) fail(ErrorCode::DimensionMismatch, "C_{t-1} dimension differs from I_t");
  ContextState s;
  s.interaction = interaction;
  s.user = user;
  s.knowledge = knowledge;
  s.weights = w;
  s.turn_index = prev ? prev->turn_index + 1 : 1;
  const Vector c0 = prev ? prev->c_vec : Vector(d, 0.0);
  if (prev) s.prev = prev->c_vec;
  s.c_vec.resize(d);
  for (std::size_t i = 0; i < d; ++i)
    s.c_vec[i] = w[0] * c0[i] + w[1] * interaction[i] + w[2] * user[i] + w[3] * knowledge[i];
  return s;
}

// ---------------------------------------------------------------------------
// Decision cascade

std::size_t Session::turn_count() const { return turns.size(); }

namespace {

double cosine(const Vector& a, const Vector& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

}  // namespace

TurnDecision assess(const narrative::TextAnalysis& analysis, const Vector& interaction, const Session& session,
                    const Thresholds& th) {
  TurnDecision d;
  if (analysis.tokens.empty()) {
    d.activated_components.insert(std::string(kComponentGeneration));
    return d;
  }
  d.cultural_relevance =
      std::min(1.0, static_cast<double>(analysis.culture_term_hits) / static_cast<double>(analysis.tokens.size()));
  if (analysis.mean_vad) {
    const auto v = analysis.mean_vad->as_array();
    d.emotional_intensity = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) / std::sqrt(3.0);
  }
  const bool first_turn = session.turns.empty();
  if (d.cultural_relevance > th.cultural_relevance) {
    d.needs_knowledge = true;
    d.knowledge_reason = "relevance";
  } else if (analysis.question) {
    d.needs_knowledge = true;
    d.knowledge_reason = "question";
  } else if (first_turn && session.declared_culture) {
    d.needs_knowledge = true;
    d.knowledge_reason = "declared_culture";
  }
  if (!first_turn) {
    Vector centroid(interaction.size(), 0.0);
    for (const auto& t : session.turns)
      for (std::size_t i = 0; i < centroid.size() && i < t.context.interaction.size(); ++i)
        centroid[i] += t.context.interaction[i];
    for (auto& c : centroid) c /= static_cast<double>(session.turns.size());
    d.history_relevant = cosine(interaction, centroid) > th.history_relevance;
  }
  d.activated_components = {std::string(kComponentGeneration), std::string(kComponentPolicy),
                            std::string(kComponentRefinement)};
  if (d.needs_knowledge) d.activated_components.insert(std::string(kComponentKg));
  if (d.history_relevant) d.activated_components.insert(std::string(kComponentHistory));
  return d;
}

ContextWeights adapt_weights(const ContextWeights& base, const TurnDecision& decision, const Thresholds& th) {
  if (decision.emotional_intensity <= th.high_intensity) return base;
  const double shift = std::min(th.intensity_shift, base[0]);
  return ContextWeights::make(base[0] - shift, base[1] + shift, base[2], base[3]);
}

// ---------------------------------------------------------------------------
// Records

namespace {

ordered_json vad_json(const kg::Vad& v) { return {v.valence(), v.arousal(), v.dominance()}; }

kg::Vad vad_from(const json& j) {
  const auto a = j.get<std::vector<double>>();
  if (a.size() != 3 || !kg::Vad::in_range(a[0], a[1], a[2])) fail(ErrorCode::FormatError, "invalid VAD triple");
  return kg::Vad::make(a[0], a[1], a[2]);
}

}  // namespace

std::string turn_record_json(const TurnRecord& r) {
  ordered_json j;
  j["record_kind"] = "turn";
  j["turn_index"] = r.turn_index;
  j["user_text"] = r.user_text;
  j["response_text"] = r.response_text;
  j["response_vad"] = vad_json(r.response_vad);
  j["input_vad"] = r.input_vad ? vad_json(*r.input_vad) : ordered_json(nullptr);
  j["expected_vad"] = vad_json(r.expected_vad);
  j["culture"] = r.culture ? ordered_json(*r.culture) : ordered_json(nullptr);
  j["bucket"] = r.bucket;
  j["context"] = {{"c_vec", r.context.c_vec},
                  {"prev", r.context.prev ? ordered_json(*r.context.prev) : ordered_json(nullptr)},
                  {"interaction", r.context.interaction},
                  {"user", r.context.user},
                  {"knowledge", r.context.knowledge},
                  {"weights", r.context.weights.values()},
                  {"turn_index", r.context.turn_index}};
  j["retrieved"] = r.retrieved;
  j["candidate_features"] = r.candidate_features;
  j["action"] = r.action;
  j["old_log_prob"] = r.old_log_prob;
  j["reward"] = {{"cultural", r.reward.cultural}, {"emotional", r.reward.emotional}};
  j["weights"] = {r.weights.alpha(), r.weights.beta(), r.weights.gamma()};
  j["fallback"] = r.fallback;
  j["trace"] = ordered_json::parse(r.trace.empty() ? std::string("{}") : r.trace);
  return j.dump();
}

TurnRecord turn_record_from_json(std::string_view text) {
  try {
    const auto j = ordered_json::parse(text);
    TurnRecord r;
    r.turn_index = j.at("turn_index");
    r.user_text = j.at("user_text");
    r.response_text = j.at("response_text");
    r.response_vad = vad_from(j.at("response_vad"));
    if (!j.at("input_vad").is_null()) r.input_vad = vad_from(j.at("input_vad"));
    r.expected_vad = vad_from(j.at("expected_vad"));
    if (!j.at("culture").is_null()) r.culture = j.at("culture").get<std::string>();
    r.bucket = j.at("bucket");
    const auto& c = j.at("context");
    r.context.c_vec = c.at("c_vec").get<Vector>();
    if (!c.at("prev").is_null()) r.context.prev = c.at("prev").get<Vector>();
    r.context.interaction = c.at("interaction").get<Vector>();
    r.context.user = c.at("user").get<Vector>();
    r.context.knowledge = c.at("knowledge").get<Vector>();
    r.context.weights = ContextWeights::restore(c.at("weights").get<std::array<double, 4>>());
    r.context.turn_index = c.at("turn_index");
    r.retrieved = j.at("retrieved").get<std::vector<std::string>>();
    r.candidate_features = j.at("candidate_features").get<grpo::FeatureMatrix>();
    r.action = j.at("action");
    r.old_log_prob = j.at("old_log_prob");
    r.reward.cultural = j.at("reward").at("cultural");
    r.reward.emotional = j.at("reward").at("emotional");
    const auto w = j.at("weights").get<std::vector<double>>();
    if (w.size() != 3) fail(ErrorCode::FormatError, "turn weights must have three entries");
    r.weights = grpo::RewardWeights::restore(w[0], w[1], w[2]);
    r.fallback = j.at("fallback");
    r.trace = j.at("trace").dump();
    return r;
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError, std::string("malformed turn record: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Session store

namespace {

void append_durable(const std::filesystem::path& path, const std::string& line) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) fail(ErrorCode::IoFailure, "cannot open " + path.string() + ": " + std::strerror(errno));
  std::string buf = line;
  buf.push_back('\n');
  const char* p = buf.data();
  std::size_t left = buf.size();
  while (left > 0) {
    const ssize_t n = ::write(fd, p, left);
    if (n < 0) {
      if (errno == EINTR) continue;
      const int err = errno;
      ::close(fd);
      fail(ErrorCode::IoFailure, "write to " + path.string() + " failed: " + std::strerror(err));
    }
    p += n;
    left -= static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0) {
    const int err = errno;
    ::close(fd);
    fail(ErrorCode::IoFailure, "fsync of " + path.string() + " failed: " + std::strerror(err));
  }
  ::close(fd);
}

bool safe_id(std::string_view id) {
  if (id.empty() || id.size() > 64) return false;
  return std::all_of(id.begin(), id.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_'; });
}

}  // namespace

SessionStore::SessionStore(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) fail(ErrorCode::IoFailure, "cannot create sessions directory " + dir_.string() + ": " + ec.message());
  const auto index = dir_ / "index.jsonl";
  if (!std::filesystem::exists(index)) return;
  std::ifstream in(index, std::ios::binary);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      auto s = std::make_unique<Session>();
      s->session_id = j.at("session_id");
      if (!j.at("declared_culture").is_null()) s->declared_culture = j.at("declared_culture").get<std::string>();
      s->created_at = j.at("created_at");
      const auto file = dir_ / (s->session_id + ".jsonl");
      if (std::filesystem::exists(file)) {
        std::ifstream sf(file, std::ios::binary);
        std::string rec;
        std::size_t recno = 0;
        while (std::getline(sf, rec)) {
          ++recno;
          if (rec.empty()) continue;
          // A torn final line (crash mid-append) was never acknowledged.
          json rj;
          try {
            rj = json::parse(rec);
          } catch (const json::exception&) {
            if (sf.peek() == std::char_traits<char>::eof()) break;
            fail(ErrorCode::FormatError, file.string() + ":" + std::to_string(recno) + ": malformed record");
          }
          const std::string kind = rj.at("record_kind");
          if (kind == "turn") {
            s->turns.push_back(turn_record_from_json(rec));
          } else if (kind == "feedback") {
            const std::size_t ti = rj.at("turn_index");
            if (ti == 0 || ti > s->turns.size())
              fail(ErrorCode::FormatError, file.string() + ":" + std::to_string(recno) + ": feedback for unknown turn");
            s->turns[ti - 1].rating = rj.at("rating").get<int>();
          }
        }
      }
      const std::string id = s->session_id;
      sessions_.emplace(id, std::move(s));
    } catch (const json::exception& e) {
      fail(ErrorCode::FormatError, index.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

Session& SessionStore::create(const std::string& id, std::optional<std::string> culture, std::string created_at) {
  if (!safe_id(id)) fail(ErrorCode::InvalidArgument, "session id must be 1-64 characters of [A-Za-z0-9_-]");
  if (sessions_.count(id)) fail(ErrorCode::DuplicateId, "session " + id + " already exists");
  auto s = std::make_unique<Session>();
  s->session_id = id;
  s->declared_culture = std::move(culture);
  s->created_at = std::move(created_at);
  ordered_json j;
  j["session_id"] = s->session_id;
  j["declared_culture"] = s->declared_culture ? ordered_json(*s->declared_culture) : ordered_json(nullptr);
  j["created_at"] = s->created_at;
  append_durable(dir_ / (id + ".jsonl"), ordered_json{{"record_kind", "session"},
                                                      {"session_id", s->session_id},
                                                      {"declared_culture", j["declared_culture"]},
                                                      {"created_at", s->created_at}}
                                             .dump());
  append_durable(dir_ / "index.jsonl", j.dump());
  auto& ref = *s;
  sessions_.emplace(id, std::move(s));
  return ref;
}

Session* SessionStore::find(std::string_view id) {
  auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second.get();
}

const Session* SessionStore::find(std::string_view id) const {
  auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second.get();
}

std::vector<std::string> SessionStore::ids() const {
  std::vector<std::string> out;
  for (const auto& [id, _] : sessions_) out.push_back(id);
  return out;
}

void SessionStore::append_turn(Session& session, TurnRecord record) {
  if (record.turn_index != session.turns.size() + 1)
    fail(ErrorCode::InvalidArgument, "turn index must follow the session's last turn");
  append_durable(dir_ / (session.session_id + ".jsonl"), turn_record_json(record));
  session.turns.push_back(std::move(record));
}

void SessionStore::append_feedback(Session& session, const FeedbackRecord& fb) {
  if (fb.turn_index == 0 || fb.turn_index > session.turns.size())
    fail(ErrorCode::NotFound, "turn " + std::to_string(fb.turn_index) + " does not exist");
  ordered_json j;
  j["record_kind"] = "feedback";
  j["turn_index"] = fb.turn_index;
  j["rating"] = fb.rating;
  j["submitted_at"] = fb.submitted_at;
  append_durable(dir_ / (session.session_id + ".jsonl"), j.dump());
  session.turns[fb.turn_index - 1].rating = fb.rating;
}

}  // namespace cekg::carm
