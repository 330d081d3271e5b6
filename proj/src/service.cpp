#include "cekg/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <regex>
#include <sstream>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "cekg/error.hpp"
#include "cekg/random.hpp"

namespace cekg::service {

using nlohmann::json;
using nlohmann::ordered_json;

std::string error_body(std::string_view code, std::string_view message, std::string_view stage) {
  ordered_json j;
  j["error_code"] = code;
  j["message"] = message;
  if (!stage.empty()) j["stage"] = stage;
  return j.dump();
}

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Response json_response(int status, std::string body) { return {status, std::move(body), "application/json"}; }

Response error(int status, ErrorCode code, std::string_view message, std::string_view stage = {}) {
  return json_response(status, error_body(to_string(code), message, stage));
}

void append_durable(const std::filesystem::path& path, const std::string& line) {
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) fail(ErrorCode::IoFailure, "cannot open " + path.string() + ": " + std::strerror(errno));
  const std::string buf = line + "\n";
  std::size_t off = 0;
  while (off < buf.size()) {
    const ssize_t n = ::write(fd, buf.data() + off, buf.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      ::close(fd);
      fail(ErrorCode::IoFailure, "write to " + path.string() + " failed");
    }
    off += static_cast<std::size_t>(n);
  }
  const int rc = ::fsync(fd);
  ::close(fd);
  if (rc != 0) fail(ErrorCode::IoFailure, "fsync of " + path.string() + " failed");
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::optional<std::size_t> parse_index(std::string_view s) {
  if (s.empty() || s.size() > 9) return std::nullopt;
  std::size_t v = 0;
  for (char c : s) {
    if (c < '0' || c > '9') return std::nullopt;
    v = v * 10 + static_cast<std::size_t>(c - '0');
  }
  return v;
}

ordered_json hit_json(const kg::QueryHit& h) {
  ordered_json j;
  j["entity_id"] = h.entity.id;
  j["label"] = h.entity.label;
  j["kind"] = kg::to_string(h.entity.kind);
  j["culture_tags"] = h.entity.culture_tags;
  j["vad"] = h.entity.vad ? ordered_json{h.entity.vad->valence(), h.entity.vad->arousal(), h.entity.vad->dominance()}
                          : ordered_json(nullptr);
  j["overlap"] = h.overlap;
  j["vad_distance"] = h.vad_distance ? ordered_json(*h.vad_distance) : ordered_json(nullptr);
  if (h.triple) {
    j["triple"] = {{"head", h.triple->head},
                   {"relation", h.triple->relation},
                   {"tail", h.triple->tail},
                   {"confidence", h.triple->confidence}};
  } else {
    j["triple"] = nullptr;
  }
  return j;
}

ordered_json policy_json(const grpo::PolicyParams& p) {
  return {{"format", "cekg-policy-v1"},
          {"feature_names", p.feature_names},
          {"theta", p.theta},
          {"update_count", p.update_count}};
}

}  // namespace

Service::Service(Config config, carm::Engine engine, grpo::PolicyParams initial_policy)
    : config_(std::move(config)),
      engine_(std::move(engine)),
      initial_policy_(initial_policy),
      store_(config_.paths.sessions),
      trainer_(std::move(initial_policy), config_.grpo),
      transition_log_(config_.paths.sessions / "transitions.jsonl"),
      clock_(utc_now) {
  if (std::filesystem::exists(transition_log_)) {
    const auto events = grpo::load_transition_log(transition_log_);
    grpo::replay(trainer_, events);
    for (const auto& e : events) submitted_[e.transition.state_id] = e.transition;
  }
}

grpo::GrpoConfig training_config(const Config& config) {
  grpo::GrpoConfig g = config.grpo;
  if (!config.paths.anchors.empty()) g.anchors = grpo::load_anchors(config.paths.anchors);
  return g;
}

grpo::PolicyParams start_policy(const Config& config) {
  grpo::PolicyParams p = !config.paths.policy.empty() && std::filesystem::exists(config.paths.policy)
                             ? grpo::PolicyParams::load(config.paths.policy)
                             : grpo::PolicyParams::initial(grpo::kDefaultFeatureNames, config.initial_theta);
  p.config_hash = config.hash;
  return p;
}

std::unique_ptr<Service> Service::from_config(const Config& config) {
  Config c = config;
  c.grpo = training_config(config);
  auto start = start_policy(c);
  auto engine = carm::Engine::from_config(c);
  return std::make_unique<Service>(std::move(c), std::move(engine), std::move(start));
}

grpo::PolicyParams Service::policy() const {
  std::lock_guard lock(policy_mu_);
  return trainer_.policy();
}

std::size_t Service::buffered_transitions() const {
  std::lock_guard lock(policy_mu_);
  return trainer_.buffer().size();
}

std::mutex& Service::session_mutex(const std::string& id) {
  std::lock_guard lock(store_mu_);
  auto& m = session_mu_[id];
  if (!m) m = std::make_unique<std::mutex>();
  return *m;
}

carm::Session* Service::find_session(const std::string& id) {
  std::lock_guard lock(store_mu_);
  return store_.find(id);
}

void Service::log_event(const std::string& event, const grpo::Transition& t) {
  append_durable(transition_log_, "{\"event\":\"" + event + "\",\"transition\":" + grpo::transition_json(t) + "}");
}

Response Service::handle(const Request& r) {
  try {
    if (config_.server.auth_token) {
      auto it = r.headers.find(std::string(kAuthHeader));
      if (it == r.headers.end() || it->second != *config_.server.auth_token)
        return json_response(401, error_body("Unauthorized", "missing or wrong access token"));
    }
    const auto parts = split(r.path.size() > 1 && r.path.back() == '/' ? r.path.substr(0, r.path.size() - 1) : r.path, '/');
    // parts[0] is the empty segment before the leading slash.
    if (r.method == "POST" && r.path == "/sessions") return create_session(r);
    if (parts.size() == 4 && parts[1] == "sessions" && r.method == "POST") {
      if (parts[3] == "message") return post_message(parts[2], r);
      if (parts[3] == "feedback") return post_feedback(parts[2], r);
    }
    if (r.method == "GET") {
      if (parts.size() == 3 && parts[1] == "sessions") return get_session(parts[2]);
      if (parts.size() == 5 && parts[1] == "sessions" && parts[3] == "trace") return get_trace(parts[2], parts[4]);
      if (r.path == "/kg/query") return get_kg_query(r);
      if (r.path == "/metrics") return get_metrics();
      if (r.path == "/policy") return get_policy();
      if (r.path == "/health") return json_response(200, R"({"status":"ok"})");
    }
    return error(404, ErrorCode::NotFound, "no route for " + r.method + " " + r.path);
  } catch (const Error& e) {
    return error(500, e.code(), e.what(), e.stage());
  } catch (const std::exception& e) {
    return json_response(500, error_body("Internal", e.what()));
  }
}

Response Service::create_session(const Request& r) {
  json body = json::object();
  if (!trim(r.body).empty()) {
    try {
      body = json::parse(r.body);
    } catch (const json::exception&) {
      return error(400, ErrorCode::MalformedRecord, "request body is not valid JSON");
    }
    if (!body.is_object()) return error(400, ErrorCode::MalformedRecord, "request body must be a JSON object");
  }
  std::optional<std::string> culture;
  if (body.contains("declared_culture") && !body.at("declared_culture").is_null()) {
    if (!body.at("declared_culture").is_string())
      return error(400, ErrorCode::MalformedRecord, "declared_culture must be a string");
    culture = body.at("declared_culture").get<std::string>();
    if (!engine_.registry().contains(*culture))
      return error(400, ErrorCode::UnknownCulture, "culture '" + *culture + "' is not in the registry");
  }
  std::lock_guard lock(store_mu_);
  std::uint64_t n = store_.size();
  std::string id;
  do {
    id = "s-" + hex64(splitmix64(config_.seeds.server ^ splitmix64(++n)));
  } while (store_.find(id));
  auto& s = store_.create(id, culture, clock_());
  ordered_json out;
  out["session_id"] = s.session_id;
  out["declared_culture"] = culture ? ordered_json(*culture) : ordered_json(nullptr);
  out["created_at"] = s.created_at;
  out["turn_count"] = 0;
  return json_response(201, out.dump());
}

Response Service::post_message(const std::string& id, const Request& r) {
  carm::Session* s = find_session(id);
  if (!s) return error(404, ErrorCode::NotFound, "unknown session " + id);
  json body;
  try {
    body = json::parse(r.body);
  } catch (const json::exception&) {
    return error(400, ErrorCode::MalformedRecord, "request body is not valid JSON");
  }
  if (!body.is_object() || !body.contains("text") || !body.at("text").is_string())
    return error(400, ErrorCode::MalformedRecord, "body must be {\"text\": string}");
  const std::string text = body.at("text").get<std::string>();
  if (trim(text).empty()) return error(422, ErrorCode::EmptyText, "message text is empty");

  std::lock_guard session_lock(session_mutex(id));
  const grpo::PolicyParams policy = this->policy();
  carm::TurnOutcome outcome;
  try {
    outcome = engine_.orchestrate(*s, text, policy);
  } catch (const Error& e) {
    // Nothing was appended, so the session stays consistent.
    return error(500, e.code(), e.what(), e.stage().empty() ? "orchestrate" : e.stage());
  }
  {
    std::lock_guard lock(store_mu_);
    store_.append_turn(*s, outcome.record);
  }
  return json_response(200, carm::response_json(outcome));
}

Response Service::post_feedback(const std::string& id, const Request& r) {
  carm::Session* s = find_session(id);
  if (!s) return error(404, ErrorCode::NotFound, "unknown session " + id);
  json body;
  try {
    body = json::parse(r.body);
  } catch (const json::exception&) {
    return error(400, ErrorCode::MalformedRecord, "request body is not valid JSON");
  }
  if (!body.is_object() || !body.contains("turn_index") || !body.contains("rating"))
    return error(400, ErrorCode::MalformedRecord, "body must be {\"turn_index\": int, \"rating\": int}");
  if (!body.at("turn_index").is_number_integer() || body.at("turn_index").get<long long>() < 1)
    return error(404, ErrorCode::NotFound, "turn_index must be a positive integer");
  if (!body.at("rating").is_number_integer())
    return error(422, ErrorCode::OutOfRangeRating, "rating must be an integer in 1..5");
  const auto turn_index = static_cast<std::size_t>(body.at("turn_index").get<long long>());
  const long long rating_raw = body.at("rating").get<long long>();
  if (rating_raw < 1 || rating_raw > 5) return error(422, ErrorCode::OutOfRangeRating, "rating must be in 1..5");
  const int rating = static_cast<int>(rating_raw);

  std::lock_guard session_lock(session_mutex(id));
  if (turn_index > s->turns.size())
    return error(404, ErrorCode::NotFound, "turn " + std::to_string(turn_index) + " does not exist");
  const carm::TurnRecord& turn = s->turns[turn_index - 1];
  const std::string state_id = s->session_id + ":" + std::to_string(turn_index);

  bool triggered = false;
  bool learned = !turn.candidate_features.empty();
  std::lock_guard policy_lock(policy_mu_);
  {
    std::lock_guard lock(store_mu_);
    store_.append_feedback(*s, {turn_index, rating, clock_()});
  }
  if (learned) {
    auto prev = submitted_.find(state_id);
    if (prev == submitted_.end()) {
      const auto t = carm::make_transition(*s, turn, rating, trainer_.baselines().baseline(turn.bucket));
      log_event("submit", t);
      submitted_[state_id] = t;
      const auto outcome = trainer_.submit(t);
      triggered = outcome.update_triggered && !outcome.rejected;
      if (triggered && !config_.paths.sessions.empty()) trainer_.policy().save(config_.paths.sessions / "policy.json");
    } else {
      // Overwrite: same logged baseline, new feedback component.
      const auto t = carm::make_transition(*s, turn, rating, prev->second.value_baseline);
      log_event("replace", t);
      prev->second = t;
      trainer_.replace(t);
    }
  }
  ordered_json out;
  out["accepted"] = true;
  out["policy_update_triggered"] = triggered;
  out["turn_index"] = turn_index;
  out["rating"] = rating;
  out["learned"] = learned;
  out["update_count"] = trainer_.policy().update_count;
  return json_response(200, out.dump());
}

Response Service::get_session(const std::string& id) {
  carm::Session* s = find_session(id);
  if (!s) return error(404, ErrorCode::NotFound, "unknown session " + id);
  std::lock_guard session_lock(session_mutex(id));
  ordered_json j;
  j["session_id"] = s->session_id;
  j["declared_culture"] = s->declared_culture ? ordered_json(*s->declared_culture) : ordered_json(nullptr);
  j["created_at"] = s->created_at;
  j["turn_count"] = s->turns.size();
  ordered_json turns = ordered_json::array();
  for (const auto& t : s->turns)
    turns.push_back({{"turn_index", t.turn_index},
                     {"user_text", t.user_text},
                     {"response_text", t.response_text},
                     {"vad", {{"valence", t.response_vad.valence()},
                              {"arousal", t.response_vad.arousal()},
                              {"dominance", t.response_vad.dominance()}}},
                     {"rating", t.rating ? ordered_json(*t.rating) : ordered_json(nullptr)}});
  j["turns"] = std::move(turns);
  return json_response(200, j.dump());
}

Response Service::get_trace(const std::string& id, const std::string& turn) {
  carm::Session* s = find_session(id);
  if (!s) return error(404, ErrorCode::NotFound, "unknown session " + id);
  const auto idx = parse_index(turn);
  if (!idx) return error(400, ErrorCode::InvalidArgument, "turn must be a positive integer");
  std::lock_guard session_lock(session_mutex(id));
  if (*idx == 0 || *idx > s->turns.size())
    return error(404, ErrorCode::NotFound, "turn " + turn + " does not exist");
  return json_response(200, s->turns[*idx - 1].trace);
}

Response Service::get_kg_query(const Request& r) {
  std::set<std::string> cultures;
  if (auto it = r.query.find("cultures"); it != r.query.end() && !it->second.empty()) {
    for (const auto& c : split(it->second, ',')) {
      const auto code = trim(c);
      if (code.empty()) continue;
      if (!engine_.registry().contains(code))
        return error(400, ErrorCode::UnknownCulture, "culture '" + code + "' is not in the registry");
      cultures.insert(code);
    }
  }
  std::size_t k = 5;
  if (auto it = r.query.find("k"); it != r.query.end()) {
    const auto v = parse_index(it->second);
    if (!v || *v == 0) return error(400, ErrorCode::InvalidArgument, "k must be a positive integer");
    k = *v;
  }
  std::optional<kg::Vad> emotion;
  if (auto it = r.query.find("emotion"); it != r.query.end() && !it->second.empty()) {
    const auto p = split(it->second, ',');
    try {
      if (p.size() != 3) throw std::invalid_argument("arity");
      emotion = kg::Vad::make(std::stod(p[0]), std::stod(p[1]), std::stod(p[2]));
    } catch (const std::exception&) {
      return error(400, ErrorCode::InvalidArgument, "emotion must be 'valence,arousal,dominance' within range");
    }
  }
  ordered_json results = ordered_json::array();
  try {
    for (const auto& h : kg::query_cultural(engine_.graph(), cultures, emotion, k)) results.push_back(hit_json(h));
  } catch (const Error& e) {
    if (e.code() != ErrorCode::EmptyGraph) throw;
  }
  ordered_json out;
  out["cultures"] = cultures;
  out["k"] = k;
  out["results"] = std::move(results);
  return json_response(200, out.dump());
}

Response Service::get_metrics() {
  const auto& path = config_.paths.report;
  if (path.empty() || !std::filesystem::exists(path))
    return error(404, ErrorCode::NotFound, "no evaluation report has been produced yet");
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return json_response(200, ss.str());
}

Response Service::get_policy() { return json_response(200, policy_json(policy()).dump()); }

// ---------------------------------------------------------------------------
// HTTP binding

void Service::serve(const std::string& host, int port) {
  httplib::Server server;
  auto bridge = [this](const httplib::Request& req, httplib::Response& res) {
    Request r;
    r.method = req.method;
    r.path = req.path;
    for (const auto& [k, v] : req.params) r.query[k] = v;
    for (const auto& [k, v] : req.headers) r.headers[k] = v;
    r.body = req.body;
    const Response out = handle(r);
    res.status = out.status;
    res.set_content(out.body, out.content_type);
    res.set_header("Access-Control-Allow-Origin", "*");
  };
  server.Get(".*", bridge);
  server.Post(".*", bridge);
  server.Options(".*", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Headers", "Content-Type, " + std::string(kAuthHeader));
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.status = 204;
  });
  {
    std::lock_guard lock(server_mu_);
    server_ = &server;
  }
  const int bound = port == 0 ? server.bind_to_any_port(host) : (server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) {
    std::lock_guard lock(server_mu_);
    server_ = nullptr;
    fail(ErrorCode::IoFailure, "cannot bind " + host + ":" + std::to_string(port));
  }
  bound_port_.store(bound);
  server.listen_after_bind();
  std::lock_guard lock(server_mu_);
  server_ = nullptr;
  bound_port_.store(0);
}

void Service::stop() {
  std::lock_guard lock(server_mu_);
  if (server_) static_cast<httplib::Server*>(server_)->stop();
}


// ---------------------------------------------------------------------------
// Terminal chat

namespace {

std::string fixed4(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

}  // namespace

bool run_chat(Service& service, const std::string& culture, std::istream& in, std::ostream& out, std::ostream& err,
              bool json_lines) {
  Request create{"POST", "/sessions", {}, {}, culture.empty() ? "{}" : ordered_json{{"declared_culture", culture}}.dump()};
  if (service.auth_token()) create.headers[std::string(kAuthHeader)] = *service.auth_token();
  const auto created = service.handle(create);
  if (created.status != 201) {
    err << "error: " << created.body << "\n";
    return false;
  }
  const std::string id = nlohmann::json::parse(created.body).at("session_id").get<std::string>();
  out << "session " << id << (culture.empty() ? "" : " (" + culture + ")") << "\n";

  std::size_t last_turn = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Request req;
    req.method = "POST";
    if (service.auth_token()) req.headers[std::string(kAuthHeader)] = *service.auth_token();
    if (line == "/quit") break;
    if (line.rfind("/feedback", 0) == 0) {
      if (last_turn == 0) {
        out << "! no turn to rate yet\n";
        continue;
      }
      const std::string arg = line.size() > 9 ? line.substr(9) : "";
      long long rating = 0;
      try {
        rating = std::stoll(arg);
      } catch (const std::exception&) {
        out << "! usage: /feedback <1-5>\n";
        continue;
      }
      req.path = "/sessions/" + id + "/feedback";
      req.body = ordered_json{{"turn_index", last_turn}, {"rating", rating}}.dump();
      const auto res = service.handle(req);
      if (json_lines) {
        out << res.body << "\n";
      } else if (res.status != 200) {
        out << "! " << nlohmann::json::parse(res.body).at("message").get<std::string>() << "\n";
      } else {
        const auto j = nlohmann::json::parse(res.body);
        out << "~ rated turn " << last_turn << ": " << rating;
        if (j.at("policy_update_triggered").get<bool>())
          out << " (policy updated, update " << j.at("update_count").get<long long>() << ")";
        out << "\n";
      }
      continue;
    }
    req.path = "/sessions/" + id + "/message";
    req.body = ordered_json{{"text", line}}.dump();
    const auto res = service.handle(req);
    if (json_lines) {
      out << res.body << "\n";
      if (res.status == 200) last_turn = nlohmann::json::parse(res.body).at("turn_index").get<std::size_t>();
      continue;
    }
    const auto j = nlohmann::json::parse(res.body);
    if (res.status != 200) {
      out << "! " << j.at("message").get<std::string>() << "\n";
      continue;
    }
    last_turn = j.at("turn_index").get<std::size_t>();
    const auto& d = j.at("diagnostics");
    out << "you> " << line << "\n";
    out << "cekg> " << j.at("response_text").get<std::string>() << "\n";
    out << "  [turn " << last_turn << " | VAD " << fixed4(j.at("vad").at("valence")) << ","
        << fixed4(j.at("vad").at("arousal")) << "," << fixed4(j.at("vad").at("dominance")) << " | comp_k "
        << fixed4(d.at("comp_k")) << " coh_e " << fixed4(d.at("coh_e")) << " | retries " << d.at("retries").get<int>()
        << (d.at("fallback").get<bool>() ? " | fallback" : "") << "]\n";
    std::string cited;
    for (const auto& e : j.at("culture_trace"))
      if (e.at("used_in_response").get<bool>()) cited += (cited.empty() ? "" : ", ") + e.at("entity_id").get<std::string>();
    if (!cited.empty()) out << "  [cites " << cited << "]\n";
  }
  return true;
}

}  // namespace cekg::service
