#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "cekg/carm.hpp"
#include "cekg/config.hpp"
#include "cekg/grpo.hpp"

namespace cekg::service {

struct Request {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::map<std::string, std::string> headers;
  std::string body;
};

struct Response {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

inline constexpr std::string_view kAuthHeader = "X-CEKG-Token";

// Sessions, turns, feedback-driven policy updates, KG queries and metrics.
// Per-session requests are serialised; policy updates are serialised
// globally. Every acknowledged turn and rating is fsync'ed first, and the
// policy is rebuilt on start-up by replaying <sessions>/transitions.jsonl.
class Service {
 public:
  Service(Config config, carm::Engine engine, grpo::PolicyParams initial_policy);
  // Loads the engine, the anchors and the start policy named in the config.
  static std::unique_ptr<Service> from_config(const Config& config);

  Response handle(const Request& request);

  grpo::PolicyParams policy() const;
  std::size_t buffered_transitions() const;
  const carm::Engine& engine() const { return engine_; }
  const std::filesystem::path& transition_log() const { return transition_log_; }
  const std::optional<std::string>& auth_token() const { return config_.server.auth_token; }

  // Timestamps for created_at / submitted_at; UTC ISO-8601 by default.
  void set_clock(std::function<std::string()> clock) { clock_ = std::move(clock); }

  // Blocking HTTP/1.1 server; returns after stop().
  void serve(const std::string& host, int port);
  void stop();
  // Port bound by serve(), 0 before it listens.
  int bound_port() const { return bound_port_.load(); }

 private:
  Response create_session(const Request& r);
  Response post_message(const std::string& id, const Request& r);
  Response post_feedback(const std::string& id, const Request& r);
  Response get_session(const std::string& id);
  Response get_trace(const std::string& id, const std::string& turn);
  Response get_kg_query(const Request& r);
  Response get_metrics();
  Response get_policy();

  std::mutex& session_mutex(const std::string& id);
  carm::Session* find_session(const std::string& id);
  void log_event(const std::string& event, const grpo::Transition& t);

  Config config_;
  carm::Engine engine_;
  grpo::PolicyParams initial_policy_;

  mutable std::mutex store_mu_;
  carm::SessionStore store_;
  std::map<std::string, std::unique_ptr<std::mutex>> session_mu_;

  mutable std::mutex policy_mu_;
  grpo::PolicyTrainer trainer_;
  // Transitions already submitted, by state id, for rating overwrites.
  std::map<std::string, grpo::Transition> submitted_;
  std::filesystem::path transition_log_;

  std::function<std::string()> clock_;
  std::atomic<int> bound_port_{0};
  std::mutex server_mu_;
  void* server_ = nullptr;  // httplib::Server, kept out of this header
};

// GRPO settings with the anchor set loaded from paths.anchors.
grpo::GrpoConfig training_config(const Config& config);
// paths.policy when that file exists, otherwise initial_theta. Both the
// server and offline replay start from this.
grpo::PolicyParams start_policy(const Config& config);

// Terminal chat over handle(): opens one session, then reads lines from `in`.
// "/feedback <1-5>" rates the latest turn and "/quit" stops. With json_lines
// the raw response bodies are printed. False if the session cannot be created.
bool run_chat(Service& service, const std::string& culture, std::istream& in, std::ostream& out, std::ostream& err,
              bool json_lines);

// {"error_code": ..., "message": ..., "stage"?: ...}
std::string error_body(std::string_view code, std::string_view message, std::string_view stage = {});

}  // namespace cekg::service
