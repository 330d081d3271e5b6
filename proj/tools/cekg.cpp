// cekg: ingestion, alignment, embedding training/evaluation, policy replay,
// evaluation reports, the HTTP service and a terminal chat loop.

#include <csignal>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cekg/config.hpp"
#include "cekg/embedding.hpp"
#include "cekg/error.hpp"
#include "cekg/evaluation.hpp"
#include "cekg/grpo.hpp"
#include "cekg/kg.hpp"
#include "cekg/service.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

bool is_validation(cekg::ErrorCode c) {
  using cekg::ErrorCode;
  switch (c) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::SchemaViolation:
    case ErrorCode::DanglingReference:
    case ErrorCode::DuplicateId:
    case ErrorCode::UnknownCulture:
    case ErrorCode::MalformedRecord:
    case ErrorCode::FormatError:
    case ErrorCode::ConfigInvalid:
    case ErrorCode::OutOfRangeRating:
    case ErrorCode::UnknownId:
    case ErrorCode::EmptyText:
      return true;
    default:
      return false;
  }
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Config file (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Seed override for this command's randomness");
  cmd->add_option("--out", c.out, "Output artifact path");
}

std::string or_default(const std::string& flag, const fs::path& fallback) {
  return flag.empty() ? fallback.string() : flag;
}

void require_path(const std::string& p, const char* what) {
  if (p.empty()) cekg::fail(cekg::ErrorCode::ConfigInvalid, std::string("no ") + what + " path given or configured");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) cekg::fail(cekg::ErrorCode::IoFailure, "cannot write " + path.string());
  out << text;
  if (!out) cekg::fail(cekg::ErrorCode::IoFailure, "write failed for " + path.string());
}

cekg::hyp::TripleSet load_triples(const fs::path& path) {
  if (path.extension() == ".tsv") return cekg::hyp::TripleSet::load_tsv(path);
  return cekg::hyp::TripleSet::from_graph(cekg::kg::load(path));
}

std::map<std::string, double> parse_ideal(const std::string& spec) {
  std::map<std::string, double> out;
  if (spec.empty()) return out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) cekg::fail(cekg::ErrorCode::InvalidArgument, "--ideal expects CODE=p,...");
    out[item.substr(0, eq)] = std::stod(item.substr(eq + 1));
  }
  return out;
}

cekg::Config load_config(const Common& c) { return cekg::Config::load(c.config); }

// ---------------------------------------------------------------------------

int cmd_ingest(const Common& c, const std::string& documents, const std::string& manifest) {
  const auto config = load_config(c);
  const auto docs_path = or_default(documents, config.paths.documents);
  require_path(docs_path, "documents");
  const auto out = or_default(c.out, config.paths.graph);
  require_path(out, "graph output");
  const auto lexicon = cekg::kg::Lexicon::load_tsv(config.paths.lexicon);
  const auto docs = cekg::kg::load_documents(docs_path);
  auto graph = cekg::kg::ingest(docs, lexicon, config.registry());
  graph.meta()["config_hash"] = config.hash;
  cekg::kg::save(graph, out);
  std::cout << "ingested " << docs.size() << " documents: " << graph.entity_count() << " entities, "
            << graph.relations().size() << " relations, " << graph.triple_count() << " triples -> " << out << "\n";
  if (!manifest.empty()) {
    ordered_json m;
    m["format"] = "cekg-manifest-v1";
    m["graph"] = fs::path(out).filename().string();
    m["documents"] = docs.size();
    m["entities"] = graph.entity_count();
    m["relations"] = graph.relations().size();
    m["triples"] = graph.triple_count();
    m["config_hash"] = config.hash;
    write_text(manifest, m.dump(2) + "\n");
  }
  return kExitOk;
}

int cmd_align(const Common& c, const std::string& graph_flag, const std::string& ideal_flag) {
  const auto config = load_config(c);
  const auto graph_path = or_default(graph_flag, config.paths.graph);
  require_path(graph_path, "graph");
  const auto graph = cekg::kg::load(graph_path);
  auto result = cekg::kg::align_cross_cultural(graph, parse_ideal(ideal_flag));
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
  std::size_t unique = 0, kept = 0;
  for (const auto& [id, e] : graph.entities()) {
    if (!e.unique) continue;
    ++unique;
    if (result.graph.find_entity(id)) ++kept;
  }
  const double reduction = result.kl_before > 0.0 ? 1.0 - result.kl_after / result.kl_before : 0.0;
  std::cout << std::setprecision(6) << std::fixed << "KL before: " << result.kl_before
            << "  KL after: " << result.kl_after << "  reduction: " << std::setprecision(2) << 100.0 * reduction
            << "%  equivalence links: " << result.links_added << "  unique concepts kept: " << kept << "/" << unique
            << "\n";
  if (!c.out.empty()) {
    result.graph.meta()["config_hash"] = config.hash;
    cekg::kg::save(result.graph, c.out);
  }
  return kExitOk;
}

int cmd_train_embeddings(const Common& c, const std::string& graph_flag, std::optional<std::size_t> dim,
                         std::optional<std::string> geometry, std::optional<std::size_t> epochs) {
  const auto config = load_config(c);
  const auto graph_path = or_default(graph_flag, config.paths.graph);
  require_path(graph_path, "graph");
  const auto out = or_default(c.out, config.paths.embeddings);
  require_path(out, "embedding output");
  auto ec = config.embedding;
  ec.seed = c.seed ? *c.seed : config.seeds.embedding;
  if (dim) ec.dim = *dim;
  if (geometry) ec.geometry = cekg::hyp::parse_geometry(*geometry);
  if (epochs) ec.epochs = *epochs;
  const auto set = load_triples(graph_path);
  if (set.triples.empty()) cekg::fail(cekg::ErrorCode::EmptyGraph, "no triples in " + graph_path);
  const auto model = cekg::hyp::train(set, ec);
  model.save(out);
  std::cout << "trained " << cekg::hyp::to_string(ec.geometry) << " embedding: dim " << ec.dim << ", "
            << set.entities.size() << " entities, " << set.triples.size() << " triples, seed " << *ec.seed
            << ", final loss " << std::setprecision(6) << std::fixed
            << (model.epoch_losses.empty() ? 0.0 : model.epoch_losses.back()) << " -> " << out << "\n";
  return kExitOk;
}

int cmd_eval_embeddings(const Common& c, const std::string& graph_flag, const std::string& model_flag) {
  const auto config = load_config(c);
  const auto graph_path = or_default(graph_flag, config.paths.graph);
  require_path(graph_path, "graph");
  const auto model_path = or_default(model_flag, config.paths.embeddings);
  require_path(model_path, "model");
  const auto set = load_triples(graph_path);
  const auto model = cekg::hyp::EmbeddingModel::load(model_path);
  const auto m = cekg::hyp::evaluate(model, set);
  ordered_json j;
  j["format"] = "cekg-linkeval-v1";
  j["geometry"] = cekg::hyp::to_string(model.geometry);
  j["dim"] = model.dim;
  j["seed"] = model.seed;
  j["queries"] = m.queries;
  j["mrr"] = m.mrr;
  j["hits1"] = m.hits1;
  j["hits3"] = m.hits3;
  j["hits10"] = m.hits10;
  j["config_hash"] = config.hash;
  std::cout << std::setprecision(6) << std::fixed << cekg::hyp::to_string(model.geometry) << " MRR " << m.mrr
            << "  Hits@1 " << m.hits1 << "  Hits@3 " << m.hits3 << "  Hits@10 " << m.hits10 << "  (" << m.queries
            << " queries)\n";
  if (!c.out.empty()) write_text(c.out, j.dump(2) + "\n");
  return kExitOk;
}

int cmd_train_policy(const Common& c, const std::string& sessions_flag) {
  const auto config = load_config(c);
  fs::path log = or_default(sessions_flag, config.paths.sessions);
  require_path(log.string(), "sessions");
  if (fs::is_directory(log)) log /= "transitions.jsonl";
  const auto events = cekg::grpo::load_transition_log(log);
  cekg::grpo::PolicyTrainer trainer(cekg::service::start_policy(config), cekg::service::training_config(config));
  cekg::grpo::replay(trainer, events);
  auto policy = trainer.policy();
  policy.config_hash = config.hash;
  std::cout << "replayed " << events.size() << " events: " << policy.update_count << " updates, "
            << trainer.buffer().size() << " transitions left in the buffer\n";
  std::cout << "theta";
  for (std::size_t i = 0; i < policy.theta.size(); ++i)
    std::cout << " " << policy.feature_names[i] << "=" << std::setprecision(17) << policy.theta[i];
  std::cout << "\n";
  if (!c.out.empty()) policy.save(c.out);
  return kExitOk;
}

int cmd_eval(const Common& c, const std::string& graph_flag, const std::string& sessions_flag,
             const std::string& policy_flag, const std::string& transcript) {
  auto config = load_config(c);
  if (!graph_flag.empty()) config.paths.graph = graph_flag;
  if (c.seed) config.seeds.server = *c.seed;
  require_path(sessions_flag, "dialogue (--sessions)");
  const auto out = or_default(c.out, config.paths.report);
  require_path(out, "report output");
  const auto engine = cekg::carm::Engine::from_config(config);
  const auto policy =
      policy_flag.empty() ? cekg::service::start_policy(config) : cekg::grpo::PolicyParams::load(policy_flag);
  const auto dialogues = cekg::eval::load_dialogues(sessions_flag);
  const auto result = cekg::eval::evaluate(engine, dialogues, policy);
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  cekg::metrics::emit_report(result.bundle, out);
  std::cout << cekg::metrics::report_table(result.bundle);
  if (!transcript.empty()) {
    std::string text;
    for (const auto& line : result.transcript) text += line + "\n";
    write_text(transcript, text);
  }
  return kExitOk;
}

cekg::service::Service* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

int cmd_serve(const Common& c, std::optional<std::string> host, std::optional<int> port,
              const std::string& sessions_flag) {
  auto config = load_config(c);
  if (c.seed) config.seeds.server = *c.seed;
  if (!sessions_flag.empty()) config.paths.sessions = sessions_flag;
  require_path(config.paths.sessions.string(), "sessions");
  auto service = cekg::service::Service::from_config(config);
  g_service = service.get();
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  const std::string h = host.value_or(config.server.host);
  const int p = port.value_or(config.server.port);
  std::cerr << "serving on " << h << ":" << p << " (sessions in " << config.paths.sessions.string() << ")\n";
  service->serve(h, p);
  g_service = nullptr;
  return kExitOk;
}

int cmd_chat(const Common& c, const std::string& culture, const std::string& sessions_flag, bool json_lines) {
  auto config = load_config(c);
  if (c.seed) config.seeds.server = *c.seed;
  if (!sessions_flag.empty()) config.paths.sessions = sessions_flag;
  require_path(config.paths.sessions.string(), "sessions");
  auto service = cekg::service::Service::from_config(config);
  service->set_clock([] { return std::string("1970-01-01T00:00:00Z"); });

  return cekg::service::run_chat(*service, culture, std::cin, std::cout, std::cerr, json_lines) ? kExitOk
                                                                                            : kExitValidation;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cekg: culturally adaptive affective response engine"};
  app.require_subcommand(1);

  Common common;
  std::string documents, manifest, graph, ideal, model, sessions, policy, transcript, culture;
  std::optional<std::size_t> dim, epochs;
  std::optional<std::string> geometry, host;
  std::optional<int> port;
  bool json_lines = false;

  auto* ingest = app.add_subcommand("ingest", "Build a knowledge graph from documents and the lexicon");
  add_common(ingest, common);
  ingest->add_option("--documents", documents, "Documents (JSON Lines); default paths.documents");
  ingest->add_option("--manifest", manifest, "Also write a counts manifest here");

  auto* align = app.add_subcommand("align", "Rebalance culture representation and report KL before/after");
  add_common(align, common);
  align->add_option("--graph", graph, "Graph (JSON Lines); default paths.graph");
  align->add_option("--ideal", ideal, "Ideal distribution CODE=p,...; default uniform over present cultures");

  auto* train_emb = app.add_subcommand("train-embeddings", "Train a Lorentz (or Euclidean baseline) embedding");
  add_common(train_emb, common);
  train_emb->add_option("--graph", graph, "Graph (JSON Lines) or head/relation/tail TSV; default paths.graph");
  train_emb->add_option("--dim", dim, "Embedding dimension");
  train_emb->add_option("--geometry", geometry, "hyperbolic or euclidean")
      ->check(CLI::IsMember({"hyperbolic", "euclidean"}));
  train_emb->add_option("--epochs", epochs, "Training epochs");

  auto* eval_emb = app.add_subcommand("eval-embeddings", "Filtered link-prediction MRR and Hits@k");
  add_common(eval_emb, common);
  eval_emb->add_option("--graph", graph, "Graph (JSON Lines) or TSV; default paths.graph");
  eval_emb->add_option("--model", model, "Embedding model; default paths.embeddings");

  auto* train_pol = app.add_subcommand("train-policy", "Replay a transition log from the configured start policy");
  add_common(train_pol, common);
  train_pol->add_option("--sessions", sessions, "Transition log, or a sessions directory holding transitions.jsonl");

  auto* eval = app.add_subcommand("eval", "Run scripted dialogues and write the metrics report");
  add_common(eval, common);
  eval->add_option("--graph", graph, "Graph override");
  eval->add_option("--sessions", sessions, "Dialogue scripts (JSON Lines)")->required();
  eval->add_option("--policy", policy, "Policy file; default the configured start policy");
  eval->add_option("--transcript", transcript, "Also write the response transcript here");

  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  add_common(serve, common);
  serve->add_option("--host", host, "Bind address; default server.host");
  serve->add_option("--port", port, "Port (0 picks a free one); default server.port");
  serve->add_option("--sessions", sessions, "Sessions directory override");

  auto* chat = app.add_subcommand("chat", "Terminal chat; '/feedback <1-5>' rates the last turn, '/quit' exits");
  add_common(chat, common);
  chat->add_option("--culture", culture, "Declared culture code");
  chat->add_option("--sessions", sessions, "Sessions directory override");
  chat->add_flag("--json", json_lines, "Print raw response bodies");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*ingest) return cmd_ingest(common, documents, manifest);
    if (*align) return cmd_align(common, graph, ideal);
    if (*train_emb) return cmd_train_embeddings(common, graph, dim, geometry, epochs);
    if (*eval_emb) return cmd_eval_embeddings(common, graph, model);
    if (*train_pol) return cmd_train_policy(common, sessions);
    if (*eval) return cmd_eval(common, graph, sessions, policy, transcript);
    if (*serve) return cmd_serve(common, host, port, sessions);
    if (*chat) return cmd_chat(common, culture, sessions, json_lines);
  } catch (const cekg::Error& e) {
    std::cerr << "error";
    if (!e.stage().empty()) std::cerr << " [" << e.stage() << "]";
    std::cerr << " " << cekg::to_string(e.code()) << ": " << e.what() << "\n";
    return is_validation(e.code()) ? kExitValidation : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
