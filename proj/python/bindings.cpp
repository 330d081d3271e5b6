#include <sstream>

#include <nlohmann/json.hpp>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cekg/config.hpp"
#include "cekg/error.hpp"
#include "cekg/evaluation.hpp"
#include "cekg/service.hpp"

namespace py = pybind11;
using namespace cekg;

namespace {

py::dict link_metrics_dict(const hyp::LinkMetrics& m) {
  py::dict d;
  d["mrr"] = m.mrr;
  d["hits1"] = m.hits1;
  d["hits3"] = m.hits3;
  d["hits10"] = m.hits10;
  d["queries"] = m.queries;
  return d;
}

py::dict prf_dict(const metrics::PrfScore& s) {
  py::dict d;
  d["precision"] = s.precision;
  d["recall"] = s.recall;
  d["f1"] = s.f1;
  d["samples"] = s.samples;
  return d;
}

py::dict diagnostics_dict(const grpo::UpdateDiagnostics& g) {
  py::dict d;
  d["clip_fraction"] = g.clip_fraction;
  d["mean_ratio"] = g.mean_ratio;
  d["objective_before"] = g.objective_before;
  d["objective"] = g.objective;
  d["ptx_nll"] = g.ptx_nll;
  return d;
}

metrics::LogBase log_base(const std::string& s) {
  if (s == "natural") return metrics::LogBase::Natural;
  if (s == "two") return metrics::LogBase::Two;
  fail(ErrorCode::InvalidArgument, "log base must be \"natural\" or \"two\"");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Culturally-aware emotional knowledge graph dialogue core";

  // CekgError.args == (code, message, stage)
  static py::exception<Error> error(m, "CekgError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::tuple args = py::make_tuple(std::string(to_string(e.code())), e.what(), e.stage());
      PyErr_SetObject(error.ptr(), args.ptr());
    }
  });

  // --- config ---------------------------------------------------------------
  py::class_<Paths>(m, "Paths")
      .def_readwrite("graph", &Paths::graph)
      .def_readwrite("lexicon", &Paths::lexicon)
      .def_readwrite("templates", &Paths::templates)
      .def_readwrite("anchors", &Paths::anchors)
      .def_readwrite("documents", &Paths::documents)
      .def_readwrite("sessions", &Paths::sessions)
      .def_readwrite("policy", &Paths::policy)
      .def_readwrite("embeddings", &Paths::embeddings)
      .def_readwrite("report", &Paths::report);

  py::class_<Config>(m, "Config")
      .def_static("load", &Config::load, py::arg("path"))
      .def_static("parse", &Config::parse, py::arg("json_text"), py::arg("base_dir"))
      .def_readonly("hash", &Config::hash)
      .def_readwrite("paths", &Config::paths)
      .def_property_readonly("cultures",
                             [](const Config& c) {
                               std::vector<std::string> codes;
                               for (const auto& info : c.cultures) codes.push_back(info.code);
                               return codes;
                             })
      .def_property(
          "server_seed", [](const Config& c) { return c.seeds.server; },
          [](Config& c, std::uint64_t s) { c.seeds.server = s; })
      .def_property(
          "auth_token", [](const Config& c) { return c.server.auth_token; },
          [](Config& c, std::optional<std::string> t) { c.server.auth_token = std::move(t); });

  // --- knowledge graph --------------------------------------------------------
  py::class_<kg::Graph>(m, "Graph")
      .def(py::init<>())
      .def_static("load", &kg::load, py::arg("path"))
      .def_static("parse", [](const std::string& text) { return kg::parse(text); }, py::arg("text"))
      .def("save", [](const kg::Graph& g, const std::filesystem::path& p) { kg::save(g, p); }, py::arg("path"))
      .def("serialize", [](const kg::Graph& g) { return kg::serialize(g); })
      .def_property_readonly("entity_count", &kg::Graph::entity_count)
      .def_property_readonly("triple_count", &kg::Graph::triple_count)
      .def_property_readonly("entity_ids",
                             [](const kg::Graph& g) {
                               std::vector<std::string> ids;
                               for (const auto& [id, e] : g.entities()) ids.push_back(id);
                               return ids;
                             })
      .def("culture_mass", [](const kg::Graph& g) { return kg::culture_mass(g); })
      .def("kl", [](const kg::Graph& g, const std::map<std::string, double>& ideal) { return kg::graph_kl(g, ideal); },
           py::arg("ideal"));

  m.def(
      "ingest",
      [](const Config& config, const std::filesystem::path& documents) {
        const auto lexicon = kg::Lexicon::load_tsv(config.paths.lexicon);
        return kg::ingest(kg::load_documents(documents), lexicon, config.registry());
      },
      py::arg("config"), py::arg("documents"), "Builds a graph from a JSON Lines document file.");

  m.def(
      "align",
      [](const kg::Graph& graph, const std::map<std::string, double>& ideal) {
        auto r = kg::align_cross_cultural(graph, ideal);
        py::dict d;
        d["kl_before"] = r.kl_before;
        d["kl_after"] = r.kl_after;
        d["reduction"] = r.kl_before > 0.0 ? 1.0 - r.kl_after / r.kl_before : 0.0;
        d["weights"] = r.weights;
        d["weight_exponent"] = r.weight_exponent;
        d["links_added"] = r.links_added;
        d["warnings"] = r.warnings;
        d["graph"] = std::move(r.graph);
        return d;
      },
      py::arg("graph"), py::arg("ideal") = std::map<std::string, double>{},
      "Empty ideal means uniform over the cultures present.");

  m.def(
      "query_cultural",
      [](const kg::Graph& graph, const std::set<std::string>& tags, std::optional<std::array<double, 3>> emotion,
         std::size_t k) {
        std::optional<kg::Vad> vad;
        if (emotion) vad = kg::Vad::make((*emotion)[0], (*emotion)[1], (*emotion)[2]);
        py::list out;
        for (const auto& hit : kg::query_cultural(graph, tags, vad, k)) {
          py::dict d;
          d["entity"] = hit.entity.id;
          d["overlap"] = hit.overlap;
          d["vad_distance"] = hit.vad_distance;
          out.append(d);
        }
        return out;
      },
      py::arg("graph"), py::arg("culture_tags"), py::arg("emotion") = py::none(), py::arg("k") = 5);

  // --- embeddings -------------------------------------------------------------
  py::class_<hyp::TripleSet>(m, "TripleSet")
      .def_static("from_graph", &hyp::TripleSet::from_graph, py::arg("graph"))
      .def_static("load_tsv", &hyp::TripleSet::load_tsv, py::arg("path"))
      .def_static("synthetic_tree", &hyp::TripleSet::synthetic_tree, py::arg("branching"), py::arg("depth"))
      .def_readonly("entities", &hyp::TripleSet::entities)
      .def_readonly("relations", &hyp::TripleSet::relations)
      .def("__len__", [](const hyp::TripleSet& s) { return s.triples.size(); });

  py::class_<hyp::EmbeddingModel>(m, "EmbeddingModel")
      .def_static("load", &hyp::EmbeddingModel::load, py::arg("path"))
      .def("save", &hyp::EmbeddingModel::save, py::arg("path"))
      .def_property_readonly("geometry", [](const hyp::EmbeddingModel& e) { return std::string(hyp::to_string(e.geometry)); })
      .def_readonly("dim", &hyp::EmbeddingModel::dim)
      .def_readonly("seed", &hyp::EmbeddingModel::seed)
      .def_readonly("entity_ids", &hyp::EmbeddingModel::entity_ids)
      .def_readonly("entity_coords", &hyp::EmbeddingModel::entity_coords)
      .def_readonly("epoch_losses", &hyp::EmbeddingModel::epoch_losses)
      .def("score", [](const hyp::EmbeddingModel& e, std::string_view h, std::string_view r,
                       std::string_view t) { return hyp::score_triple(e, h, r, t); },
           py::arg("head"), py::arg("relation"), py::arg("tail"));

  m.def(
      "train_embeddings",
      [](const hyp::TripleSet& triples, const std::string& geometry, std::size_t dim, std::uint64_t seed,
         std::optional<std::size_t> epochs, std::optional<double> learning_rate) {
        hyp::EmbeddingConfig c;
        c.geometry = hyp::parse_geometry(geometry);
        c.dim = dim;
        c.seed = seed;
        if (epochs) c.epochs = *epochs;
        if (learning_rate) c.learning_rate = *learning_rate;
        py::gil_scoped_release release;
        return hyp::train(triples, c);
      },
      py::arg("triples"), py::arg("geometry") = "hyperbolic", py::arg("dim") = 8, py::arg("seed") = 7,
      py::arg("epochs") = py::none(), py::arg("learning_rate") = py::none());

  m.def(
      "evaluate_embeddings",
      [](const hyp::EmbeddingModel& model, const hyp::TripleSet& known) {
        return link_metrics_dict(hyp::evaluate(model, known));
      },
      py::arg("model"), py::arg("known"), "Filtered tail-prediction MRR and Hits@k.");

  // --- metrics ----------------------------------------------------------------
  m.def("tokenize", [](const std::string& s) { return metrics::tokenize(s); }, py::arg("text"));
  m.def(
      "csd",
      [](const std::set<std::string>& concepts, const std::set<std::string>& entailed, const std::string& base) {
        return metrics::csd({concepts, entailed}, log_base(base));
      },
      py::arg("concepts"), py::arg("entailed"), py::arg("base") = "natural");
  m.def(
      "kl_bias",
      [](const std::map<std::string, double>& counts, std::optional<std::map<std::string, double>> ideal,
         const std::string& base) {
        auto dist = ideal ? metrics::CultureDistribution{counts, *ideal}
                          : metrics::CultureDistribution::with_uniform_ideal(counts);
        return metrics::kl_bias(dist, log_base(base));
      },
      py::arg("counts"), py::arg("ideal") = py::none(), py::arg("base") = "natural",
      "Without an ideal, uniform over the cultures in counts.");
  m.def("bleu4", &metrics::bleu4, py::arg("hypothesis"), py::arg("references"));
  m.def(
      "rouge_l",
      [](const std::vector<std::string>& h, const std::vector<std::string>& r) {
        const auto s = metrics::rouge_l(h, r);
        py::dict d;
        d["precision"] = s.precision;
        d["recall"] = s.recall;
        d["f1"] = s.f1;
        return d;
      },
      py::arg("hypothesis"), py::arg("reference"));
  m.def("lcs_length", &metrics::lcs_length, py::arg("a"), py::arg("b"));
  m.def(
      "f1_by_culture",
      [](const std::vector<std::string>& predictions, const std::vector<std::string>& gold,
         const std::vector<std::string>& culture_of) {
        const auto r = metrics::f1_by_culture(predictions, gold, culture_of);
        py::dict by;
        for (const auto& [c, s] : r.by_culture) by[py::str(c)] = prf_dict(s);
        py::dict d;
        d["by_culture"] = by;
        d["macro"] = prf_dict(r.macro);
        return d;
      },
      py::arg("predictions"), py::arg("gold"), py::arg("culture_of"));

  // --- policy -----------------------------------------------------------------
  py::class_<grpo::RewardComponents>(m, "RewardComponents")
      .def(py::init([](double c, double e, double f) { return grpo::RewardComponents{c, e, f}; }),
           py::arg("cultural") = 0.0, py::arg("emotional") = 0.0, py::arg("feedback") = 0.0)
      .def_readwrite("cultural", &grpo::RewardComponents::cultural)
      .def_readwrite("emotional", &grpo::RewardComponents::emotional)
      .def_readwrite("feedback", &grpo::RewardComponents::feedback);

  py::class_<grpo::Transition>(m, "Transition")
      .def(py::init([](std::string state_id, std::size_t action, grpo::FeatureMatrix features, double old_log_prob,
                       grpo::RewardComponents reward, double value_baseline, std::array<double, 3> weights) {
             grpo::Transition t;
             t.state_id = std::move(state_id);
             t.action = action;
             t.candidate_features = std::move(features);
             t.old_log_prob = old_log_prob;
             t.reward = reward;
             t.value_baseline = value_baseline;
             t.weights = grpo::RewardWeights::make(weights[0], weights[1], weights[2]);
             return t;
           }),
           py::arg("state_id"), py::arg("action"), py::arg("candidate_features"), py::arg("old_log_prob"),
           py::arg("reward"), py::arg("value_baseline") = 0.0,
           py::arg("weights") = std::array<double, 3>{0.4, 0.4, 0.2})
      .def_static("from_json", [](const std::string& s) { return grpo::transition_from_json(s); })
      .def("to_json", [](const grpo::Transition& t) { return grpo::transition_json(t); })
      .def_readonly("state_id", &grpo::Transition::state_id)
      .def_readonly("action", &grpo::Transition::action)
      .def_readonly("candidate_features", &grpo::Transition::candidate_features)
      .def_readonly("old_log_prob", &grpo::Transition::old_log_prob)
      .def_readonly("reward", &grpo::Transition::reward)
      .def_readonly("value_baseline", &grpo::Transition::value_baseline)
      .def_property_readonly("reward_total", &grpo::Transition::reward_total)
      .def_property_readonly("advantage", [](const grpo::Transition& t) { return grpo::advantage(t); });

  py::class_<grpo::GrpoConfig>(m, "GrpoConfig")
      .def(py::init<>())
      .def_readwrite("epsilon", &grpo::GrpoConfig::epsilon)
      .def_readwrite("lambda_ptx", &grpo::GrpoConfig::lambda_ptx)
      .def_readwrite("lr", &grpo::GrpoConfig::lr)
      .def_readwrite("inner_steps", &grpo::GrpoConfig::inner_steps)
      .def_readwrite("batch_size", &grpo::GrpoConfig::batch_size)
      .def_readwrite("baseline_decay", &grpo::GrpoConfig::baseline_decay)
      .def_property_readonly("anchor_count", [](const grpo::GrpoConfig& c) { return c.anchors.size(); })
      .def_static("from_config", &service::training_config, py::arg("config"));

  py::class_<grpo::PolicyParams>(m, "PolicyParams")
      .def_static("initial", &grpo::PolicyParams::initial, py::arg("feature_names"), py::arg("theta"))
      .def_static("load", &grpo::PolicyParams::load, py::arg("path"))
      .def_static("start", &service::start_policy, py::arg("config"))
      .def("save", &grpo::PolicyParams::save, py::arg("path"))
      .def_readonly("theta", &grpo::PolicyParams::theta)
      .def_readonly("feature_names", &grpo::PolicyParams::feature_names)
      .def_readonly("update_count", &grpo::PolicyParams::update_count);

  m.attr("DEFAULT_FEATURE_NAMES") = grpo::kDefaultFeatureNames;
  m.def("feedback_to_reward", &grpo::feedback_to_reward, py::arg("rating"));
  m.def(
      "policy_probabilities",
      [](const std::vector<double>& theta, const grpo::FeatureMatrix& c) { return grpo::policy_probabilities(theta, c); },
      py::arg("theta"), py::arg("candidates"));
  m.def(
      "grpo_objective",
      [](const std::vector<double>& theta, const std::vector<grpo::Transition>& batch, const grpo::GrpoConfig& c) {
        const auto r = grpo::grpo_objective(theta, batch, c);
        py::dict d;
        d["objective"] = r.objective;
        d["surrogate"] = r.surrogate;
        d["ptx_nll"] = r.ptx_nll;
        d["gradient"] = r.gradient;
        d["clip_fraction"] = r.clip_fraction;
        d["mean_ratio"] = r.mean_ratio;
        return d;
      },
      py::arg("theta"), py::arg("batch"), py::arg("config"));
  m.def(
      "grpo_update",
      [](const grpo::PolicyParams& p, const std::vector<grpo::Transition>& batch, const grpo::GrpoConfig& c) {
        auto r = grpo::grpo_update(p, batch, c);
        return py::make_tuple(std::move(r.policy), diagnostics_dict(r.diagnostics));
      },
      py::arg("policy"), py::arg("batch"), py::arg("config"), "Returns (policy, diagnostics).");
  m.def(
      "replay_policy",
      [](const Config& config, const std::filesystem::path& transitions) {
        grpo::PolicyTrainer trainer(service::start_policy(config), service::training_config(config));
        grpo::replay(trainer, grpo::load_transition_log(transitions));
        return trainer.policy();
      },
      py::arg("config"), py::arg("transitions"), "Offline replay of a transitions.jsonl log, starting where the server would.");

  // --- evaluation ---------------------------------------------------------------
  m.def(
      "evaluate",
      [](const Config& config, const std::filesystem::path& dialogues) {
        const auto engine = carm::Engine::from_config(config);
        const auto result = eval::evaluate(engine, eval::load_dialogues(dialogues), service::start_policy(config));
        return py::make_tuple(metrics::report_json(result.bundle), result.transcript);
      },
      py::arg("config"), py::arg("dialogues"), "Returns (report JSON text, transcript lines).");

  // --- service ------------------------------------------------------------------
  py::class_<service::Service>(m, "Service")
      .def(py::init([](const Config& c) { return service::Service::from_config(c); }), py::arg("config"))
      .def(
          "handle",
          [](service::Service& s, std::string method, std::string path, std::string body,
             std::map<std::string, std::string> query, std::map<std::string, std::string> headers) {
            service::Request r{std::move(method), std::move(path), std::move(query), std::move(headers),
                               std::move(body)};
            service::Response resp;
            {
              py::gil_scoped_release release;
              resp = s.handle(r);
            }
            return py::make_tuple(resp.status, resp.body);
          },
          py::arg("method"), py::arg("path"), py::arg("body") = "", py::arg("query") = std::map<std::string, std::string>{},
          py::arg("headers") = std::map<std::string, std::string>{}, "Returns (status, body).")
      .def(
          "chat",
          [](service::Service& s, const std::string& culture, const std::string& input, bool json_lines) {
            std::istringstream in(input);
            std::ostringstream out, err;
            const bool ok = service::run_chat(s, culture, in, out, err, json_lines);
            if (!ok) {
              // err holds "error: <error body>"
              const auto body = nlohmann::json::parse(err.str().substr(err.str().find('{')));
              const auto code = body.at("error_code").get<std::string>();
              const py::tuple args = py::make_tuple(code, body.at("message").get<std::string>(), std::string());
              PyErr_SetObject(error.ptr(), args.ptr());
              throw py::error_already_set();
            }
            return out.str();
          },
          py::arg("culture"), py::arg("input"), py::arg("json_lines") = false,
          "Runs the terminal chat loop over `input` and returns what it printed.")
      .def("use_fixed_clock",
           [](service::Service& s, std::string stamp) { s.set_clock([stamp] { return stamp; }); },
           py::arg("stamp") = "1970-01-01T00:00:00Z")
      .def_property_readonly("policy", &service::Service::policy)
      .def_property_readonly("buffered_transitions", &service::Service::buffered_transitions)
      .def_property_readonly("transition_log", &service::Service::transition_log);
}
