import json
import math
from pathlib import Path

import pytest

import cekg

ROOT = Path(__file__).resolve().parents[2]
DATA = ROOT / "data"


@pytest.fixture
def config(tmp_path):
    c = cekg.Config.load(DATA / "config.json")
    paths = c.paths
    paths.sessions = tmp_path / "sessions"
    paths.report = tmp_path / "report.json"
    paths.policy = ""
    c.paths = paths
    return c


def test_config_and_errors(tmp_path):
    c = cekg.Config.load(DATA / "config.json")
    assert len(c.hash) == 16
    assert "JP" in c.cultures
    with pytest.raises(cekg.CekgError) as e:
        cekg.Config.load(tmp_path / "missing.json")
    assert e.value.args[0] == "IoFailure"


def test_metrics():
    assert cekg.tokenize("Hello, World!") == ["hello", "world"]
    assert cekg.csd({"a", "b", "c"}, {"a", "b"}) == pytest.approx(2 / math.log(4))
    assert cekg.csd({"a"}, {"a"}, base="two") == pytest.approx(1.0)
    assert cekg.kl_bias({"JP": 5, "US": 5}) == 0.0
    p = {"JP": 0.75, "US": 0.25}
    assert cekg.kl_bias({"JP": 3, "US": 1}) == pytest.approx(sum(v * math.log(v / 0.5) for v in p.values()))
    s = "the cat sat on the mat".split()
    assert cekg.bleu4(s, [s]) == pytest.approx(1.0)
    r = cekg.rouge_l("a b c d".split(), "a c d e f".split())
    assert cekg.lcs_length("a b c d".split(), "a c d e f".split()) == 3
    assert r["precision"] == pytest.approx(3 / 4) and r["recall"] == pytest.approx(3 / 5)
    f = cekg.f1_by_culture(["joy", "joy"], ["joy", "grief"], ["JP", "JP"])
    assert set(f["by_culture"]) == {"JP"} and f["macro"]["samples"] == 2
    with pytest.raises(cekg.CekgError):
        cekg.bleu4([], [])


def test_ingest_and_align(config):
    g = cekg.ingest(config, DATA / "documents_skewed.jsonl")
    assert g.entity_count > 0
    r = cekg.align(g)
    assert r["kl_after"] < r["kl_before"]
    assert r["reduction"] == 1 - r["kl_after"] / r["kl_before"]
    assert r["graph"].entity_count == g.entity_count
    hits = cekg.query_cultural(r["graph"], {"JP"}, k=3)
    assert 0 < len(hits) <= 3


def test_embeddings_tree():
    tree = cekg.TripleSet.load_tsv(DATA / "tree40.tsv")
    assert len(tree.entities) == 40
    m = cekg.train_embeddings(tree, geometry="hyperbolic", dim=8, seed=1, epochs=50)
    assert m.geometry == "hyperbolic" and m.dim == 8
    assert len(m.epoch_losses) == 50
    assert all(len(x) == 9 for x in m.entity_coords)
    again = cekg.train_embeddings(tree, geometry="hyperbolic", dim=8, seed=1, epochs=50)
    assert again.entity_coords == m.entity_coords
    metrics = cekg.evaluate_embeddings(m, tree)
    assert 0 < metrics["mrr"] <= 1 and metrics["queries"] == len(tree)


def test_grpo_update_moves_toward_advantage():
    feats = [[1.0, 0.0], [0.0, 1.0]]
    theta = [0.0, 0.0]
    batch = [cekg.Transition(f"s{i}", 0, feats, math.log(0.5), cekg.RewardComponents(1.0, 1.0, 1.0))
             for i in range(4)]
    cfg = cekg.GrpoConfig()
    cfg.lambda_ptx = 0.0
    obj = cekg.grpo_objective(theta, batch, cfg)
    assert obj["gradient"][0] > 0 > obj["gradient"][1]
    policy, diag = cekg.grpo_update(cekg.PolicyParams.initial(["a", "b"], theta), batch, cfg)
    assert policy.update_count == 1
    assert cekg.policy_probabilities(policy.theta, feats)[0] > 0.5
    assert 0.0 <= diag["clip_fraction"] <= 1.0
    t = cekg.Transition.from_json(batch[0].to_json())
    assert t.state_id == "s0" and t.advantage == batch[0].advantage
    assert cekg.feedback_to_reward(5) == 1.0
    with pytest.raises(cekg.CekgError):
        cekg.feedback_to_reward(6)


def test_service_round_trip(config, tmp_path):
    svc = cekg.Service(config)
    status, body = svc.handle("POST", "/sessions", json.dumps({"declared_culture": "JP"}))
    assert status == 201
    sid = json.loads(body)["session_id"]
    status, body = svc.handle("POST", f"/sessions/{sid}/message", json.dumps({"text": "I feel joy in Japan"}))
    assert status == 200
    turn = json.loads(body)
    assert turn["turn_index"] == 1 and turn["response_text"]
    assert {"vad", "culture_trace", "diagnostics"} <= set(turn)
    status, _ = svc.handle("POST", f"/sessions/{sid}/feedback", json.dumps({"turn_index": 1, "rating": 4}))
    assert status in (200, 202)
    assert svc.buffered_transitions == 1
    assert svc.handle("GET", "/health")[0] == 200
    status, body = svc.handle("GET", "/kg/query", query={"cultures": "JP", "k": "2", "emotion": "0.8,0.6,0.5"})
    assert status == 200
    direct = cekg.query_cultural(cekg.Graph.load(config.paths.graph), {"JP"}, (0.8, 0.6, 0.5), 2)
    assert [h["entity_id"] for h in json.loads(body)["results"]] == [h["entity"] for h in direct]
    assert svc.handle("POST", "/sessions", json.dumps({"declared_culture": "??"}))[0] == 400
    replayed = cekg.replay_policy(config, svc.transition_log)
    assert replayed.theta == svc.policy.theta


def test_chat_matches_golden(config):
    golden = ROOT / "tests" / "golden"
    svc = cekg.Service(config)
    svc.use_fixed_clock()
    out = svc.chat("JP", (golden / "chat_input.txt").read_text(), json_lines=True)
    assert out == (golden / "chat_transcript.jsonl").read_text()
    with pytest.raises(cekg.CekgError) as e:
        cekg.Service(config).chat("XX", "")
    assert e.value.args[0] == "UnknownCulture"


def test_evaluate_report(config):
    report, transcript = cekg.evaluate(config, DATA / "eval_dialogues.jsonl")
    body = json.loads(report)
    assert body["config_hash"] == config.hash
    kl = body["kl_divergence"]
    assert kl["reduction"] == pytest.approx(1 - kl["after_alignment"] / kl["before_alignment"], abs=1e-12)
    assert len(transcript) > 0
