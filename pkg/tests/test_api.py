import pytest
from fastapi.testclient import TestClient

from app import settings
from app.main import app
from app.services.monitor import ServingContext, set_serving_context
from tests.conftest import write_artifacts

API_KEY = "test-key"
ADMIN = {"X-API-Key": API_KEY}


@pytest.fixture
def serve(tmp_path, monkeypatch):
    """Install a serving context built from tmp artifacts; yields a client factory."""
    monkeypatch.setattr(settings, "API_KEY", API_KEY)

    def _serve(context: ServingContext) -> TestClient:
        set_serving_context(context)
        return TestClient(app)

    yield _serve
    set_serving_context(None)


@pytest.fixture
def flagging_client(tmp_path, toy_graph, toy_victim, serve):
    write_artifacts(tmp_path, toy_graph, toy_victim, policy_bias=[-10.0, 10.0])
    return serve(ServingContext(tmp_path))


def test_health_reports_loaded_artifacts(flagging_client):
    body = flagging_client.get("/health/").json()
    assert body["ok"] is True
    assert body["detector_loaded"] is True
    assert body["details"] == {}


def test_query_returns_prediction_and_subgraph(flagging_client, toy_graph):
    res = flagging_client.post("/query/0", headers={"X-User-Id": "alice"})
    assert res.status_code == 200
    body = res.json()
    assert body["node_id"] == 0
    assert len(body["probabilities"]) == toy_graph.class_count
    assert sum(body["probabilities"]) == pytest.approx(1.0)
    assert body["subgraph"]["center"] == 0
    assert body["subgraph"]["members"][0] == 0
    assert sorted(body["subgraph"]["members"]) == sorted([0] + toy_graph.neighbors(0))
    assert body["monitor"]["steps"] == 1
    assert body["monitor"]["decision"] == "attacker"


def test_query_steps_accumulate_per_user(flagging_client):
    for node in (1, 2, 3):
        res = flagging_client.post(f"/query/{node}", headers={"X-User-Id": "bob"})
    assert res.json()["monitor"]["steps"] == 3
    res = flagging_client.post("/query/1", headers={"X-User-Id": "carol"})
    assert res.json()["monitor"]["steps"] == 1


def test_query_errors(flagging_client):
    assert flagging_client.post("/query/999", headers={"X-User-Id": "alice"}).status_code == 404
    assert flagging_client.post("/query/0").status_code == 400


def test_user_decision(flagging_client):
    untracked = flagging_client.get("/users/nobody/decision").json()
    assert untracked == {"user_id": "nobody", "steps": 0, "action_probs": None, "decision": None}

    flagging_client.post("/query/4", headers={"X-User-Id": "dave"})
    body = flagging_client.get("/users/dave/decision").json()
    assert body["steps"] == 1
    assert body["decision"] == "attacker"
    assert len(body["action_probs"]) == 2


def test_flagged_requires_key(flagging_client):
    flagging_client.post("/query/5", headers={"X-User-Id": "erin"})
    flagging_client.post("/query/6", headers={"X-User-Id": "abe"})
    assert flagging_client.get("/users/flagged").status_code == 401
    assert flagging_client.get("/users/flagged", headers={"X-API-Key": "wrong"}).status_code == 401
    res = flagging_client.get("/users/flagged", headers=ADMIN)
    assert res.status_code == 200
    assert [u["user_id"] for u in res.json()["users"]] == ["abe", "erin"]


def test_reset_user(flagging_client):
    flagging_client.post("/query/7", headers={"X-User-Id": "frank"})
    assert flagging_client.delete("/users/frank").status_code == 401
    res = flagging_client.delete("/users/frank", headers=ADMIN)
    assert res.status_code == 200
    assert res.json() == {"user_id": "frank", "reset": True}
    assert flagging_client.delete("/users/frank", headers=ADMIN).status_code == 404
    assert flagging_client.get("/users/frank/decision").json()["steps"] == 0


def test_missing_key_configuration(flagging_client, monkeypatch):
    monkeypatch.setattr(settings, "API_KEY", None)
    assert flagging_client.get("/users/flagged", headers=ADMIN).status_code == 500


def test_legitimate_decision(tmp_path, toy_graph, toy_victim, serve):
    client = serve(ServingContext(write_artifacts(tmp_path, toy_graph, toy_victim, policy_bias=[10.0, -10.0])))
    body = client.post("/query/0", headers={"X-User-Id": "gina"}).json()
    assert body["monitor"]["decision"] == "legitimate"
    assert client.get("/users/flagged", headers=ADMIN).json() == {"users": []}


def test_without_detector_monitoring_is_unavailable(tmp_path, toy_graph, toy_victim, serve):
    client = serve(ServingContext(write_artifacts(tmp_path, toy_graph, toy_victim, with_detector=False)))
    res = client.post("/query/0", headers={"X-User-Id": "hank"})
    assert res.status_code == 200
    assert res.json()["monitor"] is None
    assert client.get("/users/hank/decision").status_code == 503
    health = client.get("/health/").json()
    assert health["ok"] is True and health["detector_loaded"] is False
    assert "detector" in health["details"]


def test_without_artifacts(tmp_path, serve):
    client = serve(ServingContext(tmp_path / "empty"))
    assert client.post("/query/0", headers={"X-User-Id": "ivy"}).status_code == 503
    health = client.get("/health/").json()
    assert health["ok"] is False
    assert "graph" in health["details"]
