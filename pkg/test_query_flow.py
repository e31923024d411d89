"""
Walk-through of the query/monitor flow against an in-process server.
Run with pytest, or directly (``python test_query_flow.py``) to exercise the
artifacts under ATOM_ARTIFACT_DIR.
"""
import sys

from fastapi.testclient import TestClient

from app import settings
from app.main import app
from app.services.graph_core import synthetic_two_community
from app.services.monitor import ServingContext, set_serving_context
from app.services.victim_model import VictimTrainConfig, train_victim
from tests.conftest import write_artifacts

API_KEY = settings.API_KEY or "dev-secret-key"
USER_ID = "walkthrough-user"


def step_health(client: TestClient) -> bool:
    print("\n=== Step 1: Health ===")
    res = client.get("/health/")
    body = res.json()
    print(f"Status: {res.status_code} graph={body['graph_loaded']} victim={body['victim_loaded']} "
          f"detector={body['detector_loaded']}")
    if not body["ok"]:
        print(f"❌ Artifacts missing: {body['details']}")
    return body["ok"]


def step_queries(client: TestClient, nodes) -> dict:
    print("\n=== Step 2: Querying nodes ===")
    last = None
    for node in nodes:
        res = client.post(f"/query/{node}", headers={"X-User-Id": USER_ID})
        if res.status_code != 200:
            print(f"❌ Query {node} failed: {res.text}")
            return {}
        last = res.json()
        monitor = last["monitor"] or {}
        print(f"   node {node}: label {last['label']} "
              f"ego {len(last['subgraph']['members'])} nodes, decision {monitor.get('decision')}")
    print("✅ Queries answered")
    return last


def step_decision(client: TestClient) -> dict:
    print("\n=== Step 3: Detector decision ===")
    res = client.get(f"/users/{USER_ID}/decision")
    print(f"Status: {res.status_code}")
    if res.status_code == 200:
        print(f"   {res.json()}")
    return res.json() if res.status_code == 200 else {}


def step_admin(client: TestClient, key: str) -> bool:
    print("\n=== Step 4: Flagged users and reset ===")
    headers = {"X-API-Key": key}
    res = client.get("/users/flagged", headers=headers)
    print(f"Flagged status: {res.status_code}")
    if res.status_code != 200:
        print(f"❌ Error: {res.text}")
        return False
    print(f"   flagged: {[u['user_id'] for u in res.json()['users']]}")
    res = client.delete(f"/users/{USER_ID}", headers=headers)
    print(f"Reset status: {res.status_code}")
    return res.status_code == 200


def run_flow(client: TestClient, nodes, key: str) -> bool:
    if not step_health(client):
        return False
    if not step_queries(client, nodes):
        return False
    step_decision(client)
    ok = step_admin(client, key)
    print("\n✅ Flow finished" if ok else "\n❌ Flow failed")
    return ok


def test_query_flow(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "API_KEY", "flow-key")
    g = synthetic_two_community(node_count=24, feature_dim=4, p_in=0.3, p_out=0.05, seed=3)
    victim = train_victim(g, list(range(0, 24, 2)), VictimTrainConfig(epochs=50, seed=3))
    write_artifacts(tmp_path, g, victim, policy_bias=[-10.0, 10.0])
    set_serving_context(ServingContext(tmp_path))
    try:
        client = TestClient(app)
        assert run_flow(client, [0, 1, 2, 3], "flow-key")
        assert client.get(f"/users/{USER_ID}/decision").json()["steps"] == 0
    finally:
        set_serving_context(None)


if __name__ == "__main__":
    context = ServingContext(settings.ARTIFACT_DIR)
    set_serving_context(context)
    count = context.graph.node_count if context.graph is not None else 0
    sys.exit(0 if run_flow(TestClient(app), list(range(min(count, 5))), API_KEY) else 1)
