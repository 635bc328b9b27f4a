import pytest
from fastapi.testclient import TestClient

from main import VERSION, app

client = TestClient(app)

SHORT_CONFIG = {"horizon_t": 6, "horizon_unit": "steps", "m_smooth": 2, "m_triggered": 4, "duration": 6,
                "terminal_samples": 50}


def _doc(controller, task="position_reach", mean=0.1):
    return {"controller": controller, "task": task,
            "solve_time_stats": {"mean": mean, "max": mean, "total": mean},
            "metrics": {"final_position_error": 0.5, "rms_tracking_error": 0.5, "cumulative_cost": 1.0,
                        "max_constraint_violation": 0.0, "tube_containment_rate": 1.0}}


def test_healthz():
    r = client.get("/healthz")
    assert r.status_code == 200
    assert r.json() == {"ok": True, "version": VERSION}


def test_routes_listing():
    routes = client.get("/__routes").json()
    assert {"/healthz", "/runs", "/compare"} <= set(routes)


def test_compare():
    r = client.post("/compare", json={"documents": [_doc("triggered", mean=0.2), _doc("smooth", mean=0.05)]})
    assert r.status_code == 200
    body = r.json()
    assert body["baseline"] == "triggered"
    pct = {row["controller"]: row["percentage"] for row in body["rows"]}
    assert pct["smooth"] == pytest.approx(25.0)


def test_compare_mixed_tasks_is_a_bad_request():
    r = client.post("/compare", json={"documents": [_doc("smooth"), _doc("triggered", task="trajectory_track")]})
    assert r.status_code == 400


def test_run_rejects_unknown_config_keys():
    r = client.post("/runs", json={"controller": "smooth", "config": {"horizon_span": 3}})
    assert r.status_code == 400
    assert r.json()["detail"] == "invalid configuration"


def test_run_rejects_unknown_controller():
    r = client.post("/runs", json={"controller": "mystery"})
    assert r.status_code == 400


@pytest.mark.slow
def test_run_smooth_controller():
    r = client.post("/runs", json={"controller": "smooth", "seed": 2, "config": SHORT_CONFIG,
                                   "include_trace": True})
    assert r.status_code == 200
    body = r.json()
    assert body["metrics"]["controller"] == "smooth"
    assert body["metrics"]["seed"] == 2
    assert body["metrics"]["steps"] == 6
    assert "count" in body["timing"]["solve_time_stats"]
    assert len(body["trace"]) == 6
    assert body["trace"][0]["step"] == 0
