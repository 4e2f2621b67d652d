import pytest
from fastapi.testclient import TestClient

from app.main import app
from app.trajectory import reference_trajectories


@pytest.fixture
def client() -> TestClient:
    return TestClient(app)


def _small_batch(noise: float = 0.0) -> dict:
    return {
        "settings": [{"insertion_speed_mm_s": 1.25, "rpm": 8250.0}],
        "repetitions": 2,
        "base_seed": 3,
        "noise_std_mm": noise,
        "travel_mm": 40.0,
    }


def test_health_reports_solver_and_robot_settings(client):
    response = client.get("/health")
    assert response.status_code == 200
    body = response.json()
    assert body["app"]["status"] == "ok"
    assert body["solver"]["tol"] == 1e-8
    assert body["robot"]["max_curvature_per_mm"] == 0.03


def test_startup_validates_runtime_config(monkeypatch):
    calls = []
    monkeypatch.setattr("app.main.validate_runtime_config", lambda: calls.append("checked"))
    with TestClient(app) as started:
        assert started.get("/health").status_code == 200
    assert calls == ["checked"]


def test_drill_returns_rows_and_summary(client):
    payload = {
        "trajectory": reference_trajectories()["trajectory-2"].model_dump(mode="json"),
        "batch": _small_batch(),
    }
    response = client.post("/drill", json=payload)
    assert response.status_code == 200, response.text
    body = response.json()
    assert [row["trial_id"] for row in body["rows"]] == ["trial-01", "trial-02"]
    assert body["summary"]["trial_count"] == 2
    assert body["summary"]["tracking_error_band_pct"] is None
    assert body["rows"][0]["radius_error_vs_guide_pct"] == pytest.approx(0.0, abs=1e-6)


def test_drill_straight_plan_is_unprocessable(client):
    payload = {
        "trajectory": reference_trajectories()["trajectory-1"].model_dump(mode="json"),
        "batch": _small_batch(),
    }
    assert client.post("/drill", json=payload).status_code == 422


def test_drill_rejects_malformed_batch(client):
    payload = {
        "trajectory": reference_trajectories()["trajectory-2"].model_dump(mode="json"),
        "batch": {"settings": []},
    }
    assert client.post("/drill", json=payload).status_code == 422


def test_plan_needs_exactly_one_volume_source(client, small_phantom_spec):
    assert client.post("/plan", json={}).status_code == 422
    both = {"phantom": small_phantom_spec.model_dump(mode="json"), "volume_path": "results/phantom.json"}
    assert client.post("/plan", json=both).status_code == 422


def test_plan_missing_volume_file(client, tmp_path):
    response = client.post("/plan", json={"volume_path": str(tmp_path / "nope.json")})
    assert response.status_code == 422


def test_plan_with_no_feasible_candidate(client, small_phantom_spec):
    payload = {
        "phantom": small_phantom_spec.model_dump(mode="json"),
        "space": {"entry_mm": [1.0, 11.0, 9.0], "curvatures_per_mm": [0.0]},
    }
    response = client.post("/plan", json=payload)
    assert response.status_code == 409
    detail = response.json()["detail"]
    assert list(detail["reasons"]) == ["k0.000000-s25-r0"]
