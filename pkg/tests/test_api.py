from pathlib import Path

from fastapi.testclient import TestClient

from app.main import create_app
from app.sequence import frame_path
from app.storage import RunStore
from app.synthetic import default_intrinsics, synthesize_sequence


def build_client(tmp_path: Path) -> TestClient:
    return TestClient(create_app(RunStore(db_path=str(tmp_path / "runs.db"))))


def build_sequence(tmp_path: Path) -> Path:
    root = tmp_path / "seq"
    synthesize_sequence(root, seed=3, n_objects=3, n_frames=4, intrinsics=default_intrinsics(64, 48))
    return root


def test_health(tmp_path):
    response = build_client(tmp_path).get("/health")
    assert response.status_code == 200
    assert response.json()["ok"] is True and response.json()["mode"] == "online"


def test_run_lifecycle(tmp_path):
    client = build_client(tmp_path)
    sequence = build_sequence(tmp_path)
    response = client.post("/runs", json={"sequence_dir": str(sequence), "config": {"prune_threshold": 1.6}})
    assert response.status_code == 200
    summary = response.json()
    assert summary["state"] == "COMPLETED" and summary["frames"] == 4
    assert summary["instances"] >= 1

    run = client.get(f"/runs/{summary['run_id']}").json()
    assert run["status"] == "COMPLETED"
    assert run["export"]["provenance"]["overrides"] == {"prune_threshold": 1.6}
    assert len(run["export"]["instances"]) == summary["instances"]

    events = client.get(f"/runs/{summary['run_id']}/events").json()["events"]
    reasons = [e["details"].get("reason") for e in events if e["action"] == "state_transition"]
    assert reasons == ["stream_opened", "stream_closed"]
    assert [r["run_id"] for r in client.get("/runs").json()["runs"]] == [summary["run_id"]]


def test_unknown_run_is_404(tmp_path):
    client = build_client(tmp_path)
    assert client.get("/runs/missing").status_code == 404
    assert client.get("/runs/missing/events").status_code == 404


def test_invalid_config_is_422(tmp_path):
    client = build_client(tmp_path)
    response = client.post("/runs", json={"sequence_dir": str(tmp_path), "config": {"nms_iou": 0.0}})
    assert response.status_code == 422
    assert client.get("/runs").json()["runs"] == []


def test_broken_sequence_is_recorded_as_failed(tmp_path):
    client = build_client(tmp_path)
    sequence = build_sequence(tmp_path)
    frame_path(sequence, "depth", 2, "png").unlink()
    response = client.post("/runs", json={"sequence_dir": str(sequence)})
    assert response.status_code == 500
    run_id = response.json()["detail"]["run_id"]
    assert client.get(f"/runs/{run_id}").json()["status"] == "FAILED"


def test_config_cannot_name_a_profile_file(tmp_path):
    client = build_client(tmp_path)
    sequence = build_sequence(tmp_path)
    profile = tmp_path / "profile.json"
    profile.write_text('{"prune_threshold": 0.1}')
    response = client.post("/runs", json={"sequence_dir": str(sequence), "config": {"path": str(profile)}})
    assert response.status_code == 422
    assert "path" in response.json()["detail"]
    assert client.get("/runs").json()["runs"] == []
