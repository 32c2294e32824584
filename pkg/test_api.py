"""
HTTP API tests (in-process TestClient)

1. Service info and health
2. Energy estimates from FLOPs and from layer profiles
3. Voxelization of posted events
4. Model info and inference over a checkpoint named by HALSIE_CHECKPOINT
"""

import numpy as np
import pytest
from fastapi.testclient import TestClient

from src.api import app
from src.checkpoint import save_model
from src.network import HalsieModel

client = TestClient(app)

EVENTS = "t_us,x,y,p\n0,1,1,1\n500,2,3,0\n1000,5,7,1\n"


@pytest.fixture
def no_checkpoint(monkeypatch):
    monkeypatch.delenv("HALSIE_CHECKPOINT", raising=False)


@pytest.fixture
def checkpoint(tmp_path, monkeypatch, toy_spec):
    path = tmp_path / "toy.ckpt"
    save_model(HalsieModel(toy_spec).eval(), path)
    monkeypatch.setenv("HALSIE_CHECKPOINT", str(path))
    return path


def test_root_lists_endpoints():
    response = client.get("/")
    assert response.status_code == 200
    body = response.json()
    assert body["service"] == "HALSIE Segmentation API"
    assert "infer" in body["endpoints"]


def test_health():
    response = client.get("/health")
    assert response.status_code == 200
    assert response.json()["status"] == "healthy"


def test_energy_from_published_flops():
    response = client.post("/api/v1/energy/estimate", json={"flops_ann": 3.84e9, "flops_snn": 0.267e9})
    assert response.status_code == 200
    body = response.json()
    assert body["e_total_mj"] == pytest.approx(17.9043)
    assert body["energy_dpj"] == 179_043_000_000


def test_energy_from_layer_profiles():
    payload = {
        "timesteps": 10,
        "layers": [
            {"name": "conv", "kind": "ANN", "M": 147456, "C": 18},
            {"name": "spiking", "kind": "SNN", "M": 147456, "C": 18, "F": 0.1},
        ],
    }
    body = client.post("/api/v1/energy/estimate", json=payload).json()
    assert body["flops_ann"] == 2_654_208
    assert body["flops_snn"] == 2_654_208
    assert len(body["layers"]) == 2


def test_energy_request_needs_a_source():
    assert client.post("/api/v1/energy/estimate", json={}).status_code == 422


def test_voxelize_events():
    response = client.post("/api/v1/voxelize", json={"events_csv": EVENTS, "width": 8, "height": 8, "bins": 4})
    assert response.status_code == 200
    body = response.json()
    assert body["shape"] == [4, 2, 8, 8]
    assert body["events"] == 3
    assert body["on_mass"] == pytest.approx(2.0)
    assert body["off_mass"] == pytest.approx(1.0)


def test_malformed_events_are_rejected_with_line():
    bad = "t_us,x,y,p\n0,1,1,1\n5,99,1,0\n"
    response = client.post("/api/v1/voxelize", json={"events_csv": bad, "width": 8, "height": 8})
    assert response.status_code == 422
    assert "line 3" in response.json()["error"]


def test_model_info_without_checkpoint(no_checkpoint):
    response = client.get("/api/v1/model")
    assert response.status_code == 404
    assert "HALSIE_CHECKPOINT" in response.json()["error"]


def test_missing_checkpoint_file(tmp_path, monkeypatch):
    monkeypatch.setenv("HALSIE_CHECKPOINT", str(tmp_path / "absent.ckpt"))
    assert client.get("/api/v1/model").status_code == 404


def test_model_info(checkpoint, toy_spec):
    body = client.get("/api/v1/model").json()
    assert body["setting"] == "H"
    assert body["parameters"] == HalsieModel(toy_spec).num_params()
    assert body["spec"]["bins"] == toy_spec.bins


def test_infer(checkpoint, toy_spec):
    frame = np.random.default_rng(0).integers(0, 256, (16, 16)).tolist()
    response = client.post("/api/v1/infer", json={"frame": frame, "events_csv": EVENTS})
    assert response.status_code == 200
    body = response.json()
    ids = np.array(body["classes"])
    assert ids.shape == (16, 16)
    assert ids.min() >= 0 and ids.max() < toy_spec.classes
    assert sum(body["histogram"]) == 256


def test_infer_with_wrong_geometry(checkpoint):
    frame = np.zeros((8, 8), dtype=int).tolist()
    response = client.post("/api/v1/infer", json={"frame": frame, "events_csv": EVENTS})
    assert response.status_code == 422
