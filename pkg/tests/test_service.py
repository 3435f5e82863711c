"""HTTP surface: parity with in-process calls, declared error codes, determinism."""

import dataclasses
import json

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient

from jade import pipeline as P
from jade.autoencoder import AEConfig
from jade.service import create_app, load_service_state

J, D_H, N = 2, 4, 64


@pytest.fixture(scope="module")
def served(tmp_path_factory):
    """Tiny trained checkpoints behind a TestClient."""
    out = tmp_path_factory.mktemp("svc")
    cfg = dataclasses.replace(
        P.desk_profile(),
        ae=AEConfig(n=N, j=J, d_z=8, d_h=D_H, d_g=8, l_blocks=1, l_dec_blocks=1,
                    heads=2, mlp_ratio=2.0, point_hidden=(8, 8), token_hidden=8),
        diffusion=P.DiffusionConfig(timesteps=6, width=8, layers=1, heads=2, mlp_ratio=2.0),
        optimizer=P.OptimConfig(batch_size=4, steps=15, checkpoint_every=0),
        seed=13,
    )
    ds = P.synth_mesh_dataset(2, 4, seed=6, j=2, m=4)
    P.train_autoencoder(cfg, ds, out_dir=out)
    P.train_extrinsic_ddpm(cfg, out / "ae_final.jck", ds, out_dir=out)
    P.train_intrinsic_ddpm(cfg, out / "ae_final.jck", ds, out_dir=out)
    state = load_service_state(out / "ae_final.jck", out / "extrinsic_final.jck",
                               out / "intrinsic_final.jck")
    client = TestClient(create_app(state))
    return {"client": client, "state": state, "ds": ds}


def _some_latents(served, row=0):
    ds = served["ds"]
    return P.encode_vertices(served["state"].ae_model, ds.vertices[row])


def test_health_ok(served):
    r = served["client"].get("/health")
    assert r.status_code == 200
    assert r.json() == {"status": "ok"}


def test_health_before_load_is_503():
    client = TestClient(create_app(None), raise_server_exceptions=False)
    r = client.get("/health")
    assert r.status_code == 503
    assert r.json() == {"status": "loading"}
    assert client.post("/encode", json={"mesh": {"vertices": []}}).status_code == 503


def test_model_info_matches_checkpoint(served):
    info = served["client"].get("/model-info").json()
    assert info["j"] == J and info["d_h"] == D_H and info["n"] == N
    assert info["parents"] == [-1, 0]
    assert info["timesteps"] == 6


def test_encode_parity_with_in_process(served):
    ds = served["ds"]
    r = served["client"].post("/encode", json={"mesh": {"vertices": ds.vertices[1].tolist()}})
    assert r.status_code == 200
    got = r.json()["latents"]
    pair = _some_latents(served, 1)
    np.testing.assert_allclose(np.asarray(got["e"]), pair.e, atol=1e-6)
    np.testing.assert_allclose(np.asarray(got["h"]), pair.h, atol=1e-6)


def test_encode_wrong_vertex_count(served):
    r = served["client"].post("/encode", json={"mesh": {"vertices": [[0.0, 0.0, 0.0]] * 10}})
    assert r.status_code == 400
    assert r.json() == {"error": "vertex_count"}


def test_encode_non_finite_is_422(served):
    verts = [[0.0, 0.0, 0.0]] * N
    verts[3] = [float("nan"), 0.0, 0.0]
    # python-style NaN literal in the body; strict client serializers refuse it
    body = json.dumps({"mesh": {"vertices": verts}})
    r = served["client"].post("/encode", content=body,
                              headers={"content-type": "application/json"})
    assert r.status_code == 422
    assert r.json() == {"error": "non_finite"}


def test_encode_malformed_body(served):
    assert served["client"].post("/encode", json={"mesh": 3}).status_code == 400
    assert served["client"].post("/encode", json={"mesh": {"vertices": [[1, 2], [3]]}}).status_code == 400
    assert served["client"].post("/encode", content=b"{not json").status_code == 400


def test_decode_parity_and_determinism(served):
    pair = _some_latents(served)
    body = {"latents": {"e": pair.e.tolist(), "h": pair.h.tolist()}}
    r1 = served["client"].post("/decode", json=body)
    r2 = served["client"].post("/decode", json=body)
    assert r1.status_code == 200
    assert r1.json() == r2.json()
    verts = np.asarray(r1.json()["mesh"]["vertices"])
    direct = P.decode_latents(served["state"].ae_model, pair)
    np.testing.assert_allclose(verts, direct, atol=1e-6)


def test_decode_conditioning_is_live(served):
    pair = _some_latents(served)
    base = {"latents": {"e": pair.e.tolist(), "h": pair.h.tolist()}}
    moved_e = pair.e.copy()
    moved_e[1, 0] += 0.1
    moved = {"latents": {"e": moved_e.tolist(), "h": pair.h.tolist()}}
    a = served["client"].post("/decode", json=base).json()
    b = served["client"].post("/decode", json=moved).json()
    assert a != b


def test_decode_shape_mismatch(served):
    pair = _some_latents(served)
    bad = {"latents": {"e": pair.e.tolist(), "h": pair.h[:, :2].tolist()}}
    r = served["client"].post("/decode", json=bad)
    assert r.status_code == 400
    assert r.json() == {"error": "shape"}
    assert served["client"].post("/decode", json={}).status_code == 400


def test_encode_decode_round_trip(served):
    ds = served["ds"]
    client = served["client"]
    enc = client.post("/encode", json={"mesh": {"vertices": ds.vertices[2].tolist()}}).json()
    dec = client.post("/decode", json=enc)
    assert dec.status_code == 200
    verts = np.asarray(dec.json()["mesh"]["vertices"])
    pair = _some_latents(served, 2)
    direct = P.decode_latents(served["state"].ae_model, pair)
    np.testing.assert_allclose(verts, direct, atol=1e-5)


def test_sample_intrinsics_echoes_e(served):
    e = _some_latents(served).e.tolist()
    r = served["client"].post("/sample_intrinsics", json={"e": e, "seed": 3})
    assert r.status_code == 200
    got = r.json()["latents"]
    assert got["e"] == e  # verbatim echo, not a float32 round trip
    assert np.asarray(got["h"]).shape == (J, D_H)


def test_sample_intrinsics_deterministic_per_seed(served):
    e = _some_latents(served).e.tolist()
    a = served["client"].post("/sample_intrinsics", json={"e": e, "seed": 5}).json()
    b = served["client"].post("/sample_intrinsics", json={"e": e, "seed": 5}).json()
    c = served["client"].post("/sample_intrinsics", json={"e": e, "seed": 6}).json()
    assert a == b
    assert a["latents"]["h"] != c["latents"]["h"]


def test_sample_intrinsics_matches_in_process(served):
    from jade.diffusion import sample_intrinsics_batch
    st = served["state"]
    e = _some_latents(served).e
    r = served["client"].post("/sample_intrinsics", json={"e": e.tolist(), "seed": 11})
    h_direct = sample_intrinsics_batch(st.int_model, e[None], st.int_schedule, st.stats,
                                       torch.Generator().manual_seed(11))[0]
    np.testing.assert_allclose(np.asarray(r.json()["latents"]["h"]), h_direct, atol=1e-6)


def test_sample_intrinsics_bad_seed(served):
    e = _some_latents(served).e.tolist()
    for seed in ("3", 1.5, True, None):
        r = served["client"].post("/sample_intrinsics", json={"e": e, "seed": seed})
        assert r.status_code == 400
        assert r.json() == {"error": "seed"}


def test_sample_intrinsics_nan_e(served):
    e = _some_latents(served).e.tolist()
    e[0][0] = float("nan")
    r = served["client"].post("/sample_intrinsics",
                              content=json.dumps({"e": e, "seed": 0}),
                              headers={"content-type": "application/json"})
    assert r.status_code == 422


def test_sample_count_and_determinism(served):
    client = served["client"]
    r = client.post("/sample", json={"count": 3, "seed": 2})
    assert r.status_code == 200
    latents = r.json()["latents"]
    assert len(latents) == 3
    for item in latents:
        assert np.asarray(item["e"]).shape == (J, 3)
        assert np.asarray(item["h"]).shape == (J, D_H)
    again = client.post("/sample", json={"count": 3, "seed": 2})
    assert r.json() == again.json()
    other = client.post("/sample", json={"count": 3, "seed": 9})
    assert r.json() != other.json()


def test_sample_matches_in_process(served):
    from jade.diffusion import cascade_sample
    st = served["state"]
    r = served["client"].post("/sample", json={"count": 2, "seed": 4})
    _, pairs = cascade_sample(st.ext_model, st.int_model, st.ae_model,
                              st.ext_schedule, st.int_schedule, st.stats, 2,
                              torch.Generator().manual_seed(4),
                              torch.Generator().manual_seed(5))
    got = r.json()["latents"]
    for item, pair in zip(got, pairs):
        np.testing.assert_allclose(np.asarray(item["e"]), pair.e, atol=1e-6)
        np.testing.assert_allclose(np.asarray(item["h"]), pair.h, atol=1e-6)


def test_sample_bad_inputs(served):
    client = served["client"]
    assert client.post("/sample", json={"count": 2, "seed": "x"}).json() == {"error": "seed"}
    assert client.post("/sample", json={"count": 0, "seed": 1}).json() == {"error": "count"}
    assert client.post("/sample", json={"count": 1.5, "seed": 1}).json() == {"error": "count"}
    assert client.post("/sample", json={"seed": True}).status_code == 400


def test_interpolate_alpha_zero_echoes_from(served):
    a, b = _some_latents(served, 0), _some_latents(served, 3)
    body = {"from": {"e": a.e.tolist(), "h": a.h.tolist()},
            "to": {"e": b.e.tolist(), "h": b.h.tolist()},
            "alpha": 0.0, "which": "both"}
    r = served["client"].post("/interpolate", json=body)
    assert r.status_code == 200
    got = r.json()["latents"]
    np.testing.assert_allclose(np.asarray(got["e"]), a.e, atol=1e-6)
    np.testing.assert_allclose(np.asarray(got["h"]), a.h, atol=1e-6)


def test_interpolate_which_masks_halves(served):
    a, b = _some_latents(served, 0), _some_latents(served, 3)
    body = {"from": {"e": a.e.tolist(), "h": a.h.tolist()},
            "to": {"e": b.e.tolist(), "h": b.h.tolist()},
            "alpha": 1.0, "which": "intrinsics"}
    got = served["client"].post("/interpolate", json=body).json()["latents"]
    np.testing.assert_allclose(np.asarray(got["e"]), a.e, atol=1e-6)  # skeleton pinned at A
    np.testing.assert_allclose(np.asarray(got["h"]), b.h, atol=1e-6)


def test_interpolate_alpha_out_of_range(served):
    a = _some_latents(served)
    body = {"from": {"e": a.e.tolist(), "h": a.h.tolist()},
            "to": {"e": a.e.tolist(), "h": a.h.tolist()}}
    for alpha in (-0.1, 1.1, "half", None, True):
        r = served["client"].post("/interpolate", json={**body, "alpha": alpha})
        assert r.status_code == 400
        assert r.json() == {"error": "alpha"}
    r = served["client"].post("/interpolate", json={**body, "alpha": 0.5, "which": "all"})
    assert r.json() == {"error": "which"}


def test_request_counter_increases(served):
    before = served["state"].request_count
    served["client"].get("/health")
    served["client"].get("/model-info")
    assert served["state"].request_count == before + 2


def test_static_frontend_mount(served, tmp_path):
    (tmp_path / "index.html").write_text("<!doctype html><title>editor</title>")
    client = TestClient(create_app(served["state"], frontend_dir=tmp_path))
    r = client.get("/")
    assert r.status_code == 200
    assert "editor" in r.text
    assert client.get("/health").json() == {"status": "ok"}  # API wins over the mount
