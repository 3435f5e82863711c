"""End-to-end checks of the trained system at desk scale.

Two real training runs back most of these tests: a 64-sample run that the
autoencoder must overfit, and a 1000-sample run that also trains both
denoisers of the cascade. They are module fixtures, so the suite spends
most of its half hour inside the first test that touches each. Everything
else is exact math identities or statistical bounds with stated tolerances.
"""

import csv
import dataclasses
import io
import json
import math
import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from jade import autoencoder as A
from jade import diffusion as D
from jade import geometry as G
from jade import metrics as M
from jade import numerics as N
from jade import pipeline as P
from jade import cli

JOINTS, RINGS = 8, 8


def mean_template_height(seed: int, subjects: int) -> float:
    heights = [
        G.body_height(G.synth_subject(G.subject_seed(seed, s), JOINTS, RINGS).template_vertices)
        for s in range(subjects)
    ]
    return float(np.mean(heights))


# -- training fixtures -----------------------------------------------------

@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    """64-sample desk run: train on the 60-sample split, hold out 4 poses."""
    out = tmp_path_factory.mktemp("overfit")
    dataset = P.synth_mesh_dataset(4, 16, seed=11, j=JOINTS, m=RINGS)
    train_idx, held_idx = P.held_out_split(dataset)
    config = P.desk_profile()
    start = time.monotonic()
    result = P.train_autoencoder(config, P.dataset_subset(dataset, train_idx), out_dir=out)
    minutes = (time.monotonic() - start) / 60.0
    return SimpleNamespace(
        dataset=dataset, train_idx=train_idx, held_idx=held_idx, config=config,
        model=result.model, result=result, stats=result.stats,
        height=mean_template_height(11, 4), train_minutes=minutes,
    )


@pytest.fixture(scope="module")
def main_run(tmp_path_factory):
    """1000-sample desk run: autoencoder plus both denoiser stages."""
    out = tmp_path_factory.mktemp("main")
    dataset = P.synth_mesh_dataset(10, 100, seed=3, j=JOINTS, m=RINGS)
    train_idx, held_idx = P.held_out_split(dataset)
    train_ds = P.dataset_subset(dataset, train_idx)
    config = P.desk_profile()
    P.train_autoencoder(config, train_ds, out_dir=out)
    ae_path = out / "ae_final.jck"

    ddpm_config = dataclasses.replace(config, optimizer=dataclasses.replace(
        config.optimizer, batch_size=256, steps=10000, checkpoint_every=0))
    start = time.monotonic()
    P.train_extrinsic_ddpm(ddpm_config, ae_path, train_ds, out_dir=out)
    P.train_intrinsic_ddpm(ddpm_config, ae_path, train_ds, out_dir=out)
    ddpm_hours = (time.monotonic() - start) / 3600.0

    ae_model, ae_ckpt = P.load_autoencoder(ae_path)
    ext_model, _ = P.load_denoiser(out / "extrinsic_final.jck", "extrinsic")
    int_model, _ = P.load_denoiser(out / "intrinsic_final.jck", "intrinsic")
    schedule = D.linear_schedule(config.diffusion.timesteps, config.diffusion.beta_start,
                                 config.diffusion.beta_end)
    return SimpleNamespace(
        dataset=dataset, train_idx=train_idx, held_idx=held_idx, config=config,
        ae_model=ae_model, ext_model=ext_model, int_model=int_model,
        stats=ae_ckpt.latent_stats, schedule=schedule, ddpm_hours=ddpm_hours,
        height=mean_template_height(3, 10),
        ae_path=ae_path, ext_path=out / "extrinsic_final.jck",
        int_path=out / "intrinsic_final.jck",
    )


# -- exact schedule math ---------------------------------------------------

def test_schedule_identity():
    start = time.monotonic()
    s = D.linear_schedule(1000, 1e-4, 0.02)
    assert s.beta[0] == 1e-4
    assert s.beta[-1] == 0.02
    direct = np.cumprod(1.0 - s.beta)
    assert s.alpha_bar.dtype == np.float64
    assert np.abs(s.alpha_bar - direct).max() <= 1e-10
    assert time.monotonic() - start < 1.0


def test_forward_process_equivalence():
    # closed-form marginal vs iterating the one-step kernel, 1e5 draws each
    start = time.monotonic()
    s = D.linear_schedule(10, 1e-4, 0.02)
    n = 100_000
    g = torch.Generator().manual_seed(3)
    x0 = torch.ones(n)
    closed = D.q_sample(x0, 10, torch.randn(n, generator=g), s)
    x = x0.clone()
    for t in range(1, 11):
        beta = s.beta[t - 1]
        x = math.sqrt(1 - beta) * x + math.sqrt(beta) * torch.randn(n, generator=g)
    mean_true = math.sqrt(s.alpha_bar[9])
    var_true = 1 - s.alpha_bar[9]
    se_mean = 3 * math.sqrt(var_true / n)
    se_var = 3 * var_true * math.sqrt(2.0 / (n - 1))
    for route in (closed, x):
        assert abs(route.mean().item() - mean_true) < se_mean
        assert abs(route.var().item() - var_true) < se_var
    assert time.monotonic() - start < 30.0


# -- overfit run -----------------------------------------------------------

def test_overfit_reconstruction(overfit_run):
    run = overfit_run
    assert run.result.steps <= 5000
    assert run.train_minutes < 30.0
    rec = P.reconstruction_mpvpe(run.model, run.dataset, run.train_idx)
    print(f"train mpvpe {rec / run.height:.2%} of body height "
          f"({run.result.steps} steps, {run.train_minutes:.1f} min)")
    assert rec < 0.02 * run.height


def test_gradient_correctness():
    start = time.monotonic()
    cfg = A.AEConfig(n=8, j=2, d_z=8, d_h=4, d_g=8, l_blocks=1, l_dec_blocks=1,
                     heads=2, mlp_ratio=2.0, point_hidden=(8, 8), token_hidden=8)
    model = A.build_autoencoder(cfg, seed=18, dtype=torch.float64)
    g = torch.Generator().manual_seed(1)
    v1 = torch.randn(2, cfg.n, 3, generator=g, dtype=torch.float64)
    j1 = torch.randn(2, cfg.j, 3, generator=g, dtype=torch.float64)
    v2 = torch.randn(2, cfg.n, 3, generator=g, dtype=torch.float64)
    j2 = torch.randn(2, cfg.j, 3, generator=g, dtype=torch.float64)
    # eps 1e-6: the shared pos parameter carries enough curvature that 1e-5
    # leaves visible truncation error in the central differences
    err = N.grad_check(
        lambda: A.loss_total(model, v1, j1, v2, j2, N.seeded_generator(5))[0],
        dict(model.named_parameters()), eps=1e-6)
    assert err <= 1e-4

    s = D.linear_schedule(8, 1e-3, 0.05)
    ext = D.build_extrinsic_denoiser(
        D.DenoiserConfig(j=4, d=8, layers=1, heads=2, mlp_ratio=2.0), 9, torch.float64)
    g = torch.Generator().manual_seed(17)
    e0 = torch.randn(2, 4, 3, generator=g).double()
    eps_e = torch.randn(2, 4, 3, generator=g).double()
    err = N.grad_check(lambda: D.ddpm_loss_extrinsic(e0, 5, eps_e, ext, s),
                       dict(ext.named_parameters()))
    assert err <= 1e-4

    intr = D.build_intrinsic_denoiser(
        D.DenoiserConfig(j=4, d=8, layers=1, heads=2, mlp_ratio=2.0, d_h=6), 10, torch.float64)
    # zero-init leaves conditioning inert; randomize it so its gradients count
    gmod = N.seeded_generator(99)
    with torch.no_grad():
        for name, p in intr.named_parameters():
            if "modulation" in name or "final_mod" in name:
                p.copy_(torch.randn(p.shape, generator=gmod, dtype=p.dtype) * 0.2)
    g = torch.Generator().manual_seed(18)
    h0 = torch.randn(2, 4, 6, generator=g).double()
    e = torch.randn(2, 4, 3, generator=g).double()
    eps_h = torch.randn(2, 4, 6, generator=g).double()
    err = N.grad_check(lambda: D.ddpm_loss_intrinsic(h0, e, 5, eps_h, intr, s),
                       dict(intr.named_parameters()))
    assert err <= 1e-4
    assert time.monotonic() - start < 300.0


def test_cross_reconstruction_bound(overfit_run):
    # 16 held pairs: each held pose against the first four train poses of
    # its subject; swapping intrinsics must not double the direct error
    run = overfit_run
    ds = run.dataset
    direct, cross = [], []
    for a in run.held_idx:
        subject_rows = run.train_idx[ds.subject_ids[run.train_idx] == ds.subject_ids[a]]
        partners = subject_rows[np.argsort(ds.pose_ids[subject_rows])][:4]
        e_a, h_a = P.encode_dataset(run.model, ds, [a])
        for b in partners:
            _, h_b = P.encode_dataset(run.model, ds, [b])
            direct.append(M.mpvpe(ds.vertices[a], P.decode_latents(
                run.model, P.LatentPair(e=e_a[0], h=h_a[0]))))
            cross.append(M.mpvpe(ds.vertices[a], P.decode_latents(
                run.model, P.LatentPair(e=e_a[0], h=h_b[0]))))
    assert len(direct) == 16
    ratio = float(np.mean(cross)) / float(np.mean(direct))
    print(f"cross/direct mpvpe ratio {ratio:.3f} over 16 pairs")
    assert ratio <= 2.0


def test_joint_head_fidelity(overfit_run):
    run = overfit_run
    e_held, _ = P.encode_dataset(run.model, run.dataset, run.held_idx)
    gt = run.dataset.joints[run.held_idx]
    err = float(np.linalg.norm(e_held - gt, axis=-1).mean())
    print(f"held-out joint error {err / run.height:.2%} of body height")
    assert err < 0.05 * run.height


# -- cascade run -----------------------------------------------------------

def test_cascade_conditioning(main_run):
    run = main_run
    assert run.ddpm_hours <= 2.0
    e_held, _ = P.encode_dataset(run.ae_model, run.dataset, run.held_idx)
    assert len(e_held) == 100
    h = D.sample_intrinsics_batch(run.int_model, e_held, run.schedule, run.stats,
                                  torch.Generator().manual_seed(0))
    with torch.no_grad():
        verts = run.ae_model.decode(torch.from_numpy(e_held), torch.from_numpy(h)).numpy()
    e_back, _ = P.encode_vertices_batch(run.ae_model, verts)
    err = float(np.linalg.norm(e_back - e_held, axis=-1).mean())
    print(f"re-encoded joint error {err / run.height:.2%} of body height "
          f"(denoisers took {run.ddpm_hours:.2f} h)")
    assert err < 0.10 * run.height


def test_generation_statistics(main_run):
    run = main_run
    points, pairs = D.cascade_sample(
        run.ext_model, run.int_model, run.ae_model, run.schedule, run.schedule,
        run.stats, 500, torch.Generator().manual_seed(1), torch.Generator().manual_seed(2))
    gen_e = np.stack([p.e for p in pairs]).astype(np.float64)

    train_joints = run.dataset.joints[run.train_idx].astype(np.float64)
    bl_gen = G.bone_lengths(gen_e, run.dataset.parents).mean(axis=0)
    bl_train = G.bone_lengths(train_joints, run.dataset.parents).mean(axis=0)
    rel = np.abs(bl_gen - bl_train) / bl_train
    print(f"per-bone mean length error {np.array2string(rel, precision=3)}")
    assert rel.max() < 0.10

    apd_gen = M.apd(list(gen_e))
    apd_held = M.apd(list(run.dataset.joints[run.held_idx].astype(np.float64)))
    print(f"apd generated {apd_gen:.4f} vs held-out {apd_held:.4f}")
    assert 0.7 * apd_held <= apd_gen <= 1.3 * apd_held

    # intersection rate is reported, not bounded, at this scale
    si = [M.self_intersection_rate(G.TriangleMesh(points[i].astype(np.float64),
                                                  run.dataset.faces))
          for i in range(100)]
    print(f"self-intersection rate over 100 generated meshes: {np.mean(si):.2f}%")


# -- metric and EMA identities ---------------------------------------------

def test_metric_oracles():
    rng = np.random.default_rng(41)
    for _ in range(100):
        k = int(rng.integers(2, 9))
        x, y = rng.normal(size=(k, 3)), rng.normal(size=(k, 3))
        expect = sum(float(np.sqrt(((x[i] - y[i]) ** 2).sum())) for i in range(k)) / k
        assert M.mpvpe(x, y) == pytest.approx(expect, abs=1e-9)

    for _ in range(100):
        count = int(rng.integers(2, 7))
        samples = [rng.normal(size=(5, 3)) for _ in range(count)]
        assert M.apd(samples) == pytest.approx(M.apd_brute(samples), abs=1e-9)

    for trial in range(100):
        n_faces = int(rng.integers(4, 10))
        verts = rng.uniform(-1, 1, size=(n_faces * 3, 3))
        faces = np.arange(n_faces * 3).reshape(n_faces, 3)
        mesh = G.TriangleMesh(verts, faces)
        fast = M.self_intersection_rate(mesh, broad_phase=True)
        brute = M.self_intersection_rate(mesh, broad_phase=False)
        assert fast == pytest.approx(brute, abs=1e-9), f"trial {trial} disagreed"

    # face 0 pierced by face 2, face 1 clean: exactly two thirds intersect
    mesh = G.TriangleMesh(
        np.array([
            [0, 0, 0], [1, 0, 0], [0, 1, 0],
            [100, 0, 0], [101, 0, 0], [100, 1, 0],
            [0.2, 0.2, -0.5], [0.3, 0.2, 0.5], [0.2, 0.3, 0.5],
        ], dtype=np.float64),
        np.array([[0, 1, 2], [3, 4, 5], [6, 7, 8]]),
    )
    assert M.self_intersection_rate(mesh) == pytest.approx(200.0 / 3.0, abs=1e-9)


def test_ema_closed_form():
    g = torch.Generator().manual_seed(7)
    params = {
        "a": torch.randn(3, 4, generator=g, dtype=torch.float64),
        "b": torch.randn(5, generator=g, dtype=torch.float64),
    }
    s0 = {k: torch.randn(v.shape, generator=g, dtype=torch.float64)
          for k, v in params.items()}
    ema = D.EmaState(shadow={k: v.clone() for k, v in s0.items()}, ratio=0.999)
    k_steps = 10_000
    for _ in range(k_steps):
        D.ema_update(ema, params)
    decay = 0.999 ** k_steps
    for name, p in params.items():
        expect = p + (s0[name] - p) * decay
        assert (ema.shadow[name] - expect).abs().max().item() <= 1e-9


# -- ablation grid ---------------------------------------------------------

def test_ablation_grid(tmp_path, capsys):
    dataset = P.synth_mesh_dataset(2, 6, seed=1, j=2, m=4)
    data_dir = tmp_path / "data"
    P.save_mesh_dataset(dataset, data_dir)
    cfg = {
        "ae": {"n": 64, "j": 2, "d_z": 8, "d_h": 4, "d_g": 8, "l_blocks": 1,
               "l_dec_blocks": 1, "heads": 2, "mlp_ratio": 2.0,
               "point_hidden": [8, 8], "token_hidden": 8},
        "optimizer": {"batch_size": 4, "steps": 100, "checkpoint_every": 0},
    }
    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(json.dumps(cfg))
    out_path = tmp_path / "ablation.csv"
    code = cli.main(["ablate", "--grid", "table4", "--config", str(cfg_path),
                     "--data", str(data_dir), "--steps", "100",
                     "--out", str(out_path)])
    capsys.readouterr()
    assert code == 0

    parsed = list(csv.reader(io.StringIO(out_path.read_text())))
    assert parsed[0] == list(P.ABLATION_CSV_HEADER)
    rows = parsed[1:]
    expected = [f"dim{d}" for d in P.ABLATION_DIMS]
    expected += ["cond_add", "cond_cross_attention", "no_joint_loss", "no_cross_loss"]
    assert [r[0] for r in rows] == expected
    for row in rows:
        head, tail = float(row[5]), float(row[6])
        assert tail < head, f"{row[0]} did not improve: {head} -> {tail}"


# -- service parity --------------------------------------------------------

@pytest.fixture(scope="module")
def service_client(main_run):
    from fastapi.testclient import TestClient

    from jade.service import create_app, load_service_state
    state = load_service_state(main_run.ae_path, main_run.ext_path, main_run.int_path)
    return TestClient(create_app(state)), state


def test_service_parity(main_run, service_client):
    client, state = service_client
    run = main_run
    cfg = run.config.ae

    assert client.get("/health").json() == {"status": "ok"}
    info = client.get("/model-info").json()
    assert (info["j"], info["d_h"], info["n"]) == (cfg.j, cfg.d_h, cfg.n)

    row = int(run.held_idx[0])
    verts = run.dataset.vertices[row]
    got = client.post("/encode", json={"mesh": {"vertices": verts.tolist()}}).json()
    want = P.encode_vertices(state.ae_model, verts.astype(np.float64))
    assert np.abs(np.asarray(got["latents"]["e"]) - want.e).max() <= 1e-6
    assert np.abs(np.asarray(got["latents"]["h"]) - want.h).max() <= 1e-6

    dec = client.post("/decode", json={"latents": got["latents"]}).json()
    direct = P.decode_latents(state.ae_model, P.LatentPair(
        e=np.asarray(got["latents"]["e"], dtype=np.float32),
        h=np.asarray(got["latents"]["h"], dtype=np.float32)))
    assert np.abs(np.asarray(dec["mesh"]["vertices"]) - direct).max() <= 1e-6

    e_raw = got["latents"]["e"]
    body = {"e": e_raw, "seed": 5}
    first = client.post("/sample_intrinsics", json=body).json()
    second = client.post("/sample_intrinsics", json=body).json()
    assert first == second
    assert first["latents"]["e"] == e_raw
    h_direct = D.sample_intrinsics_batch(
        state.int_model, np.asarray([e_raw], dtype=np.float64), state.int_schedule,
        state.stats, torch.Generator().manual_seed(5))[0]
    assert np.abs(np.asarray(first["latents"]["h"]) - h_direct).max() <= 1e-6

    sample = client.post("/sample", json={"count": 2, "seed": 9}).json()
    again = client.post("/sample", json={"count": 2, "seed": 9}).json()
    assert sample == again
    assert len(sample["latents"]) == 2
    _, pairs = D.cascade_sample(
        state.ext_model, state.int_model, state.ae_model, state.ext_schedule,
        state.int_schedule, state.stats, 2,
        torch.Generator().manual_seed(9), torch.Generator().manual_seed(10))
    for got_pair, want_pair in zip(sample["latents"], pairs):
        assert np.abs(np.asarray(got_pair["e"]) - want_pair.e).max() <= 1e-6
        assert np.abs(np.asarray(got_pair["h"]) - want_pair.h).max() <= 1e-6

    other = client.post("/sample_intrinsics", json={"e": e_raw, "seed": 6}).json()
    mix = client.post("/interpolate", json={
        "from": first["latents"], "to": other["latents"],
        "alpha": 0.25, "which": "intrinsics"}).json()
    want_mix = P.interpolate_latents(
        P.LatentPair(e=np.asarray(first["latents"]["e"], dtype=np.float32),
                     h=np.asarray(first["latents"]["h"], dtype=np.float32)),
        P.LatentPair(e=np.asarray(other["latents"]["e"], dtype=np.float32),
                     h=np.asarray(other["latents"]["h"], dtype=np.float32)),
        0.25, "intrinsics")
    assert np.abs(np.asarray(mix["latents"]["e"]) - want_mix.e).max() <= 1e-6
    assert np.abs(np.asarray(mix["latents"]["h"]) - want_mix.h).max() <= 1e-6

    # declared error codes
    short = client.post("/encode", json={"mesh": {"vertices": [[0.0, 0.0, 0.0]] * 7}})
    assert (short.status_code, short.json()) == (400, {"error": "vertex_count"})
    bad_nan = client.post(
        "/encode",
        content=json.dumps({"mesh": {"vertices": [[float("nan")] * 3] * cfg.n}}),
        headers={"content-type": "application/json"})
    assert (bad_nan.status_code, bad_nan.json()) == (422, {"error": "non_finite"})
    bad_shape = client.post("/decode", json={"latents": {"e": [[0.0] * 3] * 3,
                                                         "h": want.h.tolist()}})
    assert (bad_shape.status_code, bad_shape.json()) == (400, {"error": "shape"})
    bad_alpha = client.post("/interpolate", json={
        "from": first["latents"], "to": other["latents"], "alpha": 1.5, "which": "both"})
    assert (bad_alpha.status_code, bad_alpha.json()) == (400, {"error": "alpha"})
    bad_seed = client.post("/sample_intrinsics", json={"e": e_raw, "seed": "x"})
    assert (bad_seed.status_code, bad_seed.json()) == (400, {"error": "seed"})
    bad_count = client.post("/sample", json={"count": 0, "seed": 1})
    assert (bad_count.status_code, bad_count.json()) == (400, {"error": "count"})
    bad_json = client.post("/encode", content=b"{", headers={"content-type": "application/json"})
    assert (bad_json.status_code, bad_json.json()) == (400, {"error": "json"})
