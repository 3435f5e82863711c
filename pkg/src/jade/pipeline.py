"""Training loops, dataset plumbing, checkpoints, evaluation, and the ablation grid.

Everything runs single-process on CPU. The desk profile is sized so a full
train/evaluate cycle finishes on a workstation; the paper profile keeps the
published sizes and is not expected to converge in a test run.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import struct
from dataclasses import dataclass, field
from itertools import zip_longest
from pathlib import Path

import numpy as np
import torch

from . import geometry, latent, metrics
from .autoencoder import AEConfig, AEModel, build_autoencoder, loss_total
from .diffusion import (DenoiserConfig, EmaState, build_extrinsic_denoiser,
                        build_intrinsic_denoiser, cascade_sample,
                        ddpm_loss_extrinsic, ddpm_loss_intrinsic, ema_init,
                        ema_update, linear_schedule)
from .errors import (ConfigError, ContractError, FormatError, ShapeError,
                     TrainingDiverged)
from .latent import LatentPair, LatentStats, compute_stats
from .metrics import EvalReport
from .numerics import ParameterStore, load_parameter_store, parameter_store

CHECKPOINT_MAGIC = b"JCK1"
CHECKPOINT_KINDS = ("autoencoder", "extrinsic", "intrinsic")
INTERP_WHICH = ("extrinsics", "intrinsics", "both")


# -- configuration ---------------------------------------------------------

@dataclass
class OptimConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    weight_decay: float = 0.01
    steps: int = 100_000
    checkpoint_every: int = 1000   # 0 disables periodic checkpoints

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError("batch_size and steps must be at least 1")
        if self.weight_decay < 0 or self.checkpoint_every < 0:
            raise ConfigError("weight_decay and checkpoint_every must be non-negative")


@dataclass
class DiffusionConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    width: int = 128
    layers: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0

    def validate(self) -> None:
        if self.timesteps < 1:
            raise ConfigError("timesteps must be at least 1")
        if min(self.width, self.layers, self.heads) < 1:
            raise ConfigError("denoiser sizes must be at least 1")
        if self.width % self.heads != 0:
            raise ConfigError(f"width={self.width} not divisible by {self.heads} heads")
        linear_schedule(min(self.timesteps, 2), self.beta_start, self.beta_end)


@dataclass
class RunConfig:
    ae: AEConfig = field(default_factory=AEConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    ema_ratio: float = 0.9999
    seed: int = 0
    data: str = ""
    out: str = ""

    def validate(self) -> None:
        self.ae.validate()
        self.diffusion.validate()
        self.optimizer.validate()
        if not 0.0 <= self.ema_ratio < 1.0:
            raise ConfigError("ema_ratio must be in [0, 1)")


def paper_profile() -> RunConfig:
    """Published training setup: J=24, N=1536, D=128, batch 256, lr 1e-3."""
    return RunConfig()


def desk_profile() -> RunConfig:
    """Workstation-sized run: J=8, N=512, D_h=32, batch 16.

    The EMA ratio comes down with the step budget; 0.9999 barely moves the
    shadow inside a few thousand steps. The global feature stays wide
    (everything the decoder sees funnels through it) and the joint term is
    upweighted, which buys most of the held-out joint accuracy at this scale.
    """
    return RunConfig(
        ae=AEConfig(n=512, j=8, d_z=64, d_h=32, d_g=256, l_blocks=2,
                    l_dec_blocks=2, heads=4, point_hidden=(32, 64),
                    token_hidden=512, lambda_j=3.0),
        diffusion=DiffusionConfig(width=64, layers=2, heads=4),
        optimizer=OptimConfig(batch_size=16, steps=5000, checkpoint_every=1000),
        ema_ratio=0.999,
    )


PROFILES = {"desk": desk_profile, "paper": paper_profile}

_SECTIONS = ("ae", "diffusion", "optimizer")
_SCALARS = ("ema_ratio", "seed", "data", "out")


def _apply_section(current, raw: dict, section: str):
    known = {f.name for f in dataclasses.fields(type(current))}
    fixed = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown {section} config key {key!r}")
        if key == "point_hidden":
            value = tuple(value)
        fixed[key] = value
    return dataclasses.replace(current, **fixed)


def config_from_dict(raw: dict, base: RunConfig | None = None) -> RunConfig:
    """Overlay a JSON-shaped dict onto `base`; unknown keys are rejected."""
    cfg = base if base is not None else paper_profile()
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            cfg = dataclasses.replace(cfg, **{key: _apply_section(getattr(cfg, key), value, key)})
        elif key in _SCALARS:
            cfg = dataclasses.replace(cfg, **{key: value})
        else:
            raise ConfigError(f"unknown config key {key!r}")
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["ae"]["point_hidden"] = list(d["ae"]["point_hidden"])
    return d


def run_config_from_dict(raw: dict) -> RunConfig:
    # checkpoint snapshots list every field, so the base never shows through
    return config_from_dict(raw, RunConfig())


def load_run_config(path, profile: str = "desk") -> RunConfig:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    base = PROFILES[profile]()
    if path is None:
        return base
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return config_from_dict(raw, base)


# -- dataset ---------------------------------------------------------------

@dataclass
class MeshDataset:
    vertices: np.ndarray      # (S, N, 3) float32
    joints: np.ndarray        # (S, J, 3) float32
    subject_ids: np.ndarray   # (S,)
    pose_ids: np.ndarray      # (S,)
    parents: np.ndarray       # (J,)
    faces: np.ndarray         # (F, 3) shared capsule-template topology

    @property
    def sample_count(self) -> int:
        return int(self.vertices.shape[0])


def validate_dataset(dataset: MeshDataset) -> None:
    # pair training needs two poses of every subject
    for s in np.unique(dataset.subject_ids):
        if np.count_nonzero(dataset.subject_ids == s) < 2:
            raise ContractError(f"subject {int(s)} has fewer than 2 poses")


def template_topology(j: int, n: int):
    """Parents and faces implied by the capsule template for J joints, N points."""
    per = j * geometry.RINGS_PER_BONE
    if n % per != 0:
        raise FormatError(f"N={n} does not match the capsule topology for J={j}")
    m = n // per
    skeleton = geometry.base_skeleton(j)
    _, faces, _ = geometry.build_capsule_template(skeleton, np.ones(j), np.ones(j), m)
    return skeleton.parent.copy(), faces, m


def dataset_from_samples(samples, parents: np.ndarray, faces: np.ndarray) -> MeshDataset:
    if not samples:
        raise FormatError("dataset holds no samples")
    return MeshDataset(
        vertices=np.stack([s.vertices for s in samples]).astype(np.float32),
        joints=np.stack([s.joints for s in samples]).astype(np.float32),
        subject_ids=np.array([s.subject_id for s in samples], dtype=np.int64),
        pose_ids=np.array([s.pose_id for s in samples], dtype=np.int64),
        parents=np.asarray(parents),
        faces=np.asarray(faces),
    )


def synth_mesh_dataset(subjects: int, poses: int, seed: int, j: int = 8, m: int = 8) -> MeshDataset:
    samples, specs = geometry.synth_dataset(subjects, poses, seed, j, m)
    return dataset_from_samples(samples, specs[0].skeleton.parent, specs[0].faces)


def save_mesh_dataset(dataset: MeshDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = [
        geometry.BodySample(vertices=dataset.vertices[i], joints=dataset.joints[i],
                            subject_id=int(dataset.subject_ids[i]),
                            pose_id=int(dataset.pose_ids[i]))
        for i in range(dataset.sample_count)
    ]
    path = out / "data.bin"
    geometry.pack_dataset(samples, path)
    return path


def load_mesh_dataset(path) -> MeshDataset:
    p = Path(path)
    file = p / "data.bin" if p.is_dir() else p
    samples = geometry.unpack_dataset(file)
    j = samples[0].joints.shape[0]
    n = samples[0].vertices.shape[0]
    parents, faces, _ = template_topology(j, n)
    dataset = dataset_from_samples(samples, parents, faces)
    validate_dataset(dataset)
    return dataset


def dataset_subset(dataset: MeshDataset, idx) -> MeshDataset:
    idx = np.asarray(idx, dtype=np.int64)
    return MeshDataset(
        vertices=dataset.vertices[idx], joints=dataset.joints[idx],
        subject_ids=dataset.subject_ids[idx], pose_ids=dataset.pose_ids[idx],
        parents=dataset.parents, faces=dataset.faces,
    )


def held_out_split(dataset: MeshDataset):
    """(train_idx, held_idx); the last tenth of pose ids per subject is held out."""
    held = []
    for s in np.unique(dataset.subject_ids):
        rows = np.flatnonzero(dataset.subject_ids == s)
        rows = rows[np.argsort(dataset.pose_ids[rows])]
        k = len(rows) // 10
        if k:
            held.extend(rows[-k:].tolist())
    held_idx = np.array(sorted(held), dtype=np.int64)
    train_idx = np.setdiff1d(np.arange(dataset.sample_count), held_idx)
    return train_idx, held_idx


def pair_sampler(dataset: MeshDataset, batch_size: int, rng: np.random.Generator):
    """Endless stream of (i, j) index batches: same subject, distinct poses.

    Subjects are drawn uniformly first, then an ordered distinct pose pair
    uniformly within the subject.
    """
    validate_dataset(dataset)
    subjects = np.unique(dataset.subject_ids)
    rows = [np.flatnonzero(dataset.subject_ids == s) for s in subjects]
    while True:
        a = np.empty(batch_size, dtype=np.int64)
        b = np.empty(batch_size, dtype=np.int64)
        for k in range(batch_size):
            r = rows[int(rng.integers(len(rows)))]
            i, j = rng.choice(len(r), size=2, replace=False)
            a[k], b[k] = r[i], r[j]
        yield a, b


# -- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    kind: str
    step: int
    config: dict              # RunConfig snapshot as plain JSON data
    params: ParameterStore    # name -> float32 tensor, registration order
    ema: ParameterStore | None = None
    latent_stats: LatentStats | None = None


def _payload(store: ParameterStore, order) -> bytes:
    chunks = []
    for name in order:
        arr = store[name].detach().to(torch.float32).contiguous().cpu().numpy()
        chunks.append(arr.astype("<f4").tobytes())
    return b"".join(chunks)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    if ckpt.kind not in CHECKPOINT_KINDS:
        raise ConfigError(f"checkpoint kind must be one of {CHECKPOINT_KINDS}")
    manifest = []
    offset = 0
    for name, t in ckpt.params.items():
        manifest.append([name, list(t.shape), offset])
        offset += t.numel()
    if ckpt.ema is not None and set(ckpt.ema) != set(ckpt.params):
        raise ContractError("EMA payload disagrees with the parameter manifest")
    meta = {
        "kind": ckpt.kind,
        "step": int(ckpt.step),
        "config": ckpt.config,
        "manifest": manifest,
        "floats": offset,
        "ema": ckpt.ema is not None,
        "stats": ckpt.latent_stats.to_json() if ckpt.latent_stats is not None else None,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    order = list(ckpt.params)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(_payload(ckpt.params, order))
        if ckpt.ema is not None:
            f.write(_payload(ckpt.ema, order))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError("truncated checkpoint header")
    if data[:4] != CHECKPOINT_MAGIC:
        if data[:3] == CHECKPOINT_MAGIC[:3]:
            raise FormatError(f"unsupported checkpoint version {data[3:4]!r}")
        raise FormatError("bad checkpoint magic")
    (meta_len,) = struct.unpack_from("<I", data, 4)
    meta_end = 8 + meta_len
    if meta_end > len(data):
        raise FormatError("truncated checkpoint metadata")
    try:
        meta = json.loads(data[8:meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint metadata: {exc}") from None
    for key in ("kind", "step", "config", "manifest", "floats", "ema", "stats"):
        if key not in meta:
            raise FormatError(f"checkpoint metadata misses {key!r}")
    if meta["kind"] not in CHECKPOINT_KINDS:
        raise FormatError(f"unknown checkpoint kind {meta['kind']!r}")
    expected = 0
    for entry in meta["manifest"]:
        name, shape, offset = entry
        if offset != expected:
            raise FormatError(f"manifest offset mismatch at {name!r}")
        expected += int(np.prod(shape, dtype=np.int64)) if shape else 1
    if expected != meta["floats"]:
        raise FormatError("manifest disagrees with the declared payload size")
    body = data[meta_end:]
    copies = 2 if meta["ema"] else 1
    if len(body) != expected * 4 * copies:
        raise FormatError("checkpoint payload length mismatch")

    def read(block: int) -> ParameterStore:
        store: ParameterStore = {}
        base = block * expected * 4
        for name, shape, offset in meta["manifest"]:
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=base + offset * 4)
            store[name] = torch.from_numpy(arr.copy().reshape(shape))
        return store

    stats = LatentStats.from_json(meta["stats"]) if meta["stats"] is not None else None
    return Checkpoint(kind=meta["kind"], step=int(meta["step"]), config=meta["config"],
                      params=read(0), ema=read(1) if meta["ema"] else None,
                      latent_stats=stats)


def apply_checkpoint(model: torch.nn.Module, ckpt: Checkpoint, *, ema: bool = False) -> None:
    """Load checkpoint weights (or the EMA shadow) into a freshly built model."""
    if ema and ckpt.ema is None:
        raise ContractError("checkpoint has no EMA payload")
    model_params = dict(model.named_parameters())
    for a, b in zip_longest(model_params, ckpt.params):
        if a != b:
            raise ContractError(f"parameter manifest mismatch at {(a or b)!r}")
    for name, t in ckpt.params.items():
        if tuple(model_params[name].shape) != tuple(t.shape):
            raise ContractError(f"parameter manifest mismatch at {name!r}")
    load_parameter_store(model, ckpt.ema if ema else ckpt.params)


def model_checkpoint(kind: str, model: torch.nn.Module, config: RunConfig, step: int,
                     *, ema: EmaState | None = None,
                     stats: LatentStats | None = None) -> Checkpoint:
    return Checkpoint(kind=kind, step=step, config=config_to_dict(config),
                      params=parameter_store(model),
                      ema=None if ema is None else {k: v.clone() for k, v in ema.shadow.items()},
                      latent_stats=stats)


def load_autoencoder(path) -> tuple[AEModel, Checkpoint]:
    ckpt = path if isinstance(path, Checkpoint) else load_checkpoint(path)
    if ckpt.kind != "autoencoder":
        raise ContractError(f"expected an autoencoder checkpoint, got {ckpt.kind!r}")
    run = run_config_from_dict(ckpt.config)
    model = build_autoencoder(run.ae, seed=run.seed)
    apply_checkpoint(model, ckpt)
    model.eval()
    return model, ckpt


def _denoiser_config(run: RunConfig, kind: str) -> DenoiserConfig:
    return DenoiserConfig(j=run.ae.j, d=run.diffusion.width, layers=run.diffusion.layers,
                          heads=run.diffusion.heads, mlp_ratio=run.diffusion.mlp_ratio,
                          d_h=run.ae.d_h if kind == "intrinsic" else 0)


def load_denoiser(path, kind: str, *, prefer_ema: bool = True):
    """Rebuild a denoiser from its checkpoint; EMA weights win when present."""
    ckpt = load_checkpoint(path) if not isinstance(path, Checkpoint) else path
    if ckpt.kind != kind:
        raise ContractError(f"expected a {kind} checkpoint, got {ckpt.kind!r}")
    run = run_config_from_dict(ckpt.config)
    dcfg = _denoiser_config(run, kind)
    build = build_intrinsic_denoiser if kind == "intrinsic" else build_extrinsic_denoiser
    model = build(dcfg, seed=run.seed)
    apply_checkpoint(model, ckpt, ema=prefer_ema and ckpt.ema is not None)
    model.eval()
    return model, ckpt


# -- encoding helpers ------------------------------------------------------

def encode_dataset(model: AEModel, dataset: MeshDataset, idx=None, batch: int = 64):
    """Posterior-mean latents (e, h) for the given rows, frozen encoder."""
    rows = np.arange(dataset.sample_count) if idx is None else np.asarray(idx, dtype=np.int64)
    es, hs = [], []
    with torch.no_grad():
        for start in range(0, len(rows), batch):
            part = rows[start:start + batch]
            v = torch.from_numpy(dataset.vertices[part])
            e, mu, _ = model.encode(v)
            es.append(e.numpy())
            hs.append(mu.numpy())
    return np.concatenate(es), np.concatenate(hs)


def dataset_latent_stats(model: AEModel, dataset: MeshDataset) -> LatentStats:
    e, h = encode_dataset(model, dataset)
    return compute_stats([LatentPair(e=e[i], h=h[i]) for i in range(len(e))])


def encode_vertices_batch(model: AEModel, verts: np.ndarray):
    """Posterior-mean latents for raw clouds (B, N, 3).

    The encoder sees pelvis-relative data in training, so a first pass
    estimates the root joint and the shifted cloud is encoded again.
    """
    v = torch.from_numpy(np.asarray(verts, dtype=np.float32))
    if v.ndim != 3:
        raise ShapeError(f"expected (B, N, 3) clouds, got {tuple(v.shape)}")
    with torch.no_grad():
        e0, _, _ = model.encode(v)
        shifted = v - e0[:, :1, :]
        e, mu, _ = model.encode(shifted)
    return e.numpy(), mu.numpy()


def encode_vertices(model: AEModel, verts: np.ndarray) -> LatentPair:
    e, h = encode_vertices_batch(model, np.asarray(verts)[None])
    return LatentPair(e=e[0], h=h[0])


def decode_latents(model: AEModel, pair: LatentPair) -> np.ndarray:
    """Vertex positions (N, 3) for one latent pair."""
    e = torch.from_numpy(np.asarray(pair.e, dtype=np.float32))[None]
    h = torch.from_numpy(np.asarray(pair.h, dtype=np.float32))[None]
    with torch.no_grad():
        return model.decode(e, h)[0].numpy()


def reconstruction_mpvpe(model: AEModel, dataset: MeshDataset, idx=None, batch: int = 64) -> float:
    """Posterior-mean reconstruction error averaged over the given rows."""
    rows = np.arange(dataset.sample_count) if idx is None else np.asarray(idx, dtype=np.int64)
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(rows), batch):
            part = rows[start:start + batch]
            v = torch.from_numpy(dataset.vertices[part])
            e, mu, _ = model.encode(v)
            x_hat = model.decode(e, mu).numpy()
            for k in range(len(part)):
                total += metrics.mpvpe(dataset.vertices[part[k]], x_hat[k])
    return total / len(rows)


def interpolate_latents(a: LatentPair, b: LatentPair, alpha: float,
                        which: str = "both") -> LatentPair:
    """Interpolate the selected latent half; the other half stays at `a`."""
    if which not in INTERP_WHICH:
        raise ConfigError(f"which must be one of {INTERP_WHICH}")
    mixed = latent.interpolate(a, b, alpha)
    if which == "both":
        return mixed
    if which == "extrinsics":
        return LatentPair(e=mixed.e, h=a.h.copy())
    return LatentPair(e=a.e.copy(), h=mixed.h)


# -- training loops --------------------------------------------------------

@dataclass
class TrainResult:
    model: torch.nn.Module
    losses: list
    terms: dict
    stats: LatentStats | None
    steps: int


@dataclass
class DdpmResult:
    model: torch.nn.Module
    ema: EmaState
    losses: list
    steps: int


def _adamw(model: torch.nn.Module, opt: OptimConfig) -> torch.optim.AdamW:
    # decoupled weight decay, default moments, no schedule at desk scale
    return torch.optim.AdamW(model.parameters(), lr=opt.learning_rate,
                             betas=(0.9, 0.999), weight_decay=opt.weight_decay)


def _batch(dataset: MeshDataset, idx):
    return (torch.from_numpy(dataset.vertices[idx]),
            torch.from_numpy(dataset.joints[idx]))


def _check_match(config: RunConfig, dataset: MeshDataset) -> None:
    if dataset.vertices.shape[1] != config.ae.n or dataset.joints.shape[1] != config.ae.j:
        raise ContractError(
            f"dataset (N={dataset.vertices.shape[1]}, J={dataset.joints.shape[1]}) "
            f"does not match config (N={config.ae.n}, J={config.ae.j})")


def train_autoencoder(config: RunConfig, dataset: MeshDataset, *, out_dir=None,
                      log_every: int = 0, mpvpe_target: float | None = None,
                      eval_every: int = 250) -> TrainResult:
    """Optimize the full objective over same-subject pose pairs.

    Training stops early once reconstruction MPVPE over `dataset` drops under
    `mpvpe_target` (checked every `eval_every` steps). The final checkpoint
    carries latent statistics of the training set.
    """
    config.validate()
    validate_dataset(dataset)
    _check_match(config, dataset)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    model = build_autoencoder(config.ae, seed=config.seed)
    opt = _adamw(model, config.optimizer)
    # constant lr leaves small-batch runs bouncing a few percent above their
    # floor; annealing over the step budget lets the late phase settle
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.optimizer.steps)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    pairs = pair_sampler(dataset, config.optimizer.batch_size, rng)
    if out:
        save_checkpoint(out / "ae_init.jck", model_checkpoint("autoencoder", model, config, 0))
    losses: list = []
    terms = {k: [] for k in ("rec", "cross", "prior", "verts", "joints")}
    steps = config.optimizer.steps
    steps_run = steps
    for step in range(1, steps + 1):
        a, b = next(pairs)
        v1, j1 = _batch(dataset, a)
        v2, j2 = _batch(dataset, b)
        loss, parts = loss_total(model, v1, j1, v2, j2, generator=gen)
        if not math.isfinite(parts["total"]):
            if out:
                save_checkpoint(out / "ae_diverged.jck",
                                model_checkpoint("autoencoder", model, config, step))
            raise TrainingDiverged(f"non-finite autoencoder loss at step {step}: {parts}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(parts["total"])
        for k in terms:
            terms[k].append(parts[k])
        if log_every and step % log_every == 0:
            print(f"[ae {step}] total {parts['total']:.5f} rec {parts['rec']:.5f} "
                  f"cross {parts['cross']:.5f} prior {parts['prior']:.6f}", flush=True)
        every = config.optimizer.checkpoint_every
        if out and every and step % every == 0 and step != steps:
            save_checkpoint(out / f"ae_{step:06d}.jck",
                            model_checkpoint("autoencoder", model, config, step))
        if mpvpe_target is not None and eval_every and step % eval_every == 0:
            if reconstruction_mpvpe(model, dataset) < mpvpe_target:
                steps_run = step
                break
    stats = dataset_latent_stats(model, dataset)
    if out:
        save_checkpoint(out / "ae_final.jck",
                        model_checkpoint("autoencoder", model, config, steps_run, stats=stats))
    return TrainResult(model=model, losses=losses, terms=terms, stats=stats, steps=steps_run)


def _require_autoencoder(ae_checkpoint):
    ckpt = ae_checkpoint if isinstance(ae_checkpoint, Checkpoint) else load_checkpoint(ae_checkpoint)
    if ckpt.kind != "autoencoder":
        raise ContractError(f"expected an autoencoder checkpoint, got {ckpt.kind!r}")
    if ckpt.latent_stats is None:
        raise ContractError("autoencoder checkpoint carries no latent stats")
    run = run_config_from_dict(ckpt.config)
    model = build_autoencoder(run.ae, seed=run.seed)
    apply_checkpoint(model, ckpt)
    model.eval()
    return model, ckpt.latent_stats, run


def _train_ddpm(config: RunConfig, ae_checkpoint, dataset: MeshDataset, stage: str,
                out_dir, log_every: int) -> DdpmResult:
    config.validate()
    validate_dataset(dataset)
    ae_model, stats, ae_run = _require_autoencoder(ae_checkpoint)
    _check_match(ae_run, dataset)
    e, h = encode_dataset(ae_model, dataset)
    e_std = torch.from_numpy(((e - stats.e_mean) / stats.e_std).astype(np.float32))
    h_std = torch.from_numpy(((h - stats.h_mean) / stats.h_std).astype(np.float32))
    schedule = linear_schedule(config.diffusion.timesteps, config.diffusion.beta_start,
                               config.diffusion.beta_end)
    dcfg = _denoiser_config(dataclasses.replace(config, ae=ae_run.ae), stage)
    if stage == "intrinsic":
        model = build_intrinsic_denoiser(dcfg, seed=config.seed)
        x0_all = h_std
    else:
        model = build_extrinsic_denoiser(dcfg, seed=config.seed)
        x0_all = e_std
    opt = _adamw(model, config.optimizer)
    ema = ema_init(parameter_store(model), config.ema_ratio)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / f"{stage}_init.jck",
                        model_checkpoint(stage, model, config, 0, ema=ema, stats=stats))
    losses: list = []
    steps = config.optimizer.steps
    t_max = config.diffusion.timesteps
    for step in range(1, steps + 1):
        idx = rng.integers(x0_all.shape[0], size=config.optimizer.batch_size)
        x0 = x0_all[idx]
        t = torch.randint(1, t_max + 1, (x0.shape[0],), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        if stage == "intrinsic":
            loss = ddpm_loss_intrinsic(x0, e_std[idx], t, eps, model, schedule)
        else:
            loss = ddpm_loss_extrinsic(x0, t, eps, model, schedule)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite {stage} loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        ema_update(ema, dict(model.named_parameters()))
        losses.append(value)
        if log_every and step % log_every == 0:
            print(f"[{stage} {step}] loss {value:.5f}", flush=True)
        every = config.optimizer.checkpoint_every
        if out and every and step % every == 0 and step != steps:
            save_checkpoint(out / f"{stage}_{step:06d}.jck",
                            model_checkpoint(stage, model, config, step, ema=ema, stats=stats))
    if out:
        save_checkpoint(out / f"{stage}_final.jck",
                        model_checkpoint(stage, model, config, steps, ema=ema, stats=stats))
    return DdpmResult(model=model, ema=ema, losses=losses, steps=steps)


def train_extrinsic_ddpm(config: RunConfig, ae_checkpoint, dataset: MeshDataset, *,
                         out_dir=None, log_every: int = 0) -> DdpmResult:
    """Unconditional denoiser over standardized extrinsics from the frozen encoder."""
    return _train_ddpm(config, ae_checkpoint, dataset, "extrinsic", out_dir, log_every)


def train_intrinsic_ddpm(config: RunConfig, ae_checkpoint, dataset: MeshDataset, *,
                         out_dir=None, log_every: int = 0) -> DdpmResult:
    """Conditional denoiser over standardized intrinsics, teacher-forced on data extrinsics."""
    return _train_ddpm(config, ae_checkpoint, dataset, "intrinsic", out_dir, log_every)


# -- evaluation ------------------------------------------------------------

def evaluate(ae_model: AEModel, ext_model, int_model, dataset: MeshDataset,
             sample_count: int, *, stats: LatentStats, config: RunConfig,
             seed: int = 0) -> EvalReport:
    """Held-out reconstruction plus generation statistics over cascade samples."""
    if sample_count < 2:
        raise ConfigError("sample_count must be at least 2")
    _, held_idx = held_out_split(dataset)
    rows = held_idx if held_idx.size else np.arange(dataset.sample_count)
    rec = reconstruction_mpvpe(ae_model, dataset, rows)
    schedule = linear_schedule(config.diffusion.timesteps, config.diffusion.beta_start,
                               config.diffusion.beta_end)
    points, pairs = cascade_sample(
        ext_model, int_model, ae_model, schedule, schedule, stats, sample_count,
        torch.Generator().manual_seed(seed), torch.Generator().manual_seed(seed + 1))
    gen_e = np.stack([p.e for p in pairs])
    apd_val = metrics.apd(gen_e)
    si_vals = [
        metrics.self_intersection_rate(
            geometry.TriangleMesh(points[i].astype(np.float64), dataset.faces))
        for i in range(sample_count)
    ]
    _, h_rows = encode_dataset(ae_model, dataset, rows)
    mean, var = metrics.latent_moments(list(h_rows))
    report = EvalReport(mpvpe=float(rec), apd=float(apd_val),
                        si_rate=float(np.mean(si_vals)),
                        latent_moments={"mean": mean.tolist(), "var": var.tolist()},
                        sample_count=sample_count)
    report.validate()
    return report


# -- ablation grid ---------------------------------------------------------

ABLATION_DIMS = (16, 32, 64, 128, 256, 512)
ABLATION_CSV_HEADER = ("variant", "d_h", "condition", "lambda_j", "lambda_c",
                       "loss_head", "loss_tail", "mpvpe")


@dataclass
class AblationRow:
    name: str
    d_h: int
    condition_mode: str
    lambda_j: float
    lambda_c: float
    loss_head: float
    loss_tail: float
    mpvpe: float


def ablation_grid(base: RunConfig):
    """Dimension sweep, conditioning sweep, and loss drops around `base`."""
    def with_ae(name, **kw):
        return name, dataclasses.replace(base, ae=dataclasses.replace(base.ae, **kw))
    out = [with_ae(f"dim{d}", d_h=d) for d in ABLATION_DIMS]
    out += [with_ae("cond_add", condition_mode="add"),
            with_ae("cond_cross_attention", condition_mode="cross_attention")]
    out += [with_ae("no_joint_loss", lambda_j=0.0),
            with_ae("no_cross_loss", lambda_c=0.0)]
    return out


def run_ablation(base: RunConfig, dataset: MeshDataset, *, steps: int = 100,
                 window: int = 10, log_every: int = 0) -> list[AblationRow]:
    """Short training run per variant; head/tail loss means bracket the curve."""
    rows = []
    for name, cfg in ablation_grid(base):
        cfg = dataclasses.replace(
            cfg, optimizer=dataclasses.replace(cfg.optimizer, steps=steps, checkpoint_every=0))
        result = train_autoencoder(cfg, dataset, mpvpe_target=None)
        head = float(np.mean(result.losses[:window]))
        tail = float(np.mean(result.losses[-window:]))
        eval_rows = np.arange(min(64, dataset.sample_count))
        rec = reconstruction_mpvpe(result.model, dataset, eval_rows)
        rows.append(AblationRow(name=name, d_h=cfg.ae.d_h,
                                condition_mode=cfg.ae.condition_mode,
                                lambda_j=cfg.ae.lambda_j, lambda_c=cfg.ae.lambda_c,
                                loss_head=head, loss_tail=tail, mpvpe=float(rec)))
        if log_every:
            print(f"[ablate {name}] head {head:.5f} tail {tail:.5f} mpvpe {rec:.5f}",
                  flush=True)
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ABLATION_CSV_HEADER)
    for r in rows:
        writer.writerow([r.name, r.d_h, r.condition_mode, r.lambda_j, r.lambda_c,
                         repr(r.loss_head), repr(r.loss_tail), repr(r.mpvpe)])
    return buf.getvalue()
