"""Command line entry points: data synthesis, training, sampling, editing, eval, serving."""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .diffusion import cascade_sample, linear_schedule
from .errors import ConfigError, ContractError, JadeError
from .geometry import TriangleMesh, load_obj, save_obj
from .latent import latent_from_json, latent_to_json
from .pipeline import (
    INTERP_WHICH,
    PROFILES,
    ablation_csv,
    dataset_subset,
    decode_latents,
    encode_vertices,
    evaluate,
    held_out_split,
    load_autoencoder,
    load_denoiser,
    load_mesh_dataset,
    load_run_config,
    run_ablation,
    run_config_from_dict,
    save_mesh_dataset,
    synth_mesh_dataset,
    template_topology,
    train_autoencoder,
    train_extrinsic_ddpm,
    train_intrinsic_ddpm,
)


def _schedule_for(ckpt):
    run = run_config_from_dict(ckpt.config)
    d = run.diffusion
    return linear_schedule(d.timesteps, d.beta_start, d.beta_end)


def _ae_bundle(path):
    """Autoencoder model, its run config, and the stored latent stats."""
    model, ckpt = load_autoencoder(path)
    if ckpt.latent_stats is None:
        raise ContractError("autoencoder checkpoint carries no latent stats")
    return model, run_config_from_dict(ckpt.config), ckpt.latent_stats


def _check_latents(pair, ae_cfg, label):
    if pair.e.shape != (ae_cfg.j, 3) or pair.h.shape != (ae_cfg.j, ae_cfg.d_h):
        raise ContractError(
            f"{label} latents have shapes {pair.e.shape}/{pair.h.shape}, "
            f"model expects {(ae_cfg.j, 3)}/{(ae_cfg.j, ae_cfg.d_h)}")


def _write_mesh(path, vertices, ae_cfg):
    _, faces, _ = template_topology(ae_cfg.j, ae_cfg.n)
    save_obj(TriangleMesh(vertices=np.asarray(vertices, dtype=np.float32), faces=faces), path)


def cmd_synth_data(args):
    ds = synth_mesh_dataset(args.subjects, args.poses, seed=args.seed,
                            j=args.joints, m=args.ring_points)
    path = save_mesh_dataset(ds, args.out)
    print(f"wrote {ds.sample_count} meshes ({ds.vertices.shape[1]} vertices, "
          f"{ds.joints.shape[1]} joints) to {path}")
    return 0


def _load_training_inputs(args):
    config = load_run_config(args.config, args.profile)
    config = dataclasses.replace(config, data=str(args.data), out=str(args.out))
    dataset = load_mesh_dataset(args.data)
    train_idx, held_idx = held_out_split(dataset)
    return config, dataset_subset(dataset, train_idx), held_idx


def cmd_train_ae(args):
    config, train_ds, held_idx = _load_training_inputs(args)
    result = train_autoencoder(config, train_ds, out_dir=args.out, log_every=args.log_every)
    print(f"trained {result.steps} steps, final loss {result.losses[-1]:.6f}, "
          f"{len(held_idx)} samples held out; checkpoints in {args.out}")
    return 0


def cmd_train_ddpm(args):
    config, train_ds, _ = _load_training_inputs(args)
    train = train_extrinsic_ddpm if args.stage == "extrinsic" else train_intrinsic_ddpm
    result = train(config, args.ae, train_ds, out_dir=args.out, log_every=args.log_every)
    print(f"trained {args.stage} denoiser {result.steps} steps, "
          f"final loss {result.losses[-1]:.6f}; checkpoints in {args.out}")
    return 0


def cmd_sample(args):
    ae_model, ae_run, stats = _ae_bundle(args.ae)
    ext_model, ext_ckpt = load_denoiser(args.ext, "extrinsic")
    int_model, int_ckpt = load_denoiser(args.int, "intrinsic")
    points, pairs = cascade_sample(
        ext_model, int_model, ae_model,
        _schedule_for(ext_ckpt), _schedule_for(int_ckpt), stats, args.count,
        torch.Generator().manual_seed(args.seed),
        torch.Generator().manual_seed(args.seed + 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        _write_mesh(out / f"sample_{i:03d}.obj", points[i], ae_run.ae)
    payload = {"seed": args.seed, "count": args.count,
               "samples": [latent_to_json(p) for p in pairs]}
    (out / "latents.json").write_text(json.dumps(payload, indent=1))
    print(f"wrote {args.count} meshes and latents.json to {out}")
    return 0


def cmd_encode(args):
    ae_model, ae_run, _ = _ae_bundle(args.ae)
    mesh = load_obj(args.mesh)
    if mesh.vertices.shape[0] != ae_run.ae.n:
        raise ContractError(f"mesh has {mesh.vertices.shape[0]} vertices, "
                            f"model expects {ae_run.ae.n}")
    pair = encode_vertices(ae_model, mesh.vertices)
    Path(args.out).write_text(json.dumps(latent_to_json(pair), indent=1))
    print(f"encoded {args.mesh} -> {args.out}")
    return 0


def cmd_decode(args):
    ae_model, ae_run, _ = _ae_bundle(args.ae)
    pair = latent_from_json(json.loads(Path(args.latents).read_text()))
    _check_latents(pair, ae_run.ae, "input")
    _write_mesh(args.out, decode_latents(ae_model, pair), ae_run.ae)
    print(f"decoded {args.latents} -> {args.out}")
    return 0


def cmd_interpolate(args):
    from .pipeline import interpolate_latents

    if not 0.0 <= args.alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {args.alpha}")
    ae_model, ae_run, _ = _ae_bundle(args.ae)
    a = latent_from_json(json.loads(Path(args.src).read_text()))
    b = latent_from_json(json.loads(Path(args.dst).read_text()))
    _check_latents(a, ae_run.ae, "--from")
    _check_latents(b, ae_run.ae, "--to")
    mixed = interpolate_latents(a, b, args.alpha, args.which)
    _write_mesh(args.out, decode_latents(ae_model, mixed), ae_run.ae)
    print(f"interpolated alpha={args.alpha} ({args.which}) -> {args.out}")
    return 0


def cmd_eval(args):
    ae_model, ae_run, stats = _ae_bundle(args.ae)
    ext_model, _ = load_denoiser(args.ext, "extrinsic")
    int_model, _ = load_denoiser(args.int, "intrinsic")
    dataset = load_mesh_dataset(args.data)
    report = evaluate(ae_model, ext_model, int_model, dataset, args.samples,
                      stats=stats, config=ae_run, seed=args.seed)
    Path(args.out).write_text(json.dumps(report.to_json(), indent=1))
    print(f"mpvpe {report.mpvpe:.6f}  apd {report.apd:.6f}  "
          f"si {report.si_rate:.4%}  -> {args.out}")
    return 0


def cmd_ablate(args):
    if args.grid != "table4":
        raise ConfigError(f"unknown ablation grid {args.grid!r}")
    base = load_run_config(args.config, args.profile)
    dataset = load_mesh_dataset(args.data)
    rows = run_ablation(base, dataset, steps=args.steps, log_every=args.log_every)
    Path(args.out).write_text(ablation_csv(rows))
    print(f"ran {len(rows)} variants x {args.steps} steps -> {args.out}")
    return 0


def _default_frontend():
    dist = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    return dist if dist.is_dir() else None


def cmd_serve(args):
    import uvicorn

    from .service import create_app, load_service_state

    state = load_service_state(args.ae, args.ext, args.int)
    frontend = Path(args.frontend) if args.frontend else _default_frontend()
    app = create_app(state, frontend_dir=frontend)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jade")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.set_defaults(fn=fn)
        return p

    p = add("synth-data", cmd_synth_data, help="generate a synthetic capsule-body dataset")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--poses", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--joints", type=int, default=8)
    p.add_argument("--ring-points", type=int, default=8)

    for name, fn in (("train-ae", cmd_train_ae), ("train-ddpm", cmd_train_ddpm)):
        p = add(name, fn, help=f"run {name.split('-')[1]} training")
        if name == "train-ddpm":
            p.add_argument("--stage", choices=["extrinsic", "intrinsic"], required=True)
            p.add_argument("--ae", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--log-every", type=int, default=100)

    p = add("sample", cmd_sample, help="draw bodies from the two-stage cascade")
    p.add_argument("--ae", required=True)
    p.add_argument("--ext", required=True)
    p.add_argument("--int", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("encode", cmd_encode, help="mesh file -> latents json")
    p.add_argument("--ae", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)

    p = add("decode", cmd_decode, help="latents json -> mesh file")
    p.add_argument("--ae", required=True)
    p.add_argument("--latents", required=True)
    p.add_argument("--out", required=True)

    p = add("interpolate", cmd_interpolate, help="blend two latent codes and decode")
    p.add_argument("--ae", required=True)
    p.add_argument("--from", dest="src", required=True)
    p.add_argument("--to", dest="dst", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--which", choices=list(INTERP_WHICH), default="both")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, help="held-out reconstruction and sample quality report")
    p.add_argument("--ae", required=True)
    p.add_argument("--ext", required=True)
    p.add_argument("--int", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("ablate", cmd_ablate, help="train the ablation grid and dump a CSV")
    p.add_argument("--grid", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("serve", cmd_serve, help="HTTP inference service plus the bundled editor")
    p.add_argument("--ae", required=True)
    p.add_argument("--ext", required=True)
    p.add_argument("--int", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--frontend", default=None)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except JadeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
