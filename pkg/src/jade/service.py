"""HTTP inference boundary over frozen checkpoints.

Handlers parse JSON by hand so the declared error codes stay exact; model
state is immutable after startup and every random draw derives from the
request's own seed, which keeps repeated requests byte-identical.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .autoencoder import AEModel
from .diffusion import (
    NoiseSchedule,
    cascade_sample,
    linear_schedule,
    sample_intrinsics_batch,
)
from .latent import LatentPair, LatentStats, latent_to_json
from .pipeline import (
    INTERP_WHICH,
    RunConfig,
    decode_latents,
    encode_vertices,
    interpolate_latents,
    load_autoencoder,
    load_denoiser,
    run_config_from_dict,
    template_topology,
)


@dataclass
class ServiceState:
    ae_model: AEModel
    ext_model: torch.nn.Module
    int_model: torch.nn.Module
    config: RunConfig
    stats: LatentStats
    ext_schedule: NoiseSchedule
    int_schedule: NoiseSchedule
    parents: np.ndarray
    request_count: int = field(default=0)


def load_service_state(ae_path, ext_path, int_path) -> ServiceState:
    ae_model, ae_ckpt = load_autoencoder(ae_path)
    if ae_ckpt.latent_stats is None:
        raise ValueError("autoencoder checkpoint carries no latent stats")
    ext_model, ext_ckpt = load_denoiser(ext_path, "extrinsic")
    int_model, int_ckpt = load_denoiser(int_path, "intrinsic")
    config = run_config_from_dict(ae_ckpt.config)
    parents, _, _ = template_topology(config.ae.j, config.ae.n)

    def sched(ckpt):
        d = run_config_from_dict(ckpt.config).diffusion
        return linear_schedule(d.timesteps, d.beta_start, d.beta_end)

    return ServiceState(ae_model=ae_model, ext_model=ext_model, int_model=int_model,
                        config=config, stats=ae_ckpt.latent_stats,
                        ext_schedule=sched(ext_ckpt), int_schedule=sched(int_ckpt),
                        parents=parents)


class _ApiError(Exception):
    def __init__(self, status: int, body: dict):
        self.status = status
        self.body = body


def _fail(status, code):
    raise _ApiError(status, {"error": code})


async def _body(request: Request) -> dict:
    try:
        obj = await request.json()
    except Exception:
        _fail(400, "json")
    if not isinstance(obj, dict):
        _fail(400, "json")
    return obj


def _array(obj, code="shape") -> np.ndarray:
    try:
        return np.asarray(obj, dtype=np.float64)
    except (TypeError, ValueError):
        _fail(400, code)


def _finite(arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        _fail(422, "non_finite")


def _int_field(obj, key, default=None):
    value = obj.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        _fail(400, key)
    return value


def _latent_pair(obj, cfg) -> LatentPair:
    if not isinstance(obj, dict):
        _fail(400, "shape")
    e = _array(obj.get("e"))
    h = _array(obj.get("h"))
    if e.shape != (cfg.j, 3) or h.shape != (cfg.j, cfg.d_h):
        _fail(400, "shape")
    _finite(e)
    _finite(h)
    return LatentPair(e=e.astype(np.float32), h=h.astype(np.float32))


def create_app(state: ServiceState | None = None, frontend_dir=None) -> FastAPI:
    app = FastAPI(docs_url=None, redoc_url=None, openapi_url=None)
    app.state.jade = state

    def require_state() -> ServiceState:
        if app.state.jade is None:
            _fail(503, "loading")
        return app.state.jade

    @app.exception_handler(_ApiError)
    async def api_error(request, exc: _ApiError):
        return JSONResponse(status_code=exc.status, content=exc.body)

    @app.middleware("http")
    async def count_requests(request, call_next):
        if app.state.jade is not None:
            app.state.jade.request_count += 1
        return await call_next(request)

    @app.get("/health")
    async def health():
        if app.state.jade is None:
            return JSONResponse(status_code=503, content={"status": "loading"})
        return {"status": "ok"}

    @app.get("/model-info")
    async def model_info():
        st = require_state()
        cfg = st.config.ae
        return {"j": cfg.j, "d_h": cfg.d_h, "n": cfg.n, "d_z": cfg.d_z,
                "condition_mode": cfg.condition_mode,
                "timesteps": st.config.diffusion.timesteps,
                "parents": st.parents.tolist()}

    @app.post("/encode")
    async def encode(request: Request):
        st = require_state()
        obj = await _body(request)
        mesh = obj.get("mesh")
        if not isinstance(mesh, dict):
            _fail(400, "shape")
        verts = _array(mesh.get("vertices"))
        if verts.ndim != 2 or verts.shape[1] != 3:
            _fail(400, "shape")
        if verts.shape[0] != st.config.ae.n:
            _fail(400, "vertex_count")
        _finite(verts)
        pair = encode_vertices(st.ae_model, verts.astype(np.float32))
        return {"latents": latent_to_json(pair)}

    @app.post("/decode")
    async def decode(request: Request):
        st = require_state()
        obj = await _body(request)
        pair = _latent_pair(obj.get("latents"), st.config.ae)
        verts = decode_latents(st.ae_model, pair)
        return {"mesh": {"vertices": verts.tolist()}}

    @app.post("/sample_intrinsics")
    async def sample_intrinsics_ep(request: Request):
        st = require_state()
        obj = await _body(request)
        seed = _int_field(obj, "seed")
        e_raw = obj.get("e")
        e = _array(e_raw)
        if e.shape != (st.config.ae.j, 3):
            _fail(400, "shape")
        _finite(e)
        gen = torch.Generator().manual_seed(seed)
        h = sample_intrinsics_batch(st.int_model, e.astype(np.float32)[None],
                                    st.int_schedule, st.stats, gen)[0]
        # the caller's e comes back verbatim; only h is drawn
        return {"latents": {"e": e_raw, "h": h.tolist()}}

    @app.post("/sample")
    async def sample(request: Request):
        st = require_state()
        obj = await _body(request)
        seed = _int_field(obj, "seed")
        count = _int_field(obj, "count", 1)
        if count < 1:
            _fail(400, "count")
        _, pairs = cascade_sample(st.ext_model, st.int_model, st.ae_model,
                                  st.ext_schedule, st.int_schedule, st.stats, count,
                                  torch.Generator().manual_seed(seed),
                                  torch.Generator().manual_seed(seed + 1))
        return {"latents": [latent_to_json(p) for p in pairs]}

    @app.post("/interpolate")
    async def interpolate(request: Request):
        st = require_state()
        obj = await _body(request)
        alpha = obj.get("alpha")
        if isinstance(alpha, bool) or not isinstance(alpha, (int, float)):
            _fail(400, "alpha")
        if not 0.0 <= alpha <= 1.0:
            _fail(400, "alpha")
        which = obj.get("which", "both")
        if which not in INTERP_WHICH:
            _fail(400, "which")
        a = _latent_pair(obj.get("from"), st.config.ae)
        b = _latent_pair(obj.get("to"), st.config.ae)
        mixed = interpolate_latents(a, b, float(alpha), which)
        return {"latents": latent_to_json(mixed)}

    if frontend_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="frontend")

    return app
