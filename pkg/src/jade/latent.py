"""Latent containers and operations shared by the autoencoder, the diffusion
stages, and the service wire format.

A body is two factors: extrinsics e (J, 3), the predicted joint positions, and
intrinsics h (J, D_h), per-joint shape codes. Both live here as float32 numpy
arrays; model code converts at its own boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

STD_FLOOR = 1e-6  # keeps standardization invertible on near-constant dims


@dataclass(frozen=True)
class Extrinsics:
    e: np.ndarray  # (J, 3) float32


@dataclass(frozen=True)
class Intrinsics:
    h: np.ndarray  # (J, D_h) float32


@dataclass(frozen=True)
class LatentPair:
    e: np.ndarray  # (J, 3) float32
    h: np.ndarray  # (J, D_h) float32


@dataclass(frozen=True)
class LatentStats:
    e_mean: np.ndarray  # (3,)
    e_std: np.ndarray   # (3,)
    h_mean: np.ndarray  # (D_h,)
    h_std: np.ndarray   # (D_h,)

    def to_json(self) -> dict:
        return {
            "e_mean": self.e_mean.tolist(),
            "e_std": self.e_std.tolist(),
            "h_mean": self.h_mean.tolist(),
            "h_std": self.h_std.tolist(),
        }

    @staticmethod
    def from_json(obj: dict) -> "LatentStats":
        try:
            return LatentStats(
                e_mean=np.asarray(obj["e_mean"], dtype=np.float32),
                e_std=np.asarray(obj["e_std"], dtype=np.float32),
                h_mean=np.asarray(obj["h_mean"], dtype=np.float32),
                h_std=np.asarray(obj["h_std"], dtype=np.float32),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad latent stats: {exc}") from None


def _check_pair(pair: LatentPair) -> None:
    if pair.e.ndim != 2 or pair.e.shape[1] != 3:
        raise ShapeError(f"extrinsics must be (J, 3), got {pair.e.shape}")
    if pair.h.ndim != 2 or pair.h.shape[0] != pair.e.shape[0]:
        raise ShapeError(f"intrinsics must be (J, D_h), got {pair.h.shape} for J={pair.e.shape[0]}")


def interpolate(a: LatentPair, b: LatentPair, alpha: float) -> LatentPair:
    """Elementwise lerp in latent space; alpha 0 returns a, alpha 1 returns b."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    _check_pair(a)
    _check_pair(b)
    if a.e.shape != b.e.shape or a.h.shape != b.h.shape:
        raise ShapeError("latent pairs disagree on shape")
    if alpha == 0.0:
        return LatentPair(a.e.copy(), a.h.copy())
    if alpha == 1.0:
        return LatentPair(b.e.copy(), b.h.copy())
    w = np.float32(alpha)
    return LatentPair(
        e=(1 - w) * a.e + w * b.e,
        h=(1 - w) * a.h + w * b.h,
    )


def swap_intrinsics(a: LatentPair, b: LatentPair) -> tuple[LatentPair, LatentPair]:
    """Exchange shape codes while keeping each body's skeleton."""
    _check_pair(a)
    _check_pair(b)
    if a.h.shape != b.h.shape:
        raise ShapeError("intrinsics disagree on shape")
    return LatentPair(a.e, b.h), LatentPair(b.e, a.h)


def compute_stats(pairs: list[LatentPair]) -> LatentStats:
    """Per-dimension mean/std over every joint of every pair; stds are floored."""
    if not pairs:
        raise ConfigError("need at least one latent pair for statistics")
    e = np.concatenate([p.e for p in pairs], axis=0).astype(np.float64)
    h = np.concatenate([p.h for p in pairs], axis=0).astype(np.float64)
    return LatentStats(
        e_mean=e.mean(0).astype(np.float32),
        e_std=np.maximum(e.std(0), STD_FLOOR).astype(np.float32),
        h_mean=h.mean(0).astype(np.float32),
        h_std=np.maximum(h.std(0), STD_FLOOR).astype(np.float32),
    )


def standardize(pair: LatentPair, stats: LatentStats) -> LatentPair:
    return LatentPair(
        e=(pair.e - stats.e_mean) / stats.e_std,
        h=(pair.h - stats.h_mean) / stats.h_std,
    )


def destandardize(pair: LatentPair, stats: LatentStats) -> LatentPair:
    return LatentPair(
        e=pair.e * stats.e_std + stats.e_mean,
        h=pair.h * stats.h_std + stats.h_mean,
    )


def latent_to_json(pair: LatentPair) -> dict:
    _check_pair(pair)
    return {"e": pair.e.tolist(), "h": pair.h.tolist()}


def latent_from_json(obj: dict) -> LatentPair:
    """Parse {"e": [[3] x J], "h": [[D_h] x J]}; rejects ragged or non-finite data."""
    if not isinstance(obj, dict) or "e" not in obj or "h" not in obj:
        raise FormatError("latent JSON needs 'e' and 'h' keys")
    try:
        e = np.asarray(obj["e"], dtype=np.float32)
        h = np.asarray(obj["h"], dtype=np.float32)
    except (TypeError, ValueError):
        raise FormatError("latent JSON arrays must be rectangular and numeric") from None
    if e.ndim != 2 or e.shape[1] != 3:
        raise FormatError(f"'e' must be (J, 3), got {e.shape}")
    if h.ndim != 2 or h.shape[0] != e.shape[0]:
        raise FormatError(f"'h' must be (J, D_h) with J={e.shape[0]}, got {h.shape}")
    if not (np.isfinite(e).all() and np.isfinite(h).all()):
        raise FormatError("latent JSON holds non-finite values")
    return LatentPair(e=e, h=h)
