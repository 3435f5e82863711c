"""Evaluation metrics: per-vertex reconstruction error, pairwise diversity,
mesh self-intersection rate, and latent-space moment diagnostics.

Each metric keeps a brute-force twin used by the test suite; the accelerated
paths must agree with the twins exactly (set equality for intersections,
1e-9 numerically for the rest).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError, FormatError, ShapeError
from .geometry import TriangleMesh

SI_EPS = 1e-9


def mpvpe(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Mean unsquared Euclidean distance between corresponding vertices."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape or x.ndim != 2 or x.shape[1] != 3:
        raise ShapeError(f"vertex arrays must share (N, 3), got {x.shape} vs {x_hat.shape}")
    return float(np.linalg.norm(x - x_hat, axis=1).mean())


def apd(samples) -> float:
    """Average pairwise distance: mean over unordered sample pairs of the
    per-joint mean Euclidean distance. Diversity measure for joint sets.
    """
    arr = np.asarray([np.asarray(s, dtype=np.float64) for s in samples])
    if arr.ndim != 3 or arr.shape[0] < 2 or arr.shape[2] != 3:
        raise EvaluationError("apd needs >= 2 samples of shape (J, 3)")
    s = arr.shape[0]
    total = 0.0
    for i in range(s):
        # mean joint distance from sample i to all later samples, vectorized
        d = np.linalg.norm(arr[i + 1:] - arr[i], axis=2).mean(axis=1)
        total += float(d.sum())
    return total / (s * (s - 1) / 2)


def apd_brute(samples) -> float:
    arr = [np.asarray(s, dtype=np.float64) for s in samples]
    pairs = 0
    total = 0.0
    for i in range(len(arr)):
        for k in range(i + 1, len(arr)):
            acc = 0.0
            for j in range(arr[i].shape[0]):
                acc += float(np.linalg.norm(arr[i][j] - arr[k][j]))
            total += acc / arr[i].shape[0]
            pairs += 1
    return total / pairs


# ---------------------------------------------------------------------------
# Self-intersection rate

def _orient(a, b, c) -> int:
    v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    if v > SI_EPS:
        return 1
    if v < -SI_EPS:
        return -1
    return 0


def _segments_cross(p1, p2, q1, q2) -> bool:
    o1 = _orient(p1, p2, q1)
    o2 = _orient(p1, p2, q2)
    o3 = _orient(q1, q2, p1)
    o4 = _orient(q1, q2, p2)
    return o1 * o2 < 0 and o3 * o4 < 0


def _point_in_triangle(p, tri) -> bool:
    s = [_orient(tri[0], tri[1], p), _orient(tri[1], tri[2], p), _orient(tri[2], tri[0], p)]
    return all(v > 0 for v in s) or all(v < 0 for v in s)


def _coplanar_intersect(t1, t2, normal) -> bool:
    axis = int(np.argmax(np.abs(normal)))
    keep = [i for i in range(3) if i != axis]
    a = [v[keep] for v in t1]
    b = [u[keep] for u in t2]
    for i in range(3):
        for j in range(3):
            if _segments_cross(a[i], a[(i + 1) % 3], b[j], b[(j + 1) % 3]):
                return True
    return _point_in_triangle(a[0], b) or _point_in_triangle(b[0], a)


def _plane_interval(proj, dist):
    """Parametric interval where a triangle crosses the other's plane."""
    pos = [i for i in range(3) if dist[i] > SI_EPS]
    neg = [i for i in range(3) if dist[i] < -SI_EPS]
    if not pos and not neg:
        return None
    ts = []
    for i in pos:
        for k in neg:
            ts.append(proj[i] + (proj[k] - proj[i]) * dist[i] / (dist[i] - dist[k]))
    for i in range(3):
        if abs(dist[i]) <= SI_EPS:
            ts.append(proj[i])
    if not ts:
        return None
    return min(ts), max(ts)


def triangles_intersect(t1: np.ndarray, t2: np.ndarray) -> bool:
    """Proper intersection of two 3D triangles; grazing contact within the
    epsilon band does not count. Interval test on the plane-intersection line,
    coplanar pairs by 2D projection.
    """
    n2 = np.cross(t2[1] - t2[0], t2[2] - t2[0])
    dv = (t1 - t2[0]) @ n2
    if np.all(dv > SI_EPS) or np.all(dv < -SI_EPS):
        return False
    n1 = np.cross(t1[1] - t1[0], t1[2] - t1[0])
    du = (t2 - t1[0]) @ n1
    if np.all(du > SI_EPS) or np.all(du < -SI_EPS):
        return False
    line = np.cross(n1, n2)
    axis = int(np.argmax(np.abs(line)))
    if abs(line[axis]) < SI_EPS:
        return _coplanar_intersect(t1, t2, n1)
    i1 = _plane_interval(t1[:, axis], dv)
    i2 = _plane_interval(t2[:, axis], du)
    if i1 is None or i2 is None:
        return False
    return max(i1[0], i2[0]) < min(i1[1], i2[1]) - SI_EPS


def _validate_mesh(mesh: TriangleMesh) -> tuple[np.ndarray, np.ndarray]:
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    faces = np.asarray(mesh.faces, dtype=np.int64)
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise ShapeError("faces must be (F, 3)")
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise EvaluationError("face index out of range")
    same = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
    if same.any():
        raise EvaluationError(f"degenerate face at index {int(np.argmax(same))}")
    return verts, faces


def _shares_vertex(faces: np.ndarray) -> np.ndarray:
    return (faces[:, None, :, None] == faces[None, :, None, :]).any(axis=(2, 3))


def intersecting_faces(mesh: TriangleMesh, broad_phase: bool = True) -> set[int]:
    """Indices of faces properly intersecting a non-adjacent face.

    broad_phase screens candidate pairs with axis-aligned bounding boxes; the
    result is contractually identical with it off (the brute-force twin).
    """
    verts, faces = _validate_mesh(mesh)
    f = len(faces)
    if f < 2:
        return set()
    tris = verts[faces]  # (F, 3, 3)
    adjacent = _shares_vertex(faces)
    if broad_phase:
        lo = tris.min(axis=1)
        hi = tris.max(axis=1)
        overlap = np.ones((f, f), dtype=bool)
        for a in range(3):
            overlap &= lo[:, None, a] <= hi[None, :, a] + SI_EPS
            overlap &= lo[None, :, a] <= hi[:, None, a] + SI_EPS
        candidates = overlap & ~adjacent
    else:
        candidates = ~adjacent
    hit: set[int] = set()
    idx_i, idx_k = np.nonzero(np.triu(candidates, k=1))
    for i, k in zip(idx_i.tolist(), idx_k.tolist()):
        if i in hit and k in hit:
            continue
        if triangles_intersect(tris[i], tris[k]):
            hit.add(i)
            hit.add(k)
    return hit


def self_intersection_rate(mesh: TriangleMesh, broad_phase: bool = True) -> float:
    """Percentage of faces that properly intersect a non-adjacent face."""
    _, faces = _validate_mesh(mesh)
    if len(faces) == 0:
        return 0.0
    return 100.0 * len(intersecting_faces(mesh, broad_phase)) / len(faces)


def latent_moments(latents) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension empirical mean and variance over all joints of all samples.

    Accepts Intrinsics objects or raw (J, D) arrays.
    """
    rows = []
    for x in latents:
        arr = np.asarray(x.h if hasattr(x, "h") else x, dtype=np.float64)
        rows.append(arr.reshape(-1, arr.shape[-1]))
    if len(rows) < 2:
        raise EvaluationError("latent moments need >= 2 samples")
    stacked = np.concatenate(rows, axis=0)
    return stacked.mean(axis=0), stacked.var(axis=0)


@dataclass(frozen=True)
class EvalReport:
    mpvpe: float
    apd: float
    si_rate: float
    latent_moments: dict  # {"mean": [...], "var": [...]}
    sample_count: int

    def validate(self) -> None:
        vals = [self.mpvpe, self.apd, self.si_rate, float(self.sample_count)]
        vals += list(self.latent_moments.get("var", []))
        if not all(np.isfinite(v) for v in vals):
            raise EvaluationError("report holds non-finite values")
        if self.mpvpe < 0 or self.apd < 0 or self.si_rate < 0 or self.sample_count < 0:
            raise EvaluationError("report metrics must be non-negative")

    def to_json(self) -> dict:
        self.validate()
        return {
            "mpvpe": self.mpvpe,
            "apd": self.apd,
            "si_rate": self.si_rate,
            "latent_moments": self.latent_moments,
            "sample_count": self.sample_count,
        }

    @staticmethod
    def from_json(obj: dict) -> "EvalReport":
        try:
            report = EvalReport(
                mpvpe=float(obj["mpvpe"]),
                apd=float(obj["apd"]),
                si_rate=float(obj["si_rate"]),
                latent_moments=dict(obj["latent_moments"]),
                sample_count=int(obj["sample_count"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad evaluation report: {exc}") from None
        report.validate()
        return report
