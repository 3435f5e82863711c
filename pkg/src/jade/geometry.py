"""Articulated-body geometry: skeletons, skinning, the synthetic dataset
generator, and the mesh / dataset file formats.

The synthetic generator builds capsule-limbed creatures with a known skeleton,
exact joint positions from forward kinematics, and two-bone skinning weights.
It is the ground-truth oracle for everything trained downstream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, FormatError, ParseError, ShapeError, StructureError

RINGS_PER_BONE = 8
BONE_RADIUS_FRACTION = 0.12     # capsule radius as a fraction of bone length
CAPSULE_SPAN = (0.15, 0.85)     # occupied fraction of the bone, keeps joints clear
BLEND_ZONE = 0.2                # bone fraction near the parent joint that blends
ROOT_STUB_LENGTH = 0.3          # rest length of the root capsule, along -z
POSE_LIMIT = 0.9                # |axis angle| bound per axis for anchor poses, radians
POSE_JITTER = 0.1               # per-pose deviation around its anchor
POSE_ANCHORS = 4                # anchor poses per subject


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (N, 3) float
    faces: np.ndarray     # (F, 3) int, indices into vertices


@dataclass(frozen=True)
class Skeleton:
    parent: np.ndarray       # (J,) int, parent[0] == -1
    rest_offset: np.ndarray  # (J, 3) bone vector in the parent frame

    @property
    def joint_count(self) -> int:
        return len(self.parent)


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray  # (J, 3) axis-angle per joint, radians


@dataclass(frozen=True)
class SynthBodySpec:
    skeleton: Skeleton
    bone_scale: np.ndarray        # (J,) length multiplier, subject identity
    capsule_radius: np.ndarray    # (J,) radius multiplier, subject identity
    ring_points: int              # points per capsule ring (M)
    skin_weights: np.ndarray      # (N, J) row-stochastic, <= 2 nonzeros per row
    template_vertices: np.ndarray  # (N, 3) rest-pose surface
    faces: np.ndarray             # (F, 3)


@dataclass
class BodySample:
    vertices: np.ndarray  # (N, 3) float32
    joints: np.ndarray    # (J, 3) float32
    subject_id: int
    pose_id: int


def zero_pose(j: int) -> Pose:
    return Pose(np.zeros((j, 3)))


def validate_skeleton(skeleton: Skeleton) -> None:
    parent = skeleton.parent
    if len(parent) < 1 or parent[0] != -1:
        raise StructureError("joint 0 must be the root (parent -1)")
    for i in range(1, len(parent)):
        if not 0 <= parent[i] < i:
            raise StructureError(f"parent[{i}]={parent[i]} breaks topological order (cycle or bad index)")


def pelvis_normalize(sample: BodySample) -> BodySample:
    """Translate so the root joint sits at the origin. Idempotent."""
    root = sample.joints[0].copy()
    return replace(sample, vertices=sample.vertices - root, joints=sample.joints - root)


def axis_angle_to_matrix(aa: np.ndarray) -> np.ndarray:
    """Rodrigues formula, vectorized over leading dims; stable near zero."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    small = theta < 1e-8
    axis = np.where(small, 0.0, aa / np.where(small, 1.0, theta))
    t = theta[..., 0]
    sin_t = np.sin(t)
    cos_t = np.cos(t)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zeros = np.zeros_like(x)
    k = np.stack([
        np.stack([zeros, -z, y], axis=-1),
        np.stack([z, zeros, -x], axis=-1),
        np.stack([-y, x, zeros], axis=-1),
    ], axis=-2)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + sin_t[..., None, None] * k + (1.0 - cos_t)[..., None, None] * (k @ k)


def forward_kinematics(skeleton: Skeleton, bone_scale: np.ndarray, pose: Pose):
    """Joints and global rigid transforms for a posed, scaled skeleton.

    transform_i = transform_parent(i) o Rot(rotation_i) o Trans(scale_i * rest_offset_i);
    the joint position is the translation part. Returns (joints, (R, t)) with
    R (J,3,3) and t (J,3).
    """
    validate_skeleton(skeleton)
    j = skeleton.joint_count
    local_r = axis_angle_to_matrix(np.asarray(pose.rotation, dtype=np.float64))
    offsets = np.asarray(bone_scale, dtype=np.float64)[:, None] * skeleton.rest_offset
    glob_r = np.empty((j, 3, 3))
    glob_t = np.empty((j, 3))
    glob_r[0] = local_r[0]
    glob_t[0] = glob_r[0] @ offsets[0]
    for i in range(1, j):
        p = skeleton.parent[i]
        glob_r[i] = glob_r[p] @ local_r[i]
        glob_t[i] = glob_t[p] + glob_r[i] @ offsets[i]
    return glob_t.copy(), (glob_r, glob_t)


def linear_blend_skin(spec: SynthBodySpec, pose: Pose) -> BodySample:
    """Skin the template: x_n = sum_j w_nj (T_j o Tbar_j^-1)(xbar_n), pelvis-normalized."""
    j = spec.skeleton.joint_count
    _, (rest_r, rest_t) = forward_kinematics(spec.skeleton, spec.bone_scale, zero_pose(j))
    joints, (pose_r, pose_t) = forward_kinematics(spec.skeleton, spec.bone_scale, pose)
    # A_j = T_j o Tbar_j^-1 as rotation + translation
    rel_r = pose_r @ rest_r.transpose(0, 2, 1)
    rel_t = pose_t - np.einsum("jab,jb->ja", rel_r, rest_t)
    per_joint = np.einsum("jab,nb->nja", rel_r, spec.template_vertices) + rel_t[None, :, :]
    verts = np.einsum("nj,nja->na", spec.skin_weights, per_joint)
    sample = BodySample(
        vertices=verts.astype(np.float32),
        joints=joints.astype(np.float32),
        subject_id=-1,
        pose_id=-1,
    )
    return pelvis_normalize(sample)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def base_skeleton(j: int) -> Skeleton:
    """Deterministic articulated tree for a given joint count.

    A near-vertical spine chain carries limb chains of up to two joints,
    anchored round-robin on the spine with alternating lateral directions.
    """
    if j < 2:
        raise ConfigError("need at least 2 joints")
    rng = np.random.default_rng(1009 * j + 17)
    parent = np.full(j, -1, dtype=np.int64)
    offsets = np.zeros((j, 3))
    n_spine = min(j - 1, max(1, (j - 1) // 3))
    for i in range(1, n_spine + 1):
        parent[i] = i - 1
        offsets[i] = _unit(np.array([0.0, 0.0, 1.0]) + 0.12 * rng.normal(size=3)) * 0.4

    spine = list(range(n_spine, -1, -1))  # top of the spine first
    anchor_cycle = 0
    side = 1.0
    limb_parent = -1
    limb_remaining = 0
    limb_dir = np.zeros(3)
    for i in range(n_spine + 1, j):
        if limb_remaining == 0:
            anchor = spine[anchor_cycle % len(spine)]
            anchor_cycle += 1
            lateral = np.array([side, 0.35 * rng.normal(), -0.45])
            limb_dir = _unit(lateral + 0.1 * rng.normal(size=3))
            side = -side
            parent[i] = anchor
            limb_remaining = 1  # one continuation joint after this one
        else:
            parent[i] = limb_parent
            limb_dir = _unit(limb_dir + 0.15 * rng.normal(size=3))
            limb_remaining -= 1
        offsets[i] = limb_dir * 0.35
        limb_parent = i
    return Skeleton(parent=parent, rest_offset=offsets)


def _ring_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([1.0, 0.0, 0.0])
    if abs(np.dot(_unit(axis), ref)) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    n1 = _unit(np.cross(axis, ref))
    n2 = _unit(np.cross(axis, n1))
    return n1, n2


def build_capsule_template(skeleton: Skeleton, bone_scale: np.ndarray,
                           capsule_radius: np.ndarray, ring_points: int):
    """Rest-pose capsule surface around every bone plus a root stub.

    Each joint carries one capsule of RINGS_PER_BONE rings with `ring_points`
    points per ring, spanning the middle of its bone so neighboring capsules
    stay clear of the joints. Returns (vertices, faces, skin_weights).
    """
    j = skeleton.joint_count
    m = ring_points
    rings = RINGS_PER_BONE
    rest_joints, _ = forward_kinematics(skeleton, bone_scale, zero_pose(j))

    verts = np.zeros((j * rings * m, 3))
    weights = np.zeros((j * rings * m, j))
    faces: list[tuple[int, int, int]] = []
    phi = 2.0 * np.pi * np.arange(m) / m
    lo, hi = CAPSULE_SPAN

    for bone in range(j):
        if bone == 0:
            start = rest_joints[0]
            end = rest_joints[0] + np.array([0.0, 0.0, -ROOT_STUB_LENGTH * bone_scale[0]])
        else:
            start = rest_joints[skeleton.parent[bone]]
            end = rest_joints[bone]
        axis = end - start
        length = np.linalg.norm(axis)
        n1, n2 = _ring_frame(axis)
        radius = BONE_RADIUS_FRACTION * length * capsule_radius[bone]
        base = bone * rings * m
        for k in range(rings):
            s = k / (rings - 1)
            u = lo + s * (hi - lo)
            center = start + u * axis
            taper = np.sqrt(1.0 - 0.8 * (2.0 * s - 1.0) ** 2)
            ring = center + radius * taper * (np.cos(phi)[:, None] * n1 + np.sin(phi)[:, None] * n2)
            idx = slice(base + k * m, base + (k + 1) * m)
            verts[idx] = ring
            if bone == 0:
                weights[idx, 0] = 1.0
            elif u < BLEND_ZONE:
                w_parent = 0.5 * (1.0 - u / BLEND_ZONE)
                weights[idx, skeleton.parent[bone]] = w_parent
                weights[idx, bone] = 1.0 - w_parent
            else:
                weights[idx, bone] = 1.0
        # side quads between consecutive rings
        for k in range(rings - 1):
            for q in range(m):
                a = base + k * m + q
                b = base + k * m + (q + 1) % m
                c = base + (k + 1) * m + (q + 1) % m
                d = base + (k + 1) * m + q
                faces.append((a, b, c))
                faces.append((a, c, d))
        # cap fans over the end rings
        for ring_start in (base, base + (rings - 1) * m):
            for q in range(1, m - 1):
                faces.append((ring_start, ring_start + q, ring_start + q + 1))

    return verts, np.array(faces, dtype=np.int64), weights


def synth_subject(seed: int, j: int = 24, m: int = 8) -> SynthBodySpec:
    """Deterministic subject: shared skeleton, seed-sampled identity parameters."""
    if j < 2:
        raise ConfigError("synth_subject needs J >= 2")
    if m < 4:
        raise ConfigError("synth_subject needs M >= 4")
    skeleton = base_skeleton(j)
    rng = np.random.default_rng(seed)
    bone_scale = rng.uniform(0.8, 1.2, size=j)
    capsule_radius = rng.uniform(0.7, 1.3, size=j)
    verts, faces, weights = build_capsule_template(skeleton, bone_scale, capsule_radius, m)
    return SynthBodySpec(
        skeleton=skeleton,
        bone_scale=bone_scale,
        capsule_radius=capsule_radius,
        ring_points=m,
        skin_weights=weights,
        template_vertices=verts,
        faces=faces,
    )


def subject_seed(dataset_seed: int, subject_index: int) -> int:
    return dataset_seed * 1_000_003 + subject_index


def synth_dataset(subjects: int, poses_per_subject: int, seed: int,
                  j: int = 24, m: int = 8):
    """Pelvis-normalized samples for `subjects` identities, `poses_per_subject` each.

    Returns (samples, specs). Poses cluster around POSE_ANCHORS anchor poses
    per subject (anchor index cycles with pose_id), the way captured motion
    revisits a few motifs; each pose jitters within +-POSE_JITTER of its anchor.
    """
    if subjects < 1 or poses_per_subject < 1:
        raise ConfigError("need at least one subject and one pose")
    samples: list[BodySample] = []
    specs: list[SynthBodySpec] = []
    for s in range(subjects):
        spec = synth_subject(subject_seed(seed, s), j, m)
        specs.append(spec)
        pose_rng = np.random.default_rng([seed, s, 7])
        anchors = pose_rng.uniform(-POSE_LIMIT, POSE_LIMIT, size=(POSE_ANCHORS, j, 3))
        for p in range(poses_per_subject):
            angles = anchors[p % POSE_ANCHORS] + pose_rng.uniform(
                -POSE_JITTER, POSE_JITTER, size=(j, 3))
            sample = linear_blend_skin(spec, Pose(angles))
            sample.subject_id = s
            sample.pose_id = p
            samples.append(sample)
    return samples, specs


def body_height(vertices: np.ndarray) -> float:
    """Extent along z, the reference unit for relative error thresholds."""
    return float(vertices[:, 2].max() - vertices[:, 2].min())


def bone_lengths(joints: np.ndarray, parent: np.ndarray) -> np.ndarray:
    """Per-bone lengths ||joint_i - joint_parent(i)|| for i >= 1; joints (..., J, 3)."""
    child = joints[..., 1:, :]
    par = np.take(joints, parent[1:], axis=-2)
    return np.linalg.norm(child - par, axis=-1)


# ---------------------------------------------------------------------------
# OBJ mesh IO

def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def load_obj(path) -> TriangleMesh:
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            kind = tokens[0]
            if kind == "v":
                if len(tokens) != 4:
                    raise ParseError(f"line {lineno}: vertex needs 3 coordinates")
                try:
                    verts.append([float(t) for t in tokens[1:]])
                except ValueError:
                    raise ParseError(f"line {lineno}: bad vertex coordinate") from None
            elif kind == "f":
                if len(tokens) > 4:
                    raise FormatError(f"line {lineno}: only triangle faces are supported")
                if len(tokens) != 4:
                    raise ParseError(f"line {lineno}: face needs 3 indices")
                idx = []
                for t in tokens[1:]:
                    head = t.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise ParseError(f"line {lineno}: bad face index") from None
                    if i < 1:
                        raise ParseError(f"line {lineno}: face indices are 1-based")
                    idx.append(i - 1)
                faces.append(idx)
            elif kind in ("vn", "vt", "g", "o", "s", "usemtl", "mtllib"):
                continue
            else:
                raise ParseError(f"line {lineno}: unknown record {kind!r}")
    vertices = np.array(verts, dtype=np.float64).reshape(-1, 3)
    face_arr = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if face_arr.size and face_arr.max() >= len(vertices):
        raise FormatError("face index out of range")
    return TriangleMesh(vertices=vertices, faces=face_arr)


# ---------------------------------------------------------------------------
# Dataset pack format: "JDS1", u32 S,N,J, then f32 vertices / joints and
# u32 subject / pose ids, all little-endian.

PACK_MAGIC = b"JDS1"


def pack_dataset(samples: list[BodySample], path) -> None:
    if not samples:
        raise FormatError("cannot pack an empty dataset (S >= 1)")
    n = samples[0].vertices.shape[0]
    j = samples[0].joints.shape[0]
    for s in samples:
        if s.vertices.shape != (n, 3) or s.joints.shape != (j, 3):
            raise ShapeError("all samples must share N and J")
        if s.subject_id < 0 or s.pose_id < 0:
            raise FormatError("subject and pose ids must be non-negative")
    with open(path, "wb") as fh:
        fh.write(PACK_MAGIC)
        fh.write(struct.pack("<III", len(samples), n, j))
        for s in samples:
            fh.write(np.ascontiguousarray(s.vertices, dtype="<f4").tobytes())
        for s in samples:
            fh.write(np.ascontiguousarray(s.joints, dtype="<f4").tobytes())
        fh.write(np.array([s.subject_id for s in samples], dtype="<u4").tobytes())
        fh.write(np.array([s.pose_id for s in samples], dtype="<u4").tobytes())


def unpack_dataset(path) -> list[BodySample]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != PACK_MAGIC:
        raise FormatError("bad magic; not a dataset pack")
    if len(blob) < 16:
        raise FormatError("truncated header")
    s, n, j = struct.unpack("<III", blob[4:16])
    if s < 1:
        raise FormatError("dataset pack must hold S >= 1 samples")
    expect = 16 + s * n * 3 * 4 + s * j * 3 * 4 + s * 4 + s * 4
    if len(blob) != expect:
        raise FormatError(f"pack length {len(blob)} != expected {expect}")
    off = 16
    verts = np.frombuffer(blob, dtype="<f4", count=s * n * 3, offset=off).reshape(s, n, 3)
    off += s * n * 3 * 4
    joints = np.frombuffer(blob, dtype="<f4", count=s * j * 3, offset=off).reshape(s, j, 3)
    off += s * j * 3 * 4
    subj = np.frombuffer(blob, dtype="<u4", count=s, offset=off)
    off += s * 4
    pose = np.frombuffer(blob, dtype="<u4", count=s, offset=off)
    return [
        BodySample(
            vertices=verts[i].copy(),
            joints=joints[i].copy(),
            subject_id=int(subj[i]),
            pose_id=int(pose[i]),
        )
        for i in range(s)
    ]
