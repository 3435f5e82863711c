"""Differentiable building blocks shared by every network in the package.

All models run on top of torch tensors; this module pins down the handful of
primitives they are built from (attention, layer norm, adaptive modulation),
the parameter-store conventions used for checkpointing and EMA, deterministic
initialization, and a finite-difference gradient checker. Training runs in
float32; gradient checks rebuild the same code paths in float64.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping

import torch
import torch.nn as nn

from .errors import EvaluationError, ShapeError

LN_EPS = 1e-5

# Named map from parameter path to tensor. Plain dicts keep insertion order,
# which is what checkpoint byte-stability relies on.
ParameterStore = dict[str, torch.Tensor]


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def assert_finite(name: str, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise EvaluationError(f"non-finite values in {name}")


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int = 1) -> torch.Tensor:
    """Scaled dot-product multi-head attention over the last two dims.

    q is (..., Jq, D) and k, v are (..., Jk, D) with shared leading dims;
    per-head scale is 1/sqrt(D/heads). Softmax rows sum to 1.
    """
    if q.ndim < 2 or k.ndim < 2:
        raise ShapeError("attention expects at least 2 dims")
    if k.shape != v.shape:
        raise ShapeError(f"key/value shapes differ: {tuple(k.shape)} {tuple(v.shape)}")
    if q.shape[:-2] != k.shape[:-2] or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key shapes incompatible: {tuple(q.shape)} {tuple(k.shape)}")
    *lead, jq, d = q.shape
    jk = k.shape[-2]
    if d % heads != 0:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    hd = d // heads

    def split(x: torch.Tensor, j: int) -> torch.Tensor:
        return x.reshape(*lead, j, heads, hd).transpose(-2, -3)  # (..., heads, J, hd)

    qh, kh, vh = split(q, jq), split(k, jk), split(v, jk)
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(hd)
    weights = torch.softmax(logits, dim=-1)
    out = weights @ vh
    return out.transpose(-2, -3).reshape(*lead, jq, d)


def _normalize(x: torch.Tensor, eps: float) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    """Per-row layer normalization over the last dimension."""
    d = x.shape[-1]
    if gain.shape[-1] != d or bias.shape[-1] != d:
        raise ShapeError(f"layer_norm gain/bias width must be {d}")
    return _normalize(x, eps) * gain + bias


def adaptive_modulate(x: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    """(1 + scale) * LN(x) + shift with unit-gain, zero-bias normalization."""
    if scale.shape != x.shape or shift.shape != x.shape:
        raise ShapeError(f"modulation shapes differ: {tuple(x.shape)} vs {tuple(scale.shape)}")
    return _normalize(x, LN_EPS) * (1.0 + scale) + shift


class LayerNorm(nn.Module):
    """Learnable layer norm routed through the functional primitive."""

    def __init__(self, dim: int, eps: float = LN_EPS):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class ZeroInitLinear(nn.Linear):
    """Linear layer whose weights and bias start at zero (modulation outputs)."""


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        return self.proj(attention(q, k, v, self.heads))


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        k, v = self.kv(context).chunk(2, dim=-1)
        return self.proj(attention(self.q(x), k, v, self.heads))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm transformer encoder block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class CrossEncoderBlock(nn.Module):
    """Pre-norm block with an extra cross-attention sublayer."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm_q = LayerNorm(dim)
        self.norm_ctx = LayerNorm(dim)
        self.cross = CrossAttention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.cross(self.norm_q(x), self.norm_ctx(context))
        return x + self.mlp(self.norm2(x))


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Deterministic initialization shared by every model.

    Linear weights ~ uniform(+-1/sqrt(fan_in)) with zero bias, parameters
    named `pos` ~ normal(0, 0.02), ZeroInitLinear layers all zero. Layer-norm
    gains and biases keep their constructed 1/0 values. Traversal follows
    registration order, so equal seeds give bitwise-equal parameters.
    """
    for m in module.modules():
        if isinstance(m, ZeroInitLinear):
            with torch.no_grad():
                m.weight.zero_()
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
    for name, p in module.named_parameters():
        if name.split(".")[-1] == "pos":
            with torch.no_grad():
                p.normal_(0.0, 0.02, generator=generator)


def parameter_store(module: nn.Module) -> ParameterStore:
    """Snapshot of the module's parameters in registration order."""
    return {name: p.detach().clone() for name, p in module.named_parameters()}


def load_parameter_store(module: nn.Module, store: Mapping[str, torch.Tensor]) -> None:
    params = dict(module.named_parameters())
    for name, tensor in store.items():
        if name not in params:
            raise ShapeError(f"unknown parameter path {name}")
        if tuple(params[name].shape) != tuple(tensor.shape):
            raise ShapeError(f"shape mismatch for {name}")
        with torch.no_grad():
            params[name].copy_(tensor)


def clone_store(store: Mapping[str, torch.Tensor]) -> ParameterStore:
    return {name: t.detach().clone() for name, t in store.items()}


def grad_check(f: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor], eps: float = 1e-5) -> float:
    """Max relative error between autograd and central differences.

    `f` must be a deterministic scalar function of the tensors in `params`
    (float64, requires_grad). Relative error per element is
    |analytic - central| / max(1, |central|).
    """
    names = list(params)
    tensors = [params[n] for n in names]
    for name, t in zip(names, tensors):
        if t.dtype != torch.float64:
            raise EvaluationError(f"grad_check requires float64 parameters, got {t.dtype} for {name}")
    loss = f()
    if not torch.isfinite(loss):
        raise EvaluationError("non-finite loss at the expansion point")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)

    max_err = 0.0
    with torch.no_grad():
        for tensor, grad in zip(tensors, grads):
            flat = tensor.reshape(-1)
            gflat = None if grad is None else grad.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(f())
                flat[i] = orig - eps
                f_minus = float(f())
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise EvaluationError("non-finite loss under perturbation")
                central = (f_plus - f_minus) / (2.0 * eps)
                analytic = 0.0 if gflat is None else float(gflat[i])
                err = abs(analytic - central) / max(1.0, abs(central))
                max_err = max(max_err, err)
    return max_err


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def module_dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def iter_minibatches(n: int, batch_size: int, rng) -> Iterable[np.ndarray]:
    """Shuffled index batches; rng is a numpy Generator."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
