"""Joint-token autoencoder: a point cloud becomes J tokens, each split into an
extrinsic joint position e_i and an intrinsic shape posterior (mu_i, logvar_i);
the decoder maps (E, H) back to N points through the shared positional
embedding. Includes the reconstruction / cross-consistency / prior loss suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from . import numerics
from .errors import ConfigError, ContractError, ShapeError

CONDITION_MODES = ("concat", "add", "cross_attention")


@dataclass(frozen=True)
class AEConfig:
    n: int = 1536
    j: int = 24
    d_z: int = 128            # token width
    d_h: int = 128            # intrinsic code width
    d_g: int = 256            # pooled global feature width
    l_blocks: int = 4         # mixing depth
    l_dec_blocks: int = 4     # decoder depth
    heads: int = 4
    mlp_ratio: float = 4.0
    condition_mode: str = "concat"
    lambda_j: float = 1.0
    lambda_c: float = 1.0
    lambda_kl: float = 1e-4
    point_hidden: tuple = (64, 128)
    token_hidden: int = 512

    def validate(self) -> None:
        if self.n % self.j != 0:
            raise ConfigError(f"N={self.n} must divide evenly into J={self.j} tokens")
        if self.d_z % self.heads != 0:
            raise ConfigError(f"D_z={self.d_z} not divisible by {self.heads} heads")
        if self.condition_mode not in CONDITION_MODES:
            raise ConfigError(f"condition_mode must be one of {CONDITION_MODES}")
        if min(self.n, self.j, self.d_z, self.d_h, self.d_g) < 1:
            raise ConfigError("dimensions must be positive")
        if len(self.point_hidden) != 2:
            raise ConfigError("point_hidden must list two widths")


class AEModel(nn.Module):
    """Encoder, decoder, and the one positional embedding both sides share.

    All methods take batched tensors: x is (B, N, 3), latents are (B, J, *).
    """

    def __init__(self, config: AEConfig):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        h1, h2 = c.point_hidden
        self.point_mlp = nn.Sequential(
            nn.Linear(3, h1), nn.ReLU(),
            nn.Linear(h1, h2), nn.ReLU(),
            nn.Linear(h2, c.d_g),
        )
        self.token_split = nn.Sequential(
            nn.Linear(c.d_g, c.token_hidden), nn.ReLU(),
            nn.Linear(c.token_hidden, c.j * c.d_z),
        )
        self.token_proj = nn.Linear(c.d_z, c.d_z)
        self.pos = nn.Parameter(torch.zeros(c.j, c.d_z))
        self.mix_blocks = nn.ModuleList(
            numerics.EncoderBlock(c.d_z, c.heads, c.mlp_ratio) for _ in range(c.l_blocks))
        self.mix_norm = numerics.LayerNorm(c.d_z)
        self.head_e = nn.Sequential(nn.Linear(c.d_z, c.d_z), nn.ReLU(), nn.Linear(c.d_z, 3))
        self.head_h = nn.Sequential(nn.Linear(c.d_z, c.d_z), nn.ReLU(), nn.Linear(c.d_z, 2 * c.d_h))

        if c.condition_mode == "concat":
            self.dec_proj = nn.Linear(3 + c.d_h, c.d_z)
        elif c.condition_mode == "add":
            self.dec_proj_e = nn.Linear(3, c.d_z)
            self.dec_proj_h = nn.Linear(c.d_h, c.d_z)
        else:
            self.dec_proj_h = nn.Linear(c.d_h, c.d_z)
            self.dec_ctx_e = nn.Linear(3, c.d_z)
        if c.condition_mode == "cross_attention":
            self.dec_blocks = nn.ModuleList(
                numerics.CrossEncoderBlock(c.d_z, c.heads, c.mlp_ratio) for _ in range(c.l_dec_blocks))
        else:
            self.dec_blocks = nn.ModuleList(
                numerics.EncoderBlock(c.d_z, c.heads, c.mlp_ratio) for _ in range(c.l_dec_blocks))
        self.dec_norm = numerics.LayerNorm(c.d_z)
        hidden = int(c.mlp_ratio * c.d_z)
        self.dec_head = nn.Sequential(
            nn.Linear(c.d_z, hidden), nn.ReLU(),
            nn.Linear(hidden, (c.n // c.j) * 3),
        )

    # -- encoder -----------------------------------------------------------

    def point_global(self, x: torch.Tensor) -> torch.Tensor:
        """Permutation-invariant pooled feature; accepts any point count."""
        if x.ndim != 3 or x.shape[-1] != 3:
            raise ShapeError(f"points must be (B, N, 3), got {tuple(x.shape)}")
        return self.point_mlp(x).amax(dim=1)

    def tokenize(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[1] != self.config.n or x.shape[2] != 3:
            raise ShapeError(f"expected (B, {self.config.n}, 3), got {tuple(x.shape)}")
        g = self.point_global(x)
        return self.token_split(g).reshape(-1, self.config.j, self.config.d_z)

    def mix(self, tokens: torch.Tensor):
        if tokens.ndim != 3 or tokens.shape[1:] != (self.config.j, self.config.d_z):
            raise ShapeError(f"tokens must be (B, {self.config.j}, {self.config.d_z})")
        z = self.token_proj(tokens) + self.pos
        for block in self.mix_blocks:
            z = block(z)
        z = self.mix_norm(z)
        e = self.head_e(z)
        mu, logvar = self.head_h(z).chunk(2, dim=-1)
        return e, mu, logvar

    def encode(self, x: torch.Tensor):
        """(B, N, 3) -> extrinsics (B, J, 3), posterior mu and logvar (B, J, D_h)."""
        return self.mix(self.tokenize(x))

    def reparameterize(self, mu: torch.Tensor, logvar: torch.Tensor,
                       generator: torch.Generator | None = None) -> torch.Tensor:
        """Posterior sample mu + exp(logvar/2) * eps; without a generator returns mu."""
        if mu.shape != logvar.shape:
            raise ShapeError("mu and logvar disagree on shape")
        if generator is None:
            return mu
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return mu + torch.exp(0.5 * logvar) * eps

    # -- decoder -----------------------------------------------------------

    def decode(self, e: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        c = self.config
        if e.ndim != 3 or e.shape[1:] != (c.j, 3):
            raise ShapeError(f"extrinsics must be (B, {c.j}, 3), got {tuple(e.shape)}")
        if h.shape != (e.shape[0], c.j, c.d_h):
            raise ShapeError(f"intrinsics must be (B, {c.j}, {c.d_h}), got {tuple(h.shape)}")
        if c.condition_mode == "concat":
            tokens = self.dec_proj(torch.cat([e, h], dim=-1))
        elif c.condition_mode == "add":
            tokens = self.dec_proj_e(e) + self.dec_proj_h(h)
        else:
            tokens = self.dec_proj_h(h)
        z = tokens + self.pos
        if c.condition_mode == "cross_attention":
            ctx = self.dec_ctx_e(e) + self.pos
            for block in self.dec_blocks:
                z = block(z, ctx)
        else:
            for block in self.dec_blocks:
                z = block(z)
        z = self.dec_norm(z)
        points = self.dec_head(z)
        return points.reshape(-1, c.n, 3)

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None):
        e, mu, logvar = self.encode(x)
        h = self.reparameterize(mu, logvar, generator)
        return {"e": e, "h": h, "mu": mu, "logvar": logvar, "x_hat": self.decode(e, h)}


def build_autoencoder(config: AEConfig, seed: int, dtype: torch.dtype = torch.float32) -> AEModel:
    model = AEModel(config).to(dtype)
    numerics.init_parameters(model, numerics.seeded_generator(seed))
    return model


# -- losses ----------------------------------------------------------------

def vertex_mse(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Per-sample mean over points of squared Euclidean distance; (B,)."""
    if x_hat.shape != x.shape:
        raise ShapeError("vertex tensors disagree on shape")
    return (x_hat - x).pow(2).sum(-1).mean(-1)


def joint_mse(e: torch.Tensor, joints: torch.Tensor) -> torch.Tensor:
    if e.shape != joints.shape:
        raise ShapeError("joint tensors disagree on shape")
    return (e - joints).pow(2).sum(-1).mean(-1)


def loss_rec(verts: torch.Tensor, joints: torch.Tensor, x_hat: torch.Tensor,
             e: torch.Tensor, lambda_j: float):
    """Vertex term plus weighted joint-supervision term, per sample."""
    v = vertex_mse(x_hat, verts)
    jt = joint_mse(e, joints)
    return v + lambda_j * jt, v, jt


def loss_prior(mu: torch.Tensor, logvar: torch.Tensor, lambda_kl: float) -> torch.Tensor:
    """Diagonal-Gaussian KL to N(0, I), averaged over joints, weighted; (B,)."""
    kl = 0.5 * (mu.pow(2) + torch.exp(logvar) - logvar - 1.0).sum(-1)
    return lambda_kl * kl.mean(-1)


def loss_cross(model: AEModel, verts1: torch.Tensor, verts2: torch.Tensor,
               subject1=None, subject2=None) -> torch.Tensor:
    """Swap posterior means between two poses of one subject and reconstruct
    each from the other's intrinsics; sum of both directions' vertex errors, (B,).
    """
    if subject1 is not None and subject2 is not None:
        s1 = torch.as_tensor(subject1)
        s2 = torch.as_tensor(subject2)
        if not torch.equal(s1, s2):
            raise ContractError("cross pairs must share a subject")
    e1, mu1, _ = model.encode(verts1)
    e2, mu2, _ = model.encode(verts2)
    return vertex_mse(model.decode(e1, mu2), verts1) + vertex_mse(model.decode(e2, mu1), verts2)


def loss_total(model: AEModel, verts1: torch.Tensor, joints1: torch.Tensor,
               verts2: torch.Tensor, joints2: torch.Tensor,
               generator: torch.Generator | None = None):
    """Full objective over a batch of same-subject pose pairs.

    Direct reconstruction uses sampled intrinsics; the cross term reuses the
    posterior means so it is symmetric in its arguments. Returns (scalar,
    breakdown) where the weighted breakdown terms sum to the scalar.
    """
    cfg = model.config
    e1, mu1, lv1 = model.encode(verts1)
    e2, mu2, lv2 = model.encode(verts2)
    h1 = model.reparameterize(mu1, lv1, generator)
    h2 = model.reparameterize(mu2, lv2, generator)
    rec1, v1, j1 = loss_rec(verts1, joints1, model.decode(e1, h1), e1, cfg.lambda_j)
    rec2, v2, j2 = loss_rec(verts2, joints2, model.decode(e2, h2), e2, cfg.lambda_j)
    cross = vertex_mse(model.decode(e1, mu2), verts1) + vertex_mse(model.decode(e2, mu1), verts2)
    prior = loss_prior(mu1, lv1, cfg.lambda_kl) + loss_prior(mu2, lv2, cfg.lambda_kl)
    total = (rec1 + rec2 + cfg.lambda_c * cross + prior).mean()
    breakdown = {
        "rec": (rec1 + rec2).mean().item(),
        "cross": (cfg.lambda_c * cross).mean().item(),
        "prior": prior.mean().item(),
        "verts": (v1 + v2).mean().item(),
        "joints": (j1 + j2).mean().item(),
        "total": total.item(),
    }
    return total, breakdown
