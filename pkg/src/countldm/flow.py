"""Stage 2: flow matching in the frozen VAE's latent space.

The denoiser is a DiT-style transformer over latent tokens with adaptive
layer-norm modulation from a time + condition embedding. Conditions are label
tensors of shape [B, J] (one column per attribute, ``-1`` meaning Null), and
guidance combines conditional and unconditional velocities either jointly or
per attribute.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .attention import GatedMLP, MultiHeadAttention, linear
from .checkpoint import load_checkpoint, save_checkpoint, state_fingerprint
from .optim import OptimConfig, check_finite, make_optimizer
from .setdata import CellRecord, CountDataset, sample_nb
from .vae import SetVAE, posterior_means

log = logging.getLogger(__name__)

NULL = -1
Field = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


class SamplingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class InterpolantConfig:
    sigma_min: float = 1e-4
    velocity_weight: float = 0.0
    transport: str = "linear"

    def validate(self):
        if not 0 <= self.sigma_min < 1:
            raise ValueError("sigma_min must lie in [0, 1)")
        if self.transport != "linear":
            raise ValueError("only the linear transport is implemented")
        if self.velocity_weight != 0:
            raise ValueError("only velocity_weight = 0 is implemented")


@dataclass
class FlowConfig:
    width: int = 128
    blocks: int = 4
    heads: int = 4
    time_dim: int = 64
    mode: str = "joint"  # or "additive"
    rho: float = 0.1
    sigma_min: float = 1e-4

    def validate(self):
        if self.width < 1 or self.blocks < 0 or self.heads < 1 or self.time_dim < 2:
            raise ValueError("invalid flow network dimensions")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if self.mode not in ("joint", "additive"):
            raise ValueError(f"unknown conditioning mode {self.mode!r}")
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must lie in [0, 1]")
        self.interpolant().validate()

    def interpolant(self) -> InterpolantConfig:
        return InterpolantConfig(self.sigma_min)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown flow config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class SamplerConfig:
    steps: int = 100
    omega: float | Sequence[float] = 1.0
    mode: str | None = None  # defaults to the model's conditioning mode

    def validate(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        om = np.atleast_1d(np.asarray(self.omega, dtype=float))
        if np.any(om < 0) or not np.all(np.isfinite(om)):
            raise ValueError("guidance strength must be finite and >= 0")
        if self.mode not in (None, "joint", "additive"):
            raise ValueError(f"unknown guidance mode {self.mode!r}")


@dataclass
class ConditionSpace:
    """Attribute schema plus the joint combinations seen in training."""

    schema: dict[str, list[str]]
    combos: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def attributes(self) -> list[str]:
        return list(self.schema)

    @property
    def n_attributes(self) -> int:
        return len(self.schema)

    def encode(self, conditions: Sequence[Mapping[str, str] | None]) -> torch.Tensor:
        """Label dicts to a [B, J] long tensor; missing attributes map to Null."""
        out = torch.full((len(conditions), self.n_attributes), NULL, dtype=torch.long)
        for i, cond in enumerate(conditions):
            for key, val in (cond or {}).items():
                if key not in self.schema:
                    raise KeyError(f"unknown attribute {key!r}")
                if val not in self.schema[key]:
                    raise KeyError(f"unknown label {val!r} for attribute {key!r}")
                out[i, self.attributes.index(key)] = self.schema[key].index(val)
        return out

    def decode(self, labels) -> list[dict[str, str]]:
        out = []
        for row in np.asarray(labels):
            out.append({a: self.schema[a][int(v)] for a, v in zip(self.attributes, row) if v != NULL})
        return out

    def null(self, n: int) -> torch.Tensor:
        return torch.full((n, self.n_attributes), NULL, dtype=torch.long)

    def combo_index(self, labels: torch.Tensor) -> torch.Tensor:
        """Index of each row's combination in ``combos`` or -1 if unseen/partial."""
        lookup = {c: i for i, c in enumerate(self.combos)}
        return torch.tensor([lookup.get(tuple(int(v) for v in row), -1) for row in labels], dtype=torch.long)

    @classmethod
    def from_dataset(cls, dataset: CountDataset) -> "ConditionSpace":
        space = cls({k: list(v) for k, v in dataset.attribute_schema.items()})
        labels = space.encode([r.attributes for r in dataset.records])
        seen = sorted({tuple(int(v) for v in row) for row in labels if bool((row != NULL).all())})
        space.combos = seen
        return space

    def to_dict(self):
        return {"schema": self.schema, "combos": [list(c) for c in self.combos]}

    @classmethod
    def from_dict(cls, d):
        return cls({k: list(v) for k, v in d["schema"].items()}, [tuple(c) for c in d["combos"]])


# ---------------------------------------------------------------------------
# interpolant and loss


def interpolate(z1, z0, t, cfg: InterpolantConfig | None = None):
    """Linear interpolant ``z_t = t z1 + (1 - (1 - sigma_min) t) z0`` and its
    time derivative ``u = z1 - (1 - sigma_min) z0``."""
    cfg = cfg or InterpolantConfig()
    t = torch.as_tensor(t, dtype=z1.dtype)
    if bool(((t < 0) | (t > 1)).any()):
        raise ValueError("t must lie in [0, 1]")
    if z1.shape != z0.shape:
        raise ValueError("z1 and z0 must have the same shape")
    tt = t.reshape(t.shape + (1,) * (z1.dim() - t.dim()))
    s = 1.0 - cfg.sigma_min
    zt = tt * z1 + (1.0 - s * tt) * z0
    u = z1 - s * z0
    return zt, u


def drop_conditions(labels, rho: float, mode: str, generator=None):
    """Replace conditions by Null with probability ``rho``.

    Joint mode drops the whole row; additive mode drops each attribute
    independently so the network also sees single-attribute conditions.
    """
    if rho <= 0:
        return labels
    if mode == "joint":
        drop = torch.rand(labels.shape[0], generator=generator) < rho
        return labels.masked_fill(drop.unsqueeze(-1), NULL)
    drop = torch.rand(labels.shape, generator=generator) < rho
    return labels.masked_fill(drop, NULL)


def fm_loss(field: Field, z1, labels, cfg: InterpolantConfig | None = None, rho: float = 0.0,
            mode: str = "joint", generator=None, t=None, z0=None):
    """Mean over the batch of ``||v(z_t, t, y') - u||^2`` summed over the grid."""
    cfg = cfg or InterpolantConfig()
    b = z1.shape[0]
    if t is None:
        t = torch.rand(b, generator=generator, dtype=z1.dtype)
    if z0 is None:
        z0 = torch.randn(z1.shape, generator=generator, dtype=z1.dtype)
    labels = drop_conditions(labels, rho, mode, generator)
    zt, u = interpolate(z1, z0, t, cfg)
    v = field(zt, t, labels)
    return ((v - u) ** 2).reshape(b, -1).sum(-1).mean()


# ---------------------------------------------------------------------------
# network


def timestep_embedding(t, dim: int, max_period: float = 10000.0):
    """Sinusoidal features of ``1000 * t`` for t in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class ConditionEmbedding(nn.Module):
    """Condition labels [B, J] -> [B, W].

    Additive mode sums one embedding per attribute (each table has its own
    Null row). Joint mode uses a dedicated Null vector for the all-Null
    condition; any other condition is its combination row (zero for unseen
    combinations) plus the sum of its per-attribute rows.
    """

    def __init__(self, space: ConditionSpace, width: int, mode: str):
        super().__init__()
        self.space = space
        self.mode = mode
        sizes = [len(c) + 1 for c in space.schema.values()]
        self.attr = nn.ModuleList([nn.Embedding(n, width) for n in sizes])
        for emb in self.attr:
            nn.init.normal_(emb.weight, std=0.02)
        if mode == "joint":
            self.null = nn.Parameter(torch.randn(width) * 0.02)
            self.combo = nn.Embedding(max(len(space.combos), 1), width)
            nn.init.normal_(self.combo.weight, std=0.02)

    def forward(self, labels):
        b = labels.shape[0]
        width = self.attr[0].embedding_dim if len(self.attr) else self.null.shape[0]
        out = torch.zeros(b, width, dtype=self._dtype())
        for j, emb in enumerate(self.attr):
            col = labels[:, j]
            if self.mode == "joint":
                # Null attributes contribute nothing to a joint token
                rows = emb(col.clamp_min(0)) * (col != NULL).unsqueeze(-1).to(out.dtype)
            else:
                rows = emb(torch.where(col == NULL, emb.num_embeddings - 1, col))
            out = out + rows
        if self.mode == "joint":
            idx = self.space.combo_index(labels)
            seen = (idx >= 0).unsqueeze(-1).to(out.dtype)
            out = out + self.combo(idx.clamp_min(0)) * seen
            all_null = (labels == NULL).all(-1, keepdim=True)
            out = torch.where(all_null, self.null.expand(b, -1), out)
        return out

    def _dtype(self):
        return self.attr[0].weight.dtype if len(self.attr) else self.null.dtype


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class DiTBlock(nn.Module):
    """Self-attention + gated MLP with adaLN-Zero shift/scale/gate modulation."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = MultiHeadAttention(width, heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = GatedMLP(width)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, x, c):
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(c).chunk(6, dim=-1)
        x = x + g1.unsqueeze(1) * self.attn(modulate(self.norm1(x), sh1, sc1))
        return x + g2.unsqueeze(1) * self.mlp(modulate(self.norm2(x), sh2, sc2))


class LatentDiT(nn.Module):
    """Velocity network over a latent grid [B, m, z]. No positional encoding, so
    it is equivariant to permutations of the latent tokens."""

    def __init__(self, latent_dim: int, cfg: FlowConfig, space: ConditionSpace):
        super().__init__()
        w = cfg.width
        self.time_dim = cfg.time_dim
        self.inp = linear(latent_dim, w)
        self.time_mlp = nn.Sequential(linear(cfg.time_dim, w), nn.SiLU(), linear(w, w))
        self.cond = ConditionEmbedding(space, w, cfg.mode)
        self.blocks = nn.ModuleList([DiTBlock(w, cfg.heads) for _ in range(cfg.blocks)])
        self.final_norm = nn.LayerNorm(w, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(w, 2 * w))
        self.out = nn.Linear(w, latent_dim)
        for layer in (self.final_ada[1], self.out):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, z, t, labels):
        t = torch.as_tensor(t, dtype=z.dtype)
        if t.dim() == 0:
            t = t.expand(z.shape[0])
        c = self.time_mlp(timestep_embedding(t, self.time_dim)) + self.cond(labels)
        h = self.inp(z)
        for block in self.blocks:
            h = block(h, c)
        shift, scale = self.final_ada(c).chunk(2, dim=-1)
        return self.out(modulate(self.final_norm(h), shift, scale))


class LatentFlow(nn.Module):
    """DiT velocity field plus the latent standardization and condition space."""

    def __init__(self, latent_tokens: int, latent_dim: int, cfg: FlowConfig, space: ConditionSpace):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.space = space
        self.latent_shape = (latent_tokens, latent_dim)
        self.dit = LatentDiT(latent_dim, cfg, space)
        self.register_buffer("latent_shift", torch.zeros(()))
        self.register_buffer("latent_scale", torch.ones(()))

    def forward(self, z, t, labels):
        self._check_labels(labels)
        return self.dit(z, t, labels)

    def _check_labels(self, labels):
        if labels.dim() != 2 or labels.shape[1] != self.space.n_attributes:
            raise ValueError("condition labels must have shape [B, n_attributes]")
        for j, cats in enumerate(self.space.schema.values()):
            col = labels[:, j]
            if bool(((col < NULL) | (col >= len(cats))).any()):
                raise KeyError(f"unknown condition label in attribute column {j}")

    def normalize(self, z):
        return (z - self.latent_shift) / self.latent_scale

    def denormalize(self, z):
        return z * self.latent_scale + self.latent_shift

    def save(self, path, step=0, rng_state=None, extra=None):
        extra = dict(extra or {})
        extra["condition_space"] = self.space.to_dict()
        extra["latent_shape"] = list(self.latent_shape)
        extra["interpolant"] = asdict(self.cfg.interpolant())
        save_checkpoint(path, "ldm", self.cfg.to_dict(), self.state_dict(), step, rng_state, extra)

    @classmethod
    def load(cls, path):
        header, state = load_checkpoint(path, kind="ldm")
        extra = header["extra"]
        space = ConditionSpace.from_dict(extra["condition_space"])
        m, z = extra["latent_shape"]
        model = cls(m, z, FlowConfig.from_dict(header["config"]), space)
        model.load_state_dict(state)
        return model, header


def dit_velocity(z_t, t, labels, flow: LatentFlow):
    return flow(z_t, t, labels)


def build_flow(latent_tokens, latent_dim, cfg: FlowConfig, space: ConditionSpace, seed: int,
               dtype=torch.float32) -> LatentFlow:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = LatentFlow(latent_tokens, latent_dim, cfg, space)
    return model.to(dtype)


# ---------------------------------------------------------------------------
# guidance and sampling


def _is_null(labels):
    return (labels == NULL).all(-1)


def cfg_velocity_joint(field: Field, z, t, labels, omega: float):
    """``v_null + omega (v_y - v_null)``, written as ``(1 - omega) v_null + omega v_y``
    so omega = 0 and omega = 1 return the unconditional and conditional fields
    exactly. Rows whose condition is Null get ``v_null``."""
    null = torch.full_like(labels, NULL)
    v_null = field(z, t, null)
    null_rows = _is_null(labels)
    if bool(null_rows.all()):
        return v_null
    v_y = field(z, t, labels)
    guided = (1.0 - omega) * v_null + omega * v_y
    return torch.where(null_rows.reshape(-1, *[1] * (z.dim() - 1)), v_null, guided)


def cfg_velocity_additive(field: Field, z, t, labels, omegas: Sequence[float]):
    """``v_null + sum_j omega_j (v_{y_j} - v_null)`` where ``v_{y_j}`` conditions on
    attribute j alone. Attributes that are Null in a row contribute nothing."""
    n_attr = labels.shape[1]
    omegas = list(np.atleast_1d(np.asarray(omegas, dtype=float)))
    if len(omegas) == 1 and n_attr > 1:
        omegas = omegas * n_attr
    if len(omegas) != n_attr:
        raise ValueError(f"expected {n_attr} guidance weights, got {len(omegas)}")
    null = torch.full_like(labels, NULL)
    v_null = field(z, t, null)
    shape = (-1,) + (1,) * (z.dim() - 1)
    weights = []
    terms = []
    for j in range(n_attr):
        active = labels[:, j] != NULL
        if not bool(active.any()) or omegas[j] == 0:
            continue
        single = null.clone()
        single[:, j] = labels[:, j]
        # weights in the latent dtype: a float32 round trip would perturb omega
        w = (active.to(z.dtype) * float(omegas[j])).reshape(shape)
        weights.append(w)
        terms.append(w * field(z, t, single))
    if not terms:
        return v_null
    coef = 1.0 - sum(weights) if len(weights) > 1 else 1.0 - weights[0]
    out = coef * v_null
    for term in terms:
        out = out + term
    return out


def guided_field(field: Field, labels, omega, mode: str) -> Callable:
    """Close over labels and guidance weights: returns ``v(z, t)``."""
    if mode == "joint":
        om = float(np.atleast_1d(np.asarray(omega, dtype=float))[0])
        return lambda z, t: cfg_velocity_joint(field, z, t, labels, om)
    if mode == "additive":
        return lambda z, t: cfg_velocity_additive(field, z, t, labels, omega)
    raise ValueError(f"unknown guidance mode {mode!r}")


def euler_integrate(velocity: Callable, z0, steps: int):
    """Explicit Euler from t = 0 to t = 1 on a uniform grid of ``steps`` steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = z0
    dt = 1.0 / steps
    for k in range(steps):
        t = torch.full((z.shape[0],), k * dt, dtype=z.dtype)
        z = z + dt * velocity(z, t)
        if not bool(torch.isfinite(z).all()):
            raise SamplingError(f"non-finite latent state at step {k}")
    return z


@torch.no_grad()
def sample_latents(flow: LatentFlow, n: int, condition: Mapping[str, str] | None,
                   sampler: SamplerConfig, generator=None, field: Field | None = None):
    """Draw ``n`` latent grids in the VAE's (de-standardized) latent space."""
    sampler.validate()
    labels = flow.space.encode([condition] * n)
    mode = sampler.mode or flow.cfg.mode
    if mode != flow.cfg.mode:
        log.warning("guiding a %s-trained model with %s guidance", flow.cfg.mode, mode)
    z0 = torch.randn((n, *flow.latent_shape), generator=generator,
                     dtype=flow.latent_scale.dtype)
    v = guided_field(field or flow, labels, sampler.omega, mode)
    return flow.denormalize(euler_integrate(v, z0, sampler.steps))


# ---------------------------------------------------------------------------
# library sizes


@dataclass
class LibrarySizeModel:
    """Log-normal library sizes; sufficient statistics of log L per full condition."""

    attributes: list[str]
    stats: dict[tuple[str, ...], tuple[int, float, float]]  # n, sum, sum of squares

    @classmethod
    def fit(cls, dataset: CountDataset) -> "LibrarySizeModel":
        attrs = list(dataset.attribute_schema)
        stats: dict[tuple[str, ...], list[float]] = {}
        for rec, key in zip(dataset.records, dataset.condition_keys()):
            if rec.library_size <= 0:
                continue
            x = math.log(rec.library_size)
            s = stats.setdefault(key, [0, 0.0, 0.0])
            s[0] += 1
            s[1] += x
            s[2] += x * x
        if not stats:
            raise ValueError("no cells with positive library size")
        return cls(attrs, {k: (int(v[0]), v[1], v[2]) for k, v in stats.items()})

    def params(self, condition: Mapping[str, str] | None = None) -> tuple[float, float]:
        """(mean, sd) of log L over cells matching ``condition`` (global if none match)."""
        cond = condition or {}
        n = s = ss = 0.0
        for key, (kn, ks, kss) in self.stats.items():
            labels = dict(zip(self.attributes, key))
            if all(labels.get(a) == v for a, v in cond.items()):
                n, s, ss = n + kn, s + ks, ss + kss
        if n == 0:
            return self.params(None)
        mean = s / n
        var = max(ss / n - mean * mean, 0.0) * (n / (n - 1) if n > 1 else 1.0)
        return mean, math.sqrt(var)

    def sample(self, n: int, condition, rng: np.random.Generator) -> np.ndarray:
        mean, sd = self.params(condition)
        return np.exp(rng.normal(mean, sd, size=n))

    def to_dict(self):
        return {"attributes": self.attributes,
                "stats": [[list(k), list(v)] for k, v in sorted(self.stats.items())]}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["attributes"]), {tuple(k): (int(v[0]), float(v[1]), float(v[2])) for k, v in d["stats"]})


# ---------------------------------------------------------------------------
# training and generation


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def train_flow(latents, labels, space: ConditionSpace, cfg: FlowConfig, opt_cfg: OptimConfig,
               seed: int = 0, flow: LatentFlow | None = None):
    """Fit the velocity field on latents [N, m, z] with condition labels [N, J]."""
    cfg.validate()
    opt_cfg.validate()
    latents = torch.as_tensor(np.asarray(latents), dtype=torch.float32)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    n, m, zdim = latents.shape
    if n == 0:
        raise ValueError("cannot train on an empty latent set")
    flow = flow or build_flow(m, zdim, cfg, space, seed)
    flow.latent_shift.fill_(latents.mean().item())
    flow.latent_scale.fill_(max(latents.std().item(), 1e-6) if n * m * zdim > 1 else 1.0)
    data = flow.normalize(latents)
    flow.train()
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    bs = min(opt_cfg.batch_size, n)
    steps_per_epoch = (n + bs - 1) // bs
    opt, sched = make_optimizer(flow.parameters(), opt_cfg, steps_per_epoch * opt_cfg.epochs)
    interp = cfg.interpolant()
    history = []
    step = 0
    for epoch in range(opt_cfg.epochs):
        perm = torch.from_numpy(rng.permutation(n))
        total = 0.0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            loss = fm_loss(flow, data[idx], labels[idx], interp, cfg.rho, cfg.mode, gen)
            check_finite(loss, "ldm", epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if opt_cfg.grad_clip:
                nn.utils.clip_grad_norm_(flow.parameters(), opt_cfg.grad_clip)
            opt.step()
            sched.step()
            step += 1
            total += loss.item() * len(idx)
        history.append({"epoch": epoch, "loss": total / n, "lr": sched.get_last_lr()[0]})
        log.info("ldm epoch %d loss %.4f", epoch, total / n)
    flow.eval()
    flow.train_steps = step
    flow.train_rng_state = gen.get_state().tolist()
    return flow, history


def train_ldm(vae: SetVAE, dataset: CountDataset, cfg: FlowConfig, opt_cfg: OptimConfig, seed: int = 0):
    """Freeze ``vae``, encode ``dataset`` to posterior means and fit the flow.

    Raises if any VAE parameter changed during training.
    """
    for p in vae.parameters():
        p.requires_grad_(False)
    vae.eval()
    before = state_fingerprint(vae.state_dict())
    latents = posterior_means(vae, dataset)
    space = ConditionSpace.from_dataset(dataset)
    labels = space.encode([r.attributes for r in dataset.records])
    flow, history = train_flow(latents, labels, space, cfg, opt_cfg, seed)
    if state_fingerprint(vae.state_dict()) != before:
        raise RuntimeError("VAE parameters changed during latent flow training")
    flow.vae_fingerprint = before
    return flow, history


def effective_condition(space: ConditionSpace, condition, omega, mode: str) -> dict[str, str]:
    """Drop attributes whose guidance weight is zero (all of them when a joint
    weight is zero). Raises KeyError on unknown attributes or labels."""
    space.encode([condition])
    condition = dict(condition or {})
    om = np.atleast_1d(np.asarray(omega, dtype=float))
    if mode == "joint" or len(om) == 1:
        return condition if om[0] > 0 else {}
    return {a: v for a, v in condition.items() if om[space.attributes.index(a)] > 0}


@torch.no_grad()
def generate_cells(flow: LatentFlow, vae: SetVAE, n: int, condition: Mapping[str, str] | None,
                   gene_ids: Sequence[int] | None, sampler: SamplerConfig,
                   library: LibrarySizeModel, seed: int = 0) -> list[CellRecord]:
    """Sample latents, library sizes and NB counts for ``n`` new cells.

    Only attributes with a positive guidance weight take effect. They select
    the log-normal library-size fit and are written to the records. With all
    weights at zero the output is identical to unconditional sampling.
    """
    if gene_ids is None:
        gene_ids = range(vae.cfg.n_genes)
    gene_ids = np.asarray(list(gene_ids), dtype=np.int64)
    if gene_ids.size == 0:
        raise ValueError("empty gene set")
    if gene_ids.min() < 0 or gene_ids.max() >= vae.cfg.n_genes:
        raise IndexError("unknown gene id")
    condition = effective_condition(flow.space, condition, sampler.omega, sampler.mode or flow.cfg.mode)
    torch_seed, np_seed = _seeds(seed, 2)
    gen = torch.Generator().manual_seed(torch_seed)
    rng = np.random.default_rng(np_seed)
    z = sample_latents(flow, n, condition, sampler, gen).to(vae.dtype)
    lib = library.sample(n, condition, rng)
    ids = torch.from_numpy(gene_ids).expand(n, -1)
    nb = vae.decode(z, ids, torch.ones(ids.shape, dtype=torch.bool), torch.as_tensor(lib, dtype=vae.dtype))
    means = nb.means.double().numpy()
    disp = nb.dispersion.double().numpy()
    counts = sample_nb(rng, means, disp, size=means.shape)
    attrs = dict(condition or {})
    records = []
    for i in range(n):
        nz = np.flatnonzero(counts[i])
        records.append(CellRecord(tuple(gene_ids[nz].tolist()), tuple(counts[i, nz].tolist()), attrs, f"gen{i}"))
    return records


__all__ = [
    "NULL", "InterpolantConfig", "FlowConfig", "SamplerConfig", "ConditionSpace", "SamplingError",
    "interpolate", "drop_conditions", "fm_loss", "LatentDiT", "LatentFlow", "ConditionEmbedding",
    "dit_velocity", "build_flow", "cfg_velocity_joint", "cfg_velocity_additive", "guided_field",
    "euler_integrate", "sample_latents", "LibrarySizeModel", "train_flow", "train_ldm",
    "generate_cells", "effective_condition",
]
