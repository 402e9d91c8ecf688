"""Stage 1: permutation-invariant Gaussian encoder, permutation-equivariant
Negative-Binomial decoder and the beta-weighted ELBO."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from .attention import CountEmbedding, CrossAttentionBlock, TransformerBlock, linear
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import OptimConfig, check_finite, make_optimizer
from .setdata import CellRecord, CountDataset, tokenize_batch

log = logging.getLogger(__name__)


@dataclass
class VaeConfig:
    n_genes: int
    context_length: int = 128
    latent_tokens: int = 8
    latent_dim: int = 4
    d_model: int = 64
    enc_blocks: int = 2
    dec_blocks: int = 2
    heads: int = 4
    pool_heads: int = 4
    unpool_heads: int = 1
    dispersion: str = "per-gene"  # or "shared"
    beta: float = 1e-5
    deterministic: bool = False
    log1p_input: bool = False
    zero_genes: int = 0

    def validate(self):
        for name in ("n_genes", "context_length", "latent_tokens", "latent_dim", "d_model",
                     "heads", "pool_heads", "unpool_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.enc_blocks < 0 or self.dec_blocks < 0 or self.zero_genes < 0:
            raise ValueError("block counts and zero_genes must be non-negative")
        for h in (self.heads, self.pool_heads, self.unpool_heads):
            if self.d_model % h:
                raise ValueError(f"d_model {self.d_model} not divisible by {h} heads")
        if self.dispersion not in ("per-gene", "shared"):
            raise ValueError(f"unknown dispersion mode {self.dispersion!r}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.deterministic and self.beta != 0:
            raise ValueError("deterministic (means-only) encoder requires beta = 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown VAE config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class GaussianPosterior:
    mu: torch.Tensor  # [..., m, z]
    log_var: torch.Tensor

    def kl(self) -> torch.Tensor:
        """KL(q || N(0, I)) summed over the latent grid."""
        terms = 0.5 * (self.mu**2 + torch.exp(self.log_var) - 1.0 - self.log_var)
        return terms.sum(dim=(-1, -2))


@dataclass
class NbOutput:
    ratios: torch.Tensor  # softmax over the valid entries of the gene set
    means: torch.Tensor  # library * ratios
    dispersion: torch.Tensor  # alpha per entry, > 0
    mask: torch.Tensor

    def log_prob(self, counts) -> torch.Tensor:
        """Summed NB log-likelihood over valid entries, one value per cell."""
        # padded entries get a dummy mean so their (discarded) gradient stays finite
        means = torch.where(self.mask, self.means, torch.ones_like(self.means))
        lp = nb_log_pmf(counts.to(self.means.dtype), means, self.dispersion)
        return torch.where(self.mask, lp, torch.zeros_like(lp)).sum(-1)


def nb_log_pmf(x, mean, dispersion):
    """log NB(x; mean, dispersion) with variance ``mean + dispersion * mean**2``.

    ``mean == 0`` is the point mass at zero.
    """
    x, mean, dispersion = (torch.as_tensor(v, dtype=torch.float64) if not torch.is_tensor(v) else v
                           for v in (x, mean, dispersion))
    r = 1.0 / dispersion
    log_total = torch.log(r + mean)
    return (
        torch.lgamma(x + r)
        - torch.lgamma(x + 1.0)
        - torch.lgamma(r)
        + r * (torch.log(r) - log_total)
        + torch.xlogy(x, mean)
        - x * log_total
    )


def sample_posterior(q: GaussianPosterior, generator=None, deterministic=False, noise=None):
    """Reparameterized draw ``mu + exp(log_var / 2) * eps``; ``mu`` when deterministic."""
    if deterministic:
        return q.mu
    if noise is None:
        noise = torch.randn(q.mu.shape, generator=generator, dtype=q.mu.dtype)
    return q.mu + torch.exp(0.5 * q.log_var) * noise


@dataclass
class CellBatch:
    enc_ids: torch.Tensor
    enc_counts: torch.Tensor
    enc_mask: torch.Tensor
    dec_ids: torch.Tensor
    dec_counts: torch.Tensor
    dec_mask: torch.Tensor
    library: torch.Tensor

    def __len__(self):
        return self.enc_ids.shape[0]


def _with_zero_genes(ids, counts, mask, n_genes, pad_id, n_zero, rng):
    """Append up to ``n_zero`` randomly drawn unexpressed genes (count 0) per cell."""
    b, d = ids.shape
    width = d + min(n_zero, n_genes)
    out_ids = np.full((b, width), pad_id, dtype=np.int64)
    out_counts = np.zeros((b, width), dtype=np.int64)
    out_mask = np.zeros((b, width), dtype=bool)
    out_ids[:, :d], out_counts[:, :d], out_mask[:, :d] = ids, counts, mask
    for i in range(b):
        present = np.zeros(n_genes + 1, dtype=bool)
        present[ids[i][mask[i]]] = True
        candidates = np.flatnonzero(~present[:n_genes])
        if n_zero < len(candidates):
            candidates = np.sort(rng.choice(candidates, size=n_zero, replace=False))
        k = int(mask[i].sum())
        out_ids[i, k:k + len(candidates)] = candidates
        out_mask[i, k:k + len(candidates)] = True
    return out_ids, out_counts, out_mask


def make_batch(records, cfg: VaeConfig, rng=None, arrays=None) -> CellBatch:
    """Tokenize records for the encoder and build the decoder's gene set.

    The decoder set is the tokenized genes plus ``cfg.zero_genes`` sampled
    unexpressed genes. The library size is the sum of tokenized counts.
    """
    pad = cfg.n_genes
    if arrays is None:
        ids, counts, mask = tokenize_batch(records, cfg.context_length, pad)
    else:
        ids, counts, mask = arrays
    if cfg.zero_genes:
        if rng is None:
            rng = np.random.default_rng(0)
        d_ids, d_counts, d_mask = _with_zero_genes(ids, counts, mask, cfg.n_genes, pad, cfg.zero_genes, rng)
    else:
        d_ids, d_counts, d_mask = ids, counts, mask
    # real entries are left-aligned, so trailing all-pad columns can go
    lib = counts.sum(-1).astype(np.float64)
    w = max(int(mask.sum(-1).max(initial=1)), 1)
    ids, counts, mask = ids[:, :w], counts[:, :w], mask[:, :w]
    w = max(int(d_mask.sum(-1).max(initial=1)), 1)
    d_ids, d_counts, d_mask = d_ids[:, :w], d_counts[:, :w], d_mask[:, :w]
    t = torch.from_numpy
    return CellBatch(
        t(np.ascontiguousarray(ids)), t(np.ascontiguousarray(counts)), t(np.ascontiguousarray(mask)),
        t(np.ascontiguousarray(d_ids)), t(np.ascontiguousarray(d_counts)), t(np.ascontiguousarray(d_mask)),
        t(lib),
    )


class SetVAE(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        D, z = cfg.d_model, cfg.latent_dim
        self.embedding = CountEmbedding(cfg.n_genes, D, log1p=cfg.log1p_input)
        self.pool = CrossAttentionBlock(D, cfg.pool_heads, n_pseudo=cfg.latent_tokens)
        self.enc_blocks = nn.ModuleList([TransformerBlock(D, cfg.heads) for _ in range(cfg.enc_blocks)])
        self.posterior_head = linear(D, z if cfg.deterministic else 2 * z)
        self.latent_in = linear(z, D)
        self.dec_blocks = nn.ModuleList([TransformerBlock(D, cfg.heads) for _ in range(cfg.dec_blocks)])
        self.unpool = CrossAttentionBlock(D, cfg.unpool_heads)
        self.logit_head = linear(D, 1)
        n_disp = cfg.n_genes + 1 if cfg.dispersion == "per-gene" else 1
        self.log_dispersion = nn.Parameter(torch.zeros(n_disp))

    @property
    def dtype(self):
        return self.embedding.table.dtype

    def encode(self, ids, counts, mask) -> GaussianPosterior:
        if not bool(mask.any(-1).all()):
            raise ValueError("empty cell: no expressed genes to encode")
        h = self.embedding(ids, counts)
        h = self.pool(h, key_mask=mask)
        for block in self.enc_blocks:
            h = block(h)
        out = self.posterior_head(h)
        if self.cfg.deterministic:
            return GaussianPosterior(out, torch.zeros_like(out))
        mu, log_var = out.chunk(2, dim=-1)
        return GaussianPosterior(mu, log_var)

    def decode(self, z, ids, mask, library) -> NbOutput:
        if not bool(mask.any(-1).all()):
            raise ValueError("empty gene set")
        h = self.latent_in(z)
        for block in self.dec_blocks:
            h = block(h)
        queries = self.embedding.rows(ids)
        h = self.unpool(h, queries=queries)
        logits = self.logit_head(h).squeeze(-1)
        logits = logits.masked_fill(~mask, float("-inf"))
        ratios = torch.softmax(logits, dim=-1)
        library = torch.as_tensor(library, dtype=ratios.dtype)
        means = library.unsqueeze(-1) * ratios
        if self.cfg.dispersion == "per-gene":
            disp = torch.exp(self.log_dispersion[ids])
        else:
            disp = torch.exp(self.log_dispersion).expand(ids.shape)
        return NbOutput(ratios, means, disp, mask)

    def elbo_terms(self, batch: CellBatch, generator=None, noise=None):
        """Per-cell ``(total, recon_ll, kl)`` with one posterior sample."""
        q = self.encode(batch.enc_ids, batch.enc_counts, batch.enc_mask)
        z = sample_posterior(q, generator, self.cfg.deterministic, noise)
        nb = self.decode(z, batch.dec_ids, batch.dec_mask, batch.library)
        recon = nb.log_prob(batch.dec_counts)
        kl = q.kl()
        return recon - self.cfg.beta * kl, recon, kl

    # checkpoints ---------------------------------------------------------

    def save(self, path, step=0, rng_state=None, extra=None):
        save_checkpoint(path, "vae", self.cfg.to_dict(), self.state_dict(), step, rng_state, extra)

    @classmethod
    def load(cls, path):
        header, state = load_checkpoint(path, kind="vae")
        model = cls(VaeConfig.from_dict(header["config"]))
        model.load_state_dict(state)
        return model, header


def encode(tc, model: SetVAE) -> GaussianPosterior:
    """Posterior for a single tokenized cell; returns unbatched [m, z] tensors."""
    ids = torch.as_tensor(tc.token_ids)[None]
    counts = torch.as_tensor(tc.token_counts)[None]
    mask = torch.as_tensor(tc.pad_mask)[None]
    q = model.encode(ids, counts, mask)
    return GaussianPosterior(q.mu[0], q.log_var[0])


def decode(z, gene_ids, library, model: SetVAE) -> NbOutput:
    """Decode one latent grid [m, z] over ``gene_ids`` with library size ``library``."""
    ids = torch.as_tensor(np.asarray(gene_ids, dtype=np.int64))
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= model.cfg.n_genes):
        raise IndexError("unknown gene id")
    mask = torch.ones(ids.shape, dtype=torch.bool)
    out = model.decode(torch.as_tensor(z)[None], ids[None], mask[None], torch.tensor([float(library)]))
    return NbOutput(out.ratios[0], out.means[0], out.dispersion[0], out.mask[0])


def elbo(record: CellRecord, model: SetVAE, generator=None, rng=None):
    """``(total, recon_ll, kl)`` for one record as 0-d tensors."""
    batch = make_batch([record], model.cfg, rng)
    total, recon, kl = model.elbo_terms(batch, generator)
    return total[0], recon[0], kl[0]


def build_vae(cfg: VaeConfig, seed: int, dtype=torch.float32) -> SetVAE:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = SetVAE(cfg)
    return model.to(dtype)


def train_vae(dataset: CountDataset, cfg: VaeConfig, opt_cfg: OptimConfig, seed: int = 0,
              model: SetVAE | None = None):
    """Maximize the mini-batch ELBO. Returns ``(model, log)``; ``log`` has one
    dict per epoch with mean ``total``, ``recon`` and ``kl`` per cell."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    cfg.validate()
    opt_cfg.validate()
    if cfg.n_genes != dataset.n_genes:
        raise ValueError(f"config expects {cfg.n_genes} genes, dataset has {dataset.n_genes}")
    model = model or build_vae(cfg, seed)
    model.train()
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    ids, counts, mask = tokenize_batch(dataset.records, cfg.context_length, cfg.n_genes)
    empty = ~mask.any(-1)
    if empty.any():
        keep = np.flatnonzero(~empty)
        log.warning("dropping %d cells without expressed genes", int(empty.sum()))
        ids, counts, mask = ids[keep], counts[keep], mask[keep]
    n = len(ids)
    bs = min(opt_cfg.batch_size, n)
    steps_per_epoch = (n + bs - 1) // bs
    opt, sched = make_optimizer(model.parameters(), opt_cfg, steps_per_epoch * opt_cfg.epochs)
    history = []
    step = 0
    for epoch in range(opt_cfg.epochs):
        perm = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            batch = make_batch(None, cfg, rng, arrays=(ids[idx], counts[idx], mask[idx]))
            total, recon, kl = model.elbo_terms(batch, gen)
            loss = -total.mean()
            check_finite(loss, "vae", epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if opt_cfg.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), opt_cfg.grad_clip)
            opt.step()
            sched.step()
            step += 1
            sums += [total.sum().item(), recon.sum().item(), kl.sum().item()]
        row = {"epoch": epoch, "total": sums[0] / n, "recon": sums[1] / n, "kl": sums[2] / n,
               "lr": sched.get_last_lr()[0]}
        history.append(row)
        log.info("vae epoch %d total %.3f recon %.3f kl %.3f", epoch, row["total"], row["recon"], row["kl"])
    model.eval()
    model.train_steps = step
    model.train_rng_state = gen.get_state().tolist()
    return model, history


@torch.no_grad()
def posterior_means(model: SetVAE, dataset: CountDataset, batch_size: int = 256) -> np.ndarray:
    """Posterior means for every record, shape [N, m, z]."""
    cfg = model.cfg
    out = []
    for start in range(0, len(dataset), batch_size):
        recs = dataset.records[start:start + batch_size]
        ids, counts, mask = tokenize_batch(recs, cfg.context_length, cfg.n_genes)
        q = model.encode(torch.from_numpy(ids), torch.from_numpy(counts), torch.from_numpy(mask))
        out.append(q.mu.detach().cpu().numpy())
    if not out:
        return np.zeros((0, cfg.latent_tokens, cfg.latent_dim))
    return np.concatenate(out)


@torch.no_grad()
def decode_full(model: SetVAE, z, library) -> NbOutput:
    """Decode latents [N, m, z] over the whole vocabulary."""
    z = torch.as_tensor(z, dtype=model.dtype)
    n = z.shape[0]
    ids = torch.arange(model.cfg.n_genes).expand(n, -1)
    mask = torch.ones(ids.shape, dtype=torch.bool)
    return model.decode(z, ids, mask, torch.as_tensor(library, dtype=model.dtype))


@torch.no_grad()
def reconstruct(model: SetVAE, dataset: CountDataset, batch_size: int = 256):
    """Decoded NB means over the full vocabulary at the posterior mean, plus the
    per-cell NB log-likelihood of the observed counts, shapes [N, V] and [N]."""
    means, lls = [], []
    for start in range(0, len(dataset), batch_size):
        sub = dataset.subset(range(start, min(start + batch_size, len(dataset))))
        mu = posterior_means(model, sub, batch_size)
        lib = sub.library_sizes().astype(np.float64)
        nb = decode_full(model, mu, lib)
        x = torch.from_numpy(sub.dense_counts()).to(nb.means.dtype)
        lls.append(nb.log_prob(x).numpy())
        means.append(nb.means.numpy())
    return np.concatenate(means), np.concatenate(lls)
