"""Small shared builders and the finite-difference gradient checker."""

import torch

from countldm.flow import ConditionSpace, FlowConfig, build_flow
from countldm.vae import VaeConfig, build_vae


def tiny_vae(dtype=torch.float64, seed=0, **kw):
    cfg = dict(n_genes=6, context_length=6, latent_tokens=2, latent_dim=2, d_model=8, enc_blocks=1, dec_blocks=1,
               heads=2, pool_heads=2, unpool_heads=1)
    cfg.update(kw)
    return build_vae(VaeConfig(**cfg), seed=seed, dtype=dtype)


def tiny_space():
    return ConditionSpace({"cell_type": ["A", "B"], "perturbation": ["ctrl", "stim"]}, [(0, 0), (0, 1), (1, 0)])


def tiny_flow(dtype=torch.float64, seed=0, mode="joint", width=16, blocks=2, m=2, z=2, perturb=0.0):
    flow = build_flow(m, z, FlowConfig(width=width, blocks=blocks, heads=2, time_dim=16, mode=mode), tiny_space(),
                      seed=seed, dtype=dtype)
    if perturb:
        # adaLN-Zero starts at zero output; move off it so gradients reach every parameter
        g = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for p in flow.parameters():
                p.add_(perturb * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return flow


def finite_difference_errors(loss_fn, params: dict, h=1e-4, max_entries=12, seed=0):
    """Per parameter group: norm-wise relative error between autograd and
    central differences on up to ``max_entries`` random coordinates."""
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    g = torch.Generator().manual_seed(seed)
    errors = {}
    for name, p in params.items():
        flat = p.data.view(-1)
        n = flat.numel()
        idx = torch.randperm(n, generator=g)[:max_entries] if n > max_entries else torch.arange(n)
        analytic = p.grad.view(-1)[idx].clone()
        numeric = torch.empty_like(analytic)
        for j, i in enumerate(idx.tolist()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        scale = max(analytic.norm().item(), numeric.norm().item())
        errors[name] = 0.0 if scale < 1e-10 else (analytic - numeric).norm().item() / scale
    return errors
