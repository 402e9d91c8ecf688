import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from countldm.checkpoint import state_fingerprint
from countldm.flow import (
    NULL, ConditionSpace, FlowConfig, InterpolantConfig, LatentFlow, LibrarySizeModel, SamplerConfig, SamplingError,
    cfg_velocity_additive, cfg_velocity_joint, drop_conditions, effective_condition, euler_integrate, fm_loss,
    generate_cells, interpolate, sample_latents, timestep_embedding, train_flow, train_ldm,
)
from countldm.optim import OptimConfig, TrainingDiverged
from countldm.setdata import factorial_spec, generate_synthetic
from countldm.vae import SetVAE, VaeConfig, train_vae

from conftest import make_record
from helpers import tiny_flow, tiny_space

D64 = torch.float64

# interpolant -------------------------------------------------------------------------


def test_interpolate_worked_example():
    zt, u = interpolate(torch.tensor([2.0], dtype=D64), torch.tensor([1.0], dtype=D64), 0.5)
    assert abs(zt.item() - 1.50005) < 1e-12
    assert abs(u.item() - 1.0001) < 1e-12


def test_interpolate_endpoints():
    z1, z0 = torch.randn(3, 2, 4), torch.randn(3, 2, 4)
    zt, _ = interpolate(z1, z0, torch.zeros(3))
    assert torch.equal(zt, z0)
    zt, u = interpolate(z1, z0, torch.ones(3), InterpolantConfig(sigma_min=0.0))
    assert torch.equal(zt, z1) and torch.equal(u, z1 - z0)


def test_interpolate_errors():
    z = torch.zeros(2, 1, 1)
    with pytest.raises(ValueError):
        interpolate(z, z, torch.tensor([0.5, 1.01]))
    with pytest.raises(ValueError):
        interpolate(z, z, torch.tensor([-0.1, 0.5]))
    with pytest.raises(ValueError):
        interpolate(z, torch.zeros(2, 1, 2), 0.5)
    with pytest.raises(ValueError):
        InterpolantConfig(sigma_min=1.0).validate()


# loss -------------------------------------------------------------------------------


def test_fm_loss_zero_for_oracle_field():
    g = torch.Generator().manual_seed(0)
    z1 = torch.randn(16, 2, 3, generator=g, dtype=D64)
    z0 = torch.randn(16, 2, 3, generator=g, dtype=D64)
    t = torch.rand(16, generator=g, dtype=D64)
    _, u = interpolate(z1, z0, t)
    loss = fm_loss(lambda zt, tt, y: u, z1, torch.full((16, 2), NULL), t=t, z0=z0)
    assert loss.item() == 0.0


def test_fm_loss_full_dropout_feeds_null():
    seen = []

    def stub(zt, t, labels):
        seen.append(labels.clone())
        return torch.zeros_like(zt)

    labels = torch.tensor([[0, 1], [1, 0], [0, 0]])
    for mode in ("joint", "additive"):
        fm_loss(stub, torch.randn(3, 2, 2), labels, rho=1.0, mode=mode, generator=torch.Generator().manual_seed(1))
    assert all(bool((s == NULL).all()) for s in seen)
    # rho = 0 leaves labels untouched
    fm_loss(stub, torch.randn(3, 2, 2), labels, rho=0.0)
    assert torch.equal(seen[-1], labels)


def test_zero_network_loss_matches_second_moment():
    m, z, sigma = 3, 4, 1e-4
    expected = m * z * (1 + (1 - sigma) ** 2)
    g = torch.Generator().manual_seed(2)
    zero = lambda zt, t, y: torch.zeros_like(zt)  # noqa: E731
    means = []
    for _ in range(400):
        z1 = torch.randn(64, m, z, generator=g, dtype=D64)
        means.append(fm_loss(zero, z1, torch.full((64, 2), NULL), generator=g).item())
    means = np.asarray(means)
    sem = means.std(ddof=1) / math.sqrt(len(means))
    assert abs(means.mean() - expected) < 3 * sem


def test_additive_dropout_is_per_attribute():
    labels = torch.zeros(4000, 2, dtype=torch.long)
    out = drop_conditions(labels, 0.5, "additive", torch.Generator().manual_seed(0))
    dropped = out == NULL
    # independent per attribute: mixed rows occur about half the time
    mixed = (dropped[:, 0] != dropped[:, 1]).float().mean().item()
    assert 0.45 < mixed < 0.55
    joint = drop_conditions(labels, 0.5, "joint", torch.Generator().manual_seed(0))
    assert torch.equal((joint == NULL)[:, 0], (joint == NULL)[:, 1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fm_loss_non_negative(seed):
    flow = tiny_flow(perturb=0.1, seed=seed % 100)
    g = torch.Generator().manual_seed(seed)
    labels = torch.tensor([[0, 0], [1, NULL], [NULL, NULL]])
    assert fm_loss(flow, torch.randn(3, 2, 2, generator=g, dtype=D64), labels, generator=g).item() >= 0


# network ----------------------------------------------------------------------------


def test_timestep_embedding_shape():
    e = timestep_embedding(torch.tensor([0.0, 0.5]), 7)
    assert e.shape == (2, 7)
    assert torch.equal(e[0, :3], torch.ones(3))


@pytest.mark.parametrize("dtype, tol", [(torch.float32, 1e-5), (torch.float64, 1e-10)])
def test_dit_equivariant_over_tokens(dtype, tol):
    flow = tiny_flow(dtype=dtype, perturb=0.1, m=5, z=3)
    g = torch.Generator().manual_seed(3)
    labels = torch.tensor([[0, 1], [NULL, 0], [NULL, NULL], [1, 1]])
    for _ in range(10):
        z = torch.randn(4, 5, 3, generator=g, dtype=dtype)
        t = torch.rand(4, generator=g, dtype=dtype)
        perm = torch.randperm(5, generator=g)
        v = flow(z, t, labels)
        assert v.shape == z.shape and bool(torch.isfinite(v).all())
        assert (v[:, perm] - flow(z[:, perm], t, labels)).abs().max() <= tol


def test_fresh_dit_outputs_zero():
    flow = tiny_flow()
    z = torch.randn(2, 2, 2, dtype=D64)
    assert torch.equal(flow(z, torch.rand(2, dtype=D64), flow.space.null(2)), torch.zeros_like(z))


def test_unknown_condition_rejected():
    flow = tiny_flow()
    z = torch.zeros(1, 2, 2, dtype=D64)
    with pytest.raises(KeyError):
        flow(z, torch.zeros(1, dtype=D64), torch.tensor([[2, 0]]))
    with pytest.raises(ValueError):
        flow(z, torch.zeros(1, dtype=D64), torch.tensor([[0]]))
    with pytest.raises(KeyError):
        flow.space.encode([{"cell_type": "Z"}])
    with pytest.raises(KeyError):
        flow.space.encode([{"donor": "A"}])


def test_joint_embedding_rows():
    flow = tiny_flow(perturb=0.1)
    emb = flow.dit.cond
    space = flow.space
    labels = torch.tensor([[NULL, NULL], [0, 1], [1, 1], [1, NULL]])
    out = emb(labels)
    a0, a1 = emb.attr
    assert torch.equal(out[0], emb.null)
    # seen combination: its row plus the attribute rows
    assert torch.allclose(out[1], emb.combo.weight[space.combos.index((0, 1))] + a0.weight[0] + a1.weight[1])
    # (B, stim) was never seen: attribute rows only
    assert torch.allclose(out[2], a0.weight[1] + a1.weight[1])
    assert torch.allclose(out[3], a0.weight[1])


def test_additive_embedding_uses_null_rows():
    flow = tiny_flow(mode="additive", perturb=0.1)
    emb = flow.dit.cond
    out = emb(torch.tensor([[NULL, NULL], [1, NULL]]))
    a0, a1 = emb.attr
    assert torch.allclose(out[0], a0.weight[-1] + a1.weight[-1])
    assert torch.allclose(out[1], a0.weight[1] + a1.weight[-1])


def test_condition_space_round_trip():
    space = tiny_space()
    labels = space.encode([{"cell_type": "B", "perturbation": "ctrl"}, {"perturbation": "stim"}, None])
    assert labels.tolist() == [[1, 0], [NULL, 1], [NULL, NULL]]
    assert space.decode(labels) == [{"cell_type": "B", "perturbation": "ctrl"}, {"perturbation": "stim"}, {}]
    assert space.combo_index(labels).tolist() == [2, -1, -1]
    assert ConditionSpace.from_dict(space.to_dict()) == space


# guidance -----------------------------------------------------------------------------


def _fields():
    flow = tiny_flow(perturb=0.2)
    g = torch.Generator().manual_seed(5)
    z = torch.randn(4, 2, 2, generator=g, dtype=D64)
    t = torch.rand(4, generator=g, dtype=D64)
    return flow, z, t


def test_joint_cfg_endpoints_exact():
    flow, z, t = _fields()
    labels = torch.tensor([[0, 0], [0, 1], [1, 0], [1, 1]])
    assert torch.equal(cfg_velocity_joint(flow, z, t, labels, 1.0), flow(z, t, labels))
    assert torch.equal(cfg_velocity_joint(flow, z, t, labels, 0.0), flow(z, t, flow.space.null(4)))


def test_joint_cfg_null_rows():
    flow, z, t = _fields()
    null = flow.space.null(4)
    v_null = flow(z, t, null)
    for om in (0.0, 0.5, 2.0, 7.0):
        assert torch.equal(cfg_velocity_joint(flow, z, t, null, om), v_null)
    mixed = torch.tensor([[NULL, NULL], [0, 1], [NULL, NULL], [1, 0]])
    out = cfg_velocity_joint(flow, z, t, mixed, 3.0)
    assert torch.equal(out[0], v_null[0]) and torch.equal(out[2], v_null[2])
    expected = v_null + 3.0 * (flow(z, t, mixed) - v_null)
    assert torch.allclose(out[1], expected[1], atol=1e-12)


def test_additive_single_attribute_equals_joint():
    space = ConditionSpace({"cell_type": ["A", "B", "C"]}, [(0,), (1,), (2,)])
    flow = LatentFlow(2, 2, FlowConfig(width=16, blocks=1, heads=2, time_dim=16, mode="additive"), space).double()
    with torch.no_grad():
        for p in flow.parameters():
            p.add_(0.2 * torch.randn_like(p))
    z, t = torch.randn(3, 2, 2, dtype=D64), torch.rand(3, dtype=D64)
    labels = torch.tensor([[0], [2], [NULL]])
    for om in (0.0, 0.3, 0.5, 1.0, 2.5):
        a = cfg_velocity_additive(flow, z, t, labels, [om])
        j = cfg_velocity_joint(flow, z, t, labels, om)
        assert torch.equal(a, j)


def test_additive_all_zero_weights():
    flow, z, t = _fields()
    labels = torch.tensor([[0, 0], [0, 1], [1, 0], [1, 1]])
    assert torch.equal(cfg_velocity_additive(flow, z, t, labels, [0.0, 0.0]), flow(z, t, flow.space.null(4)))


def test_additive_two_attribute_constant_stub():
    # distinct constant per condition: Null 1, cell_type=k -> 10 + k, perturbation=k -> 100 + k
    def stub(z, t, labels):
        row = labels[0]
        if bool((row == NULL).all()):
            c = 1.0
        elif row[1] == NULL:
            c = 10.0 + row[0].item()
        elif row[0] == NULL:
            c = 100.0 + row[1].item()
        else:
            raise AssertionError("additive guidance must only query single-attribute conditions")
        return torch.full_like(z, c)

    z, t = torch.zeros(1, 2, 2, dtype=D64), torch.zeros(1, dtype=D64)
    out = cfg_velocity_additive(stub, z, t, torch.tensor([[1, 0]]), [2.0, 0.5])
    hand = 1.0 + 2.0 * (11.0 - 1.0) + 0.5 * (100.0 - 1.0)
    assert torch.allclose(out, torch.full_like(z, hand), atol=1e-12)
    # Null attribute contributes nothing
    out = cfg_velocity_additive(stub, z, t, torch.tensor([[NULL, 1]]), [2.0, 0.5])
    assert torch.allclose(out, torch.full_like(z, 1.0 + 0.5 * (101.0 - 1.0)), atol=1e-12)


def test_additive_weight_count_mismatch():
    flow, z, t = _fields()
    with pytest.raises(ValueError):
        cfg_velocity_additive(flow, z, t, torch.tensor([[0, 0]] * 4), [1.0, 1.0, 1.0])


# sampler ------------------------------------------------------------------------------


def test_euler_constant_field_exact():
    z0 = torch.randn(3, 2, 2, dtype=D64)
    c = torch.full_like(z0, 0.25)
    for n in (1, 4, 64):
        assert torch.equal(euler_integrate(lambda z, t: c, z0, n), z0 + c)


def test_euler_linear_field_order():
    z0 = torch.randn(5, 2, 3, dtype=D64)
    exact = math.e * z0

    def err(n):
        return ((euler_integrate(lambda z, t: z, z0, n) - exact).norm() / exact.norm()).item()

    e1, e2 = err(1000), err(2000)
    assert e1 <= 2e-3
    assert 0.4 <= e2 / e1 <= 0.6


def test_euler_non_finite_aborts():
    with pytest.raises(SamplingError):
        euler_integrate(lambda z, t: torch.full_like(z, float("inf")), torch.zeros(1, 1, 1), 3)
    with pytest.raises(ValueError):
        euler_integrate(lambda z, t: z, torch.zeros(1, 1, 1), 0)


def test_sample_latents_seeded():
    flow = tiny_flow(perturb=0.1)
    cond = {"cell_type": "A", "perturbation": "stim"}
    a = sample_latents(flow, 6, cond, SamplerConfig(steps=8, omega=1.5), torch.Generator().manual_seed(9))
    b = sample_latents(flow, 6, cond, SamplerConfig(steps=8, omega=1.5), torch.Generator().manual_seed(9))
    assert torch.equal(a, b) and a.shape == (6, 2, 2)
    with pytest.raises(ValueError):
        SamplerConfig(steps=0).validate()
    with pytest.raises(ValueError):
        SamplerConfig(omega=-1.0).validate()


# training ------------------------------------------------------------------------------


def _mixture(n=256, seed=0):
    rng = np.random.default_rng(seed)
    comp = rng.integers(0, 2, n)
    centers = np.array([[[-3.0, 1.0], [2.0, -1.0]], [[3.0, -2.0], [-1.0, 2.0]]])
    latents = centers[comp] + 0.1 * rng.standard_normal((n, 2, 2))
    labels = np.stack([comp, comp], 1)
    return latents, labels


def test_mixture_loss_halves():
    latents, labels = _mixture()
    space = ConditionSpace({"a": ["0", "1"], "b": ["0", "1"]}, [(0, 0), (1, 1)])
    cfg = FlowConfig(width=32, blocks=2, heads=2, time_dim=16)
    _, hist = train_flow(latents, labels, space, cfg, OptimConfig(epochs=40, batch_size=64, lr=2e-3, warmup_steps=10),
                         seed=0)
    assert hist[-1]["loss"] <= 0.5 * hist[0]["loss"]


def test_train_flow_reproducible():
    latents, labels = _mixture(64)
    space = ConditionSpace({"a": ["0", "1"], "b": ["0", "1"]}, [(0, 0), (1, 1)])
    cfg = FlowConfig(width=16, blocks=1, heads=2, time_dim=16)
    opt = OptimConfig(epochs=3, batch_size=16)
    f1, h1 = train_flow(latents, labels, space, cfg, opt, seed=2)
    f2, h2 = train_flow(latents, labels, space, cfg, opt, seed=2)
    assert h1 == h2 and state_fingerprint(f1.state_dict()) == state_fingerprint(f2.state_dict())
    f3, _ = train_flow(latents, labels, space, cfg, opt, seed=3)
    assert state_fingerprint(f3.state_dict()) != state_fingerprint(f1.state_dict())


def test_train_flow_divergence_aborts():
    latents, labels = _mixture(32)
    latents[0, 0, 0] = np.nan
    space = ConditionSpace({"a": ["0", "1"], "b": ["0", "1"]}, [(0, 0), (1, 1)])
    with pytest.raises(TrainingDiverged, match="ldm: non-finite loss"):
        train_flow(latents, labels, space, FlowConfig(width=16, blocks=1, heads=2, time_dim=16), OptimConfig(epochs=1))


@pytest.fixture(scope="module")
def small_models():
    ds = generate_synthetic(factorial_spec(n_genes=16, cells_per_class=30, effect_genes=4, seed=4))
    vcfg = VaeConfig(n_genes=16, context_length=16, zero_genes=16, latent_tokens=2, latent_dim=2, d_model=16, heads=2,
                     pool_heads=2)
    vae, _ = train_vae(ds, vcfg, OptimConfig(epochs=3, batch_size=32), seed=0)
    flow, _ = train_ldm(vae, ds, FlowConfig(width=16, blocks=1, heads=2, time_dim=16), OptimConfig(epochs=3), seed=0)
    return ds, vae, flow


def test_train_ldm_keeps_vae_frozen(small_models):
    ds, vae, flow = small_models
    assert flow.vae_fingerprint == state_fingerprint(vae.state_dict())
    assert all(not p.requires_grad for p in vae.parameters())
    assert flow.space.attributes == ["cell_type", "perturbation"] and len(flow.space.combos) == 4


def test_ldm_checkpoint_round_trip(small_models, tmp_path):
    _, _, flow = small_models
    flow.save(tmp_path / "ldm.ckpt", step=3)
    back, header = LatentFlow.load(tmp_path / "ldm.ckpt")
    assert header["extra"]["interpolant"] == {"sigma_min": 1e-4, "velocity_weight": 0.0, "transport": "linear"}
    assert back.space == flow.space and back.latent_shape == flow.latent_shape
    assert state_fingerprint(back.state_dict()) == state_fingerprint(flow.state_dict())


# library sizes and generation ---------------------------------------------------------------


def test_library_model_partial_conditions(small_dataset):
    lib = LibrarySizeModel.fit(small_dataset)
    logs = {r.cell_id: math.log(r.library_size) for r in small_dataset.records}
    mean, _ = lib.params({"cell_type": "A"})
    assert abs(mean - (logs["c0"] + logs["c2"]) / 2) < 1e-12
    mean, sd = lib.params(None)
    assert abs(mean - np.mean(list(logs.values()))) < 1e-12
    assert abs(sd - np.std(list(logs.values()), ddof=1)) < 1e-12
    # no matching cells: global fallback
    assert lib.params({"cell_type": "B", "perturbation": "ctrl"}) == lib.params(None)
    assert LibrarySizeModel.from_dict(lib.to_dict()) == lib


def test_effective_condition():
    space = tiny_space()
    cond = {"cell_type": "A", "perturbation": "stim"}
    assert effective_condition(space, cond, 1.0, "joint") == cond
    assert effective_condition(space, cond, 0.0, "joint") == {}
    assert effective_condition(space, cond, [0.0, 2.0], "additive") == {"perturbation": "stim"}
    with pytest.raises(KeyError):
        effective_condition(space, {"cell_type": "Q"}, 1.0, "joint")


def test_generate_cells_invariants(small_models):
    ds, vae, flow = small_models
    lib = LibrarySizeModel.fit(ds)
    cond = {"cell_type": "B", "perturbation": "stim"}
    cells = generate_cells(flow, vae, 20, cond, None, SamplerConfig(steps=5), lib, seed=1)
    assert len(cells) == 20
    for c in cells:
        assert c.library_size == sum(c.counts)
        assert all(x > 0 for x in c.counts) and list(c.gene_ids) == sorted(c.gene_ids)
        assert c.attributes == cond
    again = generate_cells(flow, vae, 20, cond, None, SamplerConfig(steps=5), lib, seed=1)
    assert [(c.gene_ids, c.counts) for c in again] == [(c.gene_ids, c.counts) for c in cells]
    subset = generate_cells(flow, vae, 5, cond, [1, 4, 9], SamplerConfig(steps=5), lib, seed=1)
    assert all(set(c.gene_ids) <= {1, 4, 9} for c in subset)


def test_generate_cells_omega_zero_is_unconditional(small_models):
    ds, vae, flow = small_models
    lib = LibrarySizeModel.fit(ds)
    a = generate_cells(flow, vae, 15, {"cell_type": "A"}, None, SamplerConfig(steps=5, omega=0.0), lib, seed=2)
    b = generate_cells(flow, vae, 15, None, None, SamplerConfig(steps=5), lib, seed=2)
    assert [(c.gene_ids, c.counts, c.attributes) for c in a] == [(c.gene_ids, c.counts, c.attributes) for c in b]


def test_generate_cells_errors(small_models):
    ds, vae, flow = small_models
    lib = LibrarySizeModel.fit(ds)
    with pytest.raises(ValueError, match="empty gene set"):
        generate_cells(flow, vae, 2, None, [], SamplerConfig(steps=2), lib)
    with pytest.raises(KeyError):
        generate_cells(flow, vae, 2, {"cell_type": "Z"}, None, SamplerConfig(steps=2), lib)
    with pytest.raises(IndexError):
        generate_cells(flow, vae, 2, None, [99], SamplerConfig(steps=2), lib)


def test_generated_class_profiles_match(desk_run):
    """2k generated cells per joint condition against the true class profile."""
    out = desk_run["out"]
    vae, _ = SetVAE.load(out / "vae.ckpt")
    flow, header = LatentFlow.load(out / "ldm_joint.ckpt")
    lib = LibrarySizeModel.from_dict(header["extra"]["library"])
    spec = factorial_spec(n_genes=100, cells_per_class=1000, dispersion=0.2, effect_genes=15, effect_size=4.0,
                          size_factor_sd=0.25, seed=0)
    for i, cls in enumerate(spec.classes):
        cells = generate_cells(flow, vae, 2000, cls.attributes, None, SamplerConfig(steps=100), lib, seed=i)
        dense = np.zeros((len(cells), 100))
        for r, c in enumerate(cells):
            dense[r, list(c.gene_ids)] = c.counts
        pcc = np.corrcoef(dense.mean(0), cls.profile)[0, 1]
        assert pcc >= 0.8, (cls.attributes, pcc)


def test_dit_gradient_check():
    from helpers import finite_difference_errors

    flow = tiny_flow(perturb=0.1, width=16, blocks=2)
    g = torch.Generator().manual_seed(0)
    z1 = torch.randn(3, 2, 2, generator=g, dtype=D64)
    z0 = torch.randn(3, 2, 2, generator=g, dtype=D64)
    t = torch.rand(3, generator=g, dtype=D64)
    labels = torch.tensor([[0, 1], [NULL, 0], [NULL, NULL]])
    errs = finite_difference_errors(lambda: fm_loss(flow, z1, labels, t=t, z0=z0), dict(flow.named_parameters()))
    assert max(errs.values()) <= 1e-4, errs
