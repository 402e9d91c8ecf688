"""Command-line pipeline: data generation, both training stages, sampling,
evaluation and baselines.

Every command reads the same YAML config, writes into its output directory
and updates ``manifest.json`` there. Failures exit nonzero and print a JSON
error record on stderr. ``COUNTLDM_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, file_digest
from .config import ConfigError, RunConfig, RunManifest, Timer, load_config
from .eval import (
    KernelConfig, MetricError, MetricReport, context_mean_baseline, generation_metrics, mse, pca_fit,
    pearson, perturb_mean_baseline, reconstruction_metrics,
)
from .flow import (
    ConditionSpace, LatentFlow, LibrarySizeModel, SamplerConfig, SamplingError, generate_cells, train_ldm,
)
from .optim import TrainingDiverged
from .setdata import (
    CountDataset, DatasetFormatError, GeneVocabulary, factorial_spec, generate_synthetic, read_dataset,
    write_dataset,
)
from .vae import SetVAE, train_vae

log = logging.getLogger("countldm")


class MissingArtifact(FileNotFoundError):
    pass


class SchemaMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def parse_condition(text: str | None) -> dict[str, str] | None:
    """``"a=x,b=y"`` -> ``{"a": "x", "b": "y"}``; empty or None -> None."""
    if not text:
        return None
    out = {}
    for item in text.split(","):
        key, sep, val = item.partition("=")
        if not sep or not key.strip() or not val.strip():
            raise ValueError(f"malformed condition item {item!r}; expected attr=value")
        out[key.strip()] = val.strip()
    return out


def parse_omega(text):
    if text is None or isinstance(text, (int, float, list)):
        return text
    vals = [float(v) for v in str(text).split(",")]
    return vals[0] if len(vals) == 1 else vals


def _write_table(path: Path, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})
    tmp.replace(path)


def _slug(condition) -> str:
    if not condition:
        return "uncond"
    return "_".join(f"{k}-{v}" for k, v in sorted(condition.items()))


class Run:
    """Paths and lazily loaded artifacts for one output directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = cfg.out
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest.load_or_new(self.out, cfg)
        self._dataset = None

    # paths
    @property
    def dataset_path(self) -> Path:
        if self.cfg.data.path is not None:
            return self.cfg.resolve(self.cfg.data.path)
        return self.out / "dataset.tsv"

    @property
    def vae_path(self) -> Path:
        return self.out / "vae.ckpt"

    def ldm_path(self, mode: str) -> Path:
        return self.out / f"ldm_{mode}.ckpt"

    def report_stem(self, name: str) -> Path:
        return self.out / "reports" / name

    # artifacts
    def dataset(self) -> CountDataset:
        if self._dataset is None:
            if not self.dataset_path.exists():
                raise MissingArtifact(f"dataset not found at {self.dataset_path}; run gen-data first")
            self._dataset = read_dataset(self.dataset_path)
        return self._dataset

    def split(self):
        return self.dataset().split(self.cfg.data.test_fraction, self.cfg.stage_seed("split"))

    def vae(self) -> SetVAE:
        if not self.vae_path.exists():
            raise MissingArtifact(f"VAE checkpoint not found at {self.vae_path}; run train-vae first")
        model, header = SetVAE.load(self.vae_path)
        genes = header["extra"].get("genes")
        if genes is not None and list(genes) != list(self.dataset().vocabulary.names):
            raise SchemaMismatch("VAE checkpoint gene vocabulary does not match the dataset")
        return model

    def ldm(self, mode: str) -> tuple[LatentFlow, LibrarySizeModel]:
        path = self.ldm_path(mode)
        if not path.exists():
            raise MissingArtifact(f"LDM checkpoint not found at {path}; run train-ldm --cfg-mode {mode}")
        flow, header = LatentFlow.load(path)
        extra = header["extra"]
        if extra.get("vae_digest") != file_digest(self.vae_path):
            raise SchemaMismatch(f"{path.name} was trained on a different VAE checkpoint")
        if flow.space.schema != self.dataset().attribute_schema:
            raise SchemaMismatch(f"{path.name} condition schema does not match the dataset")
        return flow, LibrarySizeModel.from_dict(extra["library"])

    def record(self, section: str, key: str, path: Path):
        getattr(self.manifest, section)[key] = os.path.relpath(path, self.out)

    def finish(self, command: str, timer: Timer):
        self.manifest.wall_clock[command] = timer.elapsed()
        self.manifest.write(self.out)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(run: Run) -> Path:
    if run.cfg.data.synthetic is None:
        raise ConfigError("gen-data needs a 'data.synthetic' section")
    ds = generate_synthetic(factorial_spec(**run.cfg.data.synthetic))
    write_dataset(ds, run.dataset_path)
    run._dataset = None
    run.record("artifacts", "dataset", run.dataset_path)
    log.info("wrote %d cells to %s", len(ds), run.dataset_path)
    return run.dataset_path


def cmd_train_vae(run: Run) -> Path:
    train, _ = run.split()
    cfg = run.cfg.vae_config(train.n_genes)
    model, history = train_vae(train, cfg, run.cfg.vae_optim, seed=run.cfg.stage_seed("vae"))
    extra = {"genes": list(train.vocabulary.names), "dataset_digest": file_digest(run.dataset_path),
             "optim": run.cfg.vae_optim.to_dict()}
    model.save(run.vae_path, model.train_steps, model.train_rng_state, extra)
    table = run.out / "tables" / "vae_loss.csv"
    _write_table(table, history)
    run.record("checkpoints", "vae", run.vae_path)
    run.record("artifacts", "vae_loss", table)
    return run.vae_path


def cmd_train_ldm(run: Run, mode: str | None = None) -> Path:
    mode = mode or run.cfg.flow.mode
    train, _ = run.split()
    vae = run.vae()
    flow_cfg = type(run.cfg.flow).from_dict({**run.cfg.flow.to_dict(), "mode": mode})
    flow, history = train_ldm(vae, train, flow_cfg, run.cfg.flow_optim, seed=run.cfg.stage_seed(f"ldm-{mode}"))
    library = LibrarySizeModel.fit(train)
    path = run.ldm_path(mode)
    extra = {"library": library.to_dict(), "vae_digest": file_digest(run.vae_path),
             "rho": flow_cfg.rho, "optim": run.cfg.flow_optim.to_dict()}
    flow.save(path, flow.train_steps, flow.train_rng_state, extra)
    table = run.out / "tables" / f"ldm_{mode}_loss.csv"
    _write_table(table, history)
    run.record("checkpoints", f"ldm_{mode}", path)
    run.record("artifacts", f"ldm_{mode}_loss", table)
    return path


def _sample(run: Run, vae, flow, library, n, condition, omega, steps, mode, seed) -> CountDataset:
    sampler = SamplerConfig(steps=steps, omega=omega, mode=mode)
    records = generate_cells(flow, vae, n, condition, None, sampler, library, seed=seed)
    return CountDataset(run.dataset().vocabulary, records, flow.space.schema)


def cmd_sample(run: Run, n=None, condition=None, omega=None, steps=None, mode=None, file=None) -> Path:
    s = run.cfg.sampler
    mode = mode or run.cfg.flow.mode
    n = n or s.n
    omega = s.omega if omega is None else omega
    steps = steps or s.steps
    vae = run.vae()
    flow, library = run.ldm(mode)
    seed = run.cfg.stage_seed("sample")
    ds = _sample(run, vae, flow, library, n, condition, omega, steps, mode, seed)
    path = Path(file) if file else run.out / "samples" / f"{mode}_{_slug(condition)}_w{omega}.tsv"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, path)
    run.record("artifacts", f"sample:{path.name}", path)
    return path


def _perturbed(ds: CountDataset, ev) -> CountDataset:
    idx = [i for i, r in enumerate(ds.records) if r.attributes.get(ev.perturbation) != ev.control]
    return ds.subset(idx)


def cmd_reconstruct(run: Run) -> MetricReport:
    _, test = run.split()
    vae = run.vae()
    seed = run.cfg.seed
    rep = MetricReport()
    rep.extend(reconstruction_metrics(test, vae, seed), "test/")
    pert = _perturbed(test, run.cfg.eval)
    if len(pert):
        rep.extend(reconstruction_metrics(pert, vae, seed), "perturbed/")
    stem = run.report_stem("reconstruction")
    rep.write(stem)
    run.record("reports", "reconstruction", stem.with_suffix(".json"))
    return rep


def cmd_baselines(run: Run) -> MetricReport:
    ev = run.cfg.eval
    train, test = run.split()
    pert = _perturbed(test, ev)
    if not len(pert):
        raise MetricError("test split has no perturbed cells")
    x = np.log1p(pert.dense_counts())
    rep = MetricReport()
    for name, fn in (("perturb_mean", perturb_mean_baseline), ("context_mean", context_mean_baseline)):
        pred = np.log1p(np.clip(fn(train, pert, ev.context, ev.perturbation, ev.control), 0, None))
        rep.add(f"{name}/PCC", pearson(x, pred), len(pert), len(pert), run.cfg.seed)
        rep.add(f"{name}/MSE", mse(x, pred), len(pert), len(pert), run.cfg.seed)
    stem = run.report_stem("baselines")
    rep.write(stem)
    run.record("reports", "baselines", stem.with_suffix(".json"))
    return rep


def _filter(ds: CountDataset, condition) -> CountDataset:
    if not condition:
        return ds
    idx = [i for i, r in enumerate(ds.records) if all(r.attributes.get(k) == v for k, v in condition.items())]
    if not idx:
        raise KeyError(f"no true cells match condition {condition}")
    return ds.subset(idx)


def cmd_evaluate(run: Run, gen_file, true_file=None, condition=None, name="evaluate") -> MetricReport:
    gen = read_dataset(gen_file)
    true = read_dataset(true_file) if true_file else run.split()[1]
    if gen.vocabulary.names != true.vocabulary.names:
        raise SchemaMismatch("generated and true datasets have different gene vocabularies")
    true = _filter(true, condition)
    ev = run.cfg.eval
    rep = generation_metrics(true.dense_counts(), gen.dense_counts(), k=ev.pca_k, seed=run.cfg.stage_seed("eval"),
                             kc=KernelConfig(ev.bandwidth))
    stem = run.report_stem(name)
    rep.write(stem)
    run.record("reports", name, stem.with_suffix(".json"))
    return rep


def cmd_pipeline(run: Run) -> dict:
    """Every stage in order, then the class-matching and guidance-mode reports."""
    cfg, ev = run.cfg, run.cfg.eval
    if cfg.data.synthetic is not None:
        cmd_gen_data(run)
    cmd_train_vae(run)
    modes = [cfg.flow.mode]
    if ev.compare_modes:
        modes.append("additive" if cfg.flow.mode == "joint" else "joint")
    for mode in modes:
        cmd_train_ldm(run, mode)
    recon = cmd_reconstruct(run)
    base = cmd_baselines(run)

    full = run.dataset()
    _, test = run.split()
    basis = pca_fit(np.log1p(full.dense_counts().astype(np.float64)), ev.pca_k)
    vae = run.vae()
    space = ConditionSpace.from_dataset(full)
    conditions = space.decode(np.array(space.combos)) if space.combos else []
    rng = np.random.default_rng(cfg.stage_seed("reference"))
    refs = {}
    for cond in conditions:
        sub = _filter(test, cond)
        if len(sub) > ev.n_reference:
            sub = sub.subset(np.sort(rng.choice(len(sub), ev.n_reference, replace=False)))
        refs[_slug(cond)] = sub.dense_counts()
    eval_seed = cfg.stage_seed("eval")
    kc = KernelConfig(ev.bandwidth)
    s = cfg.sampler

    gen_rep = MetricReport()
    class_rows, cmp_rows = [], []
    matches = {}
    for mode in modes:
        flow, library = run.ldm(mode)
        uncond = _sample(run, vae, flow, library, s.n, None, s.omega, s.steps, mode, cfg.stage_seed("sample-uncond"))
        gen_rep.extend(generation_metrics(test.dense_counts(), uncond.dense_counts(), basis, seed=eval_seed, kc=kc),
                       f"{mode}/uncond/")
        for ci, cond in enumerate(conditions):
            gen = _sample(run, vae, flow, library, s.n, cond, s.omega, s.steps, mode,
                          cfg.stage_seed(f"sample-{ci}"))
            g = gen.dense_counts()
            path = run.out / "samples" / f"{mode}_{_slug(cond)}.tsv"
            path.parent.mkdir(parents=True, exist_ok=True)
            write_dataset(gen, path)
            run.record("artifacts", f"sample:{path.name}", path)
            rep = generation_metrics(refs[_slug(cond)], g, basis, seed=eval_seed, kc=kc)
            gen_rep.extend(rep, f"{mode}/{_slug(cond)}/")
            cmp_rows.append({"mode": mode, "condition": _slug(cond), "W2": rep["W2"], "MMD2_RBF": rep["MMD2_RBF"],
                             "FD": rep["FD"]})
            mmds = {}
            for other in conditions:
                mmds[_slug(other)] = generation_metrics(refs[_slug(other)], g, basis, seed=eval_seed, kc=kc)["MMD2_RBF"]
            own = mmds[_slug(cond)]
            lowest = all(own < v for k, v in mmds.items() if k != _slug(cond))
            matches[f"{mode}/{_slug(cond)}"] = lowest
            for other, v in mmds.items():
                class_rows.append({"mode": mode, "generated": _slug(cond), "reference": other, "MMD2_RBF": v,
                                   "matching": other == _slug(cond)})

    gen_stem = run.report_stem("generation")
    gen_rep.write(gen_stem)
    run.record("reports", "generation", gen_stem.with_suffix(".json"))
    _write_table(run.out / "reports" / "class_mmd.csv", class_rows)
    run.record("reports", "class_mmd", run.out / "reports" / "class_mmd.csv")

    cmp_rep = MetricReport()
    for mode in modes:
        rows = [r for r in cmp_rows if r["mode"] == mode]
        for metric in ("W2", "MMD2_RBF", "FD"):
            for r in rows:
                n_ref = len(refs[r["condition"]])
                # W2 compares equal-size subsamples
                n_x, n_y = (min(n_ref, s.n),) * 2 if metric == "W2" else (n_ref, s.n)
                cmp_rep.add(f"{mode}/{r['condition']}/{metric}", r[metric], n_x, n_y, eval_seed, basis.fingerprint)
            if rows:
                cmp_rep.add(f"{mode}/mean/{metric}", np.mean([r[metric] for r in rows]), len(rows), len(rows),
                            eval_seed, basis.fingerprint)
    cmp_stem = run.report_stem("cfg_comparison")
    cmp_rep.write(cmp_stem)
    run.record("reports", "cfg_comparison", cmp_stem.with_suffix(".json"))

    primary = cfg.flow.mode
    summary = {
        "reconstruction_pcc_perturbed": recon["perturbed/PCC"],
        "context_mean_pcc_perturbed": base["context_mean/PCC"],
        "perturb_mean_pcc_perturbed": base["perturb_mean/PCC"],
        "reconstruction_beats_context_mean": recon["perturbed/PCC"] > base["context_mean/PCC"],
        "class_match": matches,
        "all_conditions_match": all(v for k, v in matches.items() if k.startswith(primary + "/")),
    }
    if len(modes) > 1:
        summary["mode_means"] = {m: {k: cmp_rep[f"{m}/mean/{k}"] for k in ("W2", "MMD2_RBF", "FD")} for m in modes}
    path = run.out / "reports" / "summary.json"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(summary, indent=2, sort_keys=True))
    tmp.replace(path)
    run.record("reports", "summary", path)
    return summary


# ---------------------------------------------------------------------------
# entry point

COMMANDS = ("gen-data", "train-vae", "train-ldm", "sample", "reconstruct", "evaluate", "baselines", "pipeline")
EXPECTED_ERRORS = (ConfigError, MissingArtifact, SchemaMismatch, CheckpointError, DatasetFormatError, MetricError,
                   TrainingDiverged, SamplingError, FileNotFoundError, KeyError, ValueError, IndexError)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (default: the bundled desk config)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded deterministic kernels")
    p = argparse.ArgumentParser(prog="countldm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name in ("train-ldm", "sample"):
            sp.add_argument("--cfg-mode", choices=("joint", "additive"))
        if name == "sample":
            sp.add_argument("--n", type=int)
            sp.add_argument("--omega", help="guidance strength, or comma-separated per-attribute weights")
            sp.add_argument("--steps", type=int)
            sp.add_argument("--condition", help="attr=value[,attr=value]")
            sp.add_argument("--file", help="output dataset path")
        if name == "evaluate":
            sp.add_argument("--gen", required=True, help="generated dataset file")
            sp.add_argument("--true", help="true dataset file (default: the test split)")
            sp.add_argument("--condition", help="restrict true cells to attr=value[,attr=value]")
            sp.add_argument("--name", default="evaluate", help="report name")
    return p


def _set_deterministic(on: bool):
    if on:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def run_command(args) -> object:
    overrides = {"seed": args.seed, "output_dir": str(Path(args.out).resolve()) if args.out else None}
    cfg = load_config(args.config, overrides)
    _set_deterministic(args.deterministic)
    run = Run(cfg)
    timer = Timer()
    cmd = args.command
    if cmd == "gen-data":
        result = cmd_gen_data(run)
    elif cmd == "train-vae":
        result = cmd_train_vae(run)
    elif cmd == "train-ldm":
        result = cmd_train_ldm(run, args.cfg_mode)
    elif cmd == "sample":
        result = cmd_sample(run, args.n, parse_condition(args.condition), parse_omega(args.omega), args.steps,
                            args.cfg_mode, args.file)
    elif cmd == "reconstruct":
        result = cmd_reconstruct(run)
    elif cmd == "evaluate":
        result = cmd_evaluate(run, args.gen, args.true, parse_condition(args.condition), args.name)
    elif cmd == "baselines":
        result = cmd_baselines(run)
    else:
        result = cmd_pipeline(run)
    run.finish(cmd, timer)
    return result


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("COUNTLDM_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        result = run_command(args)
    except EXPECTED_ERRORS as e:
        record = {"command": args.command, "error": type(e).__name__, "message": str(e).strip("'\"")}
        print(json.dumps(record), file=sys.stderr)
        return 2
    if isinstance(result, MetricReport):
        print(result.format())
    elif isinstance(result, dict):
        print(json.dumps(result, indent=2, sort_keys=True))
    else:
        print(result)
    return 0


__all__ = ["main", "build_parser", "parse_condition", "parse_omega", "Run", "MissingArtifact", "SchemaMismatch",
           "cmd_gen_data", "cmd_train_vae", "cmd_train_ldm", "cmd_sample", "cmd_reconstruct", "cmd_evaluate",
           "cmd_baselines", "cmd_pipeline"]
