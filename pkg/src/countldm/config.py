"""Run configuration (YAML) and the run manifest.

A config file is a mapping with an explicit ``version`` and ``seed``; every
section is checked against its dataclass and unknown keys are rejected before
any compute starts. Relative paths resolve against the config file's folder.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .flow import FlowConfig, SamplerConfig
from .optim import OptimConfig
from .vae import VaeConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


def _check_keys(section: str, d: dict, allowed):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")


def _build(section, cls, d):
    _check_keys(section, d, {f.name for f in fields(cls)})
    try:
        obj = cls.from_dict(d) if hasattr(cls, "from_dict") else cls(**d)
        if hasattr(obj, "validate"):
            obj.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None
    return obj


@dataclass
class DataConfig:
    path: str | None = None
    synthetic: dict | None = None  # keyword arguments of setdata.factorial_spec
    test_fraction: float = 0.2

    def validate(self):
        if (self.path is None) == (self.synthetic is None):
            raise ConfigError("data needs exactly one of 'path' or 'synthetic'")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.synthetic is not None:
            from .setdata import factorial_spec

            try:
                factorial_spec(**self.synthetic).validate()
            except (TypeError, ValueError) as e:
                raise ConfigError(f"data.synthetic: {e}") from None


@dataclass
class SampleSettings:
    n: int = 500
    steps: int = 100
    omega: float | list[float] = 1.0

    def validate(self):
        if self.n < 1:
            raise ConfigError("sampler.n must be positive")
        SamplerConfig(self.steps, self.omega).validate()


@dataclass
class EvalSettings:
    pca_k: int = 30
    bandwidth: float | None = None
    n_reference: int = 500  # true cells per class for generation metrics
    context: str = "cell_type"
    perturbation: str = "perturbation"
    control: str = "ctrl"
    compare_modes: bool = True  # also train an additive-mode LDM

    def validate(self):
        if self.pca_k < 1 or self.n_reference < 2:
            raise ConfigError("eval.pca_k and eval.n_reference are too small")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ConfigError("eval.bandwidth must be positive")


@dataclass
class RunConfig:
    seed: int
    output_dir: str
    data: DataConfig
    vae: dict  # VaeConfig without n_genes, which comes from the data
    vae_optim: OptimConfig
    flow: FlowConfig
    flow_optim: OptimConfig
    sampler: SampleSettings
    eval: EvalSettings
    version: int = CONFIG_VERSION
    base_dir: str = "."

    SECTIONS = ("version", "seed", "output_dir", "data", "vae", "vae_optim", "flow", "flow_optim",
                "sampler", "eval")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        _check_keys("config", d, cls.SECTIONS)
        if "version" not in d:
            raise ConfigError("config needs an explicit 'version' key")
        if d["version"] != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {d['version']}")
        if d.get("seed") is None:
            raise ConfigError("config needs a 'seed'")
        seed = d["seed"]
        if not isinstance(seed, int) or seed < 0 or seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        vae = dict(d.get("vae", {}))
        _check_keys("vae", vae, {f.name for f in fields(VaeConfig)})
        cfg = cls(
            seed=seed,
            output_dir=str(d.get("output_dir", "run")),
            data=_build("data", DataConfig, d.get("data", {})),
            vae=vae,
            vae_optim=_build("vae_optim", OptimConfig, d.get("vae_optim", {})),
            flow=_build("flow", FlowConfig, d.get("flow", {})),
            flow_optim=_build("flow_optim", OptimConfig, d.get("flow_optim", {})),
            sampler=_build("sampler", SampleSettings, d.get("sampler", {})),
            eval=_build("eval", EvalSettings, d.get("eval", {})),
            base_dir=str(base_dir),
        )
        cfg.validate()
        return cfg

    def validate(self):
        if self.data.path is not None and not self.resolve(self.data.path).exists():
            raise ConfigError(f"dataset file not found: {self.data.path}")
        n = self.vae.get("n_genes", 1)
        try:
            VaeConfig(**{**self.vae, "n_genes": n}).validate()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"vae: {e}") from None

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)

    def vae_config(self, n_genes: int) -> VaeConfig:
        d = dict(self.vae)
        if d.get("n_genes", n_genes) != n_genes:
            raise ConfigError(f"vae.n_genes={d['n_genes']} but the dataset has {n_genes} genes")
        d["n_genes"] = n_genes
        cfg = VaeConfig(**d)
        cfg.validate()
        return cfg

    def stage_seed(self, stage: str) -> int:
        """Independent per-stage seed derived from the global seed and a stage name."""
        key = [int(b) for b in stage.encode()]
        return int(np.random.SeedSequence([self.seed, *key]).generate_state(1)[0])

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "data": asdict(self.data),
            "vae": dict(self.vae),
            "vae_optim": self.vae_optim.to_dict(),
            "flow": self.flow.to_dict(),
            "flow_optim": self.flow_optim.to_dict(),
            "sampler": asdict(self.sampler),
            "eval": asdict(self.eval),
        }


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML config (the bundled desk config when ``path`` is None)."""
    if path is None:
        text = resources.files("countldm").joinpath("configs/desk.yaml").read_text()
        base = Path.cwd()
    else:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        base = path.resolve().parent
    try:
        d = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from None
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_dict(d, base)


def bundled_config_text() -> str:
    return resources.files("countldm").joinpath("configs/desk.yaml").read_text()


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    config: dict
    checkpoints: dict[str, str] = field(default_factory=dict)
    reports: dict[str, str] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    wall_clock: dict[str, float] = field(default_factory=dict)
    versions: dict[str, str] = field(default_factory=dict)

    @classmethod
    def load_or_new(cls, out: Path, config: RunConfig) -> "RunManifest":
        path = out / "manifest.json"
        if path.exists():
            d = json.loads(path.read_text())
            m = cls(**d)
            m.config = config.to_dict()
            return m
        return cls(config.to_dict())

    def stamp(self):
        import scipy
        import torch

        self.versions = {"countldm": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "torch": torch.__version__}

    def write(self, out: Path):
        self.stamp()
        out.mkdir(parents=True, exist_ok=True)
        path = out / "manifest.json"
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        os.replace(tmp, path)


class Timer:
    def __init__(self):
        self.start = time.perf_counter()

    def elapsed(self) -> float:
        return round(time.perf_counter() - self.start, 3)


__all__ = ["ConfigError", "DataConfig", "SampleSettings", "EvalSettings", "RunConfig", "load_config",
           "RunManifest", "bundled_config_text", "CONFIG_VERSION"]
