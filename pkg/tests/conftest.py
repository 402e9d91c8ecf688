import json
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from countldm.cli import main as cli_main
from countldm.setdata import CellRecord, CountDataset, GeneVocabulary

GOLDEN = Path(__file__).parent / "golden"

# per-criterion outcomes collected from tests marked with @pytest.mark.criterion(n, text)
_CRITERIA: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, text): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    cid, text = str(mark.args[0]), mark.args[1]
    entry = _CRITERIA.setdefault(cid, {"text": text, "ok": True, "tests": 0})
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry["tests"] += rep.when == "call"
        if not rep.passed:
            entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")

    def key(c):
        num = "".join(ch for ch in c if ch.isdigit())
        return (int(num or 0), c)

    for cid in sorted(_CRITERIA, key=key):
        e = _CRITERIA[cid]
        status = "PASS" if e["ok"] and e["tests"] else "FAIL"
        terminalreporter.write_line(f"criterion {cid:>3}: {status}  {e['text']}")


def make_record(ids, counts, attrs=None, cell_id=""):
    return CellRecord(tuple(ids), tuple(counts), dict(attrs or {}), cell_id)


@pytest.fixture
def small_dataset():
    vocab = GeneVocabulary.numbered(6)
    schema = {"cell_type": ["A", "B"], "perturbation": ["ctrl", "stim"]}
    recs = [
        make_record([0, 2, 5], [3, 1, 7], {"cell_type": "A", "perturbation": "ctrl"}, "c0"),
        make_record([1, 2], [4, 4], {"cell_type": "B", "perturbation": "stim"}, "c1"),
        make_record([0, 3, 4, 5], [1, 2, 9, 1], {"cell_type": "A", "perturbation": "stim"}, "c2"),
    ]
    return CountDataset(vocab, recs, schema)


def tiny_config_text(out_dir: str) -> str:
    return f"""
version: 1
seed: 7
output_dir: {out_dir}
data:
  synthetic: {{n_genes: 30, cells_per_class: 40, effect_genes: 5, seed: 3}}
  test_fraction: 0.25
vae: {{context_length: 30, zero_genes: 30, latent_tokens: 2, latent_dim: 4, d_model: 16, enc_blocks: 1,
      dec_blocks: 1, heads: 2, pool_heads: 2, unpool_heads: 1}}
vae_optim: {{epochs: 2, batch_size: 32}}
flow: {{width: 16, blocks: 1, heads: 2, time_dim: 16}}
flow_optim: {{epochs: 2, batch_size: 32}}
sampler: {{n: 40, steps: 5, omega: 1.0}}
eval: {{pca_k: 5, n_reference: 30}}
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(tiny_config_text("run"))
    return path


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Full desk pipeline (bundled config) run once per session through the CLI."""
    out = tmp_path_factory.mktemp("desk") / "run"
    import time

    t0 = time.process_time()
    code = cli_main(["pipeline", "--out", str(out), "--deterministic"])
    cpu = time.process_time() - t0
    assert code == 0
    summary = json.loads((out / "reports" / "summary.json").read_text())
    return {"out": out, "summary": summary, "cpu_seconds": cpu}


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)
    yield
