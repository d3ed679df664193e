import hashlib
import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cohort(tmp_path_factory):
    """A 16-cube phantom cohort of eight subjects, statuses 0 and 5 only."""
    from mritraj.phantom import PhantomSpec, generate_cohort

    spec = PhantomSpec(grid_size=16, cohort_size=8, seed=5, statuses=[[0, 1], [5, 1]],
                       scans_per_subject=(2, 3))
    out = tmp_path_factory.mktemp("tiny_cohort")
    return spec, generate_cohort(spec, out)


ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk.yaml"


def _desk_key() -> str:
    h = hashlib.sha256(DESK_CONFIG.read_bytes())
    for src in sorted((ROOT / "src" / "mritraj").glob("*.py")):
        h.update(src.name.encode())
        h.update(src.read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def desk_run(request):
    """The full phantom benchmark from configs/desk.yaml: cohort, split,
    trained CVAE, baselines, evaluation and trajectory flow.

    The run is cached under pytest's cache directory, keyed on the config and
    the package sources, so it is only recomputed when either changes.
    """
    from mritraj import pipeline
    from mritraj.config import config_from_dict

    raw = yaml.safe_load(DESK_CONFIG.read_text())
    root = Path(request.config.cache.mkdir(f"desk-{_desk_key()}"))
    raw["paths"] = {**raw.get("paths", {}), "run_dir": str(root / "run")}
    cfg = config_from_dict(raw)
    layout = pipeline.RunLayout(root / "run")
    done = root / "complete.json"
    if not done.exists():
        shutil.rmtree(layout.root, ignore_errors=True)
        timings = {}
        with pipeline.RunLock(layout.root):
            for name, stage in [("phantom_gen", pipeline.phantom_gen), ("prep_pairs", pipeline.prep_pairs),
                                ("train", pipeline.train_stage), ("baselines", pipeline.baselines_stage),
                                ("evaluate", pipeline.evaluate_stage), ("flowviz", pipeline.flowviz_stage),
                                ("report", pipeline.report_stage)]:
                t0 = time.perf_counter()
                stage(cfg, layout)
                timings[name] = time.perf_counter() - t0
        done.write_text(json.dumps({"seconds": timings}, indent=2))
    return cfg, layout, json.loads(done.read_text())


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            for key, value in rep.user_properties:
                if key == "criterion":
                    number, detail = value
                    lines.append((number, f"criterion {number:2d}: {'PASS' if rep.passed else 'FAIL'}  {detail}"))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
