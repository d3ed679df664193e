"""Small end-to-end run on a 16-cube phantom, driven from Python.

    python demos/quickstart.py [run_dir]

Takes about a minute on one CPU core.  The numbers are not meaningful at this
size; see configs/desk.yaml for the benchmark configuration.
"""
import json
import sys
from pathlib import Path

from mritraj import pipeline
from mritraj.config import config_from_dict, echo_config

run_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "run-quickstart")

cfg = config_from_dict({
    "seed": 1,
    "phantom": {"grid_size": 16, "cohort_size": 12, "statuses": [[0, 1], [5, 1]]},
    "model": {"latent_dim": 4, "channels": [4, 8, 8, 8], "kl_weight": 0.02},
    "train": {"max_epochs": 4, "patience": 3, "steps_per_epoch": 20, "learning_rate": 0.002,
              "lr_schedule": "cosine"},
    "vae": {"epochs": 2, "channels": [4, 8, 8, 8], "latent_dim": 4},
    "evaluation": {"holdout_per_category": 2, "min_delta_t": 1.0, "flow_iters": 50},
    "paths": {"run_dir": str(run_dir)},
})
layout = pipeline.RunLayout(run_dir)

with pipeline.RunLock(run_dir):
    echo_config(cfg, run_dir)
    cohort = pipeline.phantom_gen(cfg, layout)
    print(f"{len(cohort.records)} scans of {cfg.phantom.cohort_size} subjects")

    split = pipeline.prep_pairs(cfg, layout)
    print(f"subjects: {len(split.train)} train, {len(split.val)} val, {len(split.test)} test")

    ckpt, log = pipeline.train_stage(cfg, layout)
    print(f"best epoch {log.best_epoch}, val loss {log.rows[log.best_epoch - 1]['val_total']:.2f}")

    pipeline.baselines_stage(cfg, layout)
    report = pipeline.evaluate_stage(cfg, layout)
    for roi, rates in report.summary()["win_rates"]["strict"].items():
        print(roi, {m: round(v, 2) for m, v in rates.items()})

    flow = pipeline.flowviz_stage(cfg, layout)
    print(json.dumps({k: flow[k] for k in ("subject", "positive_divergence_steps",
                                            "nondecreasing_proxy_steps")}))
    print("report:", pipeline.report_stage(cfg, layout))
