"""Command-line front end.

    mritraj <subcommand> [--config cfg.yaml] [--run-dir DIR] [--set key.path=value ...]

Exit status: 0 success, 2 configuration or usage error, 3 data error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import MISSING, fields
from pathlib import Path

import yaml

from . import pipeline
from .config import ConfigError, config_from_dict, echo_config
from .cvae import load_checkpoint
from .dataio import DatasetError, VolumeFormatError, load_volume, save_volume
from .predictor import (
    PredictionError,
    TrajectoryRequest,
    latent_vector,
    predict_future,
    save_trajectory,
    status_posterior,
    trajectory,
)
from .registration import RegistrationError
from .trainer import TrainConfig, TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("mritraj")


def parse_horizons(text: str) -> list[float]:
    """``"1..10"`` (integer steps), ``"0:10:0.5"`` (start:stop:step, inclusive) or ``"1,2,5"``."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split(".."))
            return [float(v) for v in range(lo, hi + 1)]
        if ":" in text:
            lo, hi, step = (float(v) for v in text.split(":"))
            n = int(round((hi - lo) / step))
            return [lo + i * step for i in range(n + 1)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad horizon list {text!r}") from exc


def _set_override(raw: dict, item: str) -> None:
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} must look like section.field=value")
    node = raw
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key}: {p} is not a section")
    node[parts[-1]] = yaml.safe_load(value)


def load_config(args) -> "pipeline.PipelineConfig":
    raw = {}
    if args.config:
        path = Path(args.config)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping at the top level")
    for item in args.set or []:
        _set_override(raw, item)
    for name in _TRAIN_FLAGS:
        value = getattr(args, f"train_{name}", None)
        if value is not None:
            raw.setdefault("train", {})[name] = value
    if args.run_dir:
        raw.setdefault("paths", {})["run_dir"] = str(args.run_dir)
    return config_from_dict(raw)


_TRAIN_FLAGS = [f.name for f in fields(TrainConfig)]


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name) if f.default is not MISSING else None
        kw = {"dest": f"train_{f.name}", "default": None, "help": f"(config default {default!r})"}
        if isinstance(default, bool):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif isinstance(default, int) or f.name == "steps_per_epoch":
            p.add_argument(flag, type=int, **kw)
        elif isinstance(default, float):
            p.add_argument(flag, type=float, **kw)
        else:
            p.add_argument(flag, **kw)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--run-dir", help="override paths.run_dir")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. train.batch_size=8")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mritraj", description="Longitudinal brain MRI trajectory prediction.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("phantom-gen", "render the synthetic phantom cohort"),
        ("register", "rigidly align all scans to a template"),
        ("prep-pairs", "split subjects and write pair lists and the standardizer"),
        ("baselines", "fit the SVD and VAE+LME baselines"),
        ("evaluate", "per-pair MSE of every method on held-out pairs"),
        ("report", "summarise evaluation and flow outputs as markdown"),
        ("schema", "print the configuration JSON schema"),
    ]:
        sub.add_parser(name, parents=[common], help=help_)

    p = sub.add_parser("train", parents=[common], help="train the CVAE")
    p.add_argument("--resume", action="store_true", help="continue from train/last_state.pt")
    p.add_argument("--stop-after-epoch", type=int)
    _add_train_flags(p)

    def model_inputs(p, need_target=False):
        p.add_argument("--checkpoint", help="default: <run-dir>/train/best.npz")
        p.add_argument("--base", required=True, help="base scan")
        if need_target:
            p.add_argument("--target", required=True, help="follow-up scan of the same subject")
        p.add_argument("--age", type=float, required=True, help="age at the base scan (years)")

    p = sub.add_parser("predict", parents=[common], help="predict one future scan")
    model_inputs(p)
    p.add_argument("--status", type=float, required=True)
    p.add_argument("--delta-t", type=float, required=True)
    p.add_argument("--latent-mode", choices=["sampled", "zero"], default="sampled")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("trajectory", parents=[common], help="predict at several horizons with one latent draw")
    model_inputs(p)
    p.add_argument("--status", type=float, required=True)
    p.add_argument("--horizons", type=parse_horizons, default=parse_horizons("1..10"))
    p.add_argument("--latent-mode", choices=["sampled", "zero"], default="sampled")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("classify", parents=[common], help="posterior of status hypotheses for a scan pair")
    model_inputs(p, need_target=True)
    p.add_argument("--delta-t", type=float, required=True)
    p.add_argument("--hypotheses", default="0,5", help="comma-separated status codes, null first")
    p.add_argument("--all-statuses", action="store_true",
                   help="normalise over all six statuses (extension)")
    p.add_argument("--out", help="JSON output (default stdout)")

    p = sub.add_parser("flowviz", parents=[common], help="trajectory flow divergence figures")
    p.add_argument("--subject")
    return parser


def _run(args, cfg, layout: "pipeline.RunLayout") -> None:
    cmd = args.command
    if cmd == "phantom-gen":
        pipeline.phantom_gen(cfg, layout)
    elif cmd == "register":
        pipeline.register(cfg, layout)
    elif cmd == "prep-pairs":
        pipeline.prep_pairs(cfg, layout)
    elif cmd == "train":
        pipeline.train_stage(cfg, layout, resume=args.resume, stop_after_epoch=args.stop_after_epoch)
    elif cmd == "baselines":
        pipeline.baselines_stage(cfg, layout)
    elif cmd == "evaluate":
        pipeline.evaluate_stage(cfg, layout)
    elif cmd == "flowviz":
        pipeline.flowviz_stage(cfg, layout, subject=args.subject)
    elif cmd == "report":
        print(pipeline.report_stage(cfg, layout))
    elif cmd in ("predict", "trajectory", "classify"):
        ckpt = load_checkpoint(args.checkpoint or layout.checkpoint)
        base = load_volume(args.base)
        if cmd == "predict":
            vol = predict_future(ckpt, base, args.age, args.status, args.delta_t, args.latent_mode, args.seed)
            save_volume(vol, args.out)
        elif cmd == "trajectory":
            req = TrajectoryRequest(base, args.age, args.status, args.horizons, args.latent_mode, args.seed)
            z = latent_vector(ckpt.model.cfg.latent_dim, req.latent_mode, req.seed)
            print(save_trajectory(trajectory(ckpt, req), req, z, args.out_dir))
        else:
            hyps = tuple(range(6)) if args.all_statuses else tuple(int(h) for h in args.hypotheses.split(","))
            res = status_posterior(ckpt, base, load_volume(args.target), args.age, args.delta_t, hyps)
            text = json.dumps(res.to_dict(), indent=2) + "\n"
            if args.out:
                Path(args.out).write_text(text)
            else:
                sys.stdout.write(text)


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (TrainingDiverged, RegistrationError, PredictionError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (DatasetError, VolumeFormatError, pipeline.RunLockedError, OSError, ValueError, KeyError)):
        return EXIT_DATA
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "schema":
            from .config import SCHEMA
            sys.stdout.write(json.dumps(SCHEMA, indent=2) + "\n")
            return EXIT_OK
        cfg = load_config(args)
        layout = pipeline.RunLayout(Path(cfg.paths.run_dir))
        with pipeline.RunLock(layout.root):
            echo_config(cfg, layout.root)
            layout.logs.mkdir(parents=True, exist_ok=True)
            handler = logging.FileHandler(layout.logs / f"{args.command}.log")
            handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
            logging.getLogger().addHandler(handler)
            try:
                _run(args, cfg, layout)
            finally:
                logging.getLogger().removeHandler(handler)
                handler.close()
    except Exception as exc:  # noqa: BLE001 - mapped to an exit status
        code = _exit_code(exc)
        if code == 1:
            raise
        log.error("%s failed: %s", args.command, exc)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
