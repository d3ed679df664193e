"""Pipeline configuration: a nested YAML document validated against a JSON
schema, with every default resolved and echoed to the run directory."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import jsonschema
import yaml

from .cvae import ModelConfig
from .phantom import PhantomSpec
from .registration import RegistrationConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def derive_seed(global_seed: int, stage: str) -> int:
    """Stable per-stage seed from the global seed and a stage name."""
    digest = hashlib.sha256(f"{int(global_seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


@dataclass
class VaeBaselineConfig:
    latent_dim: int = 10
    channels: tuple = (8, 16, 32, 32)
    epochs: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 4
    seed: int = 0


@dataclass
class EvaluationConfig:
    holdout_per_category: int = 4
    val_per_category: int = 1
    min_delta_t: float = 0.0
    svd_ranks: tuple = (10, 100)
    exclude_single_scan_subjects: bool = False
    latent_mode: str = "zero"
    flow_alpha: float = 1.0
    flow_iters: int = 200
    horizons: tuple = tuple(float(h) for h in range(1, 11))
    flowviz_subject: str | None = None
    split_seed: int = 0


@dataclass
class PathsConfig:
    run_dir: str = "run"
    manifest: str | None = None
    masks_dir: str | None = None
    template: str | None = None


@dataclass
class PipelineConfig:
    seed: int = 0
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(image_size=32, channels=(8, 16, 32, 32)))
    train: TrainConfig = field(default_factory=TrainConfig)
    vae: VaeBaselineConfig = field(default_factory=VaeBaselineConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_INT = {"type": "integer"}
_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_NONNEG_NUM = {"type": "number", "minimum": 0}
_RANGE = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}
_OPT_STR = {"type": ["string", "null"]}


def _obj(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "mritraj pipeline configuration",
    **_obj({
        "seed": _NONNEG_INT,
        "phantom": _obj({
            "grid_size": {"type": "integer", "minimum": 16},
            "cohort_size": _POS_INT,
            "seed": _NONNEG_INT,
            "statuses": {"type": "array", "minItems": 1, "items": {
                "type": "array", "minItems": 2, "maxItems": 2,
                "prefixItems": [{"type": "integer", "minimum": 0, "maximum": 5}, _NONNEG_NUM]}},
            "ventricle_growth_rate": _NONNEG_NUM,
            "hippocampus_shrink_rate": _NONNEG_NUM,
            "rate_spread": _NONNEG_NUM,
            "noise_sigma": _NONNEG_NUM,
            "scans_per_subject": {**_RANGE, "items": _POS_INT},
            "visit_spacing_years": _RANGE,
            "baseline_age_years": _RANGE,
            "roi_margin": _NONNEG_NUM,
            "volume_format": {"enum": ["nii.gz", "nii", "raw"]},
        }),
        "registration": _obj({
            "max_iters": _POS_INT,
            "linear_step": _POS_NUM,
            "translation_step": _POS_NUM,
            "tolerance": _NONNEG_NUM,
            "min_step_factor": _POS_NUM,
            "max_rejections": _POS_INT,
            "interpolation": {"enum": ["trilinear"]},
        }),
        "model": _obj({
            "latent_dim": _POS_INT,
            "encoder_blocks": _POS_INT,
            "channels": {"type": "array", "items": _POS_INT, "minItems": 1},
            "groupnorm_groups": _POS_INT,
            "image_size": _POS_INT,
            "conditioning_dim": {"const": 3},
            "residual": {"type": "boolean"},
            "kl_weight": _NONNEG_NUM,
        }),
        "train": _obj({
            "learning_rate": _POS_NUM,
            "batch_size": _POS_INT,
            "max_epochs": _NONNEG_INT,
            "patience": _POS_INT,
            "seed": _NONNEG_INT,
            "checkpoint_every": _POS_INT,
            "steps_per_epoch": {"type": ["integer", "null"], "minimum": 1},
            "deterministic": {"type": "boolean"},
            "lr_schedule": {"enum": ["constant", "cosine"]},
            "kl_warmup_epochs": _NONNEG_INT,
        }),
        "vae": _obj({
            "latent_dim": _POS_INT,
            "channels": {"type": "array", "items": _POS_INT, "minItems": 1},
            "epochs": _NONNEG_INT,
            "learning_rate": _POS_NUM,
            "batch_size": _POS_INT,
            "seed": _NONNEG_INT,
        }),
        "evaluation": _obj({
            "holdout_per_category": _NONNEG_INT,
            "val_per_category": _NONNEG_INT,
            "min_delta_t": _NONNEG_NUM,
            "svd_ranks": {"type": "array", "items": _POS_INT},
            "exclude_single_scan_subjects": {"type": "boolean"},
            "latent_mode": {"enum": ["zero", "sampled"]},
            "flow_alpha": _POS_NUM,
            "flow_iters": _POS_INT,
            "horizons": {"type": "array", "items": _NUM, "minItems": 1},
            "flowviz_subject": _OPT_STR,
            "split_seed": _NONNEG_INT,
        }),
        "paths": _obj({
            "run_dir": {"type": "string"},
            "manifest": _OPT_STR,
            "masks_dir": _OPT_STR,
            "template": _OPT_STR,
        }),
    }),
}

_SECTIONS = {
    "phantom": PhantomSpec,
    "registration": RegistrationConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "vae": VaeBaselineConfig,
    "evaluation": EvaluationConfig,
    "paths": PathsConfig,
}

# per-stage seeds filled from the global seed when the section omits them
_DERIVED_SEEDS = {"phantom": "phantom", "train": "train", "vae": "vae", "evaluation": "split"}


def write_schema(path) -> None:
    Path(path).write_text(json.dumps(SCHEMA, indent=2) + "\n")


def _field_path(err: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def config_from_dict(raw: dict | None) -> PipelineConfig:
    raw = copy.deepcopy(raw or {})
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        msg = "; ".join(f"{_field_path(e)}: {e.message}" for e in errors)
        raise ConfigError(f"invalid configuration: {msg}")
    seed = int(raw.get("seed", 0))
    kwargs = {"seed": seed}
    for name, cls in _SECTIONS.items():
        section = dict(raw.get(name, {}))
        seed_key = "split_seed" if name == "evaluation" else "seed"
        if name in _DERIVED_SEEDS and seed_key not in section:
            section[seed_key] = derive_seed(seed, _DERIVED_SEEDS[name])
        if name == "model":
            section.setdefault("image_size", raw.get("phantom", {}).get("grid_size", 32))
            if "channels" not in section and "encoder_blocks" not in section:
                section["channels"] = (8, 16, 32, 32)
            elif "channels" not in section:
                section["channels"] = tuple(min(8 * 2**i, 64) for i in range(section["encoder_blocks"]))
        names = {f.name for f in fields(cls)}
        try:
            kwargs[name] = cls(**{k: (tuple(v) if isinstance(v, list) and k != "statuses" else v)
                                  for k, v in section.items() if k in names})
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid configuration: {name}: {exc}") from exc
    return PipelineConfig(**kwargs)


def parse_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    return config_from_dict(raw)


def echo_config(cfg: PipelineConfig, run_dir) -> Path:
    """Write the fully resolved configuration to ``run_dir/config.effective.yaml``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    out = run_dir / "config.effective.yaml"
    out.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return out
