"""Run configuration: a flat text file of dotted ``section.key = value`` lines.

Every key has a typed default; unknown keys are rejected. ``resolve`` turns the
merged table into the library's config objects, and ``as_dict`` gives the
fully materialised table for run metadata.

Example::

    # fusefl on synthetic data
    run.name = sem-fusefl
    fed.algorithm = fusefl
    fed.num_clients = 5
    model.num_blocks = 2
    sem.alpha = 0.5
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .data import BackdoorConfig, SemConfig
from .errors import ConfigError
from .federation import FedConfig
from .model import ScalingPolicy, conv_template, mlp_template
from .probes import ProbeConfig

SEED_ENV = "FUSEFL_SEED"


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _optional(conv: Callable) -> Callable:
    return lambda v: None if v.strip().lower() in ("", "none", "null") else conv(v)


def _tuple(conv: Callable) -> Callable:
    return lambda v: tuple(conv(p) for p in v.replace(" ", "").split(",") if p)


# key -> (default, parser); defaults mirror the library dataclasses
SCHEMA: dict[str, tuple[Any, Callable]] = {
    "run.name": ("run", str),
    "run.output_dir": ("runs", str),
    "run.seed": (0, int),
    "data.source": ("sem", str),  # sem | idx
    "data.train_images": (None, _optional(str)),
    "data.train_labels": (None, _optional(str)),
    "data.test_images": (None, _optional(str)),
    "data.test_labels": (None, _optional(str)),
    "data.partition_dir": (None, _optional(str)),  # output of `fusefl partition`
    "data.alpha": (0.5, float),
    "data.min_per_client": (256, int),
    "sem.num_classes": (10, int),
    "sem.inv_dim": (16, int),
    "sem.spu_dim": (16, int),
    "sem.spurious_strength": (0.9, float),
    "sem.noise_std": (1.0, float),
    "sem.samples_per_client": (300, int),
    "sem.alpha": (None, _optional(float)),
    "sem.test_size": (2000, int),
    "sem.inv_scale": (1.0, float),
    "sem.spu_scale": (1.0, float),
    "sem.min_per_client": (20, int),
    "sem.image_side": (None, _optional(int)),
    "model.kind": ("mlp", str),  # mlp | conv
    "model.width": (64, int),
    "model.depth": (4, int),
    "model.num_blocks": (2, int),
    "fed.algorithm": ("fusefl", str),
    "fed.num_clients": (5, int),
    "fed.epochs": (40, int),
    "fed.rounds": (1, int),
    "fed.learning_rate": (0.01, float),
    "fed.momentum": (0.9, float),
    "fed.batch_size": (128, int),
    "fed.adaptor_kind": ("linear_mix", str),
    "fed.client_widths": (None, _optional(_tuple(int))),
    "fed.calibrate": ("auto", str),
    "fed.calib_samples": (100, int),
    "fed.calib_epochs": (10, int),
    "fed.calib_lr": (None, _optional(float)),
    "fed.count_downlink": (False, _bool),
    "fed.shared_init": (True, _bool),
    "fed.mix_init": ("average", str),
    "scaling.mode": ("sqrt_m", str),
    "scaling.explicit_width": (None, _optional(int)),
    "backdoor.enabled": (False, _bool),
    "backdoor.target_clients": ((0,), _tuple(int)),
    "backdoor.patch_side": (10, int),
    "backdoor.intensity_range": ((0.5, 1.0), _tuple(float)),
    "probe.probe_epochs": (10, int),
    "probe.learning_rate": (0.05, float),
    "probe.momentum": (0.9, float),
    "probe.batch_size": (128, int),
    "probe.decoder": ("mirror", str),
    "grid.learning_rates": (None, _optional(_tuple(float))),
}


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines (``#`` starts a comment) into typed values."""
    out: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = parse_value(key, value, f"{source}:{n}")
    return out


def parse_value(key: str, value: str, where: str = "") -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"{where + ': ' if where else ''}unknown config key {key!r}")
    try:
        return SCHEMA[key][1](value)
    except ValueError as exc:
        raise ConfigError(f"{where + ': ' if where else ''}bad value for {key}: {exc}") from None


def load(path=None, overrides: list[str] | None = None, env=None) -> dict[str, Any]:
    """Defaults, then the file, then ``key=value`` overrides, then the seed env var."""
    env = os.environ if env is None else env
    table = {k: d for k, (d, _) in SCHEMA.items()}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        table.update(parse_text(text, str(path)))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (p.strip() for p in item.split("=", 1))
        table[key] = parse_value(key, value, "override")
    if env.get(SEED_ENV):
        table["run.seed"] = parse_value("run.seed", env[SEED_ENV], SEED_ENV)
    return table


def as_dict(table: dict[str, Any]) -> dict[str, Any]:
    """JSON-friendly copy with every key present (tuples become lists)."""
    return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(table.items())}


@dataclass(frozen=True)
class RunConfig:
    table: dict
    fed: FedConfig
    sem: SemConfig | None
    probe: ProbeConfig

    @property
    def name(self) -> str:
        return self.table["run.name"]

    @property
    def seed(self) -> int:
        return self.table["run.seed"]

    @property
    def output_dir(self) -> Path:
        return Path(self.table["run.output_dir"]) / self.name

    @property
    def learning_rates(self):
        return self.table["grid.learning_rates"]


def section(table: dict, prefix: str) -> dict[str, Any]:
    return {k[len(prefix) + 1 :]: v for k, v in table.items() if k.startswith(prefix + ".")}


def build_template(table: dict, input_shape, num_classes: int):
    kind = table["model.kind"]
    if kind == "mlp":
        return mlp_template(input_shape, num_classes, table["model.width"], table["model.depth"],
                            table["model.num_blocks"])
    if kind == "conv":
        if len(input_shape) != 3:
            raise ConfigError("model.kind = conv needs image inputs")
        return conv_template(tuple(input_shape), num_classes, table["model.width"], table["model.num_blocks"])
    raise ConfigError(f"model.kind must be mlp or conv, got {kind!r}")


def resolve(table: dict, input_shape=None, num_classes: int | None = None) -> RunConfig:
    """Build config objects. The model template needs the data's input shape and class count."""
    if table["data.source"] not in ("sem", "idx"):
        raise ConfigError(f"data.source must be sem or idx, got {table['data.source']!r}")
    if not table["data.alpha"] > 0:
        raise ConfigError("alpha must be positive")
    m = table["fed.num_clients"]
    sem = None
    if table["data.source"] == "sem":
        sem = SemConfig(num_clients=m, **section(table, "sem"))
        input_shape, num_classes = sem.input_shape, sem.num_classes
    template = None if input_shape is None else build_template(table, input_shape, num_classes)
    backdoor = None
    if table["backdoor.enabled"]:
        rng = table["backdoor.intensity_range"]
        if len(rng) != 2:
            raise ConfigError("backdoor.intensity_range needs two values lo, hi")
        backdoor = BackdoorConfig(table["backdoor.target_clients"], table["backdoor.patch_side"], rng)
        backdoor.validate(m)
    fed_keys = section(table, "fed")
    fed = FedConfig(
        scaling=ScalingPolicy(table["scaling.mode"], table["scaling.explicit_width"]),
        seed=table["run.seed"], template=template, backdoor=backdoor, **fed_keys,
    )
    probe = ProbeConfig(seed=table["run.seed"], **section(table, "probe"))
    return RunConfig(dict(table), fed, sem, probe)
