"""Experiment configuration: a flat, sectioned INI file that fully determines
a run. Unknown sections or keys are rejected with the offending line number,
as are unparseable values, so a config either loads fully validated or not
at all.

The diffusion schedule lives here as (steps, beta_min, beta_max) — raw sigma
arrays are never serialized. All randomness in a run flows from the single
[experiment] seed, fanned out as derive_seed(seed, purpose_tag).
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field

from .envs import DEFAULT_NOISE_LEVELS, EnvSpec, make_env_spec
from .errors import ConfigError
from .expertise import FilterConfig
from .trainer import TrainConfig


@dataclass
class DataConfig:
    noise_levels: tuple[float, ...] = DEFAULT_NOISE_LEVELS
    per_level: int = 10
    demo_file: str = "demos.jsonl"

    def validate(self) -> None:
        if self.per_level < 1:
            raise ConfigError(
                f"data.per_level must be >= 1, got {self.per_level} "
                "(an empty store cannot be generated)")
        if any(lv < 0 for lv in self.noise_levels):
            raise ConfigError(
                f"data.noise_levels must be >= 0: {self.noise_levels}")


@dataclass
class ExperimentConfig:
    run_id: str = "run"
    output_dir: str = "runs/run"
    seed: int = 0
    env: EnvSpec = field(default_factory=lambda: make_env_spec("pointmass2d"))
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_float_list(raw: str) -> tuple[float, ...]:
    return tuple(float(x) for x in raw.split(",") if x.strip())


# section -> key -> parser
_SCHEMA = {
    "experiment": {"run_id": str, "output_dir": str, "seed": int},
    "env": {"name": str, "horizon": int},
    "data": {"noise_levels": _parse_float_list, "per_level": int,
             "demo_file": str},
    "schedule": {"steps": int, "beta_min": float, "beta_max": float},
    "train": {"batch_size": int, "learning_rate": float,
              "denoiser_optimize_every": int, "policy_optimize_every": int,
              "update_ema_every": int, "ema_decay": float,
              "ema_warmup_steps": int, "transition_budget": int,
              "eval_every": int, "eval_episodes": int,
              "loss_norm": str, "filtering": _parse_bool},
    "filter": {"filter_every": int, "min_demos": int, "step_threshold": int,
               "max_demo_len": int},
}


def _line_of(lines: list[str], pattern: str) -> int | None:
    rx = re.compile(pattern)
    for i, line in enumerate(lines, start=1):
        if rx.match(line):
            return i
    return None


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    lines = text.splitlines()
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    values: dict[str, dict] = {sec: {} for sec in _SCHEMA}
    for section in parser.sections():
        if section not in _SCHEMA:
            line = _line_of(lines, rf"\s*\[{re.escape(section)}\]")
            raise ConfigError(
                f"{path}:{line}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                line = _line_of(lines, rf"\s*{re.escape(key)}\s*[=:]")
                raise ConfigError(
                    f"{path}:{line}: unknown key {key!r} in [{section}]")
            try:
                values[section][key] = _SCHEMA[section][key](raw)
            except (ValueError, TypeError) as exc:
                line = _line_of(lines, rf"\s*{re.escape(key)}\s*[=:]")
                raise ConfigError(
                    f"{path}:{line}: bad value for {section}.{key}: {exc}"
                ) from exc

    exp = values["experiment"]
    env_kw = values["env"]
    try:
        env = make_env_spec(env_kw.get("name", "pointmass2d"),
                            horizon=env_kw.get("horizon"))
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    data = DataConfig(**values["data"])
    data.validate()

    fil = FilterConfig(**values["filter"])
    tr_kw = dict(values["train"])
    if "learning_rate" in tr_kw:
        tr_kw["lr"] = tr_kw.pop("learning_rate")
    sched_kw = values["schedule"]
    train = TrainConfig(
        filter=fil,
        diffusion_steps=sched_kw.get("steps", 10),
        beta_min=sched_kw.get("beta_min", 0.05),
        beta_max=sched_kw.get("beta_max", 0.6),
        seed=exp.get("seed", 0),
        **tr_kw)
    try:
        train.validate()
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    run_id = exp.get("run_id", "run")
    return ExperimentConfig(
        run_id=run_id,
        output_dir=exp.get("output_dir", f"runs/{run_id}"),
        seed=exp.get("seed", 0),
        env=env, data=data, train=train)


DEFAULT_CONFIG = """\
[experiment]
run_id = pointmass-default
output_dir = runs/pointmass-default
seed = 7

[env]
name = pointmass2d
horizon = 100

[data]
noise_levels = 0.0, 0.25, 0.5, 0.75, 1.0
per_level = 10
demo_file = demos.jsonl

[schedule]
steps = 10
beta_min = 0.05
beta_max = 0.6

[train]
batch_size = 128
learning_rate = 1e-3
denoiser_optimize_every = 10
policy_optimize_every = 1
update_ema_every = 10
ema_decay = 0.95
ema_warmup_steps = 200
transition_budget = 500000
eval_every = 2500
eval_episodes = 10
loss_norm = l1
filtering = true

[filter]
filter_every = 2500
min_demos = 10
step_threshold = 1
max_demo_len = 100
"""
