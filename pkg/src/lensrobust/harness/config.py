"""Flat ``key = value`` experiment configuration.

Lists are comma separated. ``#`` starts a comment. Attack settings can be
overridden per variant with ``<variant>.<field> = value``. Unknown or
repeated keys are errors so typos never fall back to defaults silently.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from ..attacks import ATTRIBUTIONS, VARIANTS, AttackConfig
from ..errors import ConfigError, DomainError
from ..metrics import CORRELATION_METRICS, DISTANCE_METRICS, SIMILARITY_METRICS

REGIMES = ("natural", "pgd")
ALL_METRICS = SIMILARITY_METRICS + CORRELATION_METRICS + DISTANCE_METRICS
PRESETS = ("fig2_eps_sweep", "fig4_w_sweep", "fig8_training_compare", "appD_k_sweep")

# attack fields that may be set globally or per variant
ATTACK_FIELDS = ("steps", "step_size", "t", "k_eval", "w_eval", "restarts", "attribution", "ig_steps", "ig_gradient")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "builtin"
    out: str = "runs/default"
    seed: int = 0
    sample_count: int = 200
    regimes: tuple[str, ...] = REGIMES
    natural_checkpoint: Optional[str] = None
    pgd_checkpoint: Optional[str] = None
    # model and training
    hidden: tuple[int, ...] = (64, 32)
    activation: str = "softplus"
    beta: float = 10.0
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 0.1
    pgd_epsilon: float = 0.1
    pgd_steps: int = 40
    pgd_step_size: float = 0.01
    # attacks
    attacks: tuple[str, ...] = ("random_sign", "top_k")
    epsilons: tuple[float, ...] = (0.3,)
    steps: int = 100
    step_size: float = 0.01
    t: int = 10
    k_eval: Optional[int] = None
    w_eval: int = 1
    restarts: int = 3
    attribution: str = "ig"
    ig_steps: int = 16
    ig_gradient: str = "exact"
    overrides: dict = field(default_factory=dict)
    # evaluation
    metrics: tuple[str, ...] = ("topk", "lens_prec", "lens_recall")
    k_values: tuple[int, ...] = (10,)
    w_values: tuple[int, ...] = (1,)
    w_div: Optional[int] = None  # None: same as the metric window w
    sweep_epsilon: Optional[float] = None
    sweep_regime: str = "natural"

    def __post_init__(self):
        for name in ("regimes", "attacks", "epsilons", "metrics", "k_values", "w_values", "hidden"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must not be empty")
        _check_members("regimes", self.regimes, REGIMES)
        _check_members("attacks", self.attacks, VARIANTS)
        _check_members("metrics", self.metrics, ALL_METRICS)
        if self.sweep_regime not in REGIMES:
            raise ConfigError(f"sweep_regime must be one of {', '.join(REGIMES)}")
        if self.attribution not in ATTRIBUTIONS:
            raise ConfigError(f"attribution must be one of {', '.join(ATTRIBUTIONS)}")
        if self.activation not in ("relu", "softplus"):
            raise ConfigError("activation must be relu or softplus")
        if self.sample_count < 1:
            raise ConfigError("sample_count must be positive")
        if min(self.k_values) < 1 or min(self.w_values) < 0 or min(self.epsilons) < 0:
            raise ConfigError("k values must be positive, w values and epsilons nonnegative")
        if self.w_div is not None and self.w_div < 0:
            raise ConfigError("w_div must be nonnegative")
        if min(self.hidden) < 1 or self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigError("invalid training settings")
        if not 0 < self.pgd_step_size <= self.pgd_epsilon or self.pgd_steps < 1:
            raise ConfigError("PGD training needs 0 < pgd_step_size <= pgd_epsilon and pgd_steps >= 1")
        for variant in self.attacks:
            for eps in self.epsilons:
                self.attack_config(variant, eps, seed=0)

    # --- derived settings ---------------------------------------------------

    def checkpoint(self, regime: str) -> Path:
        given = self.natural_checkpoint if regime == "natural" else self.pgd_checkpoint
        return Path(given) if given else Path(self.out) / "checkpoints" / f"{regime}.toynet"

    def attack_config(self, variant: str, epsilon: float, seed: int) -> AttackConfig:
        values = {name: getattr(self, name) for name in ATTACK_FIELDS}
        if values["k_eval"] is None:
            values["k_eval"] = self.k_values[0]
        values.update(self.overrides.get(variant, {}))
        # keep every signed step inside the budget
        if epsilon > 0:
            values["step_size"] = min(values["step_size"], epsilon)
        try:
            return AttackConfig(variant=variant, epsilon=epsilon, seed=seed, **values)
        except DomainError as exc:
            raise ConfigError(f"attack {variant} at epsilon {epsilon}: {exc}") from exc

    def effective_sweep_epsilon(self) -> float:
        return max(self.epsilons) if self.sweep_epsilon is None else self.sweep_epsilon

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _check_members(name, values, allowed):
    bad = [v for v in values if v not in allowed]
    if bad:
        raise ConfigError(f"{name}: unknown entries {', '.join(bad)} (allowed: {', '.join(allowed)})")
    if len(set(values)) != len(values):
        raise ConfigError(f"{name}: duplicate entries")


# --- parsing ----------------------------------------------------------------------


def _list(conv):
    def parse(text):
        items = [s.strip() for s in text.split(",")]
        if any(not s for s in items):
            raise ValueError("empty list entry")
        return tuple(conv(s) for s in items)

    return parse


def _optional(conv):
    return lambda text: None if text.lower() in ("none", "") else conv(text)


def _w_div(text):
    return None if text == "w" else int(text)


PARSERS = {
    "dataset": str,
    "out": str,
    "seed": int,
    "sample_count": int,
    "regimes": _list(str),
    "natural_checkpoint": _optional(str),
    "pgd_checkpoint": _optional(str),
    "hidden": _list(int),
    "activation": str,
    "beta": float,
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "pgd_epsilon": float,
    "pgd_steps": int,
    "pgd_step_size": float,
    "attacks": _list(str),
    "epsilons": _list(float),
    "steps": int,
    "step_size": float,
    "t": int,
    "k_eval": _optional(int),
    "w_eval": int,
    "restarts": int,
    "attribution": str,
    "ig_steps": int,
    "ig_gradient": str,
    "metrics": _list(str),
    "k_values": _list(int),
    "w_values": _list(int),
    "w_div": _w_div,
    "sweep_epsilon": _optional(float),
    "sweep_regime": str,
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse to a dict of typed values (including an ``overrides`` entry)."""
    values: dict = {}
    overrides: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        variant, dot, fname = key.partition(".")
        if dot:
            if variant not in VARIANTS or fname not in ATTACK_FIELDS:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            target, conv = overrides.setdefault(variant, {}), PARSERS[fname]
            name = fname
        else:
            if key not in PARSERS:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            target, conv, name = values, PARSERS[key], key
        if name in target:
            raise ConfigError(f"{source}:{lineno}: {key!r} set twice")
        try:
            target[name] = conv(value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value {value!r} for {key!r}") from None
    if overrides:
        values["overrides"] = overrides
    return values


def config_from_text(text: str, source: str = "<config>", base: Optional[dict] = None) -> ExperimentConfig:
    values = dict(base or {})
    values.update(parse_config_text(text, source))
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_text(text, str(path))


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (available: {', '.join(PRESETS)})")
    return (resources.files("lensrobust.harness") / "presets" / f"{name}.cfg").read_text(encoding="utf-8")


def load_preset(name: str) -> ExperimentConfig:
    return config_from_text(preset_text(name), f"preset:{name}")
