"""Flat ``key = value`` scenario files.

Blank lines and ``#`` comments are ignored. Numbers may be written as
decimals or as simple fractions such as ``1/6.5``. Unknown keys are an
error. ``T`` may be given instead of ``N``; then ``N = T / delta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from seir_mpc.errors import ConfigError, SeirMpcError
from seir_mpc.model import ModelParams
from seir_mpc.mpc import MpcConfig
from seir_mpc.ocp import SolverOptions

_PARAM_KEYS = ("beta_min", "beta_nom", "gamma_nom", "gamma_max", "eta", "i_max", "epsilon")


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything a CLI run needs, with the reference scenario as default."""

    beta_min: float = 0.22
    beta_nom: float = 0.44
    gamma_nom: float = 1.0 / 6.5
    gamma_max: float = 0.5
    eta: float = 1.0 / 4.6
    i_max: float = 0.05
    epsilon: float = 1e-6
    lam: float = 0.5
    x0: tuple[float, float, float] = (0.5, 0.18, 0.01)
    delta: float = 1.0
    N: int = 20
    h: float = 0.25
    termination_tol: float = 1e-8
    max_sim_days: float = 3000.0
    seed: int = 0
    out: str = "out"

    @property
    def T(self) -> float:
        return self.N * self.delta

    def params(self) -> ModelParams:
        kw = {k: getattr(self, k) for k in _PARAM_KEYS}
        return ModelParams(lam=self.lam, **kw)

    def mpc_config(self, solver: SolverOptions | None = None) -> MpcConfig:
        return MpcConfig(
            p=self.params(),
            delta=self.delta,
            N=self.N,
            h=self.h,
            termination_tol=self.termination_tol,
            max_sim_days=self.max_sim_days,
            solver=solver or SolverOptions(),
        )

    def validate(self) -> ScenarioConfig:
        """Build the derived objects once so bad values surface as config errors."""
        try:
            self.mpc_config()
        except SeirMpcError as exc:
            raise ConfigError(str(exc)) from exc
        if len(self.x0) != 3:
            raise ConfigError("x0 needs three components")
        return self

    def to_text(self) -> str:
        """Effective configuration in the same format :func:`parse_config` reads."""
        lines = ["# effective configuration"]
        for f in fields(self):
            key = "lambda" if f.name == "lam" else f.name
            lines.append(f"{key} = {_emit(getattr(self, f.name))}")
        lines.append(f"# T = {_emit(self.T)}")
        return "\n".join(lines) + "\n"


def _emit(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(float(c)) for c in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _number(key: str, text: str) -> float:
    try:
        if "/" in text:
            num, den = text.split("/", 1)
            val = float(num) / float(den)
        else:
            val = float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{key}: cannot parse number {text!r}") from exc
    if not math.isfinite(val):
        raise ConfigError(f"{key}: value must be finite")
    return val


def _integer(key: str, text: str) -> int:
    val = _number(key, text)
    if val != int(val):
        raise ConfigError(f"{key}: expected an integer, got {text!r}")
    return int(val)


def _triple(key: str, text: str) -> tuple[float, float, float]:
    parts = [s.strip() for s in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"{key}: expected three comma-separated numbers")
    return tuple(_number(key, s) for s in parts)


_FLOAT_KEYS = set(_PARAM_KEYS) | {"delta", "h", "termination_tol", "max_sim_days"}


def apply_overrides(base: ScenarioConfig, values: dict[str, str]) -> ScenarioConfig:
    """Apply raw string values (from a file or the command line)."""
    changes: dict = {}
    horizon = None
    for key, text in values.items():
        if key in _FLOAT_KEYS:
            changes[key] = _number(key, text)
        elif key == "lambda":
            changes["lam"] = _number(key, text)
        elif key == "N":
            changes["N"] = _integer(key, text)
        elif key == "T":
            horizon = _number(key, text)
        elif key == "seed":
            changes["seed"] = _integer(key, text)
        elif key == "x0":
            changes["x0"] = _triple(key, text)
        elif key == "out":
            changes["out"] = text
        else:
            raise ConfigError(f"unknown key {key!r}")
    cfg = replace(base, **changes)
    if horizon is not None:
        if "N" in changes:
            raise ConfigError("give either N or T, not both")
        n = horizon / cfg.delta
        if n < 1 or abs(n - round(n)) > 1e-9:
            raise ConfigError(f"T={horizon} is not a positive multiple of delta={cfg.delta}")
        cfg = replace(cfg, N=int(round(n)))
    return cfg.validate()


def parse_config(text: str, base: ScenarioConfig | None = None) -> ScenarioConfig:
    """Parse the flat config format.

    Raises:
        ConfigError: on syntax errors, unknown or duplicate keys, or values
            that do not form a valid scenario.
    """
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key or not val:
            raise ConfigError(f"line {lineno}: empty key or value")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = val
    return apply_overrides(base or ScenarioConfig(), values)


def load_config(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
