"""
Run configuration: flat key=value files (dotenv syntax) plus CLI overrides.

Example file:

    domain=unit-square
    gamma=1.0,1.0
    zeta=1.0
    base_n=6
    levels=4
    mode=both
"""

import hashlib
import json
import os
import sys
from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Dict, Optional, Tuple

from dotenv import dotenv_values

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import (
    DEFAULT_DOMAIN, DEFAULT_GAMMA, DEFAULT_ZETA, DEFAULT_BASE_N, DEFAULT_LEVELS,
    DORFLER_THETA, ADAPTIVE_ITERATIONS, MG_C, MLC_MIXING, MLC_SCF_FACTOR,
    SCF_LAMBDA_TOL, SCF_U_TOL, SCF_MAX_ITERS, SCF_MIXING,
)
from modules.assembly import ProblemSpec
from modules.mesh import UNIT_SQUARE, L_SHAPE
from modules.nonlinear_eigen import ScfConfig
from utils.errors import ConfigError


class RunMode(Enum):
    MLC = "mlc"
    DIRECT = "direct"
    BOTH = "both"
    ADAPTIVE = "adaptive"


class ReferenceMode(Enum):
    EXTRA_LEVEL = "extra-level"
    FILE = "file"


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; field names double as config-file keys."""
    domain: str = DEFAULT_DOMAIN
    gamma: Tuple[float, float] = DEFAULT_GAMMA
    zeta: float = DEFAULT_ZETA
    base_n: int = DEFAULT_BASE_N
    levels: int = DEFAULT_LEVELS
    coarse_level: int = 0
    mode: RunMode = RunMode.BOTH
    mg_c: float = MG_C
    scf_lambda_tol: float = SCF_LAMBDA_TOL
    scf_u_tol: float = SCF_U_TOL
    scf_max_iters: int = SCF_MAX_ITERS
    scf_mixing: float = SCF_MIXING
    mlc_scf_factor: float = MLC_SCF_FACTOR
    mlc_mixing: float = MLC_MIXING
    dorfler_theta: float = DORFLER_THETA
    adaptive_iterations: int = ADAPTIVE_ITERATIONS
    reference_mode: ReferenceMode = ReferenceMode.EXTRA_LEVEL
    reference_file: Optional[str] = None
    reference_richardson: bool = True
    out_dir: str = "results"
    export_meshes: bool = True

    def __post_init__(self):
        validate(self)

    @property
    def spec(self) -> ProblemSpec:
        return ProblemSpec(domain=self.domain, gamma=self.gamma, zeta=self.zeta)

    @property
    def scf(self) -> ScfConfig:
        return ScfConfig(lambda_tol=self.scf_lambda_tol, u_tol=self.scf_u_tol,
                         max_iters=self.scf_max_iters, mixing=self.scf_mixing)

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **{k: _parse(k, v) if isinstance(v, str) else v
                                for k, v in kwargs.items() if v is not None})

    def to_dict(self) -> Dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    def problem_hash(self) -> str:
        """Hash of every field that changes the reference solution."""
        keys = ("domain", "gamma", "zeta", "base_n", "levels", "coarse_level",
                "scf_lambda_tol", "scf_u_tol", "scf_max_iters", "scf_mixing",
                "reference_richardson")
        payload = {k: v for k, v in self.to_dict().items() if k in keys}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def validate(cfg: RunConfig):
    """Raise ConfigError naming the first invalid field."""
    if cfg.domain not in (UNIT_SQUARE, L_SHAPE):
        raise ConfigError("domain", f"expected '{UNIT_SQUARE}' or '{L_SHAPE}', got '{cfg.domain}'")
    if len(cfg.gamma) != 2 or any(g <= 0.0 for g in cfg.gamma):
        raise ConfigError("gamma", f"two positive coefficients required, got {cfg.gamma}")
    if cfg.zeta < 0.0:
        raise ConfigError("zeta", f"must be >= 0, got {cfg.zeta}")
    if cfg.base_n < 1:
        raise ConfigError("base_n", f"must be >= 1, got {cfg.base_n}")
    if cfg.levels < 1:
        raise ConfigError("levels", f"must be >= 1, got {cfg.levels}")
    if cfg.coarse_level not in (0, 1):
        raise ConfigError("coarse_level", f"must be 0 or 1, got {cfg.coarse_level}")
    if cfg.coarse_level == 1 and cfg.base_n % 2:
        raise ConfigError("coarse_level", f"an extra coarse mesh needs an even base_n, got {cfg.base_n}")
    if cfg.domain == UNIT_SQUARE and cfg.base_n // (1 + cfg.coarse_level) < 2:
        raise ConfigError("base_n", "the coarsest unit-square mesh would have no interior dofs")
    for name in ("mg_c", "scf_lambda_tol", "scf_u_tol", "mlc_scf_factor"):
        if not getattr(cfg, name) > 0.0:
            raise ConfigError(name, f"must be positive, got {getattr(cfg, name)}")
    if cfg.scf_max_iters < 1:
        raise ConfigError("scf_max_iters", f"must be >= 1, got {cfg.scf_max_iters}")
    for name in ("scf_mixing", "mlc_mixing"):
        if not 0.0 < getattr(cfg, name) <= 1.0:
            raise ConfigError(name, f"must lie in (0, 1], got {getattr(cfg, name)}")
    if not 0.0 < cfg.dorfler_theta < 1.0:
        raise ConfigError("dorfler_theta", f"must lie in (0, 1), got {cfg.dorfler_theta}")
    if cfg.adaptive_iterations < 1:
        raise ConfigError("adaptive_iterations", f"must be >= 1, got {cfg.adaptive_iterations}")
    if cfg.reference_mode is ReferenceMode.FILE and not cfg.reference_file:
        raise ConfigError("reference_file", "required when reference_mode=file")


_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}
_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse(name: str, raw: Optional[str]):
    """Convert one raw string value to the type of field `name`."""
    if name not in _FIELD_TYPES:
        raise ConfigError(name, "unknown configuration key")
    if raw is None:
        raise ConfigError(name, "missing value")
    raw = raw.strip()
    default = _FIELD_TYPES[name].default
    try:
        if name == "gamma":
            parts = [float(p) for p in raw.split(",") if p.strip()]
            return tuple(parts)
        if name == "mode":
            return RunMode(raw.lower())
        if name == "reference_mode":
            return ReferenceMode(raw.lower())
        if name == "reference_file":
            return raw or None
        if isinstance(default, bool):
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: '{raw}'")
            return _BOOL_WORDS[raw.lower()]
        if isinstance(default, int):
            value = float(raw)
            if value != int(value):
                raise ValueError(f"not an integer: '{raw}'")
            return int(value)
        if isinstance(default, float):
            return float(raw)
        return raw
    except (ValueError, OverflowError) as e:
        raise ConfigError(name, f"invalid value '{raw}' ({e})")


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Optional[str]]] = None) -> RunConfig:
    """
    Read a key=value config file and apply CLI overrides on top.

    Args:
        path: Config file (dotenv syntax); defaults only when omitted
        overrides: Raw string values keyed by field name; None entries are skipped

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: unreadable file, unknown key or invalid value
    """
    values = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError("config", f"file not found: {path}")
        for key, raw in dotenv_values(path).items():
            key = key.strip().lower().replace("-", "_")
            values[key] = _parse(key, raw)
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        key = key.strip().lower().replace("-", "_")
        values[key] = _parse(key, str(raw))
    return RunConfig(**values)
