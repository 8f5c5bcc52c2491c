"""Presets, strict JSON experiment configuration and seeded random substreams."""
from __future__ import annotations

import json
import re
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, KalmanHJError, UnknownPresetError
from .kalman_geometry import DriftBundle, build_frame, load_matrix
from .scaling import conjugate_exponent

SCENARIOS = ("decompose", "flow-identity", "group-algebra", "gramian", "cost-scaling",
             "curved", "hopf-lax", "oscillation", "holder")


def preset_frame(name):
    """``kolmogorov2`` or ``chain-N`` (single-input integrator chain of length N)."""
    if name == "kolmogorov2":
        A = np.array([[0.0, 0.0], [1.0, 0.0]])
        P0 = np.diag([1.0, 0.0])
    else:
        m = re.fullmatch(r"chain-(\d+)", str(name))
        if not m or int(m.group(1)) < 1:
            raise UnknownPresetError(f"unknown preset {name!r}; known: kolmogorov2, chain-N")
        N = int(m.group(1))
        A = np.eye(N, k=-1)
        P0 = np.zeros((N, N))
        P0[0, 0] = 1.0
    return DriftBundle(A=A, P0_input=P0, frame=build_frame(A, P0))


def substream(seed, label):
    """Independent generator for ``label`` derived from the master seed."""
    return np.random.default_rng([int(seed), zlib.crc32(label.encode())])


@dataclass(frozen=True)
class GridConfig:
    shape: tuple = (45, 121)
    nt: int = 240
    half_widths: tuple = (1.1, 1.5)
    b_max: float = 4.0


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description.

    ``frame`` is a preset name or ``{"A": ..., "P0": ...}`` where each matrix
    is inline JSON or a CSV/JSON path.
    """

    frame: object = "kolmogorov2"
    q: float = 2.0
    p: float = 10.0
    lam: float = 1.0
    Lam: float = 1.0
    eps: float = 0.0
    h: float = 0.0
    delta: float = 0.1
    grid: GridConfig = field(default_factory=GridConfig)
    scenarios: tuple = ()
    out: str = "results"
    seed: int = 0

    def __post_init__(self):
        try:
            conjugate_exponent(self.q)
        except KalmanHJError as exc:
            raise ConfigError(str(exc)) from None
        if not 0 < self.lam <= self.Lam:
            raise ConfigError(f"need 0 < lam <= Lam, got lam={self.lam}, Lam={self.Lam}")
        if self.eps < 0 or self.h < 0:
            raise ConfigError("eps and h must be non-negative")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        bad = [s for s in self.scenarios if s not in SCENARIOS]
        if bad:
            raise ConfigError(f"unknown scenarios {bad}; known: {list(SCENARIOS)}")
        fr = self.bundle().frame
        threshold = fr.N / self.q + 1 + fr.homogeneous_dimension
        if not self.p > threshold:
            raise ConfigError(f"p = {self.p} violates p > N/q + 1 + sum j n_j = {threshold:g}")

    def bundle(self):
        if isinstance(self.frame, str):
            return preset_frame(self.frame)
        try:
            A = load_matrix(self.frame["A"])
            P0 = load_matrix(self.frame["P0"])
            return DriftBundle(A=A, P0_input=P0, frame=build_frame(A, P0))
        except (KeyError, TypeError, OSError, ValueError) as exc:
            raise ConfigError(f"cannot load frame: {exc}") from None

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        data = dict(data)
        if "grid" in data:
            g = data["grid"]
            gknown = {f.name for f in fields(GridConfig)}
            if not isinstance(g, dict) or set(g) - gknown:
                raise ConfigError(f"grid accepts keys {sorted(gknown)}")
            g = dict(g)
            for k in ("shape", "half_widths"):
                if k in g:
                    g[k] = tuple(g[k])
            data["grid"] = GridConfig(**g)
        if "scenarios" in data:
            data["scenarios"] = tuple(data["scenarios"])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self):
        d = asdict(self)
        d["grid"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["grid"].items()}
        d["scenarios"] = list(self.scenarios)
        return d
