"""Scenario configuration: a JSON document with sections grid, fields, go, carleman, reconstruction, experiment.

Every section is a dataclass; unknown keys are rejected so that typos do not
silently fall back to defaults. Seeds and tolerances live here, not in code
paths that produce outputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .fields import CoefficientPair, Expression, GaugeFunction, VectorField, make_divfree_field
from .grid import SpaceTimeGrid, build_grid

__all__ = [
    "GridConfig",
    "FieldsConfig",
    "GOConfig",
    "CarlemanConfig",
    "ReconstructionConfig",
    "ExperimentConfig",
    "ScenarioConfig",
    "load_config",
    "build_pair",
]

# a div-free field with |m1| <= 1, |m2| <= 2 in its spatial spectrum that vanishes to second order on the box
DEFAULT_STREAM = "0.3*sin(pi*x1)**2*sin(pi*x2)**2*sin(2*pi*x2)*(1 + 0.5*sin(2*pi*t/1.5))"


def _from_dict(cls, data: dict | None):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    extra = sorted(set(data) - known)
    if extra:
        raise ValueError(f"unknown keys in section {cls.__name__}: {extra}")
    return cls(**data)


@dataclass
class GridConfig:
    n: int = 2
    Nx: int = 33
    Nt: int = 64
    T: float = 1.5

    def build(self) -> SpaceTimeGrid:
        return build_grid(self.n, self.Nx, self.Nt, self.T)


def build_pair(entry: dict, n: int, name: str = "") -> CoefficientPair:
    """Pair from ``{"A": [...]} | {"stream": ...}`` plus ``"q"`` (default ``"0"``)."""
    entry = dict(entry)
    extra = sorted(set(entry) - {"A", "stream", "q", "m_bound"})
    if extra:
        raise ValueError(f"unknown keys in pair {name or '?'}: {extra}")
    if ("A" in entry) == ("stream" in entry):
        raise ValueError(f"pair {name or '?'} needs exactly one of 'A' or 'stream'")
    if "stream" in entry:
        A = make_divfree_field(entry["stream"], n)
        divfree = True
    else:
        A = VectorField(entry["A"], n)
        divfree = A.divergence().simplify().is_zero
    return CoefficientPair(A, Expression(entry.get("q", "0"), n), entry.get("m_bound"), divfree, name)


@dataclass
class FieldsConfig:
    pair1: dict = field(default_factory=lambda: {"A": ["0", "0"], "q": "0.5"})
    pair2: dict | None = None
    # perturbation family: pair2(c) = (A1 + c dA, q1 + c dq), dA from a stream function or components
    perturbation: dict = field(default_factory=lambda: {"stream": DEFAULT_STREAM, "dq": "0"})
    gauge: str | None = None

    def pairs(self, n: int) -> tuple[CoefficientPair, CoefficientPair]:
        p1 = build_pair(self.pair1, n, "pair1")
        if self.pair2 is not None:
            return p1, build_pair(self.pair2, n, "pair2")
        dA, dq = self.perturbation_fields(n)
        return p1, p1.with_(A=p1.A + dA, q=p1.q + dq, name="pair2")

    def perturbation_fields(self, n: int) -> tuple[VectorField, Expression]:
        entry = dict(self.perturbation)
        extra = sorted(set(entry) - {"stream", "A", "dq"})
        if extra:
            raise ValueError(f"unknown keys in perturbation: {extra}")
        if ("A" in entry) == ("stream" in entry):
            raise ValueError("perturbation needs exactly one of 'A' or 'stream'")
        dA = make_divfree_field(entry["stream"], n) if "stream" in entry else VectorField(entry["A"], n)
        return dA, Expression(entry.get("dq", "0"), n)

    def gauge_function(self, n: int) -> GaugeFunction | None:
        return None if self.gauge is None else GaugeFunction(Expression(self.gauge, n))


@dataclass
class GOConfig:
    enabled: bool = True
    omega: list = field(default_factory=lambda: [1.0, 0.0])
    tau: float = 1.0
    xi: list = field(default_factory=lambda: [0.0, 1.0])
    delta: float = 0.3
    lambdas: list = field(default_factory=lambda: [8.0, 16.0, 32.0, 64.0])
    transport_Nx: list = field(default_factory=lambda: [33, 65, 129])
    transport_Nt: int = 8
    scheme: str = "crank_nicolson"
    max_l2_slope: float = -0.8
    max_h1_slope: float = 0.2
    min_transport_order: float = 1.9


@dataclass
class CarlemanConfig:
    enabled: bool = True
    omega: list = field(default_factory=lambda: [1.0, 0.0])
    lambdas: list = field(default_factory=lambda: [2.0, 4.0, 8.0, 16.0, 32.0])
    suite_size: int = 20
    seed: int = 0
    s: float = 0.0
    order: int = 6
    growth: float = 0.25


@dataclass
class ReconstructionConfig:
    enabled: bool = True
    lam: float = 32.0
    delta: float = 0.3
    K: int = 3
    M: float = 2.3
    mode: str = "full_data"
    omega0: list = field(default_factory=lambda: [1.0, 0.0])
    eps: float = 1.0
    probes: str = "oracle"
    amplitudes: str = "split"
    boundary: str = "full"
    scheme: str = "crank_nicolson"
    noise: float = 0.0
    seed: int = 0
    chunk: int = 8
    recover_q: bool = False
    max_rel_error: float = 0.15


@dataclass
class ExperimentConfig:
    enabled: bool = True
    scenario: str = "divfree-family"
    scales: list = field(default_factory=lambda: [0.1, 0.2, 0.4, 0.6, 0.8, 1.0])
    omega0: list = field(default_factory=lambda: [1.0, 0.0])
    eps: float = 1.0
    probe_size: int = 6
    probe_seed: int = 0
    power_iters: int = 200
    power_tol: float = 1e-10
    scheme: str = "crank_nicolson"
    laws: list = field(default_factory=lambda: ["power", "double_log"])
    min_rank_correlation: float = 0.9
    max_residual_ratio: float = 2.0
    dn_tol: float = 1e-12


@dataclass
class ScenarioConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    fields: FieldsConfig = field(default_factory=FieldsConfig)
    go: GOConfig = field(default_factory=GOConfig)
    carleman: CarlemanConfig = field(default_factory=CarlemanConfig)
    reconstruction: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    @classmethod
    def from_dict(cls, data: dict) -> ScenarioConfig:
        sections = {
            "grid": GridConfig,
            "fields": FieldsConfig,
            "go": GOConfig,
            "carleman": CarlemanConfig,
            "reconstruction": ReconstructionConfig,
            "experiment": ExperimentConfig,
        }
        extra = sorted(set(data) - set(sections))
        if extra:
            raise ValueError(f"unknown config sections: {extra}")
        return cls(**{k: _from_dict(c, data.get(k)) for k, c in sections.items()})

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path) -> ScenarioConfig:
    with Path(path).open() as fh:
        return ScenarioConfig.from_dict(json.load(fh))
