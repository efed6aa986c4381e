"""Problem-instance definition: plant, attack patterns, regions, reference,
cost weights, and risk budgets, plus validation and JSON (de)serialization.

Sensor indices are 1-based throughout the public API, matching the usual
"sensor 4" phrasing; attack-pattern indices are 0-based positions into the
pattern list.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (DimensionMismatch, IndexOutOfRange, NotObservable,
                     NotPSD, ReferenceViolatesRegions)
from .numerics import Poly, state_variables

Array = np.ndarray

OBSERVABILITY_RTOL = 1e-9
PSD_TOL = 1e-10


def _as_matrix(name: str, value, shape=None) -> Array:
    M = np.atleast_2d(np.asarray(value, dtype=float))
    if shape is not None and M.shape != shape:
        raise DimensionMismatch(f"{name} has shape {M.shape}, expected {shape}")
    return M


def _require_psd(name: str, M: Array, tol: float = PSD_TOL):
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    if w[0] < -tol:
        raise NotPSD(name, float(w[0]))


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SystemModel:
    """LTI plant with Gaussian process/measurement noise."""
    A: Array
    B: Array
    C: Array
    sigma_w: Array
    sigma_v: Array
    x0: Array

    def __post_init__(self):
        A = _as_matrix("A", self.A)
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionMismatch(f"A must be square, got {A.shape}")
        B = _as_matrix("B", self.B)
        if B.shape[0] != n:
            raise DimensionMismatch(f"B has {B.shape[0]} rows, expected {n}")
        C = _as_matrix("C", self.C)
        if C.shape[1] != n:
            raise DimensionMismatch(f"C has {C.shape[1]} cols, expected {n}")
        p = C.shape[0]
        sw = _as_matrix("sigma_w", self.sigma_w, (n, n))
        sv = _as_matrix("sigma_v", self.sigma_v, (p, p))
        _require_psd("sigma_w", sw)
        _require_psd("sigma_v", sv)
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.shape != (n,):
            raise DimensionMismatch(f"x0 has shape {x0.shape}, expected ({n},)")
        for name, val in (("A", A), ("B", B), ("C", C),
                          ("sigma_w", sw), ("sigma_v", sv), ("x0", x0)):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class AttackPatternSet:
    """Collection of hypothesized compromised-sensor subsets (1-based)."""
    patterns: tuple[frozenset[int], ...]

    def __post_init__(self):
        pats = tuple(frozenset(int(i) for i in s) for s in self.patterns)
        object.__setattr__(self, "patterns", pats)

    @property
    def q(self) -> int:
        return len(self.patterns)

    def validate_indices(self, p: int):
        for k, s in enumerate(self.patterns):
            for i in s:
                if not 1 <= i <= p:
                    raise IndexOutOfRange(
                        f"pattern {k} contains sensor {i}, valid range 1..{p}")


@dataclass(frozen=True)
class Region:
    """Semialgebraic region {x : g(x) >= 0} with polynomial g."""
    kind: str
    g: Poly

    def __post_init__(self):
        if self.kind not in ("unsafe", "goal"):
            raise ValueError(f"region kind must be 'unsafe' or 'goal', got {self.kind!r}")
        if self.g.degree() < 1:
            raise ValueError("region polynomial must have degree >= 1")

    @property
    def dim(self) -> int:
        return len(self.g.variables)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.dim:
            raise DimensionMismatch(
                f"point has dimension {x.shape[0]}, region expects {self.dim}")
        return self.g.eval(x) >= 0.0

    def contains_many(self, X: Array) -> Array:
        return self.g.eval_many(np.atleast_2d(X)) >= 0.0

    def ball_parameters(self) -> tuple[Array, float] | None:
        """If the region is a Euclidean disc {r^2 - ||x - c||^2 >= 0},
        return (center, radius); otherwise None."""
        try:
            M, b, c0 = self.g.as_quadratic()
        except Exception:
            return None
        n = M.shape[0]
        s = -M[0, 0]
        if s <= 0:
            return None
        if not np.allclose(M, -s * np.eye(n), rtol=0, atol=1e-12 * max(1.0, s)):
            return None
        center = b / (2.0 * s)
        r2 = c0 / s + float(center @ center)
        if r2 <= 0:
            return None
        return center, float(np.sqrt(r2))


@dataclass(frozen=True)
class Reference:
    """Reference trajectory r(t) on [0, T].

    Either a closed-form parabola (the case-study family: first coordinate
    sweeps 0..1 linearly in t/T, second follows a*(x1 - b)^2 + c) or a
    sampled table with linear interpolation.
    """
    kind: str
    T: float
    coeffs: tuple[float, float, float] = (-4.0, 0.5, 1.0)
    times: Array | None = None
    values: Array | None = None

    def __post_init__(self):
        if self.kind not in ("parabola", "table"):
            raise ValueError(f"unknown reference kind {self.kind!r}")
        if self.kind == "table":
            t = np.asarray(self.times, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if t.ndim != 1 or v.ndim != 2 or v.shape[0] != t.shape[0]:
                raise DimensionMismatch("reference table shapes are inconsistent")
            object.__setattr__(self, "times", t)
            object.__setattr__(self, "values", v)

    def __call__(self, t: float) -> Array:
        return self.sample(np.asarray([t], dtype=float))[0]

    def sample(self, times: Array) -> Array:
        times = np.asarray(times, dtype=float)
        if self.kind == "parabola":
            a, b, c = self.coeffs
            x1 = times / self.T
            x2 = a * (x1 - b) ** 2 + c
            return np.stack([x1, x2], axis=-1)
        out = np.empty((times.shape[0], self.values.shape[1]))
        for j in range(self.values.shape[1]):
            out[:, j] = np.interp(times, self.times, self.values[:, j])
        return out

    def to_json(self) -> dict:
        if self.kind == "parabola":
            return {"kind": "parabola", "T": self.T, "coeffs": list(self.coeffs)}
        return {"kind": "table", "T": self.T,
                "times": self.times.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "Reference":
        if data["kind"] == "parabola":
            return cls("parabola", float(data["T"]),
                       tuple(float(c) for c in data.get("coeffs", (-4.0, 0.5, 1.0))))
        return cls("table", float(data["T"]), times=data["times"], values=data["values"])


@dataclass(frozen=True)
class ScenarioConfig:
    """Full problem instance prior to validation."""
    system: SystemModel
    patterns: AttackPatternSet
    unsafe: Region
    goal: Region
    reference: Reference
    Q: Array
    R: Array
    F: Array
    T: float
    eps_s: float
    eps_r: float
    dt: float
    adversary_present: bool = False

    def __post_init__(self):
        n, m = self.system.n, self.system.m
        Q = _as_matrix("Q", self.Q, (n, n))
        R = _as_matrix("R", self.R, (m, m))
        F = _as_matrix("F", self.F, (n, n))
        _require_psd("Q", Q)
        _require_psd("F", F)
        wR = np.linalg.eigvalsh(0.5 * (R + R.T))
        if wR[0] <= 0:
            raise NotPSD("R (must be positive definite)", float(wR[0]))
        if not (0.0 < self.eps_s < 1.0 and 0.0 < self.eps_r < 1.0):
            raise ValueError("risk budgets eps_s, eps_r must lie in (0, 1)")
        if self.dt <= 0 or self.T <= 0:
            raise ValueError("T and dt must be positive")
        steps = round(self.T / self.dt)
        if abs(steps * self.dt - self.T) > 1e-9 * max(1.0, self.T):
            raise ValueError(f"T/dt = {self.T / self.dt} is not an integer step count")
        for name, val in (("Q", Q), ("R", R), ("F", F)):
            object.__setattr__(self, name, val)


# ---------------------------------------------------------------------------
# row / covariance exclusion
# ---------------------------------------------------------------------------

def kept_rows(p: int, excluded) -> tuple[int, ...]:
    """Sensor indices (1-based, ascending) that remain after exclusion."""
    excluded = frozenset(int(i) for i in excluded)
    for i in excluded:
        if not 1 <= i <= p:
            raise IndexOutOfRange(f"sensor index {i} out of range 1..{p}")
    return tuple(i for i in range(1, p + 1) if i not in excluded)


def rows_excluding(C: Array, S) -> Array:
    """Delete the rows of C indexed by S (1-based), preserving order."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    keep = kept_rows(C.shape[0], S)
    idx = [i - 1 for i in keep]
    return C[idx, :]


def cov_excluding(Sigma: Array, S) -> Array:
    """Delete rows and columns of a covariance indexed by S (1-based)."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    keep = kept_rows(Sigma.shape[0], S)
    idx = [i - 1 for i in keep]
    return Sigma[np.ix_(idx, idx)]


def region_contains(reg: Region, x) -> bool:
    return reg.contains(x)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def observability_rank(A: Array, C: Array) -> int:
    n = A.shape[0]
    if C.shape[0] == 0:
        return 0
    blocks = [C]
    for _ in range(n - 1):
        blocks.append(blocks[-1] @ A)
    O = np.vstack(blocks)
    s = np.linalg.svd(O, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > OBSERVABILITY_RTOL * s[0]))


@dataclass(frozen=True)
class ValidatedScenario:
    """Scenario with precomputed per-pattern and per-pair measurement maps.

    Pattern indices are 0-based positions into `cfg.patterns.patterns`;
    `pairs` lists all (i, j) with i < j.
    """
    cfg: ScenarioConfig
    steps: int
    times: Array
    r_table: Array
    kept: tuple[tuple[int, ...], ...]
    C_alpha: tuple[Array, ...]
    Sigma_v_alpha: tuple[Array, ...]
    pairs: tuple[tuple[int, int], ...]
    kept_pair: dict[tuple[int, int], tuple[int, ...]]
    C_pair: dict[tuple[int, int], Array]
    Sigma_v_pair: dict[tuple[int, int], Array]

    @property
    def system(self) -> SystemModel:
        return self.cfg.system

    @property
    def n(self) -> int:
        return self.cfg.system.n

    @property
    def m(self) -> int:
        return self.cfg.system.m

    @property
    def p(self) -> int:
        return self.cfg.system.p

    @property
    def q(self) -> int:
        return self.cfg.patterns.q

    @property
    def dt(self) -> float:
        return self.cfg.dt

    @property
    def T(self) -> float:
        return self.cfg.T


def validate_scenario(cfg) -> ValidatedScenario:
    """Check every invariant and precompute excluded-sensor maps.

    Idempotent: validating an already-validated scenario returns it.
    """
    if isinstance(cfg, ValidatedScenario):
        return cfg

    sysm = cfg.system
    n, p = sysm.n, sysm.p
    cfg.patterns.validate_indices(p)
    if cfg.unsafe.dim != n or cfg.goal.dim != n:
        raise DimensionMismatch("region polynomials must live in the state space")

    # observability of the plain pair and of every pattern / pattern pair
    if observability_rank(sysm.A, sysm.C) < n:
        raise NotObservable("full sensor set")
    kept = []
    C_alpha = []
    Sv_alpha = []
    for i, pattern in enumerate(cfg.patterns.patterns):
        Ci = rows_excluding(sysm.C, pattern)
        if observability_rank(sysm.A, Ci) < n:
            raise NotObservable(i)
        kept.append(kept_rows(p, pattern))
        C_alpha.append(Ci)
        Sv_alpha.append(cov_excluding(sysm.sigma_v, pattern))

    pairs = []
    kept_pair = {}
    C_pair = {}
    Sv_pair = {}
    q = cfg.patterns.q
    for i in range(q):
        for j in range(i + 1, q):
            union = cfg.patterns.patterns[i] | cfg.patterns.patterns[j]
            Cij = rows_excluding(sysm.C, union)
            if observability_rank(sysm.A, Cij) < n:
                raise NotObservable((i, j))
            pairs.append((i, j))
            kept_pair[(i, j)] = kept_rows(p, union)
            C_pair[(i, j)] = Cij
            Sv_pair[(i, j)] = cov_excluding(sysm.sigma_v, union)

    # reference clearance at the simulation sampling resolution
    steps = round(cfg.T / cfg.dt)
    times = np.arange(steps + 1) * cfg.dt
    r_table = cfg.reference.sample(times)
    if r_table.shape[1] != n:
        raise DimensionMismatch("reference dimension does not match the state")
    if bool(np.any(cfg.unsafe.contains_many(r_table))):
        raise ReferenceViolatesRegions("reference passes through the unsafe set")
    if not cfg.goal.contains(r_table[-1]):
        raise ReferenceViolatesRegions("reference endpoint is outside the goal set")

    return ValidatedScenario(
        cfg=cfg, steps=steps, times=times, r_table=r_table,
        kept=tuple(kept), C_alpha=tuple(C_alpha), Sigma_v_alpha=tuple(Sv_alpha),
        pairs=tuple(pairs), kept_pair=kept_pair, C_pair=C_pair,
        Sigma_v_pair=Sv_pair)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def scenario_to_json(cfg: ScenarioConfig) -> dict:
    s = cfg.system
    return {
        "A": s.A.tolist(), "B": s.B.tolist(), "C": s.C.tolist(),
        "sigma_w": s.sigma_w.tolist(), "sigma_v": s.sigma_v.tolist(),
        "x0": s.x0.tolist(),
        "patterns": [sorted(p) for p in cfg.patterns.patterns],
        "unsafe": cfg.unsafe.g.to_json(),
        "goal": cfg.goal.g.to_json(),
        "reference": cfg.reference.to_json(),
        "Q": cfg.Q.tolist(), "R": cfg.R.tolist(), "F": cfg.F.tolist(),
        "T": cfg.T, "eps_s": cfg.eps_s, "eps_r": cfg.eps_r, "dt": cfg.dt,
        "adversary_present": cfg.adversary_present,
    }


def scenario_from_json(data: dict) -> ScenarioConfig:
    system = SystemModel(A=data["A"], B=data["B"], C=data["C"],
                         sigma_w=data["sigma_w"], sigma_v=data["sigma_v"],
                         x0=data["x0"])
    xvars = state_variables(system.n)
    return ScenarioConfig(
        system=system,
        patterns=AttackPatternSet(tuple(frozenset(p) for p in data["patterns"])),
        unsafe=Region("unsafe", Poly.from_json(xvars, data["unsafe"])),
        goal=Region("goal", Poly.from_json(xvars, data["goal"])),
        reference=Reference.from_json(data["reference"]),
        Q=data["Q"], R=data["R"], F=data["F"],
        T=float(data["T"]), eps_s=float(data["eps_s"]),
        eps_r=float(data["eps_r"]), dt=float(data["dt"]),
        adversary_present=bool(data.get("adversary_present", False)))


def save_scenario(cfg: ScenarioConfig, path):
    with open(path, "w") as fh:
        json.dump(scenario_to_json(cfg), fh, indent=2)
        fh.write("\n")


def load_scenario(path) -> ScenarioConfig:
    with open(path) as fh:
        return scenario_from_json(json.load(fh))


# ---------------------------------------------------------------------------
# case study
# ---------------------------------------------------------------------------

def disc_region(kind: str, center, radius: float, n: int = 2) -> Region:
    """Region {r^2 - ||x - c||^2 >= 0}."""
    xvars = state_variables(n)
    center = np.asarray(center, dtype=float)
    M = -np.eye(n)
    b = 2.0 * center
    c0 = radius ** 2 - float(center @ center)
    return Region(kind, Poly.quadratic_form(xvars, M, b, c0))


def case_study_config(dt: float = 1e-3, T: float = 10.0,
                      patterns=((2,), (4,))) -> ScenarioConfig:
    """Two-state, four-sensor benchmark: identity plant, parabolic
    reference from (0,0) to (1,0), unsafe disc at (0.5, 0) and goal disc
    at (1, 0), both of radius 0.2."""
    n = 2
    system = SystemModel(
        A=np.eye(n), B=np.eye(n),
        C=np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]),
        sigma_w=1e-8 * np.eye(n), sigma_v=1e-8 * np.eye(4),
        x0=np.zeros(n))
    return ScenarioConfig(
        system=system,
        patterns=AttackPatternSet(tuple(frozenset(p) for p in patterns)),
        unsafe=disc_region("unsafe", (0.5, 0.0), 0.2),
        goal=disc_region("goal", (1.0, 0.0), 0.2),
        reference=Reference("parabola", T),
        Q=np.eye(n), R=1e-3 * np.eye(n), F=0.03 * np.eye(n),
        T=T, eps_s=0.3, eps_r=0.3, dt=dt)
