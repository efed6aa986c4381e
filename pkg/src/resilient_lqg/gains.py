"""Time-indexed filter and controller quantities.

Forward Kalman error-covariance schedules (full sensor set, each attack
pattern, each pattern pair), the backward tracking Riccati solution with
feedforward terms, and the scalars used by the elimination-risk bound.

All ODEs are integrated by explicit Euler on the shared grid t_k = k*dt;
schedules are stored dense so lookups are index operations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, Divergence, TimeBeyondHorizon
from .model import (ValidatedScenario, cov_excluding, kept_rows,
                    rows_excluding, validate_scenario)
from .numerics import min_eig_sym, spectral_norm, sym

Array = np.ndarray

DIVERGENCE_NORM = 1e12
PSD_CLIP = 1e-12
STEADY_TOL = 1e-10


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FilterSchedule:
    """Error covariance Phi(t) and gain Theta(t) for one sensor subset."""
    phi: Array            # (steps+1, n, n)
    theta: Array          # (steps+1, n, s)
    sensors: tuple[int, ...]   # kept sensor indices, 1-based ascending
    dt: float

    @property
    def steps(self) -> int:
        return self.phi.shape[0] - 1


@dataclass(frozen=True)
class TrackingSolution:
    """Backward LQG tracking solution P, K, s plus value-function offsets."""
    P: Array              # (steps+1, n, n)
    K: Array              # (steps+1, m, n)
    s: Array              # (steps+1, n)
    s0: Array             # (steps+1,)
    beta: Array           # (steps+1,)
    feedforward: Array    # (steps+1, m), equals -1/2 R^{-1} B^T s(t)
    dt: float

    @property
    def steps(self) -> int:
        return self.P.shape[0] - 1


@dataclass(frozen=True)
class EstimatorState:
    """Current estimate of one filter in the bank, with the plant and
    measurement maps it propagates under."""
    xhat: Array
    k: int
    schedule: FilterSchedule
    A: Array
    B: Array
    C_sub: Array

    @property
    def t(self) -> float:
        return self.k * self.schedule.dt


def grid_index(t: float, dt: float, steps: int) -> int:
    k = int(round(t / dt))
    if abs(k * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise TimeBeyondHorizon(f"t={t} is not on the dt={dt} grid")
    if not 0 <= k <= steps:
        raise TimeBeyondHorizon(f"t={t} outside [0, {steps * dt}]")
    return k


# ---------------------------------------------------------------------------
# forward filter Riccati
# ---------------------------------------------------------------------------

def _filter_core(A: Array, C: Array, Sw: Array, Sv: Array,
                 steps: int, dt: float) -> tuple[Array, Array]:
    n = A.shape[0]
    s = C.shape[0]
    Sv_inv = np.linalg.inv(Sv)
    Ct_Svi = C.T @ Sv_inv
    phi = np.empty((steps + 1, n, n))
    theta = np.empty((steps + 1, n, s))
    P = np.zeros((n, n))
    phi[0] = P
    theta[0] = P @ Ct_Svi
    for k in range(steps):
        AP = A @ P
        gain = P @ Ct_Svi
        Pdot = AP + AP.T + Sw - gain @ (C @ P.T)
        P = sym(P + dt * Pdot)
        lo = min_eig_sym(P)
        if -PSD_CLIP < lo < 0.0:
            w, V = np.linalg.eigh(P)
            P = sym((V * np.maximum(w, 0.0)) @ V.T)
        if not np.isfinite(P).all() or np.abs(P).max() > DIVERGENCE_NORM:
            raise Divergence(f"filter covariance diverged at step {k + 1}")
        phi[k + 1] = P
        theta[k + 1] = P @ Ct_Svi
    return phi, theta


def integrate_filter(scenario, excluded=frozenset(), dt: float | None = None) -> FilterSchedule:
    """Integrate the error-covariance Riccati ODE for the sensor subset
    that excludes `excluded` (1-based indices), from Phi(0) = 0."""
    sc = validate_scenario(scenario)
    sysm = sc.system
    dt = sc.dt if dt is None else dt
    steps = round(sc.T / dt)
    C = rows_excluding(sysm.C, excluded)
    Sv = cov_excluding(sysm.sigma_v, excluded)
    phi, theta = _filter_core(sysm.A, C, sysm.sigma_w, Sv, steps, dt)
    return FilterSchedule(phi=phi, theta=theta,
                          sensors=kept_rows(sysm.p, excluded), dt=dt)


def steady_filter_gain(scenario, excluded=frozenset(),
                       dt: float | None = None,
                       max_time: float = 400.0) -> tuple[Array, Array]:
    """Fixed point of the filter Riccati: integrate until the per-step
    change drops below 1e-10 relative to the current covariance scale,
    then return (Phi_inf, Theta_inf).

    The relative test matters: with near-zero noise the absolute per-step
    change sits below any fixed threshold from the very first step.
    """
    sc = validate_scenario(scenario)
    sysm = sc.system
    dt = sc.dt if dt is None else dt
    C = rows_excluding(sysm.C, excluded)
    Sv = cov_excluding(sysm.sigma_v, excluded)
    Sv_inv = np.linalg.inv(Sv)
    Ct_Svi = C.T @ Sv_inv
    P = np.zeros_like(sysm.A)
    started = False
    for _ in range(int(max_time / dt)):
        AP = sysm.A @ P
        Pdot = AP + AP.T + sysm.sigma_w - (P @ Ct_Svi) @ (C @ P.T)
        P_next = sym(P + dt * Pdot)
        scale = max(float(np.abs(P_next).max()), np.finfo(float).tiny)
        if started and np.abs(P_next - P).max() < STEADY_TOL * scale:
            return P_next, P_next @ Ct_Svi
        started = True
        P = P_next
        if not np.isfinite(P).all() or np.abs(P).max() > DIVERGENCE_NORM:
            raise Divergence("steady-state filter iteration diverged")
    raise Divergence("filter Riccati did not reach a fixed point")


# ---------------------------------------------------------------------------
# backward tracking Riccati
# ---------------------------------------------------------------------------

def integrate_tracking(scenario, dt: float | None = None) -> TrackingSolution:
    """Backward Euler sweep of the tracking Riccati system.

    Boundary conditions: P(T) = 2F, s(T) = -2 F r(T), s0(T) = r(T)^T F r(T),
    beta(T) = 0 (so the value function equals the terminal cost at T).
    """
    sc = validate_scenario(scenario)
    cfg = sc.cfg
    sysm = sc.system
    dt = sc.dt if dt is None else dt
    steps = round(sc.T / dt)
    times = np.arange(steps + 1) * dt
    r = cfg.reference.sample(times)

    A, B, Q, R, F = sysm.A, sysm.B, cfg.Q, cfg.R, cfg.F
    n, m = sysm.n, sysm.m
    R_inv = np.linalg.inv(R)
    BRB = B @ R_inv @ B.T

    P = np.empty((steps + 1, n, n))
    K = np.empty((steps + 1, m, n))
    svec = np.empty((steps + 1, n))
    s0 = np.empty(steps + 1)
    beta = np.empty(steps + 1)

    P[steps] = 2.0 * F
    svec[steps] = -2.0 * (F @ r[steps])
    s0[steps] = float(r[steps] @ (F @ r[steps]))
    beta[steps] = 0.0
    K[steps] = -R_inv @ B.T @ P[steps]

    for k in range(steps - 1, -1, -1):
        Pk1 = P[k + 1]
        sk1 = svec[k + 1]
        Pdot = -(A.T @ Pk1 + Pk1 @ A - 0.5 * Pk1 @ BRB @ Pk1 + 2.0 * Q)
        P[k] = sym(Pk1 - dt * Pdot)
        sdot = (-A.T + 0.5 * Pk1 @ BRB) @ sk1 + 2.0 * (Q @ r[k + 1])
        svec[k] = sk1 - dt * sdot
        s0dot = 0.25 * float(sk1 @ (BRB @ sk1)) - float(r[k + 1] @ (Q @ r[k + 1]))
        s0[k] = s0[k + 1] - dt * s0dot
        betadot = -0.5 * float(np.trace(Pk1 @ sysm.sigma_w))
        beta[k] = beta[k + 1] - dt * betadot
        K[k] = -R_inv @ B.T @ P[k]
        if not np.isfinite(P[k]).all() or np.abs(P[k]).max() > DIVERGENCE_NORM:
            raise Divergence(f"tracking Riccati diverged at step {k}")

    feedforward = -0.5 * (svec @ (B @ R_inv.T))
    return TrackingSolution(P=P, K=K, s=svec, s0=s0, beta=beta,
                            feedforward=feedforward, dt=dt)


# ---------------------------------------------------------------------------
# estimator step and nominal input
# ---------------------------------------------------------------------------

def kf_step(est: EstimatorState, y_subset: Array, u: Array, dt: float) -> EstimatorState:
    """One explicit-Euler Kalman update with the schedule gain at the
    current grid index."""
    sched = est.schedule
    if est.k >= sched.steps:
        raise TimeBeyondHorizon(f"estimator already at the horizon (k={est.k})")
    y_subset = np.asarray(y_subset, dtype=float).reshape(-1)
    if y_subset.shape[0] != len(sched.sensors):
        raise DimensionMismatch(
            f"measurement has {y_subset.shape[0]} entries, "
            f"filter uses {len(sched.sensors)} sensors")
    xh = est.xhat
    innov = y_subset - est.C_sub @ xh
    xh_next = xh + dt * (est.A @ xh + est.B @ np.asarray(u, dtype=float)
                         + sched.theta[est.k] @ innov)
    return EstimatorState(xhat=xh_next, k=est.k + 1, schedule=sched,
                          A=est.A, B=est.B, C_sub=est.C_sub)


def make_estimator(scenario, schedule: FilterSchedule) -> EstimatorState:
    """Estimator initialized at x0 for the given schedule."""
    sc = validate_scenario(scenario)
    sysm = sc.system
    excluded = frozenset(range(1, sysm.p + 1)) - frozenset(schedule.sensors)
    return EstimatorState(xhat=sysm.x0.copy(), k=0, schedule=schedule,
                          A=sysm.A, B=sysm.B,
                          C_sub=rows_excluding(sysm.C, excluded))


def nominal_input(tracking: TrackingSolution, xhat: Array, t: float) -> Array:
    """u = 1/2 K(t) xhat - 1/2 R^{-1} B^T s(t), with t on the grid."""
    k = grid_index(t, tracking.dt, tracking.steps)
    return 0.5 * (tracking.K[k] @ np.asarray(xhat, dtype=float)) + tracking.feedforward[k]


# ---------------------------------------------------------------------------
# scalars for the elimination-risk bound
# ---------------------------------------------------------------------------

def lambda_star(schedule: FilterSchedule) -> float:
    """sup over the grid of the largest eigenvalue of Phi(t)."""
    eigs = np.linalg.eigvalsh(schedule.phi)
    return float(eigs[:, -1].max())


def kbar(tracking: TrackingSolution) -> float:
    """sup over the grid of the spectral norm of K(t)."""
    svals = np.linalg.svd(tracking.K, compute_uv=False)
    return float(svals[:, 0].max())


def kbar_power_iteration(tracking: TrackingSolution) -> float:
    """Same quantity via the power-iteration primitive (oracle path)."""
    return max(spectral_norm(tracking.K[k]) for k in range(tracking.steps + 1))


# ---------------------------------------------------------------------------
# bundle used by policy / harness / certify
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GainsBundle:
    """Everything the closed loop needs, precomputed on one grid."""
    full: FilterSchedule
    per_pattern: tuple[FilterSchedule, ...]
    per_pair: dict[tuple[int, int], FilterSchedule]
    tracking: TrackingSolution


def build_gains(scenario, dt: float | None = None) -> GainsBundle:
    sc = validate_scenario(scenario)
    full = integrate_filter(sc, frozenset(), dt)
    per_pattern = tuple(integrate_filter(sc, pat, dt)
                        for pat in sc.cfg.patterns.patterns)
    per_pair = {}
    for (i, j) in sc.pairs:
        union = sc.cfg.patterns.patterns[i] | sc.cfg.patterns.patterns[j]
        per_pair[(i, j)] = integrate_filter(sc, union, dt)
    tracking = integrate_tracking(sc, dt)
    return GainsBundle(full=full, per_pattern=per_pattern,
                       per_pair=per_pair, tracking=tracking)
