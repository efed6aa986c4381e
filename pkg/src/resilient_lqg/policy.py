"""Online control policy: divergence-event tests between filter-bank
estimates, persistent constraint selection when the feasible-input
intersection empties, and the per-step ball-constrained program.

Pattern indices are 0-based positions into the scenario's pattern list.
Eliminations persist for the remainder of the horizon and the surviving
set never empties.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import qcqp
from .errors import DimensionMismatch
from .gains import GainsBundle, TrackingSolution

Array = np.ndarray


@dataclass(frozen=True)
class FilterBank:
    """Current estimates of every filter: full sensor set, one per
    pattern, one per pattern pair (i < j)."""
    xhat_full: Array
    xhat_pattern: Array                      # (q, n)
    xhat_pair: dict[tuple[int, int], Array]

    @classmethod
    def initial(cls, x0: Array, q: int, pairs) -> "FilterBank":
        x0 = np.asarray(x0, dtype=float)
        return cls(xhat_full=x0.copy(),
                   xhat_pattern=np.tile(x0, (q, 1)),
                   xhat_pair={pair: x0.copy() for pair in pairs})


@dataclass(frozen=True)
class SelectionState:
    """Surviving constraint indices with their radii.

    gamma_min is fixed at initialization as the minimum over ALL pattern
    radii; it is not recomputed after eliminations.
    """
    surviving: frozenset[int]
    gamma: tuple[float, ...]
    gamma_min: float
    eliminated_log: tuple[tuple[float, int, str, float], ...] = ()

    @classmethod
    def initial(cls, gamma) -> "SelectionState":
        gamma = tuple(float(g) for g in gamma)
        if not gamma:
            raise ValueError("at least one pattern radius is required")
        return cls(surviving=frozenset(range(len(gamma))), gamma=gamma,
                   gamma_min=min(gamma))


def omega_event(K_t: Array, xhat_i: Array, xhat_ij: Array, gamma_min: float) -> bool:
    """Divergence event: ||K(t) (xhat_i - xhat_ij)|| strictly exceeds
    gamma_min."""
    xhat_i = np.asarray(xhat_i, dtype=float)
    xhat_ij = np.asarray(xhat_ij, dtype=float)
    if xhat_i.shape != xhat_ij.shape or K_t.shape[1] != xhat_i.shape[0]:
        raise DimensionMismatch("estimate dimensions do not match the gain")
    return float(np.linalg.norm(K_t @ (xhat_i - xhat_ij))) > gamma_min


def omega_magnitude(K_t: Array, xhat_i: Array, xhat_ij: Array) -> float:
    return float(np.linalg.norm(K_t @ (np.asarray(xhat_i, float)
                                       - np.asarray(xhat_ij, float))))


def pair_distance(K_t: Array, xhat_i: Array, xhat_j: Array) -> float:
    """Input-space distance ||u_i - u_j|| = 1/2 ||K(t)(xhat_i - xhat_j)||
    (nominal inputs are affine in the estimate with slope K/2)."""
    xhat_i = np.asarray(xhat_i, dtype=float)
    xhat_j = np.asarray(xhat_j, dtype=float)
    if xhat_i.shape != xhat_j.shape or K_t.shape[1] != xhat_i.shape[0]:
        raise DimensionMismatch("estimate dimensions do not match the gain")
    return 0.5 * float(np.linalg.norm(K_t @ (xhat_i - xhat_j)))


def _pair_key(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


def _argmax_pair(bank: FilterBank, surviving, K_t):
    """Largest input-space pairwise distance among survivors, ties broken
    toward the lexicographically smallest (i, j)."""
    best = None
    best_d = -1.0
    for i in sorted(surviving):
        for j in sorted(surviving):
            if j <= i:
                continue
            d = pair_distance(K_t, bank.xhat_pattern[i], bank.xhat_pattern[j])
            if d > best_d + 1e-15:
                best_d = d
                best = (i, j)
    return best, best_d


def select_constraints(bank: FilterBank, state: SelectionState, K_t: Array,
                       t: float = 0.0) -> SelectionState:
    """Identify and persistently eliminate the constraints responsible for
    an empty feasible intersection.

    Phase one shrinks the maximum pairwise input distance below
    2*gamma_min by testing the divergence events of the extreme pair
    against its pair filter. Phase two applies the two-estimate split
    tests against the extreme pair. The final surviving index is never
    removed; if both members of a pair fire and removal would empty the
    set, the one with the smaller event magnitude is retained.
    """
    surviving = set(state.surviving)
    log = list(state.eliminated_log)

    def eliminate(idx: int, reason: str, magnitude: float) -> bool:
        if len(surviving) <= 1 or idx not in surviving:
            return False
        surviving.discard(idx)
        log.append((float(t), idx, reason, float(magnitude)))
        return True

    def pair_estimate(i, j):
        return bank.xhat_pair[_pair_key(i, j)]

    gmin = state.gamma_min

    # phase one: drive the extreme pairwise distance under 2*gamma_min
    while len(surviving) >= 2:
        (pair, d_max) = _argmax_pair(bank, surviving, K_t)
        if pair is None or d_max <= 2.0 * gmin:
            break
        ih, jh = pair
        xp = pair_estimate(ih, jh)
        mag_i = omega_magnitude(K_t, bank.xhat_pattern[ih], xp)
        mag_j = omega_magnitude(K_t, bank.xhat_pattern[jh], xp)
        fired_i = mag_i > gmin
        fired_j = mag_j > gmin
        removed = False
        if fired_i and fired_j and len(surviving) == 2:
            # keep the index with the smaller event magnitude
            drop = ih if mag_i >= mag_j else jh
            keep_mag = min(mag_i, mag_j)
            removed |= eliminate(drop, f"omega_{ih}_{jh}_both", max(mag_i, mag_j))
            _ = keep_mag
        else:
            if fired_i:
                removed |= eliminate(ih, f"omega_{ih}^{ih}{jh}", mag_i)
            if fired_j:
                removed |= eliminate(jh, f"omega_{jh}^{ih}{jh}", mag_j)
        if not removed:
            # noise-only emptiness: no event fired, but progress is
            # required; drop the pair member that disagrees more with
            # the pair benchmark
            drop = ih if mag_i >= mag_j else jh
            if not eliminate(drop, f"forced_{ih}_{jh}", max(mag_i, mag_j)):
                break

    # phase two: split tests of every survivor against the extreme pair
    if len(surviving) >= 2:
        pair, _ = _argmax_pair(bank, surviving, K_t)
        if pair is not None:
            ih, jh = pair
            for i in sorted(surviving):
                for anchor in (ih, jh):
                    if i == anchor or i not in surviving or anchor not in surviving:
                        continue
                    split = 0.25 * float(np.linalg.norm(
                        K_t @ (bank.xhat_pattern[i] - bank.xhat_pattern[anchor])))
                    if split <= 0.5 * gmin:
                        continue
                    xp = pair_estimate(i, anchor)
                    mag_i = omega_magnitude(K_t, bank.xhat_pattern[i], xp)
                    mag_a = omega_magnitude(K_t, bank.xhat_pattern[anchor], xp)
                    if mag_i > gmin:
                        eliminate(i, f"omega_{i}^{i}{anchor}", mag_i)
                    if mag_a > gmin:
                        eliminate(anchor, f"omega_{anchor}^{i}{anchor}", mag_a)

    return replace(state, surviving=frozenset(surviving),
                   eliminated_log=tuple(log))


@dataclass
class PolicyRuntime:
    """Per-run mutable policy scratch: warm-start multipliers per ball
    and cached factorizations of the (constant) input weight."""
    warm: dict[int, float]
    R_inv: Array | None = None
    R_eig: tuple | None = None

    @classmethod
    def fresh(cls) -> "PolicyRuntime":
        return cls(warm={})

    def ensure_cache(self, R: Array):
        if self.R_inv is None:
            self.R_inv = np.linalg.inv(R)
            w, V = np.linalg.eigh(R)
            self.R_eig = (w, V)


def build_balls(bank: FilterBank, state: SelectionState,
                tracking: TrackingSolution, k: int) -> list[qcqp.BallConstraint]:
    K_t = tracking.K[k]
    ff = tracking.feedforward[k]
    return [qcqp.BallConstraint(center=0.5 * (K_t @ bank.xhat_pattern[i]) + ff,
                                radius=state.gamma[i], pattern_index=i)
            for i in sorted(state.surviving)]


def control_step(bank: FilterBank, state: SelectionState,
                 tracking: TrackingSolution, k: int, R: Array, B: Array,
                 runtime: PolicyRuntime | None = None
                 ) -> tuple[Array, SelectionState, qcqp.QcqpSolution | None]:
    """One policy evaluation at grid index k.

    Builds the surviving feasible-input balls, runs the selection pass if
    their intersection is empty, and solves the program with the current
    full-sensor estimate in the objective.

    The two dominant cases, an interior unconstrained minimizer and a
    single active ball, are solved in closed form without building the
    full program object.
    """
    K_t = tracking.K[k]
    ff = tracking.feedforward[k]
    t = k * tracking.dt
    surv = sorted(state.surviving)
    centers = [0.5 * (K_t @ bank.xhat_pattern[i]) + ff for i in surv]
    radii = [state.gamma[i] for i in surv]

    # emptiness check (closed form for one or two balls)
    if len(centers) == 2:
        gap = float(np.linalg.norm(centers[0] - centers[1]))
        empty = 0.5 * (gap - radii[0] - radii[1]) >= qcqp.EMPTY_BAND
    elif len(centers) == 1:
        empty = False
    else:
        empty = not qcqp.check_feasible(
            [qcqp.BallConstraint(c, r, i)
             for c, r, i in zip(centers, radii, surv)]).nonempty
    if empty:
        state = select_constraints(bank, state, K_t, t)
        surv = sorted(state.surviving)
        centers = [0.5 * (K_t @ bank.xhat_pattern[i]) + ff for i in surv]
        radii = [state.gamma[i] for i in surv]

    lin = B.T @ (tracking.P[k] @ bank.xhat_full + tracking.s[k])

    if runtime is not None:
        runtime.ensure_cache(R)
        u_free = -0.5 * (runtime.R_inv @ lin)
        dists = [float(np.linalg.norm(u_free - c)) for c in centers]
        if all(d <= r + qcqp.FEAS_TOL for d, r in zip(dists, radii)):
            runtime.warm = {i: 0.0 for i in surv}
            return u_free, state, None
        w_eig, V_eig = runtime.R_eig
        for pos, i in enumerate(surv):
            if dists[pos] <= radii[pos] + qcqp.FEAS_TOL:
                continue
            u_b, mu_b = qcqp.secular_boundary(R, w_eig, V_eig, lin,
                                              centers[pos], radii[pos])
            ok = all(p2 == pos
                     or float(np.linalg.norm(u_b - centers[p2]))
                     <= radii[p2] + qcqp.FEAS_TOL
                     for p2 in range(len(surv)))
            if ok:
                runtime.warm = {j: (mu_b if j == i else 0.0) for j in surv}
                return u_b, state, None
            break

    balls = tuple(qcqp.BallConstraint(c, r, i)
                  for c, r, i in zip(centers, radii, surv))
    problem = qcqp.QcqpProblem(R=R, lin=lin, balls=balls)
    warm = None
    if runtime is not None:
        warm = np.array([runtime.warm.get(b.pattern_index, 0.0) for b in balls])
    sol = qcqp.solve(problem, warm_start=warm)
    if runtime is not None:
        runtime.warm = {b.pattern_index: float(mu)
                        for b, mu in zip(balls, sol.multipliers)}
    return sol.u, state, sol
