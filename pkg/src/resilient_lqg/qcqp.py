"""Per-step convex program: minimize u^T R u + lin^T u over an
intersection of Euclidean balls.

The solver is dual ascent over the ball multipliers with a closed-form
inner solve of the regularized stationarity equation (the constraint
Hessians are identities, so u(mu) = (R + sum(mu) I)^{-1} (sum mu_i c_i -
lin/2)), warm-started from the previous timestep, followed by an
active-set Newton polish. If the dual stalls it falls back to projected
gradient with Dykstra projection onto the ball intersection.

Problem sizes here are tiny (m, q <= 4); robustness beats asymptotics.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize, nnls

from .errors import DimensionMismatch, Infeasible, MaxIterations, NotPSD

Array = np.ndarray

FEAS_TOL = 1e-9
KKT_TOL = 1e-8
EMPTY_BAND = 1e-9
DUAL_MAX_ITER = 10_000
FALLBACK_MAX_ITER = 100_000
STALL_REL = 1e-12
STALL_WINDOW = 50


@dataclass(frozen=True)
class BallConstraint:
    """Feasible-input ball ||u - center|| <= radius."""
    center: Array
    radius: float
    pattern_index: int = 0

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(-1)
        object.__setattr__(self, "center", c)
        if self.radius < 0:
            raise ValueError(f"ball radius must be >= 0, got {self.radius}")


@dataclass(frozen=True)
class QcqpProblem:
    """min u^T R u + lin^T u  s.t.  ||u - c_i|| <= gamma_i for every ball."""
    R: Array
    lin: Array
    balls: tuple[BallConstraint, ...]

    def __post_init__(self):
        R = 0.5 * (np.asarray(self.R, dtype=float) +
                   np.asarray(self.R, dtype=float).T)
        lin = np.asarray(self.lin, dtype=float).reshape(-1)
        if R.shape != (lin.size, lin.size):
            raise DimensionMismatch(f"R shape {R.shape} vs lin size {lin.size}")
        w = np.linalg.eigvalsh(R)
        if w[0] <= 0:
            raise NotPSD("R (must be positive definite)", float(w[0]))
        balls = tuple(self.balls)
        if not balls:
            raise ValueError("at least one ball constraint is required")
        for b in balls:
            if b.center.size != lin.size:
                raise DimensionMismatch("ball center dimension mismatch")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "lin", lin)
        object.__setattr__(self, "balls", balls)

    @property
    def m(self) -> int:
        return self.lin.size

    def objective(self, u: Array) -> float:
        u = np.asarray(u, dtype=float)
        return float(u @ (self.R @ u) + self.lin @ u)


@dataclass(frozen=True)
class QcqpSolution:
    u: Array
    multipliers: Array
    kkt_residual: float
    feasibility_violation: float
    iterations: int = 0
    method: str = "dual"


@dataclass(frozen=True)
class FeasibilityResult:
    """Outcome of the emptiness check for a ball intersection."""
    nonempty: bool
    value: float              # minimax value min_u max_i (||u-c_i|| - gamma_i)
    witness: Array | None = None   # strictly or boundary-feasible point
    margin: float = 0.0       # positive emptiness margin when empty


# ---------------------------------------------------------------------------
# feasibility of the intersection
# ---------------------------------------------------------------------------

def _minimax_value_at(u: Array, balls) -> float:
    return max(float(np.linalg.norm(u - b.center)) - b.radius for b in balls)


def _smoothed_minimax(balls, u0: Array) -> Array:
    """Minimize max_i (||u - c_i|| - gamma_i) by log-sum-exp smoothing with
    temperature continuation."""
    centers = np.stack([b.center for b in balls])
    radii = np.array([b.radius for b in balls])

    def make_f(tau):
        def f(u):
            d = np.linalg.norm(u - centers, axis=1)
            vals = d - radii
            vmax = vals.max()
            w = np.exp((vals - vmax) / tau)
            sw = w.sum()
            fval = vmax + tau * np.log(sw)
            safe = np.maximum(d, 1e-300)
            grads = (u - centers) / safe[:, None]
            g = (w[:, None] * grads).sum(axis=0) / sw
            return fval, g
        return f

    u = np.asarray(u0, dtype=float).copy()
    for tau in (1e-1, 1e-3, 1e-5, 1e-7, 1e-9, 1e-11):
        res = minimize(make_f(tau), u, jac=True, method="L-BFGS-B",
                       options={"maxiter": 500, "ftol": 1e-18, "gtol": 1e-14})
        u = res.x
    return u


def check_feasible(balls) -> FeasibilityResult:
    """Decide whether the ball intersection is nonempty.

    Solves min_u max_i (||u - c_i|| - gamma_i); values <= -1e-9 give a
    strictly feasible witness, values >= +1e-9 a positive emptiness
    margin, and the band in between resolves as nonempty (boundary
    intersection).
    """
    balls = tuple(balls)
    if not balls:
        raise ValueError("at least one ball is required")

    if len(balls) == 1:
        b = balls[0]
        return FeasibilityResult(True, -b.radius, witness=b.center.copy())

    if len(balls) == 2:
        b1, b2 = balls
        gap = b1.center - b2.center
        d = float(np.linalg.norm(gap))
        value = 0.5 * (d - b1.radius - b2.radius)
        if d == 0.0:
            value = -min(b1.radius, b2.radius)
            witness = b1.center.copy()
        else:
            # point on the segment equalizing the two slacks
            t = 0.5 + (b1.radius - b2.radius) / (2.0 * d)
            witness = b1.center + np.clip(t, 0.0, 1.0) * (b2.center - b1.center)
        if value >= EMPTY_BAND:
            return FeasibilityResult(False, value, margin=value)
        return FeasibilityResult(True, value, witness=witness)

    # q >= 3: cheap witnesses first, then the smoothed minimax solve
    candidates = [b.center for b in balls]
    candidates.append(np.mean([b.center for b in balls], axis=0))
    best = min(candidates, key=lambda u: _minimax_value_at(u, balls))
    value = _minimax_value_at(best, balls)
    if value < -EMPTY_BAND:
        return FeasibilityResult(True, value, witness=np.asarray(best, float))
    u = _smoothed_minimax(balls, best)
    value = _minimax_value_at(u, balls)
    if value >= EMPTY_BAND:
        return FeasibilityResult(False, value, margin=value)
    return FeasibilityResult(True, value, witness=u)


# ---------------------------------------------------------------------------
# KKT residual
# ---------------------------------------------------------------------------

def kkt_residual(problem: QcqpProblem, u: Array, multipliers) -> float:
    """Max of the four KKT residuals: stationarity (normalized by
    1 + ||lin||), primal feasibility, dual feasibility, complementarity."""
    u = np.asarray(u, dtype=float).reshape(-1)
    mu = np.asarray(multipliers, dtype=float).reshape(-1)
    if u.size != problem.m or mu.size != len(problem.balls):
        raise DimensionMismatch("solution/multiplier dimensions do not match")
    grad = 2.0 * (problem.R @ u) + problem.lin
    primal = 0.0
    compl_res = 0.0
    for b, mi in zip(problem.balls, mu):
        diff = u - b.center
        grad = grad + 2.0 * mi * diff
        dist = float(np.linalg.norm(diff))
        primal = max(primal, dist - b.radius)
        compl_res = max(compl_res, abs(mi * (dist * dist - b.radius ** 2)))
    stat = float(np.linalg.norm(grad)) / (1.0 + float(np.linalg.norm(problem.lin)))
    dual = max(0.0, float(-mu.min())) if mu.size else 0.0
    return max(stat, max(primal, 0.0), dual, compl_res)


def _feas_violation(problem: QcqpProblem, u: Array) -> float:
    return max(max(float(np.linalg.norm(u - b.center)) - b.radius, 0.0)
               for b in problem.balls)


# ---------------------------------------------------------------------------
# solver internals
# ---------------------------------------------------------------------------

def _u_of_mu(problem: QcqpProblem, mu: Array) -> Array:
    sigma = float(mu.sum())
    rhs = -0.5 * problem.lin
    for b, mi in zip(problem.balls, mu):
        if mi != 0.0:
            rhs = rhs + mi * b.center
    return np.linalg.solve(problem.R + sigma * np.eye(problem.m), rhs)


def _dual_value_grad(problem: QcqpProblem, mu: Array) -> tuple[float, Array]:
    u = _u_of_mu(problem, mu)
    val = problem.objective(u)
    g = np.empty(len(problem.balls))
    for i, b in enumerate(problem.balls):
        diff = u - b.center
        g[i] = float(diff @ diff) - b.radius ** 2
        val += mu[i] * g[i]
    return val, g


def _single_ball_boundary(problem: QcqpProblem, ball: BallConstraint) -> tuple[Array, float]:
    """Solve min u^T R u + lin^T u on ||u - c|| = gamma via the scalar
    secular equation in the multiplier (trust-region style)."""
    w, V = np.linalg.eigh(problem.R)
    return secular_boundary(problem.R, w, V, problem.lin, ball.center,
                            ball.radius)


def secular_boundary(R: Array, w: Array, V: Array, lin: Array, c: Array,
                     gamma: float) -> tuple[Array, float]:
    """Single-ball boundary solve with a precomputed eigendecomposition
    of R (hot path of the per-step controller)."""
    # z = u - c solves (R + mu I) z = -(R c + lin/2)
    rhs = -(R @ c + 0.5 * lin)
    if gamma == 0.0:
        return c.copy(), 0.0
    if w[-1] - w[0] <= 1e-14 * w[-1]:
        # spherical weight: (r + mu) z = rhs has a closed form
        nr = float(np.linalg.norm(rhs))
        if nr <= gamma * w[0]:
            return c + rhs / w[0], 0.0
        mu = nr / gamma - float(w[0])
        return c + rhs * (gamma / nr), mu
    beta = V.T @ rhs

    def norm_z(mu):
        return float(np.sqrt(np.sum((beta / (w + mu)) ** 2)))

    # ||z(mu)|| decreases in mu; bracket then safeguarded Newton on
    # 1/||z|| - 1/gamma (monotone increasing, nearly linear in mu)
    lo = 0.0
    if norm_z(lo) <= gamma:
        return c + V @ (beta / w), 0.0
    hi = max(1.0, float(np.linalg.norm(rhs)) / gamma)
    while norm_z(hi) > gamma and hi < 1e18:
        hi *= 2.0
    mu = 0.5 * (lo + hi)
    for _ in range(300):
        nz = norm_z(mu)
        if abs(nz - gamma) <= 1e-14 * max(gamma, 1e-300):
            break
        if nz > gamma:
            lo = mu
        else:
            hi = mu
        denom = float(np.sum(beta ** 2 / (w + mu) ** 3))
        if denom > 0 and nz > 0:
            step = mu - (1.0 / nz - 1.0 / gamma) * nz ** 3 / denom
            mu = step if lo < step < hi else 0.5 * (lo + hi)
        else:
            mu = 0.5 * (lo + hi)
        if hi - lo <= 1e-17 * max(1.0, hi):
            break
    z = V @ (beta / (w + mu))
    nz = float(np.linalg.norm(z))
    if nz > 0:
        z *= gamma / nz
    return c + z, float(mu)


def _dykstra_project(point: Array, balls, max_iter: int = 2000,
                     tol: float = 1e-12) -> Array:
    """Dykstra's alternating projection onto the ball intersection."""
    x = np.asarray(point, dtype=float).copy()
    increments = [np.zeros_like(x) for _ in balls]
    for _ in range(max_iter):
        x_prev = x.copy()
        for i, b in enumerate(balls):
            y = x + increments[i]
            diff = y - b.center
            dist = float(np.linalg.norm(diff))
            proj = y if dist <= b.radius else b.center + diff * (b.radius / dist)
            increments[i] = y - proj
            x = proj
        if float(np.linalg.norm(x - x_prev)) <= tol * max(1.0, float(np.linalg.norm(x))):
            break
    return x


def _fallback_projected_gradient(problem: QcqpProblem) -> tuple[Array, Array, int]:
    """Projected gradient with Dykstra projection; multipliers recovered
    afterwards by nonnegative least squares on the stationarity balance."""
    R, lin = problem.R, problem.lin
    L = 2.0 * float(np.linalg.eigvalsh(R)[-1])
    step = 1.0 / L
    u = _dykstra_project(-0.5 * np.linalg.solve(R, lin), problem.balls)
    it = 0
    for it in range(FALLBACK_MAX_ITER):
        grad = 2.0 * (R @ u) + lin
        u_next = _dykstra_project(u - step * grad, problem.balls)
        if float(np.linalg.norm(u_next - u)) <= 1e-14 * max(1.0, float(np.linalg.norm(u))):
            u = u_next
            break
        u = u_next
    # 2 R u + lin + sum 2 mu_i (u - c_i) = 0  =>  solve for mu >= 0
    Acols = np.stack([2.0 * (u - b.center) for b in problem.balls], axis=1)
    rhs = -(2.0 * (R @ u) + lin)
    mu, _ = nnls(Acols, rhs)
    return u, mu, it + 1


def _active_set_polish(problem: QcqpProblem, u: Array, mu: Array,
                       active: tuple[int, ...]) -> tuple[Array, Array] | None:
    """Newton solve of stationarity plus the active-ball equalities."""
    m = problem.m
    balls = problem.balls
    na = len(active)
    mu_full = np.zeros(len(balls))
    z = np.concatenate([u, [max(mu[i], 0.0) for i in active]])
    for _ in range(100):
        uu = z[:m]
        mus = z[m:]
        Ftop = 2.0 * (problem.R @ uu) + problem.lin
        sigma = 0.0
        for a, mi in zip(active, mus):
            Ftop = Ftop + 2.0 * mi * (uu - balls[a].center)
            sigma += mi
        Fbot = np.array([float((uu - balls[a].center) @ (uu - balls[a].center))
                         - balls[a].radius ** 2 for a in active])
        Fz = np.concatenate([Ftop, Fbot])
        if float(np.linalg.norm(Fz)) < 1e-14 * (1.0 + float(np.linalg.norm(problem.lin))):
            break
        J = np.zeros((m + na, m + na))
        J[:m, :m] = 2.0 * problem.R + 2.0 * sigma * np.eye(m)
        for idx, a in enumerate(active):
            J[:m, m + idx] = 2.0 * (uu - balls[a].center)
            J[m + idx, :m] = 2.0 * (uu - balls[a].center)
        try:
            dz = np.linalg.solve(J, -Fz)
        except np.linalg.LinAlgError:
            return None
        z = z + dz
        if not np.isfinite(z).all():
            return None
    uu = z[:m]
    mus = z[m:]
    if mus.size and mus.min() < -1e-10:
        return None
    for idx, a in enumerate(active):
        mu_full[a] = max(float(mus[idx]), 0.0)
    return uu, mu_full


# ---------------------------------------------------------------------------
# main solve
# ---------------------------------------------------------------------------

def solve(problem: QcqpProblem, warm_start: Array | None = None) -> QcqpSolution:
    """Solve the ball-constrained program to the stated KKT tolerances.

    Raises Infeasible when the intersection is certified empty, and
    MaxIterations (with the best iterate attached) when neither the dual
    ascent nor the Dykstra fallback reaches tolerance.
    """
    balls = problem.balls
    q = len(balls)
    m = problem.m

    # interior optimum short-circuit
    u_free = -0.5 * np.linalg.solve(problem.R, problem.lin)
    if all(float(np.linalg.norm(u_free - b.center)) <= b.radius + FEAS_TOL
           for b in balls):
        mu = np.zeros(q)
        return QcqpSolution(u=u_free, multipliers=mu,
                            kkt_residual=kkt_residual(problem, u_free, mu),
                            feasibility_violation=_feas_violation(problem, u_free),
                            iterations=0, method="interior")

    feas = check_feasible(balls)
    if not feas.nonempty:
        raise Infeasible(feas.margin)

    # single active ball: relaxations that stay feasible are optimal
    for i, b in enumerate(balls):
        u_b, mu_b = _single_ball_boundary(problem, b)
        if all(j == i or float(np.linalg.norm(u_b - bj.center)) <= bj.radius + FEAS_TOL
               for j, bj in enumerate(balls)):
            mu = np.zeros(q)
            mu[i] = mu_b
            res = kkt_residual(problem, u_b, mu)
            fv = _feas_violation(problem, u_b)
            if res <= KKT_TOL and fv <= FEAS_TOL:
                return QcqpSolution(u=u_b, multipliers=mu, kkt_residual=res,
                                    feasibility_violation=fv,
                                    iterations=0, method="secular")

    # dual ascent (L-BFGS-B on the negated dual) from the warm start
    mu0 = np.zeros(q)
    if warm_start is not None and np.asarray(warm_start).size == q:
        mu0 = np.maximum(np.asarray(warm_start, dtype=float), 0.0)

    def neg_dual(mu):
        val, g = _dual_value_grad(problem, mu)
        return -val, -g

    best: QcqpSolution | None = None
    res = minimize(neg_dual, mu0, jac=True, method="L-BFGS-B",
                   bounds=[(0.0, None)] * q,
                   options={"maxiter": DUAL_MAX_ITER, "ftol": 1e-18,
                            "gtol": 1e-14, "maxcor": 20})
    mu = np.maximum(res.x, 0.0)
    u = _u_of_mu(problem, mu)
    r = kkt_residual(problem, u, mu)
    best = QcqpSolution(u=u, multipliers=mu, kkt_residual=r,
                        feasibility_violation=_feas_violation(problem, u),
                        iterations=int(res.nit), method="dual")
    if r <= KKT_TOL and best.feasibility_violation <= FEAS_TOL:
        return best

    # Newton polish on the active set suggested by the dual iterate
    dist = np.array([float(np.linalg.norm(u - b.center)) - b.radius for b in balls])
    order = np.argsort(-(mu + np.maximum(dist, 0.0)))
    suggested = [i for i in order if mu[i] > 1e-12 or dist[i] > -1e-10]
    subsets = []
    if suggested:
        subsets.append(tuple(sorted(suggested)))
    for size in range(1, q + 1):
        for combo in itertools.combinations(range(q), size):
            if combo not in subsets:
                subsets.append(combo)
    for active in subsets:
        polished = _active_set_polish(problem, u, mu, active)
        if polished is None:
            continue
        uu, mus = polished
        r2 = kkt_residual(problem, uu, mus)
        fv = _feas_violation(problem, uu)
        if r2 <= KKT_TOL and fv <= FEAS_TOL:
            return QcqpSolution(u=uu, multipliers=mus, kkt_residual=r2,
                                feasibility_violation=fv,
                                iterations=best.iterations, method="dual+polish")
        if r2 < best.kkt_residual and fv <= FEAS_TOL:
            best = QcqpSolution(u=uu, multipliers=mus, kkt_residual=r2,
                                feasibility_violation=fv,
                                iterations=best.iterations, method="dual+polish")

    # projected-gradient / Dykstra fallback
    u_fb, mu_fb, it_fb = _fallback_projected_gradient(problem)
    r_fb = kkt_residual(problem, u_fb, mu_fb)
    fv_fb = _feas_violation(problem, u_fb)
    if r_fb <= KKT_TOL and fv_fb <= FEAS_TOL:
        return QcqpSolution(u=u_fb, multipliers=mu_fb, kkt_residual=r_fb,
                            feasibility_violation=fv_fb,
                            iterations=it_fb, method="dykstra")
    if r_fb < best.kkt_residual:
        best = QcqpSolution(u=u_fb, multipliers=mu_fb, kkt_residual=r_fb,
                            feasibility_violation=fv_fb,
                            iterations=it_fb, method="dykstra")

    raise MaxIterations(
        f"QCQP solver stalled (best KKT residual {best.kkt_residual:.3e})",
        best=best, residuals={"kkt": best.kkt_residual,
                              "feasibility": best.feasibility_violation})
