"""Offline verification and parameter selection.

Builds the per-pattern extended systems (plant plus pattern estimator
under frozen steady-state gains), verifies safety and reachability with
quadratic barrier certificates reduced to semidefinite feasibility,
binary-searches the largest certified input-ball radius, selects the
radii and risk bounds jointly, and cross-checks every certificate by
Monte Carlo simulation of the certified envelope.

Two certification framings are supported:

* literal: the time-varying drift offset p(t) is over-approximated by a
  constant ball folded into the disturbance radius.  Sound but extremely
  conservative when the feedforward term is large.
* centered: when the unsafe and goal regions are Euclidean discs, the
  barrier is synthesized in deviation coordinates around the frozen-gain
  nominal trajectory.  The offset cancels exactly and the regions map to
  sound spherical bounds on the deviation; this is the framing the
  shipped case study certifies under.

Barrier conditions carry two numerically necessary generalizations over
the plain supermartingale form: a nonnegative drift allowance (the
initial-value budget pays for it over the horizon) and, for
reachability, a multiplier restricting the generator condition to the
time window.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import (FactorizationFailure, NoCertificateAtZero,
                     SolverNumericalFailure)
from .gains import (GainsBundle, build_gains, kbar, lambda_star,
                    steady_filter_gain)
from .model import ValidatedScenario, validate_scenario
from .numerics import Poly, spectral_norm, state_variables, sym, sym_factor

Array = np.ndarray

FACTOR_TOL = 1e-10
GRAM_PSD_TOL = 1e-9
RECON_TOL = 1e-7
STRICT_MARGIN = 1e-9


# ---------------------------------------------------------------------------
# extended system
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExtendedSystem:
    """Joint (plant, pattern estimator) dynamics with frozen gains.

    xbar' = Abar xbar + Bbar uhat + p(t) + Lambda xi, where uhat is the
    input deviation from the pattern's nominal input.
    """
    Abar: Array          # (2n, 2n)
    Bbar: Array          # (2n, m)
    Lambda: Array        # (2n, n + #sensors)
    p_t: Array           # (steps+1, 2n)
    xbar0: Array         # (2n,)
    pattern_index: int
    theta_inf: Array
    k_frozen: Array
    dt: float
    p_sup: float         # sup_t ||p(t)||
    bplus_norm: float    # ||Bbar^+||_2

    @property
    def nz(self) -> int:
        return self.Abar.shape[0]

    @property
    def m(self) -> int:
        return self.Bbar.shape[1]

    def fold_radius(self) -> float:
        """Disturbance inflation covering the drift offset by a constant
        ball (the literal framing)."""
        return self.bplus_norm * self.p_sup


def build_extended_system(scenario, pattern_i: int,
                          gains: GainsBundle) -> ExtendedSystem:
    """Assemble the extended-system blocks for one attack pattern with
    the steady-state filter gain and the t=0 backward-Riccati feedback."""
    sc = validate_scenario(scenario)
    sysm = sc.system
    n, m = sc.n, sc.m
    A, B = sysm.A, sysm.B
    C_i = sc.C_alpha[pattern_i]
    Sv_i = sc.Sigma_v_alpha[pattern_i]

    _, theta_inf = steady_filter_gain(sc, sc.cfg.patterns.patterns[pattern_i])
    K0 = gains.tracking.K[0]

    BK = 0.5 * (B @ K0)
    TC = theta_inf @ C_i
    Abar = np.block([[A, BK], [TC, A - TC + BK]])
    Bbar = np.vstack([B, B])

    N_w = sym_factor(sysm.sigma_w, FACTOR_TOL)
    N_v = sym_factor(Sv_i, FACTOR_TOL)
    if np.abs(N_w @ N_w.T - sysm.sigma_w).max() > FACTOR_TOL:
        raise FactorizationFailure("process-noise factor residual too large")
    if np.abs(N_v @ N_v.T - Sv_i).max() > FACTOR_TOL:
        raise FactorizationFailure("measurement-noise factor residual too large")
    s_i = C_i.shape[0]
    Lam = np.zeros((2 * n, n + s_i))
    Lam[:n, :n] = N_w
    Lam[n:, n:] = theta_inf @ N_v

    # p(t) = Bbar * (-1/2 R^{-1} B^T s(t)); feedforward already holds that m-vector
    p_top = gains.tracking.feedforward @ B.T          # (steps+1, n)
    p_t = np.hstack([p_top, p_top])
    xbar0 = np.concatenate([sysm.x0, sysm.x0])
    p_sup = float(np.linalg.norm(p_t, axis=1).max())
    bplus = np.linalg.pinv(Bbar)
    return ExtendedSystem(Abar=Abar, Bbar=Bbar, Lambda=Lam, p_t=p_t,
                          xbar0=xbar0, pattern_index=pattern_i,
                          theta_inf=theta_inf, k_frozen=K0, dt=sc.dt,
                          p_sup=p_sup, bplus_norm=spectral_norm(bplus))


def nominal_trajectory(ext: ExtendedSystem) -> Array:
    """Deterministic frozen-gain trajectory (uhat = 0, no noise)."""
    steps = ext.p_t.shape[0] - 1
    out = np.empty((steps + 1, ext.nz))
    x = ext.xbar0.copy()
    out[0] = x
    At = ext.Abar
    for k in range(steps):
        x = x + ext.dt * (At @ x + ext.p_t[k])
        out[k + 1] = x
    return out


# ---------------------------------------------------------------------------
# monomial bookkeeping for the SOS reduction
# ---------------------------------------------------------------------------

def monomials_upto(nv: int, active: tuple[int, ...], degree: int) -> list[tuple[int, ...]]:
    """Exponent tuples over nv variables, support restricted to `active`
    positions, total degree <= degree; graded lexicographic order."""
    out = []
    for d in range(degree + 1):
        for combo in itertools.combinations_with_replacement(active, d):
            e = [0] * nv
            for i in combo:
                e[i] += 1
            out.append(tuple(e))
    seen = set()
    uniq = []
    for e in out:
        if e not in seen:
            seen.add(e)
            uniq.append(e)
    return uniq


class LinPoly:
    """Polynomial whose coefficients are affine in SDP decision entries.

    terms: exponent tuple -> {key: weight}; key is ("blockname", i, j)
    for a Gram entry (i <= j) or None for the known constant part.
    """

    def __init__(self, nv: int):
        self.nv = nv
        self.terms: dict[tuple[int, ...], dict] = {}

    def add(self, expo, key, w: float):
        if w == 0.0:
            return
        row = self.terms.setdefault(tuple(expo), {})
        row[key] = row.get(key, 0.0) + w

    def add_known_poly(self, poly: dict, scale: float = 1.0):
        for e, c in poly.items():
            self.add(e, None, scale * c)

    def add_linpoly(self, other: "LinPoly", scale: float = 1.0):
        for e, row in other.terms.items():
            for key, w in row.items():
                self.add(e, key, scale * w)

    def mul_known(self, poly: dict) -> "LinPoly":
        out = LinPoly(self.nv)
        for e1, row in self.terms.items():
            for e2, c2 in poly.items():
                ee = tuple(a + b for a, b in zip(e1, e2))
                for key, w in row.items():
                    out.add(ee, key, w * c2)
        return out

    def diff(self, var_idx: int) -> "LinPoly":
        out = LinPoly(self.nv)
        for e, row in self.terms.items():
            if e[var_idx] > 0:
                de = list(e)
                de[var_idx] -= 1
                for key, w in row.items():
                    out.add(tuple(de), key, w * e[var_idx])
        return out

    def eval_keys(self, point) -> dict:
        """Collapse the variables at a numeric point; returns key -> weight."""
        out: dict = {}
        for e, row in self.terms.items():
            mono = 1.0
            for xi, ei in zip(point, e):
                mono *= xi ** ei
            if mono == 0.0:
                continue
            for key, w in row.items():
                out[key] = out.get(key, 0.0) + w * mono
        return out


def trim_gram_basis(basis: list[tuple[int, ...]],
                    support: set) -> list[tuple[int, ...]]:
    """Drop basis monomials whose Gram diagonal is structurally pinned to
    zero: if 2m is outside the target support and no other basis pair
    sums to 2m, any PSD Gram must zero m's whole row, so m is dead.
    Iterates to a fixed point."""
    alive = list(basis)
    changed = True
    while changed:
        changed = False
        for idx, m in enumerate(alive):
            mm = tuple(2 * e for e in m)
            if mm in support:
                continue
            has_alt = False
            for j in range(len(alive)):
                for k in range(j, len(alive)):
                    if j == idx and k == idx:
                        continue
                    if tuple(a + b for a, b in zip(alive[j], alive[k])) == mm:
                        has_alt = True
                        break
                if has_alt:
                    break
            if not has_alt:
                del alive[idx]
                changed = True
                break
    return alive


def gram_linpoly(nv: int, name: str, basis: list[tuple[int, ...]]) -> LinPoly:
    """m(x)^T Q m(x) as a LinPoly over the Gram entries of `name`."""
    lp = LinPoly(nv)
    for i in range(len(basis)):
        for j in range(i, len(basis)):
            ee = tuple(a + b for a, b in zip(basis[i], basis[j]))
            lp.add(ee, (name, i, j), 1.0 if i == j else 2.0)
    return lp


def reconstruct_poly(lp: LinPoly, values: dict, variables) -> Poly:
    """Numeric polynomial from a LinPoly and solved block values."""
    terms = {}
    for e, row in lp.terms.items():
        c = 0.0
        for key, w in row.items():
            if key is None:
                c += w
            else:
                name, i, j = key
                c += w * float(values[name][i, j])
        if c != 0.0:
            terms[e] = c
    return Poly(tuple(variables), terms)


# ---------------------------------------------------------------------------
# semidefinite feasibility backend
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SdpFeasible:
    blocks: dict
    margin: float
    strict: bool = True


@dataclass(frozen=True)
class SdpInfeasible:
    ray: Array | None
    margin_bound: float | None
    ray_residual: float | None = None


@dataclass(frozen=True)
class SdpNumerical:
    status: str


def sdp_feasibility(block_dims: dict, equalities, free_dim: int = 0,
                    solver_order=("CLARABEL", "SCS"), want_ray=None):
    """Find symmetric PSD blocks (plus optional free scalars) satisfying
    linear equalities.

    equalities: iterable of (terms, rhs) with terms a list of
    (block, i, j, weight) referencing entry (i, j) (i <= j) of a block;
    the pseudo-block "__free__" addresses entry (0, k) of the free
    scalar vector.

    The common minimum eigenvalue over the blocks is maximized.  A
    margin >= 1e-9 yields a strictly feasible SdpFeasible; a margin in
    [-1e-9, 1e-9) yields SdpFeasible with strict=False (identities whose
    top coefficients are structurally pinned admit only singular Gram
    matrices).  A certified negative margin yields SdpInfeasible carrying
    that dual bound; a Farkas improving ray is additionally searched for
    and verified when want_ray is true (default: only for small systems,
    the search cost grows quickly).  Anything else is SdpNumerical.
    """
    import cvxpy as cp

    if want_ray is None:
        want_ray = len(equalities) <= 60 and max(block_dims.values()) <= 8

    # normalize each row to unit max coefficient for conditioning
    scaled = []
    for terms, rhs in equalities:
        s = max([abs(w) for (_, _, _, w) in terms] + [abs(rhs), 1e-12])
        scaled.append(([(n, i, j, w / s) for (n, i, j, w) in terms], rhs / s))

    X = {name: cp.Variable((d, d), symmetric=True) if d > 1
         else cp.Variable((1, 1), symmetric=True)
         for name, d in block_dims.items()}
    free = cp.Variable(free_dim) if free_dim else None
    t = cp.Variable()
    cons = [t <= 1.0]
    for name, d in block_dims.items():
        cons.append(X[name] >> t * np.eye(d))
    eq_cons = []
    for terms, rhs in scaled:
        expr = 0
        for (name, i, j, w) in terms:
            if name == "__free__":
                expr = expr + w * free[j]
            else:
                expr = expr + w * X[name][i, j]
        eq_cons.append(expr == rhs)
    prob = cp.Problem(cp.Maximize(t), cons + eq_cons)

    # multiplier blocks are often structurally singular, putting the
    # margin optimum exactly at zero; a fast first pass decides the clear
    # cases, a tight second pass the band around zero
    passes = {
        "CLARABEL": ({"max_iter": 150},
                     {"max_iter": 400, "tol_gap_abs": 1e-12,
                      "tol_gap_rel": 1e-12, "tol_feas": 1e-12}),
        "SCS": ({"max_iters": 20_000},
                {"eps_abs": 1e-10, "eps_rel": 1e-10, "max_iters": 200_000}),
    }
    status = "unsolved"
    margin = None
    for solver in solver_order:
        first, tight = passes.get(solver, ({}, {}))
        try:
            prob.solve(solver=solver, **first)
        except cp.error.SolverError:
            continue
        status = prob.status
        if status in ("optimal", "optimal_inaccurate") and t.value is not None:
            margin = float(t.value)
            if -1e-5 < margin < STRICT_MARGIN or status == "optimal_inaccurate":
                try:
                    prob.solve(solver=solver, **tight)
                    if prob.status in ("optimal", "optimal_inaccurate") \
                            and t.value is not None:
                        status = prob.status
                        margin = float(t.value)
                except cp.error.SolverError:
                    pass
            break
        if status == "infeasible":
            break

    if margin is not None and status in ("optimal", "optimal_inaccurate"):
        if margin >= -GRAM_PSD_TOL:
            values = {name: sym(np.asarray(X[name].value))
                      for name in block_dims}
            if free is not None:
                values["__free__"] = np.asarray(free.value).reshape(1, -1)
            resid = _equality_residual(values, equalities)
            if resid > RECON_TOL:
                return SdpNumerical(f"equality residual {resid:.2e}")
            return SdpFeasible(blocks=values, margin=margin,
                               strict=margin >= STRICT_MARGIN)
        if status == "optimal_inaccurate" and margin > -1e-6:
            return SdpNumerical("inaccurate solve with ambiguous margin")
        ray, ray_resid = (_farkas_ray_search(block_dims, equalities, free_dim)
                          if want_ray else (None, None))
        return SdpInfeasible(ray=ray, margin_bound=margin,
                             ray_residual=ray_resid)
    if status == "infeasible":
        ray, ray_resid = _farkas_ray_search(block_dims, equalities, free_dim)
        if ray is None:
            return SdpNumerical("infeasible status without a verifiable ray")
        return SdpInfeasible(ray=ray, margin_bound=None, ray_residual=ray_resid)
    return SdpNumerical(status)


def _equality_residual(values: dict, equalities) -> float:
    worst = 0.0
    for terms, rhs in equalities:
        acc = -rhs
        scale = max(1.0, abs(rhs))
        for (name, i, j, w) in terms:
            acc += w * float(values[name][i, j])
            scale = max(scale, abs(w))
        worst = max(worst, abs(acc) / scale)
    return worst


def _ray_matrices(block_dims: dict, equalities, y: Array) -> dict:
    """S_b = sum_k y_k A_b^(k) as symmetric matrices (entries reference
    the upper triangle of a symmetric block)."""
    S = {name: np.zeros((d, d)) for name, d in block_dims.items()}
    for yk, (terms, _) in zip(y, equalities):
        for (name, i, j, w) in terms:
            if name == "__free__":
                continue
            if i == j:
                S[name][i, i] += yk * w
            else:
                S[name][i, j] += 0.5 * yk * w
                S[name][j, i] += 0.5 * yk * w
    return S


def _farkas_ray_search(block_dims: dict, equalities, free_dim: int = 0):
    """Search a Farkas ray directly: y with sum_k y_k A_b^(k) <= 0 for
    every block, y annihilating the free-variable columns, and
    y . rhs = 1; verified numerically before returning."""
    import cvxpy as cp

    ne = len(equalities)
    y = cp.Variable(ne)
    rhs = np.array([float(r) for _, r in equalities])
    cons = [y @ rhs == 1.0, cp.norm(y, "inf") <= 1e8]
    if free_dim:
        C_free = np.zeros((ne, free_dim))
        for k, (terms, _) in enumerate(equalities):
            for (name, i, j, w) in terms:
                if name == "__free__":
                    C_free[k, j] += w
        cons.append(y @ C_free == 0)
    for name, d in block_dims.items():
        rows = []
        for k, (terms, _) in enumerate(equalities):
            for (bname, i, j, w) in terms:
                if bname == name:
                    rows.append((k, i, j, w))
        if not rows:
            continue
        M = 0
        for (k, i, j, w) in rows:
            E = np.zeros((d, d))
            if i == j:
                E[i, i] = w
            else:
                E[i, j] = E[j, i] = 0.5 * w
            M = M + y[k] * E
        cons.append(-M >> 0)
    prob = cp.Problem(cp.Minimize(0), cons)
    status = None
    for solver in ("CLARABEL", "SCS"):
        try:
            prob.solve(solver=solver)
        except cp.error.SolverError:
            continue
        status = prob.status
        if status in ("optimal", "optimal_inaccurate"):
            break
    if status not in ("optimal", "optimal_inaccurate") or y.value is None:
        return None, None
    yv = np.asarray(y.value, dtype=float)
    S = _ray_matrices(block_dims, equalities, yv)
    resid = 0.0
    for name, M in S.items():
        w_eig = np.linalg.eigvalsh(sym(M))
        resid = max(resid, float(w_eig[-1]))
    if free_dim:
        resid = max(resid, float(np.abs(yv @ C_free).max()))
    scale = max(1.0, float(np.abs(yv).max()))
    if float(yv @ rhs) > 0.5 and resid <= RECON_TOL * scale:
        return yv, resid
    return None, None


# ---------------------------------------------------------------------------
# barrier certificates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CertificateInstance:
    """Everything needed to re-derive the SOS identities independently."""
    kind: str
    Abar: Array
    Bbar: Array
    Lambda: Array
    x0: Array
    region: Poly          # >= 0 on the (extended) unsafe set / goal complement
    radius: float         # effective disturbance radius (inflation included)
    eps: float
    horizon: float
    offset: Array


@dataclass(frozen=True)
class BarrierCertificate:
    kind: str             # "safety" | "reachability"
    D: Poly
    multiplier_region: Poly
    multiplier_D: Poly
    multiplier_time: Poly | None
    drift_allowance: float
    gram_matrices: dict
    gamma: float
    eps: float
    instance: CertificateInstance


def _safety_spec(inst: CertificateInstance):
    """Block dimensions, equalities and reconstruction data for the
    safety feasibility problem."""
    nz = inst.Abar.shape[0]
    m = inst.Bbar.shape[1]
    nv = nz + m
    zi = tuple(range(nz))
    ui = tuple(range(nz, nz + m))

    basis_D = monomials_upto(nv, zi, 1)
    basis_lU = monomials_upto(nv, zi, 1)
    basis_lD = monomials_upto(nv, zi + ui, 1)

    D = gram_linpoly(nv, "D", basis_D)
    lamU = gram_linpoly(nv, "lamU", basis_lU)
    lamD = gram_linpoly(nv, "lamD", basis_lD)

    g_unsafe = {e + (0,) * m: c for e, c in inst.region.terms.items()}

    # (15b): D - 1 - lamU*g_U == gramB
    lhs_b = LinPoly(nv)
    lhs_b.add_linpoly(D)
    lhs_b.add((0,) * nv, None, -1.0)
    lhs_b.add_linpoly(lamU.mul_known(g_unsafe), -1.0)
    basis_gB = trim_gram_basis(monomials_upto(nv, zi, 2),
                               set(lhs_b.terms.keys()))
    lhs_b.add_linpoly(gram_linpoly(nv, "gramB", basis_gB), -1.0)

    # generator of D along Abar z + Bbar u + offset, plus the noise term
    gen = LinPoly(nv)
    drift_cols = []
    for a in range(nz):
        col = {}
        for b in range(nz):
            if inst.Abar[a, b] != 0.0:
                e = [0] * nv
                e[b] = 1
                col[tuple(e)] = inst.Abar[a, b]
        for b in range(m):
            if inst.Bbar[a, b] != 0.0:
                e = [0] * nv
                e[nz + b] = 1
                col[tuple(e)] = inst.Bbar[a, b]
        if inst.offset[a] != 0.0:
            col[(0,) * nv] = col.get((0,) * nv, 0.0) + inst.offset[a]
        drift_cols.append(col)
    for a in range(nz):
        gen.add_linpoly(D.diff(a).mul_known(drift_cols[a]))
    LLt = inst.Lambda @ inst.Lambda.T
    for a in range(nz):
        Da = D.diff(a)
        for b in range(nz):
            if LLt[a, b] != 0.0:
                half = Da.diff(b)
                gen.add_linpoly(half, 0.5 * LLt[a, b])

    # g_s(u) = radius^2 - ||u||^2
    g_s = {(0,) * nv: inst.radius ** 2}
    for b in range(m):
        e = [0] * nv
        e[nz + b] = 2
        g_s[tuple(e)] = -1.0

    # (15d with drift allowance): -gen + zeta - lamD*g_s == gramT
    lhs_d = LinPoly(nv)
    lhs_d.add_linpoly(gen, -1.0)
    lhs_d.add((0,) * nv, ("zeta", 0, 0), 1.0)
    lhs_d.add_linpoly(lamD.mul_known(g_s), -1.0)
    basis_gT = trim_gram_basis(monomials_upto(nv, zi + ui, 2),
                               set(lhs_d.terms.keys()))
    lhs_d.add_linpoly(gram_linpoly(nv, "gramT", basis_gT), -1.0)

    blocks = {"D": len(basis_D), "lamU": len(basis_lU), "gramB": len(basis_gB),
              "lamD": len(basis_lD), "gramT": len(basis_gT),
              "a_init": 1, "zeta": 1}

    equalities = []
    for lp in (lhs_b, lhs_d):
        for e, row in sorted(lp.terms.items()):
            terms = [(name, i, j, w) for key, w in row.items()
                     if key is not None for (name, i, j) in [key]]
            const = row.get(None, 0.0)
            if terms or const != 0.0:
                equalities.append((terms, -const))

    # (15a): a_init == eps - D(x0) - zeta*T
    point = np.concatenate([inst.x0, np.zeros(m)])
    d_at_x0 = D.eval_keys(point)
    terms = [("a_init", 0, 0, 1.0)]
    for key, w in d_at_x0.items():
        name, i, j = key
        terms.append((name, i, j, w))
    terms.append(("zeta", 0, 0, inst.horizon))
    equalities.append((terms, inst.eps))

    meta = {"nv": nv, "vars": state_variables(nz, "z") + state_variables(m, "u"),
            "D": D, "lamU": lamU, "lamD": lamD}
    return blocks, equalities, 0, meta


def _reachability_spec(inst: CertificateInstance):
    """Feasibility problem for the time-augmented reachability barrier.

    The barrier's coefficients are free scalars: only its t = T slice
    must be nonnegative (the tail bound is a one-step Markov inequality
    at the horizon), which roughly doubles the certifiable disturbance
    budget compared with requiring the barrier to be SOS globally.
    """
    nz = inst.Abar.shape[0]
    m = inst.Bbar.shape[1]
    nv = nz + m + 1
    zi = tuple(range(nz))
    ui = tuple(range(nz, nz + m))
    ti = nz + m
    T = inst.horizon

    d_monos = monomials_upto(nv, zi + (ti,), 2)
    basis_lG = monomials_upto(nv, zi, 1)
    basis_lD = monomials_upto(nv, zi + ui + (ti,), 1)
    basis_lT = monomials_upto(nv, zi + ui + (ti,), 1)

    D = LinPoly(nv)
    for k, e in enumerate(d_monos):
        D.add(e, ("__free__", 0, k), 1.0)
    lamG = gram_linpoly(nv, "lamG", basis_lG)
    lamD = gram_linpoly(nv, "lamD", basis_lD)
    lamT = gram_linpoly(nv, "lamT", basis_lT)

    # complement of the goal: -g_goal >= 0
    g_comp = {e + (0,) * (m + 1): -c for e, c in inst.region.terms.items()}

    def at_final_time(lp):
        out = LinPoly(nv)
        for e, row in lp.terms.items():
            scale = T ** e[ti]
            ee = e[:ti] + (0,)
            for key, w in row.items():
                out.add(ee, key, w * scale)
        return out

    D_at_T = at_final_time(D)

    # (16c at t = T): D|_{t=T} == gramEnd  (nonnegativity of the slice)
    lhs_c = LinPoly(nv)
    lhs_c.add_linpoly(D_at_T)
    basis_gE = trim_gram_basis(monomials_upto(nv, zi, 1),
                               set(lhs_c.terms.keys()))
    lhs_c.add_linpoly(gram_linpoly(nv, "gramEnd", basis_gE), -1.0)

    # (16b at t = T): D|_{t=T} - 1 - lamG * g_comp == gramB
    lhs_b = LinPoly(nv)
    lhs_b.add_linpoly(D_at_T)
    lhs_b.add((0,) * nv, None, -1.0)
    lhs_b.add_linpoly(lamG.mul_known(g_comp), -1.0)
    basis_gB = trim_gram_basis(monomials_upto(nv, zi, 2),
                               set(lhs_b.terms.keys()))
    lhs_b.add_linpoly(gram_linpoly(nv, "gramB", basis_gB), -1.0)

    # generator with the explicit time derivative
    gen = LinPoly(nv)
    drift_cols = []
    for a in range(nz):
        col = {}
        for b in range(nz):
            if inst.Abar[a, b] != 0.0:
                e = [0] * nv
                e[b] = 1
                col[tuple(e)] = inst.Abar[a, b]
        for b in range(m):
            if inst.Bbar[a, b] != 0.0:
                e = [0] * nv
                e[nz + b] = 1
                col[tuple(e)] = inst.Bbar[a, b]
        if inst.offset[a] != 0.0:
            col[(0,) * nv] = col.get((0,) * nv, 0.0) + inst.offset[a]
        drift_cols.append(col)
    for a in range(nz):
        gen.add_linpoly(D.diff(a).mul_known(drift_cols[a]))
    gen.add_linpoly(D.diff(ti))
    LLt = inst.Lambda @ inst.Lambda.T
    for a in range(nz):
        Da = D.diff(a)
        for b in range(nz):
            if LLt[a, b] != 0.0:
                gen.add_linpoly(Da.diff(b), 0.5 * LLt[a, b])

    g_r = {(0,) * nv: inst.radius ** 2}
    for b in range(m):
        e = [0] * nv
        e[nz + b] = 2
        g_r[tuple(e)] = -1.0
    # time-window polynomial t (T - t) >= 0 on [0, T]
    e_t1 = [0] * nv
    e_t1[ti] = 1
    e_t2 = [0] * nv
    e_t2[ti] = 2
    g_time = {tuple(e_t1): T, tuple(e_t2): -1.0}

    # (16d): -gen - lamD*g_r - lamT*g_time == gramT
    lhs_d = LinPoly(nv)
    lhs_d.add_linpoly(gen, -1.0)
    lhs_d.add_linpoly(lamD.mul_known(g_r), -1.0)
    lhs_d.add_linpoly(lamT.mul_known(g_time), -1.0)
    basis_gT = trim_gram_basis(monomials_upto(nv, zi + ui + (ti,), 2),
                               set(lhs_d.terms.keys()))
    lhs_d.add_linpoly(gram_linpoly(nv, "gramT", basis_gT), -1.0)

    blocks = {"gramEnd": len(basis_gE), "lamG": len(basis_lG),
              "gramB": len(basis_gB), "lamD": len(basis_lD),
              "lamT": len(basis_lT), "gramT": len(basis_gT), "a_init": 1}

    equalities = []
    for lp in (lhs_c, lhs_b, lhs_d):
        for e, row in sorted(lp.terms.items()):
            terms = [(name, i, j, w) for key, w in row.items()
                     if key is not None for (name, i, j) in [key]]
            const = row.get(None, 0.0)
            if terms or const != 0.0:
                equalities.append((terms, -const))

    # (16a): a_init == eps - D(x0, t=0)
    point = np.concatenate([inst.x0, np.zeros(m + 1)])
    d_at = D.eval_keys(point)
    terms = [("a_init", 0, 0, 1.0)]
    for key, w in d_at.items():
        name, i, j = key
        terms.append((name, i, j, w))
    equalities.append((terms, inst.eps))

    meta = {"nv": nv,
            "vars": state_variables(nz, "z") + state_variables(m, "u") + ("t",),
            "D": D, "lamG": lamG, "lamD": lamD, "lamT": lamT}
    return blocks, equalities, len(d_monos), meta


def _certificate_from_solution(inst: CertificateInstance, meta, blocks_val,
                               gamma: float) -> BarrierCertificate:
    variables = meta["vars"]
    D = reconstruct_poly(meta["D"], blocks_val, variables)
    if inst.kind == "safety":
        mult_region = reconstruct_poly(meta["lamU"], blocks_val, variables)
        mult_time = None
        zeta = float(blocks_val["zeta"][0, 0])
    else:
        mult_region = reconstruct_poly(meta["lamG"], blocks_val, variables)
        mult_time = reconstruct_poly(meta["lamT"], blocks_val, variables)
        zeta = 0.0
    mult_D = reconstruct_poly(meta["lamD"], blocks_val, variables)
    return BarrierCertificate(
        kind=inst.kind, D=D, multiplier_region=mult_region,
        multiplier_D=mult_D, multiplier_time=mult_time,
        drift_allowance=zeta, gram_matrices=blocks_val,
        gamma=gamma, eps=inst.eps, instance=inst)


def verify_safety(ext: ExtendedSystem, gamma_s: float, eps_s: float,
                  unsafe_ext: Poly, *, x0_override: Array | None = None,
                  extra_radius: float | None = None) -> BarrierCertificate | None:
    """Search a quadratic barrier witnessing Pr(hit unsafe) <= eps_s when
    the input deviation stays within gamma_s.

    Returns the certificate, or None when the quadratic template class is
    certified infeasible; raises SolverNumericalFailure otherwise.
    """
    if gamma_s < 0:
        raise ValueError("gamma_s must be >= 0")
    inflation = ext.fold_radius() if extra_radius is None else float(extra_radius)
    x0 = ext.xbar0 if x0_override is None else np.asarray(x0_override, float)
    inst = CertificateInstance(
        kind="safety", Abar=ext.Abar, Bbar=ext.Bbar, Lambda=ext.Lambda,
        x0=x0, region=unsafe_ext, radius=gamma_s + inflation, eps=eps_s,
        horizon=(ext.p_t.shape[0] - 1) * ext.dt, offset=np.zeros(ext.nz))
    blocks, equalities, free_dim, meta = _safety_spec(inst)
    res = sdp_feasibility(blocks, equalities, free_dim)
    if isinstance(res, SdpFeasible):
        cert = _certificate_from_solution(inst, meta, res.blocks, gamma_s)
        resid = recheck_certificate(cert)
        if resid > RECON_TOL:
            raise SolverNumericalFailure(
                f"certificate reconstruction residual {resid:.2e}")
        return cert
    if isinstance(res, SdpInfeasible):
        return None
    raise SolverNumericalFailure(res.status)


def verify_reachability(ext: ExtendedSystem, gamma_r: float, eps_r: float,
                        goal_ext: Poly, T: float | None = None, *,
                        x0_override: Array | None = None,
                        extra_radius: float | None = None) -> BarrierCertificate | None:
    """Time-augmented barrier witnessing Pr(miss goal at T) <= eps_r."""
    if gamma_r < 0:
        raise ValueError("gamma_r must be >= 0")
    inflation = ext.fold_radius() if extra_radius is None else float(extra_radius)
    x0 = ext.xbar0 if x0_override is None else np.asarray(x0_override, float)
    horizon = (ext.p_t.shape[0] - 1) * ext.dt if T is None else float(T)
    inst = CertificateInstance(
        kind="reachability", Abar=ext.Abar, Bbar=ext.Bbar, Lambda=ext.Lambda,
        x0=x0, region=goal_ext, radius=gamma_r + inflation, eps=eps_r,
        horizon=horizon, offset=np.zeros(ext.nz))
    blocks, equalities, free_dim, meta = _reachability_spec(inst)
    res = sdp_feasibility(blocks, equalities, free_dim)
    if isinstance(res, SdpFeasible):
        cert = _certificate_from_solution(inst, meta, res.blocks, gamma_r)
        resid = recheck_certificate(cert)
        if resid > RECON_TOL:
            raise SolverNumericalFailure(
                f"certificate reconstruction residual {resid:.2e}")
        return cert
    if isinstance(res, SdpInfeasible):
        return None
    raise SolverNumericalFailure(res.status)


def recheck_certificate(cert: BarrierCertificate) -> float:
    """Re-derive every SOS identity from the returned Gram matrices by
    coefficient matching; returns the worst residual (no solver trust)."""
    inst = cert.instance
    if inst.kind == "safety":
        blocks, equalities, _, _ = _safety_spec(inst)
    else:
        blocks, equalities, _, _ = _reachability_spec(inst)
    worst = _equality_residual(cert.gram_matrices, equalities)
    for name, M in cert.gram_matrices.items():
        if name == "__free__":
            continue
        lo = float(np.linalg.eigvalsh(sym(M))[0])
        if lo < -GRAM_PSD_TOL:
            worst = max(worst, -lo)
    return worst


# ---------------------------------------------------------------------------
# centered case-study instance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CenteredInstance:
    """Deviation-coordinate certification data for disc-shaped regions."""
    ext: ExtendedSystem
    nominal: Array
    rho_unsafe: float
    rho_goal: float
    unsafe_z: Poly       # ||z_x||^2 - rho_unsafe^2  (covers unsafe events)
    goal_z: Poly         # rho_goal^2 - ||z_x||^2    (inner goal subset)


def build_centered_instance(scenario, gains: GainsBundle,
                            pattern_i: int) -> CenteredInstance | None:
    """Center the extended system on its frozen-gain nominal trajectory.

    Requires disc-shaped unsafe and goal regions, a nominal that clears
    the unsafe disc, and a nominal endpoint strictly inside the goal;
    returns None when any of those fail (callers fall back to the
    literal offset fold)."""
    sc = validate_scenario(scenario)
    u_ball = sc.cfg.unsafe.ball_parameters()
    g_ball = sc.cfg.goal.ball_parameters()
    if u_ball is None or g_ball is None:
        return None
    ext = build_extended_system(sc, pattern_i, gains)
    nom = nominal_trajectory(ext)
    n = sc.n
    cu, ru = u_ball
    cg, rg = g_ball
    dist_u = np.linalg.norm(nom[:, :n] - cu, axis=1) - ru
    rho_unsafe = float(dist_u.min())
    rho_goal = float(rg - np.linalg.norm(nom[-1, :n] - cg))
    if rho_unsafe <= 0 or rho_goal <= 0:
        return None
    zvars = state_variables(ext.nz, "z")
    Mx = np.zeros((ext.nz, ext.nz))
    Mx[:n, :n] = np.eye(n)
    unsafe_z = Poly.quadratic_form(zvars, Mx, None, -rho_unsafe ** 2)
    goal_z = Poly.quadratic_form(zvars, -Mx, None, rho_goal ** 2)
    return CenteredInstance(ext=ext, nominal=nom, rho_unsafe=rho_unsafe,
                            rho_goal=rho_goal, unsafe_z=unsafe_z,
                            goal_z=goal_z)


def _lift_region(poly: Poly, nz: int) -> Poly:
    """Express a state-space region polynomial over the extended state."""
    zvars = state_variables(nz, "z")
    terms = {}
    for e, c in poly.terms.items():
        terms[tuple(e) + (0,) * (nz - len(e))] = c
    return Poly(zvars, terms)


# ---------------------------------------------------------------------------
# Algorithm 1: binary search on the certified radius
# ---------------------------------------------------------------------------

def bisect_largest_accepted(accept, gamma0: float, rho: float) -> float:
    """Largest accepted value on [0, gamma0] to width rho, assuming
    acceptance is downward closed; returns the known-accepted lower
    bracket (0.0 when nothing was accepted)."""
    if accept(gamma0):
        return gamma0
    lo, hi = 0.0, gamma0
    while hi - lo > rho:
        mid = 0.5 * (lo + hi)
        if accept(mid):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class RadiusSearchResult:
    gamma: float
    gamma_s: float
    gamma_r: float
    cert_s: BarrierCertificate
    cert_r: BarrierCertificate
    centered: bool


def barrier_binary_search(scenario, pattern_i: int, eps_s: float, eps_r: float,
                          gamma0: float = 1.0, rho: float | None = None,
                          gains: GainsBundle | None = None,
                          centered: CenteredInstance | None = None
                          ) -> RadiusSearchResult:
    """Binary search the largest certified gamma^s and gamma^r on
    [0, gamma0] to width rho each, then return min(gamma^s, gamma^r),
    re-verifying both certificates at the returned radius.

    Raises NoCertificateAtZero when even gamma = 0 cannot be certified.
    """
    sc = validate_scenario(scenario)
    if gains is None:
        gains = build_gains(sc)
    if rho is None:
        rho = 1e-3 * gamma0
    if min(eps_s, eps_r) <= STRICT_MARGIN and (
            np.abs(sc.system.sigma_w).max() > 0
            or np.abs(sc.system.sigma_v).max() > 0):
        # a zero risk budget is unachievable under Gaussian noise
        raise NoCertificateAtZero(
            f"pattern {pattern_i}: risk budget {min(eps_s, eps_r):.2g} is "
            "unachievable for a noisy system")
    if centered is None:
        centered = build_centered_instance(sc, gains, pattern_i)

    if centered is not None:
        ext = centered.ext
        z0 = np.zeros(ext.nz)
        extra = 0.0
        unsafe_poly = centered.unsafe_z
        goal_poly = centered.goal_z
    else:
        ext = build_extended_system(sc, pattern_i, gains)
        z0 = None
        extra = None
        unsafe_poly = _lift_region(sc.cfg.unsafe.g, ext.nz)
        goal_poly = _lift_region(sc.cfg.goal.g, ext.nz)

    def check_s(g):
        return verify_safety(ext, g, eps_s, unsafe_poly,
                             x0_override=z0, extra_radius=extra)

    def check_r(g):
        return verify_reachability(ext, g, eps_r, goal_poly,
                                   x0_override=z0, extra_radius=extra)

    def probe(check, g):
        """Boundary probes may be numerically undecidable; reject those
        (conservative direction for a maximization search)."""
        try:
            return check(g)
        except SolverNumericalFailure:
            return None

    gamma_s = bisect_largest_accepted(lambda g: probe(check_s, g) is not None,
                                      gamma0, rho)
    gamma_r = bisect_largest_accepted(lambda g: probe(check_r, g) is not None,
                                      gamma0, rho)
    gamma = min(gamma_s, gamma_r)
    cert_s = cert_r = None
    for _ in range(4):
        cert_s = probe(check_s, gamma)
        cert_r = probe(check_r, gamma) if cert_s is not None else None
        if cert_s is not None and cert_r is not None:
            break
        if gamma <= 0.0:
            break
        gamma = max(0.0, gamma - rho)
    if cert_s is None or cert_r is None:
        raise NoCertificateAtZero(
            f"pattern {pattern_i}: no certificate verified down to gamma = "
            f"{gamma:.3g} (eps_s={eps_s}, eps_r={eps_r})")
    return RadiusSearchResult(gamma=gamma, gamma_s=gamma_s, gamma_r=gamma_r,
                              cert_s=cert_s, cert_r=cert_r,
                              centered=centered is not None)


# ---------------------------------------------------------------------------
# Theorem-1 / Theorem-2 arithmetic
# ---------------------------------------------------------------------------

def eta_bound(lambda_i: float, lambda_ij: float, n: int, kbar_val: float,
              gamma_min: float) -> float:
    """Upper bound on the attack-free divergence-event probability:
    4 (lambda_i + lambda_ij) n Kbar^2 / gamma_min^2."""
    if gamma_min == 0.0:
        raise ZeroDivisionError("gamma_min must be positive")
    return 4.0 * (lambda_i + lambda_ij) * n * kbar_val * kbar_val \
        / (gamma_min * gamma_min)


def p0_lower_bound(p1_i: float, eta_row) -> tuple[float, float]:
    """P2 = max(0, 1 - sum eta) clamped to [0, 1]; P0 = P1 * P2."""
    s = 0.0
    for e in eta_row:
        s += float(e)
    p2 = min(1.0, max(0.0, 1.0 - s))
    return p2, p1_i * p2


@dataclass(frozen=True)
class RiskBounds:
    eta: Array            # (q, q), zero diagonal
    lambda_stars: Array   # (q,) per-pattern sup eigenvalue
    lambda_pairs: dict    # (i, j) -> sup eigenvalue of the pair filter
    kbar: float
    p1: Array
    p2_lower: Array
    p0_lower: Array


def compute_risk_bounds(scenario, gains: GainsBundle, gamma_min: float,
                        p1) -> RiskBounds:
    sc = validate_scenario(scenario)
    q = sc.q
    n = sc.n
    kb = kbar(gains.tracking)
    lam_i = np.array([lambda_star(gains.per_pattern[i]) for i in range(q)])
    lam_pairs = {pair: lambda_star(sched)
                 for pair, sched in gains.per_pair.items()}
    eta = np.zeros((q, q))
    for i in range(q):
        for j in range(q):
            if i == j:
                continue
            key = (i, j) if (i, j) in lam_pairs else (j, i)
            eta[i, j] = eta_bound(lam_i[i], lam_pairs[key], n, kb, gamma_min)
    p1 = np.asarray(p1, dtype=float)
    p2 = np.empty(q)
    p0 = np.empty(q)
    for i in range(q):
        p2[i], p0[i] = p0_lower_bound(p1[i], np.delete(eta[i], i))
    return RiskBounds(eta=eta, lambda_stars=lam_i, lambda_pairs=lam_pairs,
                      kbar=kb, p1=p1, p2_lower=p2, p0_lower=p0)


# ---------------------------------------------------------------------------
# Algorithm 4: joint radius / bound selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GammaSelectionResult:
    gammas: tuple[float, ...]
    gamma_min: float
    bounds: RiskBounds
    searches: tuple[RadiusSearchResult | None, ...]
    iterations: int


def gamma_selection(scenario, eps_s: float, eps_r: float, iter_times: int,
                    gains: GainsBundle | None = None,
                    gamma0: float = 1.0, rho: float | None = None,
                    search_fn=None) -> GammaSelectionResult | None:
    """Iteratively relax the per-pattern barrier targets until every
    combined lower bound P0 clears max(1 - eps_s, 1 - eps_r); None when
    iter_times relaxations are exhausted.

    search_fn(pattern_i, eps) -> RadiusSearchResult is injectable for
    stubbed tests; the default runs the barrier binary search.
    """
    sc = validate_scenario(scenario)
    if gains is None:
        gains = build_gains(sc)
    q = sc.q
    if iter_times < 1:
        raise ValueError("iter_times must be >= 1")
    eps_bar = max(1.0 - eps_s, 1.0 - eps_r)

    centered_cache: dict[int, CenteredInstance | None] = {}

    def default_search(i, eps):
        if i not in centered_cache:
            centered_cache[i] = build_centered_instance(sc, gains, i)
        return barrier_binary_search(sc, i, eps, eps, gamma0=gamma0, rho=rho,
                                     gains=gains, centered=centered_cache[i])

    search = search_fn or default_search

    p1_bar = np.ones(q)
    step = (1.0 - eps_bar) / iter_times
    gammas = np.zeros(q)
    searches: list[RadiusSearchResult | None] = [None] * q

    def run_search(i):
        eps = 1.0 - p1_bar[i]
        try:
            res = search(i, eps)
            searches[i] = res
            gammas[i] = res.gamma
        except NoCertificateAtZero:
            searches[i] = None
            gammas[i] = 0.0

    for i in range(q):
        run_search(i)

    def current_bounds():
        gmin = float(gammas.min())
        if gmin <= 0.0:
            return gmin, None
        return gmin, compute_risk_bounds(sc, gains, gmin, p1_bar)

    gamma_min, bounds = current_bounds()
    it = 1
    while it <= iter_times:
        i_min = int(np.argmin(gammas))
        p1_bar[i_min] = p1_bar[i_min] - step
        if p1_bar[i_min] < eps_bar - 1e-12:
            return None
        run_search(i_min)
        gamma_min, bounds = current_bounds()
        if bounds is not None and np.all(bounds.p0_lower >= eps_bar):
            return GammaSelectionResult(
                gammas=tuple(gammas), gamma_min=gamma_min, bounds=bounds,
                searches=tuple(searches), iterations=it)
        it += 1
    return None


# ---------------------------------------------------------------------------
# Monte Carlo cross-checks of the certified envelope
# ---------------------------------------------------------------------------

def default_uhat_strategies(m: int, gamma: float, count: int = 10):
    """Boundary adversary strategies for the input deviation: constant
    unit directions at ||uhat|| = gamma, one piecewise-random boundary
    strategy, and zero."""
    strategies = []
    n_const = max(count - 2, 1)
    for k in range(n_const):
        angle = 2.0 * np.pi * k / n_const
        d = np.zeros(m)
        d[0] = np.cos(angle)
        if m > 1:
            d[1] = np.sin(angle)
        strategies.append(("const", gamma * d))
    strategies.append(("piecewise", gamma))
    strategies.append(("zero", None))
    return strategies[:count]


def simulate_envelope(ext: ExtendedSystem, scenario, strategy, runs: int,
                      seed: int, D_eval=None, center: Array | None = None):
    """Euler-Maruyama batch simulation of the frozen-gain extended system
    in absolute coordinates, with the disturbance drawn per strategy.

    Returns (hit_unsafe, in_goal_at_T, D_means) where D_means is the
    per-step mean of D over runs (None unless D_eval is given)."""
    sc = validate_scenario(scenario)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(
        entropy=(int(seed), int(ext.pattern_index)))))
    steps = ext.p_t.shape[0] - 1
    dt = ext.dt
    nz, m = ext.nz, ext.m
    n = sc.n
    X = np.tile(ext.xbar0, (runs, 1))
    At = ext.Abar.T
    Bt = ext.Bbar.T
    Lt = ext.Lambda.T
    sq = np.sqrt(dt)
    kind, param = strategy

    hit = np.zeros(runs, dtype=bool)
    D_means = np.empty(steps + 1) if D_eval is not None else None
    if D_eval is not None:
        D_means[0] = float(np.mean(D_eval(X - (center[0] if center is not None else 0.0), 0.0)))

    resample_every = max(1, int(round(0.1 / dt)))
    uhat = np.zeros((runs, m))
    if kind == "const":
        uhat[:] = param
    for k in range(steps):
        if kind == "piecewise" and k % resample_every == 0:
            d = rng.standard_normal((runs, m))
            norms = np.linalg.norm(d, axis=1, keepdims=True)
            norms[norms == 0.0] = 1.0
            uhat = param * d / norms
        xi = rng.standard_normal((runs, ext.Lambda.shape[1]))
        X = X + dt * (X @ At + uhat @ Bt + ext.p_t[k]) + sq * (xi @ Lt)
        hit |= sc.cfg.unsafe.g.eval_many(X[:, :n]) >= 0.0
        if D_eval is not None:
            Z = X - center[k + 1] if center is not None else X
            D_means[k + 1] = float(np.mean(D_eval(Z, (k + 1) * dt)))
    in_goal = sc.cfg.goal.g.eval_many(X[:, :n]) >= 0.0
    return hit, in_goal, D_means


def mc_verify(scenario, pattern_i: int, gamma: float, strategies=None,
              runs: int = 500, seed: int = 0,
              gains: GainsBundle | None = None,
              ext: ExtendedSystem | None = None) -> dict:
    """Empirical violation / goal-miss frequencies of the certified
    envelope under boundary disturbance strategies, with binomial 95%
    confidence half-widths."""
    sc = validate_scenario(scenario)
    if ext is None:
        if gains is None:
            gains = build_gains(sc)
        ext = build_extended_system(sc, pattern_i, gains)
    if strategies is None:
        strategies = default_uhat_strategies(ext.m, gamma)
    out = {}
    z = 1.959963984540054
    for idx, strat in enumerate(strategies):
        hit, in_goal, _ = simulate_envelope(ext, sc, strat, runs, seed + idx)
        f_viol = float(np.mean(hit))
        f_miss = float(np.mean(~in_goal))
        ci_v = z * np.sqrt(f_viol * (1 - f_viol) / runs)
        ci_m = z * np.sqrt(f_miss * (1 - f_miss) / runs)
        name = strat[0] if strat[0] != "const" else f"const_{idx}"
        out[name] = {"violation": f_viol, "violation_ci": ci_v,
                     "goal_miss": f_miss, "goal_miss_ci": ci_m}
    return out


def divergence_event_frequency(scenario, gains: GainsBundle, gamma_min: float,
                               pair: tuple[int, int], runs: int = 500,
                               seed: int = 0) -> float:
    """Attack-free frequency of sup_t ||K(t)(xhat_i - xhat_{i,j})|| >
    gamma_min, simulated in estimator-error coordinates (input cancels)."""
    sc = validate_scenario(scenario)
    i, j = pair
    key = (i, j) if (i, j) in gains.per_pair else (j, i)
    sched_i = gains.per_pattern[i]
    sched_ij = gains.per_pair[key]
    sysm = sc.system
    n = sc.n
    dt = sc.dt
    steps = sc.steps
    Nw = sym_factor(sysm.sigma_w, FACTOR_TOL)
    Nv = sym_factor(sysm.sigma_v, FACTOR_TOL)
    kept_i = [s - 1 for s in sched_i.sensors]
    kept_ij = [s - 1 for s in sched_ij.sensors]
    C_i = sysm.C[kept_i, :]
    C_ij = sysm.C[kept_ij, :]
    A = sysm.A
    K = gains.tracking.K

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(
        entropy=(int(seed), i, j))))
    E_i = np.zeros((runs, n))
    E_ij = np.zeros((runs, n))
    fired = np.zeros(runs, dtype=bool)
    sq = np.sqrt(dt)
    for k in range(steps):
        w = rng.standard_normal((runs, n)) @ Nw.T
        v = rng.standard_normal((runs, sysm.p)) @ Nv.T
        Ti = sched_i.theta[k]
        Tij = sched_ij.theta[k]
        E_i = E_i + dt * (E_i @ (A - Ti @ C_i).T) \
            + sq * (v[:, kept_i] @ Ti.T) - sq * w
        E_ij = E_ij + dt * (E_ij @ (A - Tij @ C_ij).T) \
            + sq * (v[:, kept_ij] @ Tij.T) - sq * w
        diff = (E_i - E_ij) @ K[k + 1].T
        fired |= np.einsum("ij,ij->i", diff, diff) > gamma_min ** 2
    return float(np.mean(fired))
