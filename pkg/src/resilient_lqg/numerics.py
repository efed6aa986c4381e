"""Shared numerical substrate: dense symmetric linear algebra, sparse
polynomial arithmetic (carrier for region descriptions and barrier
templates), and quadrature helpers.

Everything here is dense double precision with deterministic summation
order, so results are reproducible across platforms and worker counts.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (FactorizationFailure, NonConvergence, NonFinite,
                     VariableMismatch)

Array = np.ndarray


# ---------------------------------------------------------------------------
# symmetric matrices
# ---------------------------------------------------------------------------

def sym(M: Array) -> Array:
    """Symmetrize: (M + M.T) / 2."""
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class SymMatrix:
    """Dense symmetric matrix, symmetrized at construction."""
    data: Array

    def __post_init__(self):
        M = np.asarray(self.data, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise VariableMismatch(f"expected square matrix, got shape {M.shape}")
        object.__setattr__(self, "data", sym(M))

    @property
    def dim(self) -> int:
        return self.data.shape[0]


def sym_eig(M: Array) -> tuple[Array, Array]:
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues ascending, orthonormal eigenvectors as columns).
    The input is symmetrized before factorization.
    """
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise NonFinite("matrix contains non-finite entries")
    w, V = np.linalg.eigh(sym(M))
    return w, V


def min_eig_sym(M: Array) -> float:
    """Smallest eigenvalue of a symmetric matrix (closed form for n <= 2)."""
    n = M.shape[0]
    if n == 1:
        return float(M[0, 0])
    if n == 2:
        a = M[0, 0]
        c = M[1, 1]
        b = 0.5 * (M[0, 1] + M[1, 0])
        h = 0.5 * (a + c)
        r = np.hypot(0.5 * (a - c), b)
        return float(h - r)
    return float(np.linalg.eigvalsh(sym(M))[0])


def psd_project(M: Array) -> Array:
    """Project onto the PSD cone by clipping negative eigenvalues."""
    w, V = sym_eig(M)
    w = np.maximum(w, 0.0)
    return sym((V * w) @ V.T)


def sym_factor(Sigma: Array, tol: float = 1e-10) -> Array:
    """Symmetric factor N with N @ N.T == Sigma.

    Uses the symmetric eigendecomposition; eigenvalues below -tol raise
    FactorizationFailure, tiny negatives are clipped to zero.
    """
    w, V = sym_eig(Sigma)
    if w[0] < -tol:
        raise FactorizationFailure(
            f"covariance has eigenvalue {w[0]:.3e} < -{tol:.1e}")
    w = np.maximum(w, 0.0)
    N = (V * np.sqrt(w)) @ V.T
    return sym(N)


def spectral_norm(M: Array, tol: float = 1e-10, max_iter: int = 20000) -> float:
    """Largest singular value via power iteration on M.T @ M.

    Deterministic start vector; converges to `tol` relative change.
    """
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise NonFinite("matrix contains non-finite entries")
    if M.size == 0:
        return 0.0
    G = M.T @ M
    n = G.shape[0]
    v = np.ones(n) / np.sqrt(n)
    prev = 0.0
    for _ in range(max_iter):
        w = G @ v
        lam = float(v @ w)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(lam - prev) <= tol * max(1.0, abs(lam)):
            return float(np.sqrt(max(lam, 0.0)))
        prev = lam
    raise NonConvergence("power iteration did not converge")


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

def trapezoid_cumulative(values: Array, dt: float) -> Array:
    """Cumulative trapezoid integral of samples on a uniform grid.

    Returns an array of the same length; entry k is the integral up to
    grid point k (entry 0 is zero). Summation order is fixed.
    """
    values = np.asarray(values, dtype=float)
    out = np.empty_like(values)
    out[0] = 0.0
    np.cumsum(0.5 * dt * (values[1:] + values[:-1]), out=out[1:])
    return out


# ---------------------------------------------------------------------------
# polynomials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Poly:
    """Sparse multivariate polynomial over named variables.

    terms maps exponent tuples (one entry per variable) to coefficients;
    zero coefficients are never stored.
    """
    variables: tuple[str, ...]
    terms: dict[tuple[int, ...], float] = field(default_factory=dict)

    def __post_init__(self):
        nv = len(self.variables)
        clean = {}
        for expo, coeff in self.terms.items():
            expo = tuple(int(e) for e in expo)
            if len(expo) != nv:
                raise VariableMismatch(
                    f"exponent tuple {expo} does not match {nv} variables")
            c = float(coeff)
            if c != 0.0:
                clean[expo] = clean.get(expo, 0.0) + c
        object.__setattr__(self, "terms", {e: c for e, c in clean.items() if c != 0.0})

    # -- constructors -------------------------------------------------------
    @classmethod
    def zero(cls, variables) -> "Poly":
        return cls(tuple(variables), {})

    @classmethod
    def constant(cls, variables, value: float) -> "Poly":
        nv = len(tuple(variables))
        return cls(tuple(variables), {(0,) * nv: float(value)})

    @classmethod
    def variable(cls, variables, name: str) -> "Poly":
        variables = tuple(variables)
        idx = variables.index(name)
        expo = tuple(1 if i == idx else 0 for i in range(len(variables)))
        return cls(variables, {expo: 1.0})

    @classmethod
    def quadratic_form(cls, variables, M=None, b=None, c: float = 0.0) -> "Poly":
        """Build x^T M x + b^T x + c over the given variables."""
        variables = tuple(variables)
        n = len(variables)
        terms: dict[tuple[int, ...], float] = {}
        if c:
            terms[(0,) * n] = float(c)
        if b is not None:
            for i, bi in enumerate(np.asarray(b, dtype=float)):
                if bi != 0.0:
                    e = [0] * n
                    e[i] = 1
                    terms[tuple(e)] = terms.get(tuple(e), 0.0) + bi
        if M is not None:
            M = np.asarray(M, dtype=float)
            for i in range(n):
                for j in range(n):
                    if M[i, j] != 0.0:
                        e = [0] * n
                        e[i] += 1
                        e[j] += 1
                        key = tuple(e)
                        terms[key] = terms.get(key, 0.0) + M[i, j]
        return cls(variables, terms)

    # -- ring operations ----------------------------------------------------
    def _check(self, other: "Poly"):
        if self.variables != other.variables:
            raise VariableMismatch(
                f"variable lists differ: {self.variables} vs {other.variables}")

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = Poly.constant(self.variables, other)
        self._check(other)
        terms = dict(self.terms)
        for e, c in other.terms.items():
            terms[e] = terms.get(e, 0.0) + c
        return Poly(self.variables, terms)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = Poly.constant(self.variables, other)
        return self + other.scale(-1.0)

    def scale(self, a: float) -> "Poly":
        return Poly(self.variables, {e: a * c for e, c in self.terms.items()})

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.scale(float(other))
        self._check(other)
        terms: dict[tuple[int, ...], float] = {}
        for e1 in sorted(self.terms):
            c1 = self.terms[e1]
            for e2 in sorted(other.terms):
                key = tuple(a + b for a, b in zip(e1, e2))
                terms[key] = terms.get(key, 0.0) + c1 * other.terms[e2]
        return Poly(self.variables, terms)

    __rmul__ = __mul__

    # -- calculus / evaluation ----------------------------------------------
    def grad(self) -> list["Poly"]:
        out = []
        for i in range(len(self.variables)):
            terms: dict[tuple[int, ...], float] = {}
            for e, c in self.terms.items():
                if e[i] > 0:
                    de = list(e)
                    de[i] -= 1
                    terms[tuple(de)] = terms.get(tuple(de), 0.0) + c * e[i]
            out.append(Poly(self.variables, terms))
        return out

    def eval(self, x) -> float:
        """Evaluate at a point (deterministic term order)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != len(self.variables):
            raise VariableMismatch(
                f"point has dimension {x.shape[-1]}, "
                f"expected {len(self.variables)}")
        total = 0.0
        for e in sorted(self.terms):
            mono = 1.0
            for xi, ei in zip(x, e):
                for _ in range(ei):
                    mono *= xi
            total += self.terms[e] * mono
        return total

    def eval_many(self, X: Array) -> Array:
        """Vectorized evaluation over rows of X."""
        X = np.asarray(X, dtype=float)
        out = np.zeros(X.shape[0])
        for e in sorted(self.terms):
            mono = np.ones(X.shape[0])
            for i, ei in enumerate(e):
                if ei:
                    mono = mono * X[:, i] ** ei
            out += self.terms[e] * mono
        return out

    def degree(self) -> int:
        if not self.terms:
            return 0
        return max(sum(e) for e in self.terms)

    def substitute(self, name: str, value: float) -> "Poly":
        """Fix one variable to a numeric value; the variable is removed."""
        idx = self.variables.index(name)
        new_vars = self.variables[:idx] + self.variables[idx + 1:]
        terms: dict[tuple[int, ...], float] = {}
        for e, c in self.terms.items():
            coeff = c * (value ** e[idx])
            key = e[:idx] + e[idx + 1:]
            terms[key] = terms.get(key, 0.0) + coeff
        return Poly(new_vars, terms)

    def with_variables(self, variables) -> "Poly":
        """Re-express over a superset of variables, matching by name."""
        variables = tuple(variables)
        try:
            pos = [variables.index(v) for v in self.variables]
        except ValueError as exc:
            raise VariableMismatch(str(exc)) from exc
        nv = len(variables)
        terms = {}
        for e, c in self.terms.items():
            ne = [0] * nv
            for p, ei in zip(pos, e):
                ne[p] = ei
            terms[tuple(ne)] = c
        return Poly(variables, terms)

    def as_quadratic(self) -> tuple[Array, Array, float]:
        """Decompose a polynomial of degree <= 2 as (M, b, c) with
        p(x) = x^T M x + b^T x + c and M symmetric."""
        n = len(self.variables)
        M = np.zeros((n, n))
        b = np.zeros(n)
        c = 0.0
        for e, coeff in self.terms.items():
            d = sum(e)
            if d == 0:
                c = coeff
            elif d == 1:
                b[e.index(1)] = coeff
            elif d == 2:
                nz = [i for i, ei in enumerate(e) if ei]
                if len(nz) == 1:
                    M[nz[0], nz[0]] += coeff
                else:
                    M[nz[0], nz[1]] += 0.5 * coeff
                    M[nz[1], nz[0]] += 0.5 * coeff
            else:
                raise VariableMismatch("polynomial degree exceeds 2")
        return M, b, c

    # -- serialization -------------------------------------------------------
    def to_json(self) -> list[dict]:
        return [{"exponents": list(e), "coefficient": self.terms[e]}
                for e in sorted(self.terms)]

    @classmethod
    def from_json(cls, variables, data) -> "Poly":
        terms = {tuple(item["exponents"]): float(item["coefficient"])
                 for item in data}
        return cls(tuple(variables), terms)


def poly_mul(p: Poly, q: Poly) -> Poly:
    return p * q


def poly_grad(p: Poly) -> list[Poly]:
    return p.grad()


def poly_eval(p: Poly, x) -> float:
    return p.eval(x)


def state_variables(n: int, prefix: str = "x") -> tuple[str, ...]:
    return tuple(f"{prefix}{i + 1}" for i in range(n))
