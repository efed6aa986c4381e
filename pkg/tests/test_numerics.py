import numpy as np
import pytest

from resilient_lqg.errors import NonFinite, VariableMismatch
from resilient_lqg.numerics import (Poly, SymMatrix, poly_eval, poly_grad,
                                    poly_mul, psd_project, spectral_norm,
                                    sym_factor, sym_eig, trapezoid_cumulative)


def test_sym_eig_identity():
    w, V = sym_eig(np.eye(4))
    assert np.allclose(w, 1.0)
    assert np.allclose(V @ V.T, np.eye(4))


def test_sym_eig_diag():
    w, _ = sym_eig(np.diag([3.0, 1.0, 2.0]))
    assert np.allclose(w, [1.0, 2.0, 3.0])


def test_sym_eig_characteristic_poly_oracle():
    # roots of det(M - t I) computed independently at n = 3
    rng = np.random.default_rng(7)
    for _ in range(20):
        M = rng.standard_normal((3, 3))
        M = 0.5 * (M + M.T)
        w, _ = sym_eig(M)
        c2 = -np.trace(M)
        c1 = 0.5 * (np.trace(M) ** 2 - np.trace(M @ M))
        c0 = -np.linalg.det(M)
        roots = np.sort(np.roots([1.0, c2, c1, c0]).real)
        assert np.allclose(w, roots, atol=1e-8)


def test_sym_eig_reconstruction_bound():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 13))
        M = rng.standard_normal((n, n))
        M = 0.5 * (M + M.T)
        w, V = sym_eig(M)
        assert np.linalg.norm(M @ V - V * w, "fro") \
            <= 1e-10 * max(np.linalg.norm(M, "fro"), 1e-30)
        assert np.abs(V.T @ V - np.eye(n)).max() <= 1e-12


def test_sym_eig_nonfinite():
    with pytest.raises(NonFinite):
        sym_eig(np.array([[np.nan, 0.0], [0.0, 1.0]]))


def test_spectral_norm_identity_and_rank1():
    assert spectral_norm(np.eye(3)) == pytest.approx(1.0, abs=1e-12)
    u = np.array([1.0, 2.0, -2.0])
    assert spectral_norm(np.outer(u, u)) == pytest.approx(u @ u, rel=1e-10)


def test_spectral_norm_vs_eig_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        M = rng.standard_normal((rng.integers(1, 6), rng.integers(1, 6)))
        w, _ = sym_eig(M.T @ M)
        assert spectral_norm(M) == pytest.approx(np.sqrt(max(w[-1], 0.0)),
                                                 rel=1e-9, abs=1e-12)


def test_sym_factor_roundtrip():
    rng = np.random.default_rng(5)
    A = rng.standard_normal((4, 4))
    S = A @ A.T
    N = sym_factor(S)
    assert np.abs(N @ N.T - S).max() <= 1e-10 * max(1.0, np.abs(S).max())


def test_psd_project():
    M = np.diag([1.0, -0.5])
    P = psd_project(M)
    assert np.allclose(P, np.diag([1.0, 0.0]))


def test_sym_matrix_symmetrizes():
    S = SymMatrix(np.array([[1.0, 2.0], [0.0, 3.0]]))
    assert np.allclose(S.data, S.data.T)
    assert S.dim == 2


def test_trapezoid_constant_exact():
    vals = np.full(11, 3.0)
    out = trapezoid_cumulative(vals, 0.1)
    assert out[-1] == pytest.approx(3.0, abs=1e-15)
    assert out[0] == 0.0


def test_poly_square_example():
    x = Poly.variable(("x",), "x")
    p = (x + 1.0) * (x + 1.0)
    assert p.terms == {(2,): 1.0, (1,): 2.0, (0,): 1.0}


def test_poly_grad_quadratic_form():
    vars_ = ("x1", "x2")
    M = np.array([[2.0, 0.5], [0.5, 1.0]])
    p = Poly.quadratic_form(vars_, M)
    gx = poly_grad(p)
    # gradient of x^T M x is 2 M x: match coefficients
    for i in range(2):
        expect = {}
        for j in range(2):
            e = [0, 0]
            e[j] = 1
            expect[tuple(e)] = 2.0 * M[i, j]
        assert gx[i].terms == pytest.approx(expect)


def test_poly_mul_vs_naive_convolution():
    rng = np.random.default_rng(11)
    vars_ = ("x", "y")
    for _ in range(50):
        def random_poly():
            terms = {}
            for _ in range(rng.integers(1, 6)):
                e = (int(rng.integers(0, 3)), int(rng.integers(0, 3)))
                terms[e] = float(rng.standard_normal())
            return Poly(vars_, terms)
        p, q = random_poly(), random_poly()
        prod = poly_mul(p, q)
        naive = {}
        for e1, c1 in p.terms.items():
            for e2, c2 in q.terms.items():
                key = (e1[0] + e2[0], e1[1] + e2[1])
                naive[key] = naive.get(key, 0.0) + c1 * c2
        naive = {k: v for k, v in naive.items() if v != 0.0}
        assert set(prod.terms) == set(naive)
        for k in naive:
            assert prod.terms[k] == pytest.approx(naive[k], rel=1e-12)


def test_poly_ring_laws():
    rng = np.random.default_rng(13)
    vars_ = ("x", "y")
    def rand():
        return Poly(vars_, {(int(rng.integers(0, 2)), int(rng.integers(0, 2))):
                            float(rng.standard_normal()) for _ in range(3)})
    for _ in range(50):
        a, b, c = rand(), rand(), rand()
        lhs = (a * b) * c
        rhs = a * (b * c)
        pt = rng.standard_normal(2)
        assert lhs.eval(pt) == pytest.approx(rhs.eval(pt), rel=1e-12, abs=1e-12)
        d1 = a * (b + c)
        d2 = a * b + a * c
        assert d1.eval(pt) == pytest.approx(d2.eval(pt), rel=1e-12, abs=1e-12)


def test_poly_eval_and_mismatch():
    p = Poly(("x", "y"), {(2, 1): 3.0})
    assert poly_eval(p, [2.0, 5.0]) == pytest.approx(60.0)
    with pytest.raises(VariableMismatch):
        p.eval([1.0])


def test_poly_substitute_and_lift():
    p = Poly(("x", "t"), {(1, 1): 2.0, (0, 2): 1.0})
    q = p.substitute("t", 3.0)
    assert q.variables == ("x",)
    assert q.eval([4.0]) == pytest.approx(2.0 * 4.0 * 3.0 + 9.0)
    lifted = q.with_variables(("x", "z"))
    assert lifted.eval([4.0, 99.0]) == pytest.approx(q.eval([4.0]))


def test_as_quadratic_roundtrip():
    vars_ = ("x1", "x2", "x3")
    rng = np.random.default_rng(2)
    M = rng.standard_normal((3, 3))
    M = 0.5 * (M + M.T)
    b = rng.standard_normal(3)
    p = Poly.quadratic_form(vars_, M, b, 1.5)
    M2, b2, c2 = p.as_quadratic()
    assert np.allclose(M2, M)
    assert np.allclose(b2, b)
    assert c2 == pytest.approx(1.5)
