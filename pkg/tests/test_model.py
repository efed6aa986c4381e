import json

import numpy as np
import pytest

from resilient_lqg.errors import (IndexOutOfRange, NotObservable, NotPSD,
                                  ReferenceViolatesRegions)
from resilient_lqg.model import (AttackPatternSet, Reference, Region,
                                 ScenarioConfig, SystemModel,
                                 case_study_config, cov_excluding,
                                 disc_region, region_contains, rows_excluding,
                                 scenario_from_json, scenario_to_json,
                                 validate_scenario)
from resilient_lqg.numerics import Poly

C_CASE = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])


def test_case_study_validates(case_study):
    sc = case_study
    assert sc.q == 2 and sc.p == 4 and sc.n == 2
    assert sc.kept == ((1, 3, 4), (1, 2, 3))
    assert sc.pairs == ((0, 1),)
    assert sc.kept_pair[(0, 1)] == (1, 3)


def test_validation_idempotent(case_study):
    assert validate_scenario(case_study) is case_study


def test_not_observable():
    cfg = case_study_config()
    # drop the x2 sensors entirely: pattern {3, 4} leaves x2 unobserved
    bad = ScenarioConfig(
        system=cfg.system,
        patterns=AttackPatternSet((frozenset({3, 4}),)),
        unsafe=cfg.unsafe, goal=cfg.goal, reference=cfg.reference,
        Q=cfg.Q, R=cfg.R, F=cfg.F, T=cfg.T,
        eps_s=cfg.eps_s, eps_r=cfg.eps_r, dt=cfg.dt)
    with pytest.raises(NotObservable) as ei:
        validate_scenario(bad)
    assert ei.value.which == 0


def test_not_psd():
    with pytest.raises(NotPSD):
        SystemModel(A=np.eye(2), B=np.eye(2), C=C_CASE,
                    sigma_w=np.eye(2),
                    sigma_v=np.diag([1.0, 1.0, 1.0, -1.0]),
                    x0=np.zeros(2))


def test_rows_excluding_case():
    out = rows_excluding(C_CASE, {2})
    assert out.shape == (3, 2)
    assert np.allclose(out, C_CASE[[0, 2, 3]])


def test_rows_excluding_identity_and_empty():
    assert np.allclose(rows_excluding(C_CASE, set()), C_CASE)
    out = rows_excluding(C_CASE, {1, 2, 3, 4})
    assert out.shape == (0, 2)
    with pytest.raises(IndexOutOfRange):
        rows_excluding(C_CASE, {5})


def test_rows_excluding_composition():
    # excluding a union equals sequential exclusion for disjoint subsets
    rng = np.random.default_rng(4)
    C = rng.standard_normal((6, 3))
    both = rows_excluding(C, {2, 5})
    # sequential: removing row 2 shifts row 5 to position 4 (1-based)
    seq = rows_excluding(rows_excluding(C, {2}), {4})
    assert np.allclose(both, seq)


def test_cov_excluding():
    S = np.arange(16, dtype=float).reshape(4, 4)
    out = cov_excluding(S, {2})
    assert out.shape == (3, 3)
    assert np.allclose(out, S[np.ix_([0, 2, 3], [0, 2, 3])])


def test_region_examples(case_study):
    unsafe = case_study.cfg.unsafe
    goal = case_study.cfg.goal
    assert region_contains(unsafe, (0.5, 0.0))
    # 0.2^2 - 0.25 - 0 < 0 by direct arithmetic
    assert 0.2 ** 2 - 0.25 - 0.0 < 0
    assert not region_contains(unsafe, (0.0, 0.0))
    assert region_contains(goal, (1.0, 0.0))
    assert goal.g.eval([1.0, 0.0]) == pytest.approx(0.04)


def test_region_ball_parameters():
    reg = disc_region("unsafe", (0.5, 0.0), 0.2)
    center, radius = reg.ball_parameters()
    assert np.allclose(center, [0.5, 0.0])
    assert radius == pytest.approx(0.2)
    # a non-spherical region reports None
    g = Poly(("x1", "x2"), {(2, 0): -1.0, (0, 2): -2.0, (0, 0): 1.0})
    assert Region("unsafe", g).ball_parameters() is None


def test_reference_violates_regions():
    cfg = case_study_config()
    # a reference running straight through the unsafe disc
    times = np.linspace(0.0, cfg.T, 101)
    vals = np.stack([times / cfg.T, np.zeros_like(times)], axis=1)
    bad_ref = Reference("table", cfg.T, times=times, values=vals)
    bad = ScenarioConfig(system=cfg.system, patterns=cfg.patterns,
                         unsafe=cfg.unsafe, goal=cfg.goal, reference=bad_ref,
                         Q=cfg.Q, R=cfg.R, F=cfg.F, T=cfg.T,
                         eps_s=cfg.eps_s, eps_r=cfg.eps_r, dt=cfg.dt)
    with pytest.raises(ReferenceViolatesRegions):
        validate_scenario(bad)


def test_serialization_roundtrip_bit_exact():
    cfg = case_study_config()
    payload = json.dumps(scenario_to_json(cfg))
    cfg2 = scenario_from_json(json.loads(payload))
    assert scenario_to_json(cfg) == scenario_to_json(cfg2)
    s1, s2 = cfg.system, cfg2.system
    for a, b in ((s1.A, s2.A), (s1.C, s2.C), (s1.sigma_v, s2.sigma_v)):
        assert np.array_equal(a, b)
    assert cfg2.patterns.patterns == cfg.patterns.patterns
    assert cfg2.unsafe.g.terms == cfg.unsafe.g.terms


def test_step_count_must_divide():
    with pytest.raises(ValueError):
        case_study_config(dt=3e-3, T=10.0)


def test_reference_parabola_endpoints(case_study):
    r = case_study.r_table
    assert np.allclose(r[0], [0.0, 0.0])
    assert np.allclose(r[-1], [1.0, 0.0])
    assert r[:, 1].max() == pytest.approx(1.0, abs=1e-6)
