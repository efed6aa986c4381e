"""Closed-loop stochastic simulation and case-study reproduction.

Euler-Maruyama plant integration on the shared grid, sensor-attack
adversaries, the filter bank (full sensor set, one filter per attack
pattern, one per pattern pair), cost and safety/reachability metrics,
Monte Carlo batching with counter-based per-run random streams, and the
four-controller comparison used by the case study.

Measurement noise is sampled as N_v zeta / sqrt(dt) so the discretized
innovations match the continuous-time gain schedules to first order.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import policy as policy_mod
from .errors import DimensionMismatch, NonFiniteState
from .gains import GainsBundle, build_gains
from .model import ValidatedScenario, validate_scenario
from .numerics import sym_factor, trapezoid_cumulative

Array = np.ndarray


def run_rng(seed: int, run_index: int = 0) -> np.random.Generator:
    """Counter-based stream for one run; independent of worker layout."""
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=(int(seed), int(run_index)))))


# ---------------------------------------------------------------------------
# adversaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdversaryStrategy:
    """False-data injection on a fixed sensor subset A*.

    kinds: none, constant (fixed vector), boundary_push (fixed magnitude,
    scheduled direction), custom (arbitrary script of time).
    """
    kind: str
    support: frozenset[int] = frozenset()
    vector: Array | None = None
    magnitude: float = 0.0
    direction_fn: object | None = None
    script: object | None = None

    def __post_init__(self):
        if self.kind not in ("none", "constant", "boundary_push", "custom"):
            raise ValueError(f"unknown adversary kind {self.kind!r}")
        if self.vector is not None:
            object.__setattr__(self, "vector",
                               np.asarray(self.vector, dtype=float))

    def signal(self, t: float, p: int) -> Array:
        if self.kind == "none":
            return np.zeros(p)
        if self.kind == "constant":
            a = self.vector
        elif self.kind == "boundary_push":
            d = np.asarray(self.direction_fn(t), dtype=float)
            n = np.linalg.norm(d)
            a = self.magnitude * d / n if n > 0 else np.zeros(p)
        else:
            a = np.asarray(self.script(t), dtype=float)
        if a.shape != (p,):
            raise DimensionMismatch(f"attack vector has shape {a.shape}")
        mask = np.zeros(p, dtype=bool)
        for s in self.support:
            mask[s - 1] = True
        if np.any(a[~mask] != 0.0):
            raise ValueError("attack signal has support outside A*")
        return a


def no_attack() -> AdversaryStrategy:
    return AdversaryStrategy(kind="none")


def constant_attack(vector, support) -> AdversaryStrategy:
    return AdversaryStrategy(kind="constant", support=frozenset(support),
                             vector=vector)


# ---------------------------------------------------------------------------
# simulation setup and controllers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimSetup:
    """Everything a run needs, precomputed once per scenario."""
    scenario: ValidatedScenario
    gains: GainsBundle
    N_w: Array
    N_v: Array
    kept_idx: tuple            # per pattern: 0-based sensor positions
    kept_pair_idx: dict
    pair_keys: tuple
    unsafe_quad: tuple | None = None   # (M, b, c) when the region is quadratic
    goal_quad: tuple | None = None

    @classmethod
    def build(cls, scenario, gains: GainsBundle | None = None) -> "SimSetup":
        sc = validate_scenario(scenario)
        if gains is None:
            gains = build_gains(sc)
        sysm = sc.system
        kept_idx = tuple(np.array([s - 1 for s in kept], dtype=int)
                         for kept in sc.kept)
        kept_pair_idx = {pair: np.array([s - 1 for s in sc.kept_pair[pair]],
                                        dtype=int)
                         for pair in sc.pairs}
        def quad(region):
            try:
                return region.g.as_quadratic()
            except Exception:
                return None

        return cls(scenario=sc, gains=gains,
                   N_w=sym_factor(sysm.sigma_w), N_v=sym_factor(sysm.sigma_v),
                   kept_idx=kept_idx, kept_pair_idx=kept_pair_idx,
                   pair_keys=tuple(sc.pairs),
                   unsafe_quad=quad(sc.cfg.unsafe), goal_quad=quad(sc.cfg.goal))


class FullLQGController:
    """Certainty-equivalent LQG on the full-sensor estimate."""
    name = "full"

    def fresh_state(self, setup: SimSetup):
        return None

    def compute(self, state, k, bank, setup: SimSetup):
        tr = setup.gains.tracking
        return 0.5 * (tr.K[k] @ bank.xhat_full) + tr.feedforward[k], state


class ExcludingLQGController:
    """LQG on the estimate that ignores one attack pattern's sensors."""

    def __init__(self, pattern_index: int):
        self.pattern_index = pattern_index
        self.name = f"excl_{pattern_index}"

    def fresh_state(self, setup: SimSetup):
        return None

    def compute(self, state, k, bank, setup: SimSetup):
        tr = setup.gains.tracking
        return (0.5 * (tr.K[k] @ bank.xhat_pattern[self.pattern_index])
                + tr.feedforward[k], state)


class ProposedController:
    """Ball-constrained QCQP policy with persistent constraint selection."""
    name = "proposed"

    def __init__(self, gammas):
        self.gammas = tuple(float(g) for g in gammas)

    def fresh_state(self, setup: SimSetup):
        if len(self.gammas) != setup.scenario.q:
            raise DimensionMismatch("one radius per attack pattern required")
        return (policy_mod.SelectionState.initial(self.gammas),
                policy_mod.PolicyRuntime.fresh())

    def compute(self, state, k, bank, setup: SimSetup):
        sel, runtime = state
        u, sel, _ = policy_mod.control_step(
            bank, sel, setup.gains.tracking, k,
            setup.scenario.cfg.R, setup.scenario.system.B, runtime)
        return u, (sel, runtime)


# ---------------------------------------------------------------------------
# traces and metrics
# ---------------------------------------------------------------------------

@dataclass
class SimTrace:
    times: Array
    x: Array
    y: Array
    a: Array
    u: Array
    xhat_full: Array
    xhat_pattern: Array          # (steps+1, q, n)
    xhat_pair: dict
    surviving: list
    running_cost: Array

    def rms_tracking_error(self, scenario, window: int | None = None) -> float:
        sc = validate_scenario(scenario)
        upto = self.x.shape[0] if window is None else min(window, self.x.shape[0])
        err = self.x[:upto] - sc.r_table[:upto]
        return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))


@dataclass(frozen=True)
class RunMetrics:
    total_cost: float
    safety_violated: bool
    first_violation_time: float | None
    reached_goal: bool
    rms_tracking_error: float


def cost(trace: SimTrace, scenario) -> float:
    """Trapezoidal quadrature of the tracking/input integrand plus the
    terminal penalty."""
    sc = validate_scenario(scenario)
    cfg = sc.cfg
    err = trace.x - sc.r_table
    integrand = (np.einsum("ki,ij,kj->k", err, cfg.Q, err)
                 + np.einsum("ki,ij,kj->k", trace.u, cfg.R, trace.u))
    total = float(trapezoid_cumulative(integrand, sc.dt)[-1])
    e_T = trace.x[-1] - sc.r_table[-1]
    return total + float(e_T @ (cfg.F @ e_T))


def simulate(scenario, controller, adversary: AdversaryStrategy, seed: int,
             setup: SimSetup | None = None, record: bool = True
             ) -> tuple[SimTrace | None, RunMetrics]:
    """One closed-loop run; deterministic given (seed, scenario,
    controller, adversary)."""
    if setup is None:
        setup = SimSetup.build(scenario)
    sc = setup.scenario
    sysm = sc.system
    n, m, p, q = sc.n, sc.m, sc.p, sc.q
    N = sc.steps
    dt = sc.dt
    sq = np.sqrt(dt)
    rng = run_rng(seed)

    A, B, C = sysm.A, sysm.B, sysm.C
    Nw, Nv = setup.N_w, setup.N_v
    g = setup.gains
    th_full = g.full.theta
    th_pat = [g.per_pattern[i].theta for i in range(q)]
    th_pair = {pair: g.per_pair[pair].theta for pair in setup.pair_keys}
    kept = setup.kept_idx
    kept_pair = setup.kept_pair_idx
    C_pat = [C[kept[i], :] for i in range(q)]
    C_pair = {pair: C[kept_pair[pair], :] for pair in setup.pair_keys}
    Q, R = sc.cfg.Q, sc.cfg.R
    r_table = sc.r_table
    goal_g = sc.cfg.goal.g
    if setup.unsafe_quad is not None:
        Mu, bu, cu = setup.unsafe_quad

        def in_unsafe(xv):
            return float(xv @ (Mu @ xv) + bu @ xv) + cu >= 0.0
    else:
        unsafe_g = sc.cfg.unsafe.g

        def in_unsafe(xv):
            return unsafe_g.eval(xv) >= 0.0

    static_attack = adversary.kind in ("none", "constant")
    a_static = adversary.signal(0.0, p) if static_attack else None

    x = sysm.x0.copy()
    bank = policy_mod.FilterBank.initial(sysm.x0, q, setup.pair_keys)
    xh_full = bank.xhat_full.copy()
    xh_pat = bank.xhat_pattern.copy()
    xh_pair = {pair: v.copy() for pair, v in bank.xhat_pair.items()}
    ctrl_state = controller.fresh_state(setup)

    if record:
        X = np.empty((N + 1, n))
        Y = np.empty((N + 1, p))
        Aa = np.empty((N + 1, p))
        U = np.empty((N + 1, m))
        XF = np.empty((N + 1, n))
        XP = np.empty((N + 1, q, n))
        XPair = {pair: np.empty((N + 1, n)) for pair in setup.pair_keys}
        surviving = []
    integrand = np.empty(N + 1)
    violated_at = None

    support_mask = np.zeros(p, dtype=bool)
    for s in adversary.support:
        support_mask[s - 1] = True

    for k in range(N + 1):
        t = k * dt
        if static_attack:
            a_k = a_static
        else:
            a_k = adversary.signal(t, p)
            assert not np.any(a_k[~support_mask] != 0.0)
        noise = rng.standard_normal(p + n)
        y_k = C @ x + (Nv @ noise[:p]) / sq + a_k

        bank = policy_mod.FilterBank(xhat_full=xh_full, xhat_pattern=xh_pat,
                                     xhat_pair=xh_pair)
        u_k, ctrl_state = controller.compute(ctrl_state, k, bank, setup)

        err = x - r_table[k]
        integrand[k] = float(err @ (Q @ err) + u_k @ (R @ u_k))
        if violated_at is None and in_unsafe(x):
            violated_at = t
        if record:
            X[k] = x
            Y[k] = y_k
            Aa[k] = a_k
            U[k] = u_k
            XF[k] = xh_full
            XP[k] = xh_pat
            for pair in setup.pair_keys:
                XPair[pair][k] = xh_pair[pair]
            surviving.append(ctrl_state[0].surviving
                             if isinstance(ctrl_state, tuple)
                             and isinstance(ctrl_state[0],
                                            policy_mod.SelectionState)
                             else None)
        if k == N:
            break

        Bu = B @ u_k
        innov_full = th_full[k] @ (y_k - C @ xh_full)
        xh_full = xh_full + dt * (A @ xh_full + Bu + innov_full)
        new_pat = xh_pat.copy()
        for i in range(q):
            yi = y_k[kept[i]]
            new_pat[i] = xh_pat[i] + dt * (A @ xh_pat[i] + Bu + th_pat[i][k]
                                           @ (yi - C_pat[i] @ xh_pat[i]))
        xh_pat = new_pat
        for pair in setup.pair_keys:
            yij = y_k[kept_pair[pair]]
            xh = xh_pair[pair]
            xh_pair[pair] = xh + dt * (A @ xh + Bu + th_pair[pair][k]
                                       @ (yij - C_pair[pair] @ xh))
        x = x + dt * (A @ x + Bu) + sq * (Nw @ noise[p:])
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(f"state diverged at step {k}")

    running = trapezoid_cumulative(integrand, dt)
    e_T = x - r_table[N]
    total = float(running[-1] + e_T @ (sc.cfg.F @ e_T))
    reached = goal_g.eval(x) >= 0.0
    trace = None
    if record:
        trace = SimTrace(times=sc.times.copy(), x=X, y=Y, a=Aa, u=U,
                         xhat_full=XF, xhat_pattern=XP, xhat_pair=XPair,
                         surviving=surviving, running_cost=running)
    err_all = (X - r_table) if record else None
    rms = (float(np.sqrt(np.mean(np.sum(err_all * err_all, axis=1))))
           if record else float("nan"))
    metrics = RunMetrics(total_cost=total,
                         safety_violated=violated_at is not None,
                         first_violation_time=violated_at,
                         reached_goal=bool(reached),
                         rms_tracking_error=rms)
    return trace, metrics


# ---------------------------------------------------------------------------
# Monte Carlo batching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MonteCarloStats:
    runs: int
    costs: Array
    safety_violations: Array
    reached: Array
    mean_cost: float
    cost_ci: float
    violation_freq: float
    violation_ci: float
    goal_freq: float
    goal_ci: float

    @classmethod
    def from_metrics(cls, metrics: list[RunMetrics]) -> "MonteCarloStats":
        z = 1.959963984540054
        costs = np.array([m.total_cost for m in metrics])
        viol = np.array([m.safety_violated for m in metrics], dtype=bool)
        reach = np.array([m.reached_goal for m in metrics], dtype=bool)
        runs = len(metrics)
        fv = float(np.mean(viol))
        fg = float(np.mean(reach))
        return cls(runs=runs, costs=costs, safety_violations=viol,
                   reached=reach, mean_cost=float(np.mean(costs)),
                   cost_ci=z * float(np.std(costs, ddof=1)) / np.sqrt(runs)
                   if runs > 1 else 0.0,
                   violation_freq=fv,
                   violation_ci=z * np.sqrt(fv * (1 - fv) / runs),
                   goal_freq=fg,
                   goal_ci=z * np.sqrt(fg * (1 - fg) / runs))


def _mc_worker(args):
    cfg_json, controller, adversary, seeds = args
    from .model import scenario_from_json
    setup = SimSetup.build(scenario_from_json(cfg_json))
    out = []
    for s in seeds:
        _, met = simulate(None, controller, adversary, s, setup=setup,
                          record=False)
        out.append(met)
    return out


def monte_carlo(scenario, controller, adversary: AdversaryStrategy,
                runs: int, seed: int, setup: SimSetup | None = None,
                workers: int = 1) -> MonteCarloStats:
    """Independent runs with per-run derived seeds seed+k; results are
    invariant to the worker count."""
    if setup is None:
        setup = SimSetup.build(scenario)
    seeds = [seed + k for k in range(runs)]
    if workers <= 1:
        metrics = [simulate(None, controller, adversary, s, setup=setup,
                            record=False)[1] for s in seeds]
    else:
        from .model import scenario_to_json
        cfg_json = scenario_to_json(setup.scenario.cfg)
        chunks = [seeds[i::workers] for i in range(workers)]
        ordered: dict[int, RunMetrics] = {}
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for chunk, res in zip(chunks, ex.map(
                    _mc_worker,
                    [(cfg_json, controller, adversary, c) for c in chunks])):
                for s, met in zip(chunk, res):
                    ordered[s] = met
        metrics = [ordered[s] for s in seeds]
    return MonteCarloStats.from_metrics(metrics)


# ---------------------------------------------------------------------------
# controller comparison (case-study figures)
# ---------------------------------------------------------------------------

@dataclass
class ComparisonResult:
    names: tuple[str, ...]
    stats: dict
    tracking_error_curves: dict      # name -> mean ||x - r|| per step
    log_cost_curves: dict            # name -> mean ln(running cost) per step
    sample_trajectories: dict        # name -> (steps+1, n) first-run path
    rms_window: dict                 # name -> per-run windowed RMS array
    window: int


def compare_controllers(scenario, controllers: dict, adversary,
                        runs: int, seed: int,
                        setup: SimSetup | None = None,
                        window: int = 500) -> ComparisonResult:
    """Run every controller on common random numbers and collect the
    comparison series: per-step tracking error, log running cost,
    representative trajectories, and windowed RMS per run."""
    if setup is None:
        setup = SimSetup.build(scenario)
    sc = setup.scenario
    names = tuple(controllers.keys())
    err_acc = {nm: np.zeros(sc.steps + 1) for nm in names}
    log_acc = {nm: np.zeros(sc.steps + 1) for nm in names}
    rms_win = {nm: np.zeros(runs) for nm in names}
    metrics_all = {nm: [] for nm in names}
    sample = {}
    eps_floor = 1e-300
    for r_i in range(runs):
        for nm in names:
            trace, met = simulate(None, controllers[nm], adversary,
                                  seed + r_i, setup=setup, record=True)
            err = np.linalg.norm(trace.x - sc.r_table, axis=1)
            err_acc[nm] += err
            log_acc[nm] += np.log(np.maximum(trace.running_cost, eps_floor))
            rms_win[nm][r_i] = trace.rms_tracking_error(sc, window)
            metrics_all[nm].append(met)
            if r_i == 0:
                sample[nm] = trace.x.copy()
    return ComparisonResult(
        names=names,
        stats={nm: MonteCarloStats.from_metrics(metrics_all[nm])
               for nm in names},
        tracking_error_curves={nm: err_acc[nm] / runs for nm in names},
        log_cost_curves={nm: log_acc[nm] / runs for nm in names},
        sample_trajectories=sample, rms_window=rms_win, window=window)


def full_lqg_batch_terminal(setup: SimSetup, runs: int, seed: int) -> Array:
    """Terminal plant states of `runs` attack-free full-LQG closed loops,
    integrated jointly (the loop is linear, so runs vectorize).

    Noise draws differ from per-run streams; this path exists for
    statistical checks over large batches, not for paired comparisons.
    """
    sc = setup.scenario
    sysm = sc.system
    n, m, p = sc.n, sc.m, sc.p
    N = sc.steps
    dt = sc.dt
    sq = np.sqrt(dt)
    rng = run_rng(seed, 0)
    A, B, C = sysm.A, sysm.B, sysm.C
    th = setup.gains.full.theta
    K = setup.gains.tracking.K
    ff = setup.gains.tracking.feedforward
    X = np.tile(sysm.x0, (runs, 1))
    XH = X.copy()
    NwT, NvT, CT, AT, BT = (setup.N_w.T, setup.N_v.T, C.T, A.T, B.T)
    for k in range(N):
        noise = rng.standard_normal((runs, p + n))
        Y = X @ CT + (noise[:, :p] @ NvT) / sq
        U = 0.5 * (XH @ K[k].T) + ff[k]
        innov = (Y - XH @ CT) @ th[k].T
        BU = U @ BT
        XH = XH + dt * (XH @ AT + BU + innov)
        X = X + dt * (X @ AT + BU) + sq * (noise[:, p:] @ NwT)
    return X


def case_study_controllers(setup: SimSetup, gammas) -> dict:
    ctrls = {"proposed": ProposedController(gammas),
             "full": FullLQGController()}
    for i in range(setup.scenario.q):
        c = ExcludingLQGController(i)
        ctrls[c.name] = c
    return ctrls
