"""Independent oracles for the exact and sample-based solvers.

Nothing here calls the solvers in :mod:`mvtsg.tabular`; the dense reference
evaluator uses the fundamental matrix ``Z = (I - P + 1 pi^T)^{-1}`` and an
SVD null-space for ``pi``, so agreement between the two paths is evidence
rather than tautology.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from . import mms
from .tabular import GameTables, TabularJointPolicy


@dataclass(frozen=True)
class OracleReport:
    name: str
    value: float
    oracle: float
    abs_err: float
    rel_err: float
    tol: float
    relative: bool
    passed: bool

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        kind = "rel" if self.relative else "abs"
        err = self.rel_err if self.relative else self.abs_err
        return f"[{flag}] {self.name}: value={self.value:.10g} oracle={self.oracle:.10g} {kind}_err={err:.3g} tol={self.tol:g}"


def report(name: str, value: float, oracle: float, tol: float, relative: bool = False,
           floor: float = 1e-12) -> OracleReport:
    """Build a report; relative errors use ``max(|oracle|, floor)`` as scale."""
    abs_err = abs(value - oracle)
    rel_err = abs_err / max(abs(oracle), floor)
    passed = bool((rel_err if relative else abs_err) <= tol)
    return OracleReport(name, float(value), float(oracle), abs_err, rel_err, tol, relative, passed)


def format_table(reports) -> str:
    return "\n".join(r.line() for r in reports)


def reports_to_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "value", "oracle", "abs_err", "rel_err", "tol", "relative", "passed"])
        for r in reports:
            w.writerow([r.name, f"{r.value:.10g}", f"{r.oracle:.10g}", f"{r.abs_err:.10g}",
                        f"{r.rel_err:.10g}", r.tol, int(r.relative), int(r.passed)])


# ---------------------------------------------------------------------------
# dense reference evaluator


def _dense_kernel(tables: GameTables, probs):
    S = tables.n_states
    mu = probs[0]
    for p in probs[1:]:
        mu = (mu[:, :, None] * p[:, None, :]).reshape(S, -1)
    T = tables.transition.toarray().reshape(S, tables.n_joint, S)
    return np.einsum("sa,sat->st", mu, T), mu, T


def _dense_pi(P: np.ndarray) -> np.ndarray:
    ns = scipy.linalg.null_space((P - np.eye(P.shape[0])).T)
    if ns.shape[1] != 1:
        raise ValueError(f"chain has {ns.shape[1]} stationary directions")
    pi = ns[:, 0] / ns[:, 0].sum()
    return pi


def reference_eval(tables: GameTables, probs, beta: Optional[float] = None) -> dict:
    """pi, eta, zeta, J, V_f, Q_f, A_f from dense linear algebra."""
    beta = tables.beta if beta is None else beta
    probs = [np.asarray(p, dtype=float) for p in probs]
    P, mu, T = _dense_kernel(tables, probs)
    S = P.shape[0]
    pi = _dense_pi(P)
    r = tables.reward
    eta = float(np.einsum("s,sa,sa->", pi, mu, r))
    zeta = float(np.einsum("s,sa,sa->", pi, mu, (r - eta) ** 2))
    J = eta - beta * zeta
    f = r - beta * (r - eta) ** 2
    c = (mu * f).sum(axis=1) - J
    Z = np.linalg.inv(np.eye(S) - P + np.outer(np.ones(S), pi))
    V = Z @ c
    V -= pi @ V
    Q = f - J + np.einsum("sat,t->sa", T, V)
    return dict(pi=pi, eta=eta, zeta=zeta, J=J, V=V, Q=Q, A=Q - V[:, None], mu=mu)


def objective(tables: GameTables, probs, beta: Optional[float] = None) -> float:
    return reference_eval(tables, probs, beta)["J"]


class FiniteDifferenceError(ValueError):
    pass


def fd_directional_derivative(tables: GameTables, policy: TabularJointPolicy, direction, h: float = 1e-5,
                              max_shrink: int = 8) -> float:
    """Central difference of J along a simplex-tangent ``direction``.

    ``h`` is shrunk tenfold (up to ``max_shrink`` times) while either probe
    leaves the non-negative orthant.
    """
    direction = [np.asarray(d, dtype=float) for d in direction]
    for d, m in zip(direction, tables.masks):
        if np.abs(d.sum(axis=1)).max() > 1e-12 or np.any(d[~m] != 0):
            raise FiniteDifferenceError("direction must be tangent to the feasible simplices")
    if all(not np.any(d) for d in direction):
        return 0.0
    for _ in range(max_shrink + 1):
        plus = [p + h * d for p, d in zip(policy.probs, direction)]
        minus = [p - h * d for p, d in zip(policy.probs, direction)]
        if min(x.min() for x in plus + minus) >= 0.0:
            return (objective(tables, plus) - objective(tables, minus)) / (2 * h)
        h /= 10.0
    raise FiniteDifferenceError("no feasible step along the direction")


def random_tangent(tables: GameTables, rng: np.random.Generator, policy: TabularJointPolicy,
                   pair: bool = True) -> list:
    """A feasible direction: ``e_a - e_a'`` in one (agent, state) row, or a dense tangent."""
    out = [np.zeros(m.shape) for m in tables.masks]
    if pair:
        for _ in range(1000):
            i = int(rng.integers(tables.n_agents))
            s = int(rng.integers(tables.n_states))
            feas = np.flatnonzero(tables.masks[i][s])
            if feas.size >= 2:
                a, b = rng.choice(feas, size=2, replace=False)
                out[i][s, a], out[i][s, b] = 1.0, -1.0
                return out
        raise ValueError("no state with two feasible actions")
    for i, m in enumerate(tables.masks):
        d = rng.normal(size=m.shape) * m
        d -= m * (d.sum(axis=1, keepdims=True) / m.sum(axis=1, keepdims=True))
        out[i] = d
    return out


def directional(gradient, direction) -> float:
    return float(sum((g * d).sum() for g, d in zip(gradient, direction)))


def enumerate_identity_check(tables: GameTables, policy_a: TabularJointPolicy, policy_b: TabularJointPolicy,
                             tol: float = 1e-9) -> OracleReport:
    """Mean-variance performance difference identity evaluated densely."""
    if tables.n_states > 500:
        raise ValueError("identity check is limited to 500 states")
    ra = reference_eval(tables, policy_a.probs)
    rb = reference_eval(tables, policy_b.probs)
    lhs = rb["J"] - ra["J"]
    rhs = float(np.einsum("s,sa,sa->", rb["pi"], rb["mu"], ra["A"])) + tables.beta * (rb["eta"] - ra["eta"]) ** 2
    return report("performance_difference", rhs, lhs, tol)


@dataclass(frozen=True)
class SeriesResult:
    v: np.ndarray
    converged: bool
    tail: float


def poisson_series_solve(tables: GameTables, policy: TabularJointPolicy, f, J: float, T: int = 10_000,
                         cesaro: bool = False, tol: float = 1e-10) -> SeriesResult:
    """Truncated bias series ``sum_{t<T} P^t (fbar - J)``, re-centred.

    With ``cesaro=True`` the partial sums are averaged, which also converges
    on periodic chains (at rate 1/T).  Non-convergence is reported through
    ``converged`` and the size of the last term.
    """
    P, mu, _ = _dense_kernel(tables, policy.probs)
    c = (mu * np.asarray(f)).sum(axis=1) - J
    term = c.copy()
    partial = np.zeros_like(c)
    running = np.zeros_like(c)
    for _ in range(T):
        partial += term
        running += partial
        term = P @ term
    v = running / T if cesaro else partial
    pi = _dense_pi(P)
    v = v - pi @ v
    tail = float(np.abs(term).max())
    converged = bool(cesaro or tail < tol)
    return SeriesResult(v, converged, tail)


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class McStats:
    eta: float
    zeta: float
    eta_se: float
    zeta_se: float
    steps: int


def idle_actor(scenario: mms.MmsScenario) -> Callable:
    ks = []
    for mg in scenario.microgrids:
        b0 = int(np.flatnonzero(np.abs(mg.storage.discharge_actions) < mms.SNAP_TOL)[0])
        ks.append(mms.action_index(mms.AgentAction(b0, 0), mg))
    ks = np.array(ks)
    return lambda env, u: np.broadcast_to(ks, (env.n_envs, ks.size)).copy()


def tabular_actor(policy: TabularJointPolicy) -> Callable:
    cdfs = [np.cumsum(p, axis=1) for p in policy.probs]

    def act(env, u):
        s = env.flat_index()
        return np.stack([
            np.minimum((u[:, i:i + 1] >= c[s]).sum(axis=1), c.shape[1] - 1) for i, c in enumerate(cdfs)
        ], axis=1)
    return act


def simulate(scenario: mms.MmsScenario, actor: Callable, n_chains: int, steps: int, seed: int,
             burn_in: int = 1000) -> np.ndarray:
    """Rewards ``(n_chains, steps)`` from independent streams after burn-in."""
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_chains)]
    env = mms.VectorMms(scenario, n_chains)
    env.reset(uniforms=np.stack([g.random(len(env.dims)) for g in streams]))
    N = scenario.n_agents
    out = np.empty((n_chains, steps))
    for t in range(burn_in + steps):
        u = np.stack([g.random(N + env.n_uniforms) for g in streams])
        a = actor(env, u[:, :N])
        m = env.masks()
        if not all(mi[np.arange(n_chains), a[:, i]].all() for i, mi in enumerate(m)):
            raise mms.InfeasibleActionError("actor produced an infeasible action")
        r = env.step(a, u[:, N:])
        if t >= burn_in:
            out[:, t - burn_in] = r
    return out


def mc_long_run_stats(scenario: mms.MmsScenario, policy, steps: int = 1_000_000, seed: int = 0,
                      n_chains: int = 64, burn_in: int = 1000) -> McStats:
    """Time-average mean and variance of exchange power with chain-wise standard errors.

    ``policy`` is ``"idle"``, a :class:`TabularJointPolicy` or an actor callable
    ``(env, uniforms) -> actions``.
    """
    if policy == "idle":
        actor = idle_actor(scenario)
    elif isinstance(policy, TabularJointPolicy):
        actor = tabular_actor(policy)
    else:
        actor = policy
    per_chain = max(1, math.ceil(steps / n_chains))
    r = simulate(scenario, actor, n_chains, per_chain, seed, burn_in)
    eta = float(r.mean())
    sq = (r - eta) ** 2
    zeta = float(sq.mean())
    k = r.shape[0]
    eta_se = float(r.mean(axis=1).std(ddof=1) / math.sqrt(k)) if k > 1 else float("nan")
    zeta_se = float(sq.mean(axis=1).std(ddof=1) / math.sqrt(k)) if k > 1 else float("nan")
    return McStats(eta, zeta, eta_se, zeta_se, r.size)


def joint_projection(theta_blocks, mask_blocks, max_iter: int = 10_000) -> list:
    """Projection onto a product of simplices by an active-set KKT solve over the whole vector.

    All (agent, state) rows are stacked into one vector ``y`` with block
    indicator ``B``; at each pass the equality-constrained problem
    ``min |x - y|^2, B_I x_I = 1`` is solved on the active set ``I`` and
    negative coordinates are dropped (Michelot's scheme), until none remain.
    """
    rows = [(t[s], m[s]) for t, m in zip(theta_blocks, mask_blocks) for s in range(t.shape[0])]
    y = np.concatenate([r[m] for r, m in rows])
    block = np.concatenate([np.full(int(m.sum()), n) for n, (_, m) in enumerate(rows)])
    nb = len(rows)
    active = np.ones(y.size, dtype=bool)
    x = np.zeros_like(y)
    for _ in range(max_iter):
        B = np.zeros((nb, y.size))
        B[block[active], np.flatnonzero(active)] = 1.0
        lam = np.linalg.solve(B @ B.T, B @ np.where(active, y, 0.0) - 1.0)
        x = np.where(active, y - B.T @ lam, 0.0)
        neg = active & (x < 0)
        if not neg.any():
            break
        active &= ~neg
    out, pos = [], 0
    for t, m in zip(theta_blocks, mask_blocks):
        o = np.zeros(t.shape)
        for s in range(t.shape[0]):
            n = int(m[s].sum())
            o[s, m[s]] = x[pos:pos + n]
            pos += n
        out.append(o)
    return out
