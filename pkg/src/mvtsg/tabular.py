"""Exact analysis of a finite mean-variance team stochastic game.

A game is materialised as :class:`GameTables`: per-agent local action grids
with feasibility masks, a joint reward table ``(S, A)`` and a sparse
transition matrix with one row per (state, joint action) pair.  Joint
actions are row-major over agents' local action grids.

Under a fixed joint policy the functions below compute the stationary
distribution, long-run mean ``eta``, variance ``zeta``, the objective
``J = eta - beta * zeta``, the surrogate reward ``f = r - beta (r - eta)^2``
and its average-reward value functions, advantages and the exact policy
gradient ``dJ/dtheta_{i,s,a_i} = pi(s) * Qbar_i(s, a_i)``.
"""

from __future__ import annotations

import csv
import dataclasses
import string
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.sparse.linalg import spsolve

from . import mms

DEFAULT_STATE_CAP = 200_000
DENSE_SOLVE_LIMIT = 5_000
STATIONARY_TOL = 1e-10
POISSON_TOL = 1e-9


class StateCapExceeded(ValueError):
    pass


class MultichainError(ValueError):
    """The policy-induced chain has more than one closed recurrent class."""

    def __init__(self, components):
        self.components = [np.asarray(c) for c in components]
        sizes = ", ".join(str(c.size) for c in self.components[:8])
        more = "" if len(self.components) <= 8 else ", ..."
        preview = "; ".join(
            "{" + ", ".join(map(str, c[:5])) + (", ..." if c.size > 5 else "") + "}"
            for c in self.components[:3]
        )
        super().__init__(
            f"induced chain is multichain: {len(self.components)} closed classes "
            f"(sizes {sizes}{more}); e.g. {preview}"
        )


@dataclass(frozen=True, eq=False)
class GameTables:
    action_counts: tuple
    masks: tuple          # per agent, bool (S, K_i)
    reward: np.ndarray    # (S, A); 0 at infeasible joint actions
    transition: sp.csr_matrix  # (S * A, S); empty rows at infeasible pairs
    beta: float = 0.0
    r_lo: float = 0.0
    r_hi: float = 0.0

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_agents(self) -> int:
        return len(self.action_counts)

    @property
    def n_joint(self) -> int:
        return self.reward.shape[1]

    @property
    def a_max(self) -> int:
        return max(self.action_counts)

    def joint_mask(self) -> np.ndarray:
        return _outer(self.masks).reshape(self.n_states, -1)

    def with_beta(self, beta: float) -> "GameTables":
        if beta < 0:
            raise ValueError("beta must be non-negative")
        return dataclasses.replace(self, beta=float(beta))

    def normalized(self) -> "GameTables":
        """Copy with rewards affinely mapped onto [0, 1] over feasible pairs."""
        span = self.r_hi - self.r_lo
        scale = 1.0 / span if span > 0 else 0.0
        r = np.where(self.joint_mask(), (self.reward - self.r_lo) * scale, 0.0)
        return dataclasses.replace(self, reward=r, r_lo=0.0, r_hi=1.0 if span > 0 else 0.0)

    def agent_action_sets(self, i: int, s: int) -> np.ndarray:
        return np.flatnonzero(self.masks[i][s])


def _outer(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Per-state outer product: (S, K_1), ..., (S, K_N) -> (S, K_1, ..., K_N)."""
    out = arrays[0]
    for x in arrays[1:]:
        out = out[..., None] * x.reshape((x.shape[0],) + (1,) * (out.ndim - 1) + (x.shape[1],))
    return out


def make_tables(P: np.ndarray, reward: np.ndarray, masks: Sequence[np.ndarray], beta: float = 0.0) -> GameTables:
    """Tables from a dense ``(S, A, S)`` kernel and ``(S, A)`` reward."""
    masks = tuple(np.asarray(m, dtype=bool) for m in masks)
    counts = tuple(m.shape[1] for m in masks)
    S, A = reward.shape
    if A != int(np.prod(counts)) or P.shape != (S, A, S):
        raise ValueError("shape mismatch between kernel, reward and action grids")
    jm = _outer(masks).reshape(S, A)
    if not np.all(jm.any(axis=1)):
        raise ValueError("every state needs at least one feasible joint action")
    P = np.where(jm[..., None], P, 0.0)
    sums = P.sum(axis=2)
    if np.any(np.abs(sums[jm] - 1.0) > 1e-12):
        raise ValueError("transition rows must sum to 1 at feasible pairs")
    r = np.where(jm, reward, 0.0)
    return GameTables(counts, masks, r, sp.csr_matrix(P.reshape(S * A, S)), float(beta),
                      float(r[jm].min()), float(r[jm].max()))


def random_tables(rng: np.random.Generator, n_states: int, action_counts=(2, 2), beta: float = 0.3,
                  density: float = 1.0, mask_prob: float = 0.0) -> GameTables:
    """Random game with reward in [0, 1]; ``density < 1`` sparsifies the kernel."""
    S, counts = n_states, tuple(action_counts)
    A = int(np.prod(counts))
    P = rng.random((S, A, S))
    if density < 1.0:
        keep = rng.random((S, A, S)) < density
        keep[np.arange(S), :, rng.integers(0, S, size=S)] = True
        P *= keep
    P /= P.sum(axis=2, keepdims=True)
    masks = []
    for k in counts:
        m = rng.random((S, k)) >= mask_prob
        m[np.arange(S), rng.integers(0, k, size=S)] = True
        masks.append(m)
    return make_tables(P, rng.random((S, A)), masks, beta)


def build_tables(scenario: mms.MmsScenario, max_states: int = DEFAULT_STATE_CAP) -> GameTables:
    """Enumerate states, feasible actions, rewards and transitions of a scenario."""
    S = scenario.n_states
    if S > max_states:
        raise StateCapExceeded(
            f"{scenario.name}: {S} joint states exceeds the tabular cap of {max_states}; "
            "use the sample-based trainer (train-ippo) for this scenario"
        )
    dims = scenario.state_dims
    states = np.arange(S)
    comps = np.unravel_index(states, dims)
    strides = np.array([int(np.prod(dims[j + 1:], dtype=np.int64)) for j in range(len(dims))])

    exo_pos, stor_pos, exo_mats = [], [], []
    per_agent = []  # (mask, reward, next storage offset) arrays of shape (S, K_i)
    pos = 0
    for mg in scenario.microgrids:
        G = np.zeros(S)
        D = np.zeros(S)
        if mg.wind is not None:
            G = mg.wind.levels[comps[pos]]
            exo_pos.append(pos)
            exo_mats.append(mg.wind.transition)
            pos += 1
        if mg.demand is not None:
            D = mg.demand.levels[comps[pos]]
            exo_pos.append(pos)
            exo_mats.append(mg.demand.transition)
            pos += 1
        st = mg.storage
        B = st.levels[comps[pos]]
        stor_pos.append(pos)
        step = st.levels[1] - st.levels[0] if st.levels.size > 1 else 1.0
        K = mg.n_actions
        mask = np.zeros((S, K), dtype=bool)
        rew = np.zeros((S, K))
        nxt = np.zeros((S, K), dtype=np.int64)
        for k in range(K):
            act = mms.action_from_index(k, mg)
            b = float(st.discharge_actions[act.b_idx])
            v = float(mg.curtail_grid[act.v_idx])
            Bn = B - b * st.dt
            idx = np.rint((Bn - st.b_min) / step).astype(np.int64)
            ok = (idx >= 0) & (idx < st.levels.size)
            ok &= np.abs(st.levels[np.clip(idx, 0, st.levels.size - 1)] - Bn) <= mms.SNAP_TOL
            ok &= (v <= G + mms.SNAP_TOL) & (-st.c_ch - mms.SNAP_TOL <= b) & (b <= st.c_dis + mms.SNAP_TOL)
            mask[:, k] = ok
            rew[:, k] = G - D + mms.ess_grid_flow(b, st.nu) - v
            nxt[:, k] = np.where(ok, idx, 0) * strides[pos]
        per_agent.append((mask, rew, nxt))
        pos += 1

    masks = tuple(m for m, _, _ in per_agent)
    counts = tuple(m.shape[1] for m in masks)
    A = int(np.prod(counts))

    reward = np.zeros((S,) + counts)
    stor_next = np.zeros((S,) + counts, dtype=np.int64)
    for i, (_, rew, nxt) in enumerate(per_agent):
        shape = (S,) + tuple(counts[i] if j == i else 1 for j in range(len(counts)))
        reward = reward + rew.reshape(shape)
        stor_next = stor_next + nxt.reshape(shape)
    jm = _outer(masks).reshape(S, A)
    reward = np.where(jm, reward.reshape(S, A), 0.0)
    stor_next = stor_next.reshape(S, A)

    # exogenous chain: Kronecker product of wind/demand chains in component order
    if exo_mats:
        Px = sp.csr_matrix(exo_mats[0])
        for M in exo_mats[1:]:
            Px = sp.kron(Px, sp.csr_matrix(M), format="csr")
        exo_dims = tuple(dims[j] for j in exo_pos)
        x_of_s = np.ravel_multi_index(tuple(comps[j] for j in exo_pos), exo_dims)
        x_comps = np.unravel_index(np.arange(Px.shape[0]), exo_dims)
        exo_offset = sum(x_comps[n] * strides[j] for n, j in enumerate(exo_pos))
    else:
        Px = sp.csr_matrix(np.ones((1, 1)))
        x_of_s = np.zeros(S, dtype=np.int64)
        exo_offset = np.zeros(1, dtype=np.int64)
    Px.eliminate_zeros()

    rows_s, rows_a = np.nonzero(jm)
    x = x_of_s[rows_s]
    nnz = np.diff(Px.indptr)[x]
    starts = np.repeat(Px.indptr[x], nnz)
    within = np.arange(nnz.sum()) - np.repeat(np.cumsum(nnz) - nnz, nnz)
    entry = starts + within
    cols = exo_offset[Px.indices[entry]] + np.repeat(stor_next[rows_s, rows_a], nnz)
    data = Px.data[entry]
    row_ids = np.repeat(rows_s * A + rows_a, nnz)
    T = sp.csr_matrix((data, (row_ids, cols)), shape=(S * A, S))
    feasible_r = reward[jm]
    return GameTables(counts, masks, reward, T, float(scenario.beta),
                      float(feasible_r.min()), float(feasible_r.max()))


# ---------------------------------------------------------------------------
# policies


@dataclass(frozen=True, eq=False)
class TabularJointPolicy:
    """Directly parameterised policy: ``probs[i][s, k]`` = P(agent i plays k | s)."""

    probs: tuple

    def __post_init__(self):
        object.__setattr__(self, "probs", tuple(np.asarray(p, dtype=float) for p in self.probs))

    @property
    def n_agents(self) -> int:
        return len(self.probs)

    def joint(self) -> np.ndarray:
        S = self.probs[0].shape[0]
        return _outer(self.probs).reshape(S, -1)

    def validate(self, tables: GameTables, tol: float = 1e-12) -> None:
        for i, (p, m) in enumerate(zip(self.probs, tables.masks)):
            if p.shape != m.shape:
                raise ValueError(f"agent {i}: policy shape {p.shape} != {m.shape}")
            if np.any(p < -tol) or np.any(p[~m] != 0):
                raise ValueError(f"agent {i}: negative or infeasible probability mass")
            if np.any(np.abs(p.sum(axis=1) - 1.0) > tol):
                raise ValueError(f"agent {i}: rows do not sum to one")

    @classmethod
    def uniform(cls, tables: GameTables) -> "TabularJointPolicy":
        return cls(tuple(m / m.sum(axis=1, keepdims=True) for m in tables.masks))

    @classmethod
    def dirichlet(cls, tables: GameTables, rng: np.random.Generator, concentration: float = 1.0):
        probs = []
        for m in tables.masks:
            g = rng.gamma(concentration, size=m.shape) * m
            probs.append(g / g.sum(axis=1, keepdims=True))
        return cls(tuple(probs))

    @classmethod
    def idle(cls, tables: GameTables, scenario: mms.MmsScenario) -> "TabularJointPolicy":
        """No energy management: b = 0 and v = 0 in every state."""
        probs = []
        for m, mg in zip(tables.masks, scenario.microgrids):
            b0 = int(np.flatnonzero(np.abs(mg.storage.discharge_actions) < mms.SNAP_TOL)[0])
            k = mms.action_index(mms.AgentAction(b0, 0), mg)
            p = np.zeros(m.shape)
            p[:, k] = 1.0
            probs.append(p)
        return cls(tuple(probs))


# ---------------------------------------------------------------------------
# induced chain and stationary distribution


def induced_chain(tables: GameTables, policy: TabularJointPolicy):
    """``(P_mu, mu)``: state-to-state kernel under the policy and joint action probs."""
    S, A = tables.n_states, tables.n_joint
    mu = policy.joint()
    W = sp.csr_matrix((mu.ravel(), np.arange(S * A), np.arange(0, S * A + 1, A)), shape=(S, S * A))
    return (W @ tables.transition).tocsr(), mu


def closed_classes(P: sp.csr_matrix, subset: Optional[np.ndarray] = None) -> list:
    """Closed strongly connected components of the support graph of ``P``."""
    if subset is not None:
        P = P[subset][:, subset]
    n, labels = csgraph.connected_components(P, directed=True, connection="strong")
    coo = P.tocoo()
    leaving = np.zeros(n, dtype=bool)
    cross = (labels[coo.row] != labels[coo.col]) & (coo.data > 0)
    leaving[labels[coo.row[cross]]] = True
    out = [np.flatnonzero(labels == c) for c in range(n) if not leaving[c]]
    if subset is not None:
        out = [subset[c] for c in out]
    return out


def _reachable(P: sp.csr_matrix, start) -> np.ndarray:
    start = np.atleast_1d(np.asarray(start))
    if start.dtype.kind == "f":
        start = np.flatnonzero(start > 0)
    seen = np.zeros(P.shape[0], dtype=bool)
    for s in start:
        if not seen[s]:
            order = csgraph.breadth_first_order(P, int(s), directed=True, return_predecessors=False)
            seen[order] = True
    return np.flatnonzero(seen)


def _solve_stationary(P: sp.csr_matrix) -> np.ndarray:
    n = P.shape[0]
    if n == 1:
        return np.ones(1)
    if n <= DENSE_SOLVE_LIMIT:
        M = P.toarray().T - np.eye(n)
        M[-1, :] = 1.0
        rhs = np.zeros(n)
        rhs[-1] = 1.0
        pi = np.linalg.solve(M, rhs)
    else:
        pi = np.full(n, 1.0 / n)
        PT = P.T.tocsr()
        for _ in range(1_000_000):
            # lazy chain removes periodicity without changing pi
            nxt = 0.5 * (pi + PT @ pi)
            if np.abs(nxt - pi).max() < 1e-12:
                pi = nxt
                break
            pi = nxt
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def stationary_distribution(tables: GameTables, policy: TabularJointPolicy, start=None,
                            chain: Optional[sp.csr_matrix] = None) -> np.ndarray:
    """Stationary distribution of the induced chain.

    With ``start`` (a state index, list of indices, or a distribution) only
    states reachable from its support are considered, so a policy that
    freezes part of the state (e.g. idle storage) is analysable from a
    given initial condition.  More than one closed class raises
    :class:`MultichainError`.
    """
    P = chain if chain is not None else induced_chain(tables, policy)[0]
    subset = None if start is None else _reachable(P, start)
    classes = closed_classes(P, subset)
    if len(classes) != 1:
        raise MultichainError(classes)
    C = classes[0]
    pi_c = _solve_stationary(P[C][:, C])
    pi = np.zeros(tables.n_states)
    pi[C] = pi_c
    resid = np.abs(P.T @ pi - pi).max()
    if resid >= STATIONARY_TOL:
        raise ArithmeticError(f"stationary residual {resid:.2e} above {STATIONARY_TOL}")
    return pi


def average_reward(tables: GameTables, policy: TabularJointPolicy, pi: np.ndarray, mu=None) -> float:
    mu = policy.joint() if mu is None else mu
    return float(pi @ (mu * tables.reward).sum(axis=1))


def long_run_variance(tables: GameTables, policy: TabularJointPolicy, pi: np.ndarray, eta: float, mu=None) -> float:
    mu = policy.joint() if mu is None else mu
    dev = np.where(mu > 0, (tables.reward - eta) ** 2, 0.0)
    return float(pi @ (mu * dev).sum(axis=1))


def mean_variance(eta: float, zeta: float, beta: float) -> float:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return eta - beta * zeta


def surrogate_reward(r, eta: float, beta: float):
    return r - beta * (np.asarray(r) - eta) ** 2


def poisson_solve(tables: GameTables, policy: TabularJointPolicy, f: np.ndarray, j_value: float,
                  pi: Optional[np.ndarray] = None, chain=None) -> np.ndarray:
    """Bias of ``f`` under the policy, normalised to zero ``pi``-weighted mean.

    Solves ``V = fbar - J + P_mu V`` with one equation replaced by
    ``V(s0) = 0`` at a recurrent state, then re-centres.
    """
    if chain is None:
        P, mu = induced_chain(tables, policy)
    else:
        P, mu = chain
    if pi is None:
        pi = stationary_distribution(tables, policy, chain=P)
    S = tables.n_states
    c = (mu * f).sum(axis=1) - j_value
    s0 = int(np.argmax(pi))
    if S <= DENSE_SOLVE_LIMIT:
        M = np.eye(S) - P.toarray()
        M[s0, :] = 0.0
        M[s0, s0] = 1.0
        rhs = c.copy()
        rhs[s0] = 0.0
        try:
            V = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError as exc:
            raise MultichainError(closed_classes(P)) from exc
    else:
        M = (sp.eye(S, format="lil") - P).tolil()
        M[s0, :] = 0.0
        M[s0, s0] = 1.0
        rhs = c.copy()
        rhs[s0] = 0.0
        V = spsolve(M.tocsc(), rhs)
    V = V - pi @ V
    resid = np.abs(V - (c + P @ V)).max()
    if not np.isfinite(resid) or resid >= POISSON_TOL * max(1.0, np.abs(c).max()):
        if len(closed_classes(P)) > 1:
            raise MultichainError(closed_classes(P))
        raise ArithmeticError(f"Poisson residual {resid:.2e} above tolerance")
    return V


def q_and_advantage(tables: GameTables, policy: TabularJointPolicy, f: np.ndarray, j_value: float,
                    v_f: np.ndarray):
    """``Q = f - J + P V`` and ``A = Q - V``; zero at infeasible joint actions."""
    S, A = tables.n_states, tables.n_joint
    jm = tables.joint_mask()
    q = f - j_value + (tables.transition @ v_f).reshape(S, A)
    q = np.where(jm, q, 0.0)
    a = np.where(jm, q - v_f[:, None], 0.0)
    return q, a


def marginal_q(q_f: np.ndarray, policy: TabularJointPolicy, agent: int) -> np.ndarray:
    """``Qbar_i(s, a_i) = sum_{a_-i} mu_-i(a_-i | s) Q(s, a_i, a_-i)``."""
    N = policy.n_agents
    counts = tuple(p.shape[1] for p in policy.probs)
    Q = q_f.reshape((q_f.shape[0],) + counts)
    letters = string.ascii_letters[1:N + 1]
    operands, subs = [Q], ["a" + letters]
    for j in range(N):
        if j != agent:
            operands.append(policy.probs[j])
            subs.append("a" + letters[j])
    expr = ",".join(subs) + "->a" + letters[agent]
    return np.einsum(expr, *operands, optimize=True)


@dataclass(frozen=True, eq=False)
class StationaryAnalysis:
    pi: np.ndarray
    eta: float
    zeta: float
    j_value: float
    f: np.ndarray
    v_f: np.ndarray
    q_f: np.ndarray
    a_f: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["state", "pi", "v_f"])
            for s, (p, v) in enumerate(zip(self.pi, self.v_f)):
                w.writerow([s, f"{p:.10g}", f"{v:.10g}"])


@dataclass(frozen=True)
class Evaluation:
    pi: np.ndarray
    eta: float
    zeta: float
    j_value: float


def evaluate(tables: GameTables, policy: TabularJointPolicy, start=None) -> Evaluation:
    """Mean/variance summary only; accepts ``start`` for frozen-storage policies."""
    P, mu = induced_chain(tables, policy)
    pi = stationary_distribution(tables, policy, start=start, chain=P)
    eta = average_reward(tables, policy, pi, mu)
    zeta = long_run_variance(tables, policy, pi, eta, mu)
    return Evaluation(pi, eta, zeta, mean_variance(eta, zeta, tables.beta))


def analyze(tables: GameTables, policy: TabularJointPolicy) -> StationaryAnalysis:
    P, mu = induced_chain(tables, policy)
    pi = stationary_distribution(tables, policy, chain=P)
    eta = average_reward(tables, policy, pi, mu)
    zeta = long_run_variance(tables, policy, pi, eta, mu)
    j = mean_variance(eta, zeta, tables.beta)
    f = np.where(tables.joint_mask(), surrogate_reward(tables.reward, eta, tables.beta), 0.0)
    v = poisson_solve(tables, policy, f, j, pi=pi, chain=(P, mu))
    q, a = q_and_advantage(tables, policy, f, j, v)
    return StationaryAnalysis(pi, eta, zeta, j, f, v, q, a)


def gradient_from_analysis(tables: GameTables, policy: TabularJointPolicy, an: StationaryAnalysis) -> list:
    return [np.where(m, an.pi[:, None] * marginal_q(an.q_f, policy, i), 0.0)
            for i, m in enumerate(tables.masks)]


def exact_gradient(tables: GameTables, policy: TabularJointPolicy) -> list:
    """Per-agent ``(S, K_i)`` partial derivatives of J; zero off the feasible set."""
    return gradient_from_analysis(tables, policy, analyze(tables, policy))


def performance_difference(tables: GameTables, policy_a: TabularJointPolicy, policy_b: TabularJointPolicy):
    """Both sides of ``J(b) - J(a) = E_{pi_b, mu_b}[A_f^a] + beta (eta_b - eta_a)^2``."""
    an_a = analyze(tables, policy_a)
    ev_b = evaluate(tables, policy_b)
    lhs = ev_b.j_value - an_a.j_value
    rhs = float(ev_b.pi @ (policy_b.joint() * an_a.a_f).sum(axis=1)) + tables.beta * (ev_b.eta - an_a.eta) ** 2
    return lhs, rhs
