"""Independent projected gradient ascent on directly parameterised policies."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tabular
from .tabular import GameTables, TabularJointPolicy


ON_SIMPLEX_TOL = 1e-12


def project_simplex(v, mask=None) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the probability simplex.

    Sort-and-threshold: with ``u`` sorted descending, ``rho`` is the last
    index where ``u_j > (sum_{l<=j} u_l - 1) / j`` and the result is
    ``max(v - tau, 0)``.  Entries where ``mask`` is False are pinned to 0
    and excluded from the simplex.  Rows within ``ON_SIMPLEX_TOL`` of the simplex
    are returned as given.
    """
    v = np.asarray(v, dtype=float)
    one_d = v.ndim == 1
    X = np.atleast_2d(v)
    if not np.all(np.isfinite(X)):
        raise ValueError("cannot project non-finite values")
    M = np.ones(X.shape, dtype=bool) if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool))
    n_feas = M.sum(axis=1)
    if np.any(n_feas == 0):
        raise ValueError("every row needs at least one free coordinate")
    u = -np.sort(-np.where(M, X, -np.inf), axis=1)
    j = np.arange(1, X.shape[1] + 1)
    valid = j[None, :] <= n_feas[:, None]
    css = np.cumsum(np.where(valid, u, 0.0), axis=1)
    cond = valid & (u - (css - 1.0) / j > 0)
    rho = X.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = (css[np.arange(X.shape[0]), rho] - 1.0) / (rho + 1)
    out = np.where(M, np.maximum(X - tau[:, None], 0.0), 0.0)
    # rows already on the simplex pass through untouched so that projecting
    # twice is exactly the same as projecting once
    on = np.all(np.where(M, X >= 0, X == 0), axis=1) & (np.abs(X.sum(axis=1) - 1.0) <= ON_SIMPLEX_TOL)
    out[on] = X[on]
    return out[0] if one_d else out


def ipga_step(policy: TabularJointPolicy, gradient, step_size: float, masks=None) -> TabularJointPolicy:
    """One simultaneous update: every agent projects its own rows."""
    if masks is None:
        masks = [p > 0 for p in policy.probs]  # pragma: no cover - callers pass masks
    return TabularJointPolicy(tuple(
        project_simplex(p + step_size * g, m) for p, g, m in zip(policy.probs, gradient, masks)
    ))


def stationarity_gap(policy: TabularJointPolicy, gradient, masks) -> float:
    """``max_i max_{theta'_i} (theta'_i - theta_i)^T grad_i J``.

    The inner maximum over a product of simplices sits at per-state vertices,
    so it reduces to ``sum_s max_a g(s, a) - sum_s <theta(s), g(s)>``.
    """
    gaps = []
    for p, g, m in zip(policy.probs, gradient, masks):
        best = np.where(m, g, -np.inf).max(axis=1)
        gaps.append(float(best.sum() - (p * g).sum()))
    return max(gaps)


def gradient_mapping_norm(policy: TabularJointPolicy, gradient, step_size: float, masks) -> float:
    if step_size <= 0:
        raise ValueError("step size must be positive")
    sq = 0.0
    for p, g, m in zip(policy.probs, gradient, masks):
        G = (project_simplex(p + step_size * g, m) - p) / step_size
        sq += float((G * G).sum())
    return math.sqrt(sq)


def smoothness_constants(S: int, A_max: int, kappa0: float, beta: float, N: int) -> tuple[float, float]:
    """Per-agent and joint smoothness constants ``(L, L_J)`` of the objective."""
    var_term = 6.0 * beta * A_max * (1.0 + kappa0 * S / 2.0) ** 2
    L = var_term + (1.0 + beta) * kappa0 * A_max * math.sqrt(S) * (kappa0 * S + 1.0)
    per_agent = var_term + (1.0 + beta) * A_max * (
        kappa0 * S + kappa0 ** 2 * S ** 1.5 + kappa0 * math.sqrt(S) + 1.0
    )
    return L, N * per_agent


def iteration_bound(L_J: float, j_max: float, j_min: float, eps: float) -> int:
    """Iterations after which some iterate is ``eps``-stationary."""
    return int(math.ceil(4.0 * L_J * (j_max - j_min) / eps))


@dataclass
class IpgaConfig:
    step_size: float = 0.5
    iterations: int = 500
    mode: str = "fixed_step"  # or "theoretical_step"
    kappa0: float = 1.0
    log_every: int = 1
    early_stop_tol: Optional[float] = None

    def __post_init__(self):
        if self.mode not in ("fixed_step", "theoretical_step"):
            raise ValueError(f"unknown step mode {self.mode!r}")
        if self.mode == "fixed_step" and self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.log_every < 1:
            raise ValueError("log_every must be at least 1")

    def resolve_step(self, tables: GameTables) -> float:
        if self.mode == "fixed_step":
            return self.step_size
        _, L_J = smoothness_constants(tables.n_states, tables.a_max, self.kappa0, tables.beta, tables.n_agents)
        return 1.0 / L_J


@dataclass
class IpgaTrace:
    iteration: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    zeta: list = field(default_factory=list)
    j_value: list = field(default_factory=list)
    st_gap: list = field(default_factory=list)
    grad_map_norm: list = field(default_factory=list)

    COLUMNS = ("iteration", "eta", "zeta", "j", "st_gap", "grad_map_norm")

    def append(self, k, an, st, gm):
        self.iteration.append(k)
        self.eta.append(an.eta)
        self.zeta.append(an.zeta)
        self.j_value.append(an.j_value)
        self.st_gap.append(st)
        self.grad_map_norm.append(gm)

    def __len__(self):
        return len(self.iteration)

    def rows(self):
        return zip(self.iteration, self.eta, self.zeta, self.j_value, self.st_gap, self.grad_map_norm)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for k, *vals in self.rows():
                w.writerow([k] + [f"{x:.10g}" for x in vals])


class IpgaError(RuntimeError):
    def __init__(self, iteration: int, policy: TabularJointPolicy, cause: Exception):
        self.iteration = iteration
        self.policy = policy
        super().__init__(f"iteration {iteration}: {cause}")


def run_ipga(tables: GameTables, config: IpgaConfig, init_policy: Optional[TabularJointPolicy] = None,
             callback=None):
    """Run ``config.iterations`` projected-gradient updates.

    The trace holds one row per logged iterate ``theta^(k)``, ``k = 0..K``
    (the final iterate is always logged).  Returns ``(policy, trace, analysis)``
    where ``analysis`` belongs to the returned policy.
    """
    policy = init_policy if init_policy is not None else TabularJointPolicy.uniform(tables)
    policy.validate(tables)
    alpha = config.resolve_step(tables)
    trace = IpgaTrace()
    K = config.iterations
    an = None
    for k in range(K + 1):
        try:
            an = tabular.analyze(tables, policy)
        except (tabular.MultichainError, ArithmeticError) as exc:
            raise IpgaError(k, policy, exc) from exc
        grad = tabular.gradient_from_analysis(tables, policy, an)
        st = stationarity_gap(policy, grad, tables.masks)
        if k % config.log_every == 0 or k == K:
            trace.append(k, an, st, gradient_mapping_norm(policy, grad, alpha, tables.masks))
            if callback is not None:
                callback(k, an, st)
        if k == K or (config.early_stop_tol is not None and st < config.early_stop_tol):
            break
        policy = ipga_step(policy, grad, alpha, tables.masks)
    return policy, trace, an
