"""Multi-microgrid system model.

Device models (wind chain, demand chain, storage), local and joint states,
feasible actions, the exchange-power reward and stochastic transitions.
Everything here is immutable; sampling takes an external
``numpy.random.Generator`` so independent streams never interfere.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import yaml

STOCHASTIC_TOL = 1e-12
SNAP_TOL = 1e-9


class InfeasibleActionError(ValueError):
    """Raised when an action violates a storage or curtailment constraint."""


def _as_stochastic(matrix, name: str) -> np.ndarray:
    P = np.array(matrix, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"{name}: transition matrix must be square, got {P.shape}")
    if np.any(P < 0):
        raise ValueError(f"{name}: negative transition probability")
    sums = P.sum(axis=1)
    # printed matrices are rounded to 2 decimals; rows are renormalised
    if np.any(np.abs(sums - 1.0) > 0.02):
        raise ValueError(f"{name}: rows do not sum to 1: {sums}")
    return P / sums[:, None]


def _check_levels(levels, name: str) -> np.ndarray:
    x = np.asarray(levels, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError(f"{name}: levels must be a non-empty 1-d list")
    if np.any(np.diff(x) <= 0):
        raise ValueError(f"{name}: levels must be strictly increasing")
    return x


@dataclass(frozen=True)
class Turbine:
    v_cutin: float = 4.0
    v_cutout: float = 25.0
    v_rated: float = 15.0
    w_cap: float = 3.0


@dataclass(frozen=True, eq=False)
class WindModel:
    levels: np.ndarray
    transition: np.ndarray
    turbine: Turbine = field(default_factory=Turbine)

    def __post_init__(self):
        levels = _check_levels(self.levels, "wind")
        P = _as_stochastic(self.transition, "wind")
        if P.shape[0] != levels.size:
            raise ValueError("wind: matrix dimension does not match number of levels")
        if levels[0] != 0.0 or not np.isclose(levels[-1], self.turbine.w_cap):
            raise ValueError("wind: levels must run from 0 to the rated power")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "transition", P)


@dataclass(frozen=True, eq=False)
class DemandModel:
    levels: np.ndarray
    transition: np.ndarray

    def __post_init__(self):
        levels = _check_levels(self.levels, "demand")
        P = _as_stochastic(self.transition, "demand")
        if P.shape[0] != levels.size:
            raise ValueError("demand: matrix dimension does not match number of levels")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "transition", P)


@dataclass(frozen=True, eq=False)
class StorageModel:
    levels: np.ndarray
    discharge_actions: np.ndarray
    nu: float = 0.95
    c_ch: float = 1.2
    c_dis: float = 1.2
    dt: float = 1.0

    def __post_init__(self):
        levels = _check_levels(self.levels, "storage")
        if levels.size > 1 and not np.allclose(np.diff(levels), levels[1] - levels[0]):
            raise ValueError("storage: levels must be evenly spaced")
        acts = _check_levels(self.discharge_actions, "storage actions")
        if not 0.0 < self.nu <= 1.0:
            raise ValueError(f"storage: efficiency must lie in (0, 1], got {self.nu}")
        if acts[0] < -self.c_ch - SNAP_TOL or acts[-1] > self.c_dis + SNAP_TOL:
            raise ValueError("storage: action grid exceeds inverter limits")
        if not np.any(np.abs(acts) < SNAP_TOL):
            raise ValueError("storage: the idle action b=0 must be in the grid")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "discharge_actions", acts)

    @property
    def b_min(self) -> float:
        return float(self.levels[0])

    @property
    def b_max(self) -> float:
        return float(self.levels[-1])

    def level_index(self, energy: float) -> int:
        """Index of the storage level equal to ``energy`` (within 1e-9)."""
        if self.levels.size == 1:
            k = 0
        else:
            k = int(round((energy - self.b_min) / (self.levels[1] - self.levels[0])))
        if not 0 <= k < self.levels.size or abs(self.levels[k] - energy) > SNAP_TOL:
            raise InfeasibleActionError(f"energy {energy} MWh is not a storage level")
        return k


@dataclass(frozen=True, eq=False)
class MicrogridSpec:
    storage: StorageModel
    wind: Optional[WindModel] = None
    demand: Optional[DemandModel] = None
    curtailment_levels: tuple = ()

    def __post_init__(self):
        v = tuple(float(x) for x in self.curtailment_levels)
        if v and self.wind is None:
            raise ValueError("curtailment requires a wind generator")
        if v and 0.0 not in v:
            raise ValueError("curtailment levels must include 0")
        object.__setattr__(self, "curtailment_levels", v)

    @property
    def curtail_grid(self) -> np.ndarray:
        """Curtailment values used by the action grid; ``[0]`` when disabled."""
        return np.asarray(self.curtailment_levels or (0.0,))

    @property
    def n_actions(self) -> int:
        return self.storage.discharge_actions.size * self.curtail_grid.size

    @property
    def local_dims(self) -> tuple:
        dims = []
        if self.wind is not None:
            dims.append(self.wind.levels.size)
        if self.demand is not None:
            dims.append(self.demand.levels.size)
        dims.append(self.storage.levels.size)
        return tuple(dims)


class LocalState(NamedTuple):
    wind_idx: Optional[int]
    demand_idx: Optional[int]
    storage_idx: int


class AgentAction(NamedTuple):
    b_idx: int
    v_idx: int


@dataclass(frozen=True, eq=False)
class MmsScenario:
    microgrids: tuple
    beta: float = 0.0
    dt: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if len(self.microgrids) == 0:
            raise ValueError("a scenario needs at least one microgrid")
        object.__setattr__(self, "microgrids", tuple(self.microgrids))

    @property
    def n_agents(self) -> int:
        return len(self.microgrids)

    @property
    def state_dims(self) -> tuple:
        """Component sizes, row-major over microgrids then wind, demand, storage."""
        return tuple(d for mg in self.microgrids for d in mg.local_dims)

    @property
    def n_states(self) -> int:
        return int(np.prod(self.state_dims, dtype=np.int64))

    def with_beta(self, beta: float) -> "MmsScenario":
        return MmsScenario(self.microgrids, beta=beta, dt=self.dt, name=self.name)

    def encode(self, state: Sequence[LocalState]) -> int:
        comps = []
        for mg, loc in zip(self.microgrids, state):
            if mg.wind is not None:
                comps.append(loc.wind_idx)
            if mg.demand is not None:
                comps.append(loc.demand_idx)
            comps.append(loc.storage_idx)
        return int(np.ravel_multi_index(comps, self.state_dims))

    def decode(self, index: int) -> tuple:
        comps = iter(int(c) for c in np.unravel_index(index, self.state_dims))
        out = []
        for mg in self.microgrids:
            w = next(comps) if mg.wind is not None else None
            d = next(comps) if mg.demand is not None else None
            out.append(LocalState(w, d, next(comps)))
        return tuple(out)


# ---------------------------------------------------------------------------
# power arithmetic


def ess_grid_flow(b: float, nu: float) -> float:
    """Grid-side storage power: ``nu*b`` when discharging, ``b/nu`` when charging."""
    return nu * b if b >= 0 else b / nu


def microgrid_output(G: float, D: float, e: float, v: float) -> float:
    if v < -SNAP_TOL or v > G + SNAP_TOL:
        raise InfeasibleActionError(f"curtailment {v} outside [0, {G}]")
    return G - D + e - v


def storage_step(B: float, b: float, dt: float = 1.0, storage: StorageModel | None = None) -> float:
    """Next energy level ``B - b*dt``; snapped onto ``storage.levels`` if given."""
    nxt = B - b * dt
    if storage is None:
        return nxt
    if nxt < storage.b_min - SNAP_TOL or nxt > storage.b_max + SNAP_TOL:
        raise InfeasibleActionError(f"storage would leave [{storage.b_min}, {storage.b_max}]")
    return float(storage.levels[storage.level_index(nxt)])


def local_power(spec: MicrogridSpec, local: LocalState) -> tuple[float, float]:
    G = float(spec.wind.levels[local.wind_idx]) if spec.wind is not None else 0.0
    D = float(spec.demand.levels[local.demand_idx]) if spec.demand is not None else 0.0
    return G, D


def is_feasible(local: LocalState, action: AgentAction, spec: MicrogridSpec) -> bool:
    st = spec.storage
    b = float(st.discharge_actions[action.b_idx])
    v = float(spec.curtail_grid[action.v_idx])
    G, _ = local_power(spec, local)
    if b < -st.c_ch - SNAP_TOL or b > st.c_dis + SNAP_TOL or v > G + SNAP_TOL:
        return False
    try:
        storage_step(float(st.levels[local.storage_idx]), b, st.dt, st)
    except InfeasibleActionError:
        return False
    return True


def feasible_actions(local: LocalState, spec: MicrogridSpec) -> list[AgentAction]:
    grid = itertools.product(range(spec.storage.discharge_actions.size), range(spec.curtail_grid.size))
    return [AgentAction(b, v) for b, v in grid if is_feasible(local, AgentAction(b, v), spec)]


def action_index(action: AgentAction, spec: MicrogridSpec) -> int:
    """Flat index of a local action on the agent's (b, v) grid."""
    return action.b_idx * spec.curtail_grid.size + action.v_idx


def action_from_index(k: int, spec: MicrogridSpec) -> AgentAction:
    b, v = divmod(int(k), spec.curtail_grid.size)
    return AgentAction(b, v)


def local_reward(spec: MicrogridSpec, local: LocalState, action: AgentAction) -> float:
    if not is_feasible(local, action, spec):
        raise InfeasibleActionError(f"action {action} infeasible in state {local}")
    G, D = local_power(spec, local)
    b = float(spec.storage.discharge_actions[action.b_idx])
    v = float(spec.curtail_grid[action.v_idx])
    return microgrid_output(G, D, ess_grid_flow(b, spec.storage.nu), v)


def exchange_power(state: Sequence[LocalState], action: Sequence[AgentAction], scenario: MmsScenario) -> float:
    """Common reward: net power sent from the system to the main grid."""
    return sum(local_reward(mg, s, a) for mg, s, a in zip(scenario.microgrids, state, action))


def next_storage_index(spec: MicrogridSpec, local: LocalState, action: AgentAction) -> int:
    st = spec.storage
    b = float(st.discharge_actions[action.b_idx])
    B = storage_step(float(st.levels[local.storage_idx]), b, st.dt, st)
    return st.level_index(B)


def _draw(P: np.ndarray, row: int, u: float) -> int:
    cdf = np.cumsum(P[row])
    return int(min(np.searchsorted(cdf, u, side="right"), P.shape[0] - 1))


def sample_transition(state: Sequence[LocalState], action: Sequence[AgentAction],
                      scenario: MmsScenario, rng: np.random.Generator) -> tuple:
    """Draw the successor joint state.

    Wind and demand move independently per microgrid along their chains; the
    storage index follows the action deterministically.
    """
    out = []
    for mg, loc, act in zip(scenario.microgrids, state, action):
        if not is_feasible(loc, act, mg):
            raise InfeasibleActionError(f"action {act} infeasible in state {loc}")
        w = _draw(mg.wind.transition, loc.wind_idx, rng.random()) if mg.wind is not None else None
        d = _draw(mg.demand.transition, loc.demand_idx, rng.random()) if mg.demand is not None else None
        out.append(LocalState(w, d, next_storage_index(mg, loc, act)))
    return tuple(out)


# ---------------------------------------------------------------------------
# data -> Markov chains


def wind_power_from_speed(v, turbine: Turbine = Turbine()):
    """Piecewise turbine power curve (MW); vectorised over ``v``."""
    v = np.asarray(v, dtype=float)
    cubic = turbine.w_cap * (v / turbine.v_rated) ** 3
    out = np.where((v >= turbine.v_cutin) & (v < turbine.v_rated), cubic, 0.0)
    out = np.where((v >= turbine.v_rated) & (v < turbine.v_cutout), turbine.w_cap, out)
    return out if out.ndim else float(out)


def bin_to_levels(values, levels) -> np.ndarray:
    """Map each value to the index of the nearest level (uniform quantisation)."""
    values = np.asarray(values, dtype=float)
    levels = np.asarray(levels, dtype=float)
    return np.abs(values[:, None] - levels[None, :]).argmin(axis=1)


def fit_transition_counts(series, n_levels: int | None = None) -> np.ndarray:
    """Row-normalised transition counts ``q_kl / q_k``.

    Rows of states that never occur (as a source) are set to the identity row.
    """
    s = np.asarray(series, dtype=int)
    if s.size < 2:
        raise ValueError("need at least two observations to count transitions")
    n = int(n_levels if n_levels is not None else s.max() + 1)
    if s.min() < 0 or s.max() >= n:
        raise ValueError("series contains an out-of-range level index")
    counts = np.zeros((n, n))
    np.add.at(counts, (s[:-1], s[1:]), 1.0)
    totals = counts.sum(axis=1)
    P = np.eye(n)
    seen = totals > 0
    P[seen] = counts[seen] / totals[seen, None]
    return P


def transition_visit_counts(series, n_levels: int) -> np.ndarray:
    s = np.asarray(series, dtype=int)
    return np.bincount(s[:-1], minlength=n_levels)


def read_series_csv(path) -> np.ndarray:
    """One numeric column; a non-numeric first row is treated as a header."""
    vals = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or not row[0].strip():
                continue
            try:
                vals.append(float(row[0]))
            except ValueError:
                if i == 0:
                    continue
                raise ValueError(f"{path}: non-numeric entry on line {i + 1}: {row[0]!r}")
    if not vals:
        raise ValueError(f"{path}: no numeric data")
    return np.asarray(vals)


# ---------------------------------------------------------------------------
# scenario files


PRESETS = ("mms-2mg", "mms-3mg")


def _build_microgrid(entry: dict, devices: dict, dt: float) -> MicrogridSpec:
    wind = demand = None
    if entry.get("wind", False):
        t = devices["wind"]
        wind = WindModel(t["levels"], t["transition"], Turbine(**t.get("turbine", {})))
    if entry.get("demand", False):
        d = devices["demand"]
        demand = DemandModel(d["levels"], d["transition"])
    s = dict(devices["storage"])
    storage = StorageModel(s.pop("levels"), s.pop("discharge_actions"), dt=dt, **s)
    curtail = ()
    if entry.get("curtailment", False):
        # curtailment is discretised on the wind level grid
        curtail = tuple(wind.levels)
    return MicrogridSpec(storage=storage, wind=wind, demand=demand, curtailment_levels=curtail)


def scenario_from_dict(cfg: dict) -> MmsScenario:
    dt = float(cfg.get("dt", 1.0))
    mgs = [_build_microgrid(e, cfg["devices"], dt) for e in cfg["microgrids"]]
    return MmsScenario(tuple(mgs), beta=float(cfg.get("beta", 0.0)), dt=dt, name=cfg.get("name", "custom"))


def load_scenario_config(path_or_preset) -> dict:
    """Parsed YAML dict for a file path or a bundled preset name."""
    name = str(path_or_preset)
    if name in PRESETS:
        text = resources.files("mvtsg.scenarios").joinpath(f"{name}.yaml").read_text()
    else:
        text = Path(name).read_text()
    return yaml.safe_load(text)


def load_scenario(path_or_preset, beta: float | None = None) -> MmsScenario:
    sc = scenario_from_dict(load_scenario_config(path_or_preset))
    return sc if beta is None else sc.with_beta(beta)


# ---------------------------------------------------------------------------
# batched simulation


class VectorMms:
    """``n_envs`` copies of a scenario stepped in lock-step.

    The joint state is held as an ``(n_envs, n_components)`` integer array in
    the same component order as :attr:`MmsScenario.state_dims`.  Randomness is
    supplied per call as uniforms so callers control the streams.
    """

    def __init__(self, scenario: MmsScenario, n_envs: int):
        self.scenario = scenario
        self.n_envs = int(n_envs)
        self.dims = scenario.state_dims
        self.exo = []  # (component position, cdf)
        self.agents = []
        pos = 0
        for mg in scenario.microgrids:
            w_pos = d_pos = None
            if mg.wind is not None:
                w_pos = pos
                self.exo.append((pos, np.cumsum(mg.wind.transition, axis=1)))
                pos += 1
            if mg.demand is not None:
                d_pos = pos
                self.exo.append((pos, np.cumsum(mg.demand.transition, axis=1)))
                pos += 1
            b_pos = pos
            pos += 1
            G = mg.wind.levels if mg.wind is not None else np.zeros(1)
            D = mg.demand.levels if mg.demand is not None else np.zeros(1)
            st = mg.storage
            K = mg.n_actions
            # tables indexed [wind, demand, storage, action]
            mask = np.zeros((G.size, st.levels.size, K), dtype=bool)
            nxt = np.zeros((st.levels.size, K), dtype=np.int64)
            rew = np.zeros((G.size, D.size, K))
            for k in range(K):
                act = action_from_index(k, mg)
                b = float(st.discharge_actions[act.b_idx])
                v = float(mg.curtail_grid[act.v_idx])
                rew[:, :, k] = G[:, None] - D[None, :] + ess_grid_flow(b, st.nu) - v
                for j in range(st.levels.size):
                    for g in range(G.size):
                        loc = LocalState(g if mg.wind is not None else None, 0, j)
                        mask[g, j, k] = is_feasible(loc, act, mg)
                    if mask[:, j, k].any():
                        nxt[j, k] = next_storage_index(mg, LocalState(None, 0, j), act)
            self.agents.append(dict(w=w_pos, d=d_pos, b=b_pos, mask=mask, next=nxt, reward=rew,
                                    G=G, D=D, B=st.levels, b_vals=st.discharge_actions,
                                    v_vals=mg.curtail_grid, n_v=mg.curtail_grid.size))
        self.n_uniforms = len(self.exo)
        self.state = np.zeros((self.n_envs, len(self.dims)), dtype=np.int64)

    def _col(self, pos):
        return self.state[:, pos] if pos is not None else np.zeros(self.n_envs, dtype=np.int64)

    def reset(self, state=None, uniforms=None) -> np.ndarray:
        """Set the state explicitly, or uniformly at random from ``uniforms``."""
        if state is not None:
            self.state = np.broadcast_to(np.asarray(state, dtype=np.int64), self.state.shape).copy()
        else:
            u = np.asarray(uniforms).reshape(self.n_envs, len(self.dims))
            self.state = np.minimum((u * np.array(self.dims)).astype(np.int64), np.array(self.dims) - 1)
        return self.state.copy()

    def masks(self) -> list:
        return [ag["mask"][self._col(ag["w"]), self.state[:, ag["b"]]] for ag in self.agents]

    def flat_index(self) -> np.ndarray:
        return np.ravel_multi_index(tuple(self.state.T), self.dims)

    def one_hot(self) -> np.ndarray:
        out = np.zeros((self.n_envs, sum(self.dims)))
        offset = 0
        for j, d in enumerate(self.dims):
            out[np.arange(self.n_envs), offset + self.state[:, j]] = 1.0
            offset += d
        return out

    def rewards(self, actions: np.ndarray) -> np.ndarray:
        r = np.zeros(self.n_envs)
        for i, ag in enumerate(self.agents):
            r += ag["reward"][self._col(ag["w"]), self._col(ag["d"]), actions[:, i]]
        return r

    def details(self, actions: np.ndarray) -> list:
        """Per-microgrid (G, D, B, b, v, net) arrays for episode export."""
        out = []
        for i, ag in enumerate(self.agents):
            k = actions[:, i]
            b_idx, v_idx = np.divmod(k, ag["n_v"])
            G = ag["G"][self._col(ag["w"])] if ag["w"] is not None else np.zeros(self.n_envs)
            D = ag["D"][self._col(ag["d"])] if ag["d"] is not None else np.zeros(self.n_envs)
            out.append(dict(G=G, D=D, B=ag["B"][self.state[:, ag["b"]]], b=ag["b_vals"][b_idx],
                            v=ag["v_vals"][v_idx], net=G - D))
        return out

    def step(self, actions: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
        """Apply local action indices ``(n_envs, N)``; return the rewards."""
        actions = np.asarray(actions, dtype=np.int64)
        for i, m in enumerate(self.masks()):
            if not np.all(m[np.arange(self.n_envs), actions[:, i]]):
                raise InfeasibleActionError(f"agent {i} was given an infeasible action")
        r = self.rewards(actions)
        new = self.state.copy()
        u = np.asarray(uniforms).reshape(self.n_envs, self.n_uniforms)
        for n, (pos, cdf) in enumerate(self.exo):
            rows = cdf[self.state[:, pos]]
            new[:, pos] = np.minimum((u[:, n:n + 1] >= rows).sum(axis=1), cdf.shape[0] - 1)
        for i, ag in enumerate(self.agents):
            new[:, ag["b"]] = ag["next"][self.state[:, ag["b"]], actions[:, i]]
        self.state = new
        return r
