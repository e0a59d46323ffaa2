"""Independent PPO for mean-variance team games.

Each microgrid owns an actor over its local (b, v) action grid, masked to the
feasible actions of the current state; one critic on the joint state is
shared.  Per iteration: collect ``M x T`` steps, update the running mean and
variance of the exchange power, form the surrogate reward
``f = r - beta (r - eta_hat)^2``, estimate advantages with average-reward GAE,
take clipped-ratio steps for every actor from the same buffer and regress
the critic with an average-value penalty.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import mms

log = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_VERSION = 1


@dataclass
class IppoConfig:
    n_envs: int = 20
    horizon: int = 500
    total_steps: int = 200_000
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 5
    minibatches: int = 40
    lr: float = 5e-4
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-5
    stats_alpha: float = 0.2
    avc_coeff: float = 0.01
    hidden: int = 64
    normalize_advantages: bool = True
    beta: Optional[float] = None  # overrides the scenario's beta

    def __post_init__(self):
        if self.n_envs < 1 or self.horizon < 2:
            raise ValueError("need n_envs >= 1 and horizon >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if not 0.0 < self.stats_alpha <= 1.0:
            raise ValueError("stats_alpha must lie in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        self.adam_betas = tuple(self.adam_betas)

    @classmethod
    def desk(cls, **kw) -> "IppoConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "IppoConfig":
        base = dict(n_envs=20, horizon=2000, total_steps=20_000_000)
        base.update(kw)
        return cls(**base)

    @property
    def steps_per_iteration(self) -> int:
        return self.n_envs * self.horizon

    @property
    def iterations(self) -> int:
        return max(1, self.total_steps // self.steps_per_iteration)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


def config_hash(scenario_cfg: dict, config: IppoConfig, seed: int) -> str:
    blob = json.dumps({"scenario": scenario_cfg, "config": config.to_dict(), "seed": seed}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# networks


def mlp(n_in: int, n_out: int, hidden: int = 64) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(n_in, hidden, dtype=DTYPE), nn.ReLU(),
        nn.Linear(hidden, hidden, dtype=DTYPE), nn.ReLU(),
        nn.Linear(hidden, n_out, dtype=DTYPE),
    )


MIN_ROWS = 4


def _forward(net: nn.Module, x: torch.Tensor) -> torch.Tensor:
    # very small batches go through different BLAS kernels; padding keeps the
    # log-probs computed at collection time bit-identical to the minibatch
    # recomputation, so the first importance ratio is exactly one
    n = x.shape[0]
    if 0 < n < MIN_ROWS:
        return net(torch.cat([x, x[:1].expand(MIN_ROWS - n, -1)]))[:n]
    return net(x)


def masked_log_probs(actor: nn.Module, obs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    logits = _forward(actor, obs)
    logits = torch.where(mask, logits, torch.tensor(-math.inf, dtype=DTYPE))
    return torch.log_softmax(logits, dim=-1)


def sample_masked(log_probs: np.ndarray, mask: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw restricted to feasible actions."""
    p = np.where(mask, np.exp(log_probs), 0.0)
    cdf = np.cumsum(p, axis=1)
    cdf /= cdf[:, -1:]
    hit = (cdf > u[:, None]) & mask
    last_feasible = mask.shape[1] - 1 - np.argmax(mask[:, ::-1], axis=1)
    return np.where(hit.any(axis=1), np.argmax(hit, axis=1), last_feasible)


# ---------------------------------------------------------------------------
# running statistics, surrogate reward, advantages


@dataclass
class RunningStats:
    eta_hat: float = 0.0
    zeta_hat: float = 0.0
    j_hat: float = 0.0


def update_running_stats(stats: RunningStats, rewards, alpha: float, beta: float) -> RunningStats:
    """Exponential averages; the variance uses the freshly updated mean."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    r = np.asarray(rewards, dtype=float)
    eta = (1 - alpha) * stats.eta_hat + alpha * r.mean()
    zeta = (1 - alpha) * stats.zeta_hat + alpha * ((r - eta) ** 2).mean()
    return RunningStats(float(eta), float(zeta), float(eta - beta * zeta))


def surrogate_rewards(rewards, eta_hat: float, beta: float) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    return r - beta * (r - eta_hat) ** 2


def gae_advantages(f_hat: np.ndarray, values: np.ndarray, j_hat: float, lam: float) -> np.ndarray:
    """Average-reward GAE over ``(M, T)`` arrays; returns ``(M, T - 1)``.

    ``delta_t = f_t - J + V(s_{t+1}) - V(s_t)`` and ``A_n = delta_n + lam A_{n+1}``;
    the last state only bootstraps.
    """
    f_hat = np.atleast_2d(f_hat)
    values = np.atleast_2d(values)
    delta = f_hat[:, :-1] - j_hat + values[:, 1:] - values[:, :-1]
    adv = np.zeros_like(delta)
    acc = np.zeros(delta.shape[0])
    for t in range(delta.shape[1] - 1, -1, -1):
        acc = delta[:, t] + lam * acc
        adv[:, t] = acc
    return adv


def value_targets(values: np.ndarray, advantages: np.ndarray) -> np.ndarray:
    return values[:, : advantages.shape[1]] + advantages


def critic_loss(pred: torch.Tensor, targets: torch.Tensor, avc_coeff: float) -> torch.Tensor:
    """Regression loss plus the average-value penalty ``c * mean(V)^2``."""
    return ((pred - targets) ** 2).mean() + avc_coeff * pred.mean() ** 2


def clipped_objective(new_logp: torch.Tensor, old_logp: torch.Tensor, adv: torch.Tensor,
                      clip_eps: float) -> torch.Tensor:
    ratio = torch.exp(new_logp - old_logp)
    return torch.min(ratio * adv, torch.clamp(ratio, 1 - clip_eps, 1 + clip_eps) * adv).mean()


def make_adam(params, config: IppoConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=config.lr, betas=config.adam_betas, eps=config.adam_eps)


def adam_step(optimizer: torch.optim.Optimizer, params, gradients) -> None:
    """Apply one optimizer step with externally supplied gradients (descent)."""
    for p, g in zip(params, gradients):
        p.grad = torch.as_tensor(g, dtype=p.dtype).clone()
    optimizer.step()


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutBuffer:
    obs: np.ndarray        # (M, T, F)
    actions: np.ndarray    # (M, T, N)
    masks: list            # per agent (M, T, K_i) bool
    logp: np.ndarray       # (M, T, N)
    rewards: np.ndarray    # (M, T)
    values: np.ndarray     # (M, T)
    states: np.ndarray     # (M, T, C) component indices
    f_hat: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None


def _streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def collect_rollouts_into(env: mms.VectorMms, streams, actors, critic, T: int) -> RolloutBuffer:
    M, N = env.n_envs, env.scenario.n_agents
    F = sum(env.dims)
    obs = np.zeros((M, T, F))
    actions = np.zeros((M, T, N), dtype=np.int64)
    masks = [np.zeros((M, T, ag["mask"].shape[-1]), dtype=bool) for ag in env.agents]
    logp = np.zeros((M, T, N))
    rewards = np.zeros((M, T))
    values = np.zeros((M, T))
    states = np.zeros((M, T, len(env.dims)), dtype=np.int64)
    with torch.no_grad():
        for t in range(T):
            u = np.stack([g.random(N + env.n_uniforms) for g in streams])
            o = env.one_hot()
            ot = torch.as_tensor(o, dtype=DTYPE)
            obs[:, t] = o
            states[:, t] = env.state
            if critic is not None:
                values[:, t] = _forward(critic, ot)[:, 0].numpy()
            m = env.masks()
            for i, actor in enumerate(actors):
                lp = masked_log_probs(actor, ot, torch.as_tensor(m[i])).numpy()
                a = sample_masked(lp, m[i], u[:, i])
                actions[:, t, i] = a
                logp[:, t, i] = lp[np.arange(M), a]
                masks[i][:, t] = m[i]
            rewards[:, t] = env.step(actions[:, t], u[:, N:])
    return RolloutBuffer(obs, actions, masks, logp, rewards, values, states)


def collect_rollouts(scenario: mms.MmsScenario, actors, M: int, T: int, seed: int, critic=None) -> RolloutBuffer:
    """``M`` trajectories of length ``T`` from fresh uniform initial states."""
    if M < 1 or T < 2:
        raise ValueError("need M >= 1 and T >= 2")
    streams = _streams(seed, M)
    env = mms.VectorMms(scenario, M)
    env.reset(uniforms=np.stack([g.random(len(env.dims)) for g in streams]))
    return collect_rollouts_into(env, streams, actors, critic, T)


class NonFiniteLoss(FloatingPointError):
    pass


def ppo_policy_update(actor: nn.Module, optimizer, obs: torch.Tensor, mask: torch.Tensor, actions: torch.Tensor,
                      old_logp: torch.Tensor, adv: torch.Tensor, clip_eps: float, batches, agent: int = 0):
    """Clipped-ratio ascent over pre-computed minibatch index lists; returns mean objective."""
    total = 0.0
    for idx in batches:
        lp = masked_log_probs(actor, obs[idx], mask[idx])
        new = lp.gather(1, actions[idx].unsqueeze(1)).squeeze(1)
        obj = clipped_objective(new, old_logp[idx], adv[idx], clip_eps)
        if not torch.isfinite(obj):
            raise NonFiniteLoss(f"agent {agent}: non-finite policy objective")
        optimizer.zero_grad()
        (-obj).backward()
        optimizer.step()
        total += float(obj.detach())
    return total / max(1, len(batches))


# ---------------------------------------------------------------------------
# trainer


TRACE_COLUMNS = ("iteration", "env_steps", "eta_hat", "zeta_hat", "j_hat", "batch_mean", "batch_var",
                 "policy_objective", "value_loss")


class IppoTrainer:
    def __init__(self, scenario: mms.MmsScenario, config: IppoConfig, seed: int = 0,
                 scenario_cfg: Optional[dict] = None):
        torch.set_num_threads(1)
        self.scenario = scenario
        self.config = config
        self.seed = int(seed)
        self.beta = float(scenario.beta if config.beta is None else config.beta)
        self.hash = config_hash(scenario_cfg or {"name": scenario.name, "beta": scenario.beta}, config, seed)
        ss = np.random.SeedSequence(self.seed)
        init_seq, env_seq, shuffle_seq = ss.spawn(3)
        F = sum(scenario.state_dims)
        with torch.random.fork_rng():
            torch.manual_seed(int(init_seq.generate_state(1)[0]))
            self.actors = [mlp(F, mg.n_actions, config.hidden) for mg in scenario.microgrids]
            self.critic = mlp(F, 1, config.hidden)
        self.actor_opts = [make_adam(a.parameters(), config) for a in self.actors]
        self.critic_opt = make_adam(self.critic.parameters(), config)
        self.streams = [np.random.default_rng(s) for s in env_seq.spawn(config.n_envs)]
        self.shuffle_rng = np.random.default_rng(shuffle_seq)
        self.env = mms.VectorMms(scenario, config.n_envs)
        self.env.reset(uniforms=np.stack([g.random(len(self.env.dims)) for g in self.streams]))
        self.stats = RunningStats()
        self.iteration = 0
        self.trace: list = []

    # -- one iteration ------------------------------------------------------
    def process(self, buf: RolloutBuffer) -> RolloutBuffer:
        c = self.config
        self.stats = update_running_stats(self.stats, buf.rewards, c.stats_alpha, self.beta)
        buf.f_hat = surrogate_rewards(buf.rewards, self.stats.eta_hat, self.beta)
        buf.advantages = gae_advantages(buf.f_hat, buf.values, self.stats.j_hat, c.gae_lambda)
        buf.targets = value_targets(buf.values, buf.advantages)
        return buf

    def _batches(self, n: int):
        perm = self.shuffle_rng.permutation(n)
        return [torch.as_tensor(b) for b in np.array_split(perm, self.config.minibatches) if b.size]

    def step(self) -> dict:
        c = self.config
        buf = collect_rollouts_into(self.env, self.streams, self.actors, self.critic, c.horizon)
        self.process(buf)
        M, T1 = buf.advantages.shape
        n = M * T1
        obs = torch.as_tensor(buf.obs[:, :T1].reshape(n, -1), dtype=DTYPE)
        adv = buf.advantages.reshape(n)
        if c.normalize_advantages and n > 1:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        adv_t = torch.as_tensor(adv, dtype=DTYPE)
        targets = torch.as_tensor(buf.targets.reshape(n), dtype=DTYPE)
        acts = [torch.as_tensor(buf.actions[:, :T1, i].reshape(n)) for i in range(len(self.actors))]
        masks = [torch.as_tensor(m[:, :T1].reshape(n, -1)) for m in buf.masks]
        old = [torch.as_tensor(buf.logp[:, :T1, i].reshape(n), dtype=DTYPE) for i in range(len(self.actors))]

        pol_obj, v_loss = [], []
        for _ in range(c.epochs):
            batches = self._batches(n)
            for i, actor in enumerate(self.actors):
                pol_obj.append(ppo_policy_update(actor, self.actor_opts[i], obs, masks[i], acts[i], old[i],
                                                 adv_t, c.clip_eps, batches, agent=i))
            for idx in batches:
                pred = self.critic(obs[idx])[:, 0]
                loss = critic_loss(pred, targets[idx], c.avc_coeff)
                if not torch.isfinite(loss):
                    raise NonFiniteLoss("non-finite critic loss")
                self.critic_opt.zero_grad()
                loss.backward()
                self.critic_opt.step()
                v_loss.append(float(loss.detach()))
        self.iteration += 1
        row = dict(iteration=self.iteration, env_steps=self.iteration * c.steps_per_iteration,
                   eta_hat=self.stats.eta_hat, zeta_hat=self.stats.zeta_hat, j_hat=self.stats.j_hat,
                   batch_mean=float(buf.rewards.mean()), batch_var=float(buf.rewards.var()),
                   policy_objective=float(np.mean(pol_obj)), value_loss=float(np.mean(v_loss)))
        self.trace.append(row)
        return row

    def run(self, iterations: Optional[int] = None, checkpoint: Optional[Path] = None,
            checkpoint_every: int = 0, on_iteration=None):
        todo = (self.config.iterations if iterations is None else iterations) - self.iteration
        for _ in range(max(0, todo)):
            try:
                row = self.step()
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"iteration {self.iteration + 1}: {exc}") from exc
            log.info("iter %d steps %d eta %.4f zeta %.4f J %.4f", row["iteration"], row["env_steps"],
                     row["eta_hat"], row["zeta_hat"], row["j_hat"])
            if on_iteration is not None:
                on_iteration(row)
            if checkpoint is not None and checkpoint_every and self.iteration % checkpoint_every == 0:
                self.save(checkpoint)
        if checkpoint is not None:
            self.save(checkpoint)
        return self

    # -- persistence --------------------------------------------------------
    def state_dict(self) -> dict:
        return dict(
            version=CHECKPOINT_VERSION, config_hash=self.hash, iteration=self.iteration,
            actors=[a.state_dict() for a in self.actors], critic=self.critic.state_dict(),
            actor_opts=[o.state_dict() for o in self.actor_opts], critic_opt=self.critic_opt.state_dict(),
            stats=dataclasses.asdict(self.stats), streams=[g.bit_generator.state for g in self.streams],
            shuffle=self.shuffle_rng.bit_generator.state, env_state=self.env.state.copy(), trace=list(self.trace),
        )

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)

    def load(self, path) -> "IppoTrainer":
        d = torch.load(path, weights_only=False)
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        if d["config_hash"] != self.hash:
            raise ValueError(f"checkpoint config hash {d['config_hash']} does not match {self.hash}")
        for a, s in zip(self.actors, d["actors"]):
            a.load_state_dict(s)
        self.critic.load_state_dict(d["critic"])
        for o, s in zip(self.actor_opts, d["actor_opts"]):
            o.load_state_dict(s)
        self.critic_opt.load_state_dict(d["critic_opt"])
        self.stats = RunningStats(**d["stats"])
        for g, s in zip(self.streams, d["streams"]):
            g.bit_generator.state = s
        self.shuffle_rng.bit_generator.state = d["shuffle"]
        self.env.state = np.asarray(d["env_state"]).copy()
        self.trace = list(d["trace"])
        self.iteration = int(d["iteration"])
        return self


def write_trace(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in rows:
            w.writerow([r["iteration"], r["env_steps"]] + [f"{r[k]:.10g}" for k in TRACE_COLUMNS[2:]])


def train(scenario: mms.MmsScenario, config: IppoConfig, seed: int = 0, **kw) -> IppoTrainer:
    return IppoTrainer(scenario, config, seed).run(**kw)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalResult:
    mean: float
    variance: float
    mean_se: float
    variance_se: float
    rewards: np.ndarray = field(repr=False)

    def j(self, beta: float) -> float:
        return self.mean - beta * self.variance


def uniform_actors(scenario: mms.MmsScenario):
    """Actors with constant logits: uniform over the feasible actions."""
    F = sum(scenario.state_dims)
    actors = []
    for mg in scenario.microgrids:
        net = mlp(F, mg.n_actions, 4)
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        actors.append(net)
    return actors


def actor_policy(actors, greedy: bool = False):
    """Wrap actors as ``(env, uniforms) -> actions`` for the Monte Carlo tools."""
    def act(env, u):
        ot = torch.as_tensor(env.one_hot(), dtype=DTYPE)
        m = env.masks()
        out = []
        with torch.no_grad():
            for i, actor in enumerate(actors):
                lp = masked_log_probs(actor, ot, torch.as_tensor(m[i])).numpy()
                out.append(lp.argmax(axis=1) if greedy else sample_masked(lp, m[i], u[:, i]))
        return np.stack(out, axis=1)
    return act


def evaluate_policy(scenario: mms.MmsScenario, actors, episodes: int = 20, T: int = 2000, seed: int = 0,
                    burn_in: int = 200, greedy: bool = False) -> EvalResult:
    """Monte Carlo long-run mean and variance of exchange power over parallel episodes."""
    from .verify import simulate

    r = simulate(scenario, actor_policy(actors, greedy), episodes, T, seed, burn_in)
    mean = float(r.mean())
    sq = (r - mean) ** 2
    k = r.shape[0]
    se = (lambda x: float(x.std(ddof=1) / math.sqrt(k))) if k > 1 else (lambda x: 0.0)
    return EvalResult(mean, float(sq.mean()), se(r.mean(axis=1)), se(sq.mean(axis=1)), r)
