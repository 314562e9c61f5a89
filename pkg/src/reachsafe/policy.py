"""Offline policy extraction gated by the feasibility critics.

The reward critics train on offline transitions only (rollout data is
rejected by contract). The policy is advantage-weighted behavior cloning
with a feasibility gate: inside the feasible region the reward advantage
drives the weights but actions with positive Q_h are never cloned; inside
the infeasible region the weights instead prefer the least-violating
actions, ignoring reward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .approx import Mlp, Trainer, load_mlp, save_mlp, soft_update
from .cmdp import HardCMDP, OfflineDataset
from .critics import Featurizer, FeasibilityCritic, normalized_featurizer
from .reachability import fit_tabular_critic
from .rollout import RolloutBuffer, RolloutConfig
from .seeding import substream
from .tabular import build_model, perturbed_models


class RolloutDataRejected(TypeError):
    """Reward critics only ever see the original offline dataset."""


@dataclass
class RewardCriticConfig:
    gamma: float = 0.99
    expectile: float = 0.7
    lr: float = 3e-4
    batch_size: int = 256
    target_rate: float = 0.005
    hidden: tuple[int, ...] = (64, 64)


@dataclass
class RewardCritic:
    q_net: Mlp
    v_net: Mlp
    q_target: Mlp
    v_target: Mlp
    state_feat: Featurizer
    action_feat: Featurizer
    cfg: RewardCriticConfig
    steps_trained: int = 0
    sources_seen: list = field(default_factory=list)
    trainers: dict = field(default_factory=dict)

    def q_values(self, s: np.ndarray, a: np.ndarray,
                 target: bool = False) -> np.ndarray:
        x = np.concatenate([self.state_feat(s), self.action_feat(a)], axis=1)
        return (self.q_target if target else self.q_net).forward(x)[:, 0]

    def v_values(self, s: np.ndarray, target: bool = False) -> np.ndarray:
        return (self.v_target if target else self.v_net).forward(
            self.state_feat(s))[:, 0]


def make_reward_critic(env: HardCMDP, dataset: OfflineDataset,
                       cfg: RewardCriticConfig | None = None,
                       seed: int = 0,
                       state_feat: Featurizer | None = None,
                       action_feat: Featurizer | None = None) -> RewardCritic:
    cfg = cfg or RewardCriticConfig()
    if state_feat is None:
        state_feat = normalized_featurizer(dataset.s)
    if action_feat is None:
        action_feat = normalized_featurizer(dataset.a)
    q_net = Mlp([state_feat.dim + action_feat.dim, *cfg.hidden, 1],
                seed=int(substream(seed, "reward-critic", "q").integers(1 << 31)))
    v_net = Mlp([state_feat.dim, *cfg.hidden, 1],
                seed=int(substream(seed, "reward-critic", "v").integers(1 << 31)))
    return RewardCritic(q_net=q_net, v_net=v_net, q_target=q_net.copy(),
                        v_target=v_net.copy(), state_feat=state_feat,
                        action_feat=action_feat, cfg=cfg)


def _reject_rollout_data(data) -> None:
    if isinstance(data, RolloutBuffer):
        raise RolloutDataRejected("reward critic update received rollout data")
    meta = getattr(data, "meta", {})
    if isinstance(meta, dict) and meta.get("kind") == "rollout-buffer":
        raise RolloutDataRejected("reward critic update received rollout data")


def update_reward_critic(critic: RewardCritic, offline: OfflineDataset,
                         steps: int, seed: int = 0,
                         stream: tuple = ()) -> RewardCritic:
    """Expectile TD learning on offline transitions only."""
    _reject_rollout_data(offline)
    if len(offline) == 0:
        raise ValueError("offline batch must not be empty")
    critic.sources_seen.append(offline.tag)
    cfg = critic.cfg
    if "q" not in critic.trainers:
        critic.trainers["q"] = Trainer(critic.q_net, lr=cfg.lr)
        critic.trainers["v"] = Trainer(critic.v_net, lr=cfg.lr)
    tr_q, tr_v = critic.trainers["q"], critic.trainers["v"]

    feat_s = critic.state_feat(offline.s)
    feat_a = critic.action_feat(offline.a)
    feat_s2 = critic.state_feat(offline.s2)
    rewards = offline.r
    not_done = 1.0 - offline.done.astype(float)
    rng = substream(seed, "reward-update", *stream)

    for _ in range(steps):
        idx = rng.integers(len(offline), size=min(cfg.batch_size, len(offline)))
        fs, fa, fs2 = feat_s[idx], feat_a[idx], feat_s2[idx]

        v2 = critic.v_target.forward(fs2)[:, 0]
        target_q = rewards[idx] + cfg.gamma * not_done[idx] * v2
        q_in = np.concatenate([fs, fa], axis=1)
        q_pred = critic.q_net.forward(q_in)[:, 0]
        grads, _ = critic.q_net.backward(
            (2.0 * (q_pred - target_q) / len(idx))[:, None])
        tr_q.apply(grads)

        q_ref = critic.q_target.forward(q_in)[:, 0]
        v_pred = critic.v_net.forward(fs)[:, 0]
        u = q_ref - v_pred
        weight = np.abs(cfg.expectile - (u < 0).astype(float))
        grads_v, _ = critic.v_net.backward(
            (-2.0 * weight * u / len(idx))[:, None])
        tr_v.apply(grads_v)

        soft_update(critic.q_target, critic.q_net, cfg.target_rate)
        soft_update(critic.v_target, critic.v_net, cfg.target_rate)
        critic.steps_trained += 1
    return critic


# ---------------------------------------------------------------------------
# Policy
# ---------------------------------------------------------------------------


@dataclass
class PolicyConfig:
    lr: float = 3e-4
    batch_size: int = 256
    hidden: tuple[int, ...] = (64, 64)
    temperature: float = 3.0
    weight_clip: float = 100.0
    noise_std: float = 0.1  # exploration scale used by rollout callers


@dataclass
class SafePolicy:
    """Deterministic-mean action network squashed into the action box."""

    net: Mlp
    state_feat: Featurizer
    low: np.ndarray
    high: np.ndarray
    cfg: PolicyConfig
    steps_trained: int = 0
    trainer: Trainer | None = None

    def act(self, s: np.ndarray) -> np.ndarray:
        return self.act_batch(np.asarray(s, dtype=float).reshape(1, -1))[0]

    def act_batch(self, s: np.ndarray) -> np.ndarray:
        raw = self.net.forward(self.state_feat(s))
        return self.low + (self.high - self.low) * (np.tanh(raw) + 1.0) / 2.0


def make_policy(env: HardCMDP, dataset: OfflineDataset,
                cfg: PolicyConfig | None = None, seed: int = 0,
                state_feat: Featurizer | None = None) -> SafePolicy:
    cfg = cfg or PolicyConfig()
    if state_feat is None:
        state_feat = normalized_featurizer(dataset.s)
    net = Mlp([state_feat.dim, *cfg.hidden, env.d_a],
              seed=int(substream(seed, "policy-init").integers(1 << 31)))
    return SafePolicy(net=net, state_feat=state_feat,
                      low=env.action_bounds[:, 0].copy(),
                      high=env.action_bounds[:, 1].copy(), cfg=cfg)


def bc_weights(reward_critic: RewardCritic, feas_critic: FeasibilityCritic | None,
               s: np.ndarray, a: np.ndarray, temperature: float,
               weight_clip: float, gate: bool = True) -> np.ndarray:
    """Per-sample cloning weights.

    Feasible states weight by the exponentiated reward advantage and drop
    any action whose Q_h is positive; infeasible states weight by how much
    the action reduces the violation value, ignoring reward.
    """
    adv_r = reward_critic.q_values(s, a) - reward_critic.v_values(s)
    if not gate or feas_critic is None:
        return np.clip(np.exp(temperature * adv_r), 0.0, weight_clip)
    v_h = feas_critic.v_values(s)
    q_h = feas_critic.q_values(s, a)
    feasible = v_h <= 0.0
    w_feasible = np.exp(temperature * adv_r) * (q_h <= 0.0)
    w_infeasible = np.exp(-temperature * (q_h - v_h))
    return np.clip(np.where(feasible, w_feasible, w_infeasible), 0.0, weight_clip)


def feasibility_guided_policy_update(
    policy: SafePolicy,
    reward_critic: RewardCritic,
    feas_critic: FeasibilityCritic | None,
    offline: OfflineDataset,
    steps: int,
    seed: int = 0,
    gate: bool = True,
    stream: tuple = (),
) -> SafePolicy:
    """Weighted behavior cloning on the offline dataset only."""
    _reject_rollout_data(offline)
    if len(offline) == 0:
        raise ValueError("offline batch must not be empty")
    cfg = policy.cfg
    if policy.trainer is None:
        policy.trainer = Trainer(policy.net, lr=cfg.lr)

    feat_s = policy.state_feat(offline.s)
    weights = bc_weights(reward_critic, feas_critic, offline.s, offline.a,
                         cfg.temperature, cfg.weight_clip, gate=gate)
    span = (policy.high - policy.low) / 2.0
    rng = substream(seed, "policy-update", *stream)

    for _ in range(steps):
        idx = rng.integers(len(offline), size=min(cfg.batch_size, len(offline)))
        fs = feat_s[idx]
        target_a = offline.a[idx]
        w = weights[idx][:, None]
        raw = policy.net.forward(fs)
        squashed = policy.low + span * (np.tanh(raw) + 1.0)
        diff = squashed - target_a
        dsquash = span * (1.0 - np.tanh(raw) ** 2)
        upstream = 2.0 * w * diff * dsquash / len(idx)
        grads, _ = policy.net.backward(upstream)
        policy.trainer.apply(grads)
        policy.steps_trained += 1
    return policy


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    normalized_reward: float
    normalized_cost: float
    episodes: int
    safe: bool
    mean_violations: float
    mean_return: float

    def csv_row(self, env_name: str, seed: int) -> str:
        return (f"{env_name},{seed},{self.episodes},"
                f"{self.normalized_reward:.6f},{self.normalized_cost:.6f},"
                f"{int(self.safe)}")


CSV_HEADER = "env,seed,episodes,normalized_reward,normalized_cost,safe"

COST_SCALE = 10.0


def evaluate_policy(policy: SafePolicy, env: HardCMDP, episodes: int,
                    reward_norm: tuple[float, float], seed: int = 0) -> EvalReport:
    """Roll the deterministic policy; normalize rewards and scale costs.

    Normalized reward maps the dataset's return range onto [0, 1]; the
    per-episode violation count is divided by the cost scale, and a run
    is safe when that normalized cost stays at or below 1.
    """
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    lo, hi = reward_norm
    if hi <= lo:
        raise ValueError(f"degenerate reward normalization range [{lo}, {hi}]")
    returns, violations = [], []
    for ep in range(episodes):
        rng = substream(seed, "eval-episode", ep)
        s = env.initial_state(rng)
        total_r, total_c = 0.0, 0
        for _ in range(env.horizon):
            a = env.clip_action(policy.act(s))
            s2 = env.transition(s, a)
            total_r += env.reward(s, a, s2)
            total_c += env.cost(s2)
            s = s2
        returns.append(total_r)
        violations.append(total_c)
    norm_reward = (float(np.mean(returns)) - lo) / (hi - lo)
    norm_cost = float(np.mean(violations)) / COST_SCALE
    return EvalReport(
        normalized_reward=norm_reward, normalized_cost=norm_cost,
        episodes=episodes, safe=norm_cost <= 1.0,
        mean_violations=float(np.mean(violations)),
        mean_return=float(np.mean(returns)),
    )


# ---------------------------------------------------------------------------
# Rollout-data monotonicity audit (tabular)
# ---------------------------------------------------------------------------


@dataclass
class MonotonicityReport:
    seeds: list[int]
    n_checked: int
    counterexamples: list[dict]

    @property
    def holds(self) -> bool:
        return not self.counterexamples


def rollout_value_monotonicity_check(
    dataset: OfflineDataset,
    env: HardCMDP,
    rollout_cfg: RolloutConfig,
    cost_fn: Callable[[np.ndarray], int],
    seeds: Sequence[int],
    gamma: float = 0.95,
    n_extra_members: int = 2,
    tol: float = 1e-9,
) -> MonotonicityReport:
    """Verify that rollout data never lowers a state's safety value.

    Two exact tabular critics train on the same dataset: one from the
    offline pairs with the dataset's own labels, one additionally fed
    retained single-step rollout branches and relabeled costs. For every
    dataset state the audited property is: the augmented value is no
    smaller than the plain one, or it is already positive.

    Single-step branches are required: only then does every retained pair
    carry a successor the conservative backup can pin above zero.
    """
    if rollout_cfg.horizon != 1:
        raise ValueError("the monotonicity audit is defined for horizon-1 branches")
    model = build_model(env)
    n = model.n_states

    s_idx = model.snap_many(dataset.s)
    a_idx = np.array([int(np.argmin(np.sum((model.actions - a) ** 2, axis=1)))
                      for a in dataset.a])
    s2_idx = model.snap_many(dataset.s2)
    offline_pairs = list(zip(s_idx, a_idx, s2_idx))

    # Labels the plain run sees: the dataset's own cost column (all safe
    # for an intervention-collected corpus).
    h_origin = np.full(n, model.h_min)
    h_origin[s2_idx[dataset.cost > 0]] = model.h_max

    cbar = np.array([1 if cost_fn(s) else 0 for s in model.states])
    h_relabel = np.where(cbar > 0, model.h_max, model.h_min)

    counterexamples: list[dict] = []
    n_checked = 0
    for seed in seeds:
        members = perturbed_models(model, n_extra_members, seed)
        rng = substream(seed, "monotonicity-rollout")
        starts = np.unique(np.concatenate([s_idx, s2_idx]))
        rollout_pairs = []
        for epoch in range(rollout_cfg.epochs):
            batch = rng.choice(starts, size=min(rollout_cfg.batch, len(starts)),
                               replace=False)
            actions = rng.integers(model.n_actions, size=len(batch))
            for st, ac in zip(batch, actions):
                succ = [m.next_idx[st, ac] for m in members]
                if any(cbar[ix] for ix in succ):
                    rollout_pairs.append((int(st), int(ac), succ))

        origin = fit_tabular_critic(model, h_origin, offline_pairs, (),
                                    gamma=gamma)
        augmented = fit_tabular_critic(model, h_relabel, offline_pairs,
                                       rollout_pairs, gamma=gamma)
        for st in np.unique(s_idx):
            n_checked += 1
            v_o = origin.v(int(st))
            v_p = augmented.v(int(st))
            if v_p < v_o - tol and v_p <= 0.0:
                counterexamples.append({
                    "seed": seed, "state_idx": int(st),
                    "state": model.states[int(st)].tolist(),
                    "v_origin": v_o, "v_augmented": v_p,
                })
    return MonotonicityReport(seeds=list(seeds), n_checked=n_checked,
                              counterexamples=counterexamples)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_reward_critic(critic: RewardCritic, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "cfg": {"gamma": critic.cfg.gamma, "expectile": critic.cfg.expectile,
                "lr": critic.cfg.lr, "batch_size": critic.cfg.batch_size,
                "target_rate": critic.cfg.target_rate,
                "hidden": list(critic.cfg.hidden)},
        "steps_trained": critic.steps_trained,
        "state_feat": critic.state_feat.to_meta(),
        "action_feat": critic.action_feat.to_meta(),
    }
    (directory / "reward_critic.json").write_text(json.dumps(meta, sort_keys=True))
    for name, net in (("qr", critic.q_net), ("vr", critic.v_net),
                      ("qr_target", critic.q_target), ("vr_target", critic.v_target)):
        save_mlp(net, directory / f"{name}.mlp")


def load_reward_critic(directory: str | Path, env: HardCMDP) -> RewardCritic:
    from .critics import onehot_action_featurizer, onehot_state_featurizer

    directory = Path(directory)
    meta = json.loads((directory / "reward_critic.json").read_text())

    def rebuild(spec: dict, action: bool) -> Featurizer:
        if spec["kind"] == "normalized":
            return Featurizer(kind="normalized", mean=np.asarray(spec["mean"]),
                              std=np.asarray(spec["std"]))
        return onehot_action_featurizer(env) if action else onehot_state_featurizer(env)

    cfg = RewardCriticConfig(**{**meta["cfg"], "hidden": tuple(meta["cfg"]["hidden"])})
    return RewardCritic(
        q_net=load_mlp(directory / "qr.mlp"),
        v_net=load_mlp(directory / "vr.mlp"),
        q_target=load_mlp(directory / "qr_target.mlp"),
        v_target=load_mlp(directory / "vr_target.mlp"),
        state_feat=rebuild(meta["state_feat"], action=False),
        action_feat=rebuild(meta["action_feat"], action=True),
        cfg=cfg, steps_trained=meta["steps_trained"],
    )


def save_policy(policy: SafePolicy, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "low": policy.low.tolist(), "high": policy.high.tolist(),
        "cfg": {"lr": policy.cfg.lr, "batch_size": policy.cfg.batch_size,
                "hidden": list(policy.cfg.hidden),
                "temperature": policy.cfg.temperature,
                "weight_clip": policy.cfg.weight_clip,
                "noise_std": policy.cfg.noise_std},
        "steps_trained": policy.steps_trained,
        "state_feat": policy.state_feat.to_meta(),
    }
    (directory / "policy.json").write_text(json.dumps(meta, sort_keys=True))
    save_mlp(policy.net, directory / "pi.mlp")


def load_policy(directory: str | Path, env: HardCMDP) -> SafePolicy:
    from .critics import onehot_state_featurizer

    directory = Path(directory)
    meta = json.loads((directory / "policy.json").read_text())
    spec = meta["state_feat"]
    if spec["kind"] == "normalized":
        feat = Featurizer(kind="normalized", mean=np.asarray(spec["mean"]),
                          std=np.asarray(spec["std"]))
    else:
        feat = onehot_state_featurizer(env)
    cfg = PolicyConfig(**{**meta["cfg"], "hidden": tuple(meta["cfg"]["hidden"])})
    return SafePolicy(net=load_mlp(directory / "pi.mlp"), state_feat=feat,
                      low=np.asarray(meta["low"]), high=np.asarray(meta["high"]),
                      cfg=cfg, steps_trained=meta["steps_trained"])


def reward_norm_from_dataset(dataset: OfflineDataset) -> tuple[float, float]:
    lo = dataset.meta.get("return_min")
    hi = dataset.meta.get("return_max")
    if lo is None or hi is None or hi <= lo:
        raise ValueError("dataset metadata lacks a usable return range")
    return float(lo), float(hi)
