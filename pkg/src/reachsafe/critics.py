"""Parametric reachability critics trained by reverse expectile regression.

Q fits squared error against the feasible backup: on offline transitions
the successor value comes from the dataset next state, on retained
rollout steps from the worst (largest) target value across the elite
mean predictions. V regresses toward Q with the reverse expectile loss,
whose tau near 1 approximates the min over actions without ever querying
out-of-distribution actions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .approx import Mlp, Trainer, load_mlp, save_mlp, soft_update
from .cmdp import HardCMDP, OfflineDataset
from .dynamics import EnsembleDynamics
from .reachability import reverse_expectile_grad
from .rollout import RolloutBuffer
from .seeding import substream


@dataclass
class Featurizer:
    """State/action encoding for the critic networks.

    ``normalized`` shifts and scales raw vectors; ``onehot`` maps tabular
    states and the declared action set to indicator vectors.
    """

    kind: str
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    table: np.ndarray | None = None            # enumerated rows for onehot
    index: Callable[[np.ndarray], int] | None = None

    @property
    def dim(self) -> int:
        return len(self.table) if self.kind == "onehot" else len(self.mean)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "normalized":
            return (x - self.mean) / self.std
        rows = np.fromiter((self.index(row) for row in x), dtype=int, count=len(x))
        out = np.zeros((len(x), len(self.table)))
        out[np.arange(len(x)), rows] = 1.0
        return out

    def to_meta(self) -> dict:
        if self.kind == "normalized":
            return {"kind": self.kind, "mean": self.mean.tolist(),
                    "std": self.std.tolist()}
        return {"kind": self.kind}


def normalized_featurizer(samples: np.ndarray) -> Featurizer:
    return Featurizer(kind="normalized", mean=samples.mean(axis=0),
                      std=np.maximum(samples.std(axis=0), 1e-6))


def onehot_state_featurizer(env: HardCMDP) -> Featurizer:
    table = env.states

    def index(s: np.ndarray) -> int:
        try:
            return env.state_index(s)
        except KeyError:
            # Model-predicted states need not be valid grid states; snap.
            return int(np.argmin(np.sum((table - s) ** 2, axis=1)))

    return Featurizer(kind="onehot", table=table, index=index)


def onehot_action_featurizer(env: HardCMDP) -> Featurizer:
    table = env.action_set

    def index(a: np.ndarray) -> int:
        return int(np.argmin(np.sum((table - a) ** 2, axis=1)))

    return Featurizer(kind="onehot", table=table, index=index)


@dataclass
class CriticConfig:
    gamma: float = 0.99
    tau: float = 0.9
    lr: float = 3e-4
    batch_size: int = 256
    target_rate: float = 0.005
    hidden: tuple[int, ...] = (64, 64)
    include_rollout_in_v: bool = True
    rollout_batch_fraction: float = 0.5  # rollout share of each Q/V batch


@dataclass
class FeasibilityCritic:
    """Q_h(s,a) and V_h(s) networks plus their slow targets.

    When the conservative cost predicate is attached, values are
    parameterized as max(h(s), net(...)): every valid reachability value
    dominates the state's own violation value, so the known binary labels
    act as an architectural floor rather than a learned fact. The floor
    also enters the bootstrap targets.
    """

    q_net: Mlp
    v_net: Mlp
    q_target: Mlp
    v_target: Mlp
    state_feat: Featurizer
    action_feat: Featurizer
    cfg: CriticConfig
    h_min: float = -1.0
    h_max: float = 1.0
    cost_fn: Callable[[np.ndarray], int] | None = None
    steps_trained: int = 0
    trainers: dict = field(default_factory=dict)

    def floor_values(self, s: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        if self.cost_fn is None:
            return np.full(len(s), self.h_min)
        return np.array([self.h_max if self.cost_fn(row) else self.h_min
                         for row in s])

    def q_values(self, s: np.ndarray, a: np.ndarray,
                 target: bool = False) -> np.ndarray:
        x = np.concatenate([self.state_feat(s), self.action_feat(a)], axis=1)
        net = self.q_target if target else self.q_net
        return np.maximum(self.floor_values(s), net.forward(x)[:, 0])

    def v_values(self, s: np.ndarray, target: bool = False) -> np.ndarray:
        net = self.v_target if target else self.v_net
        return np.maximum(self.floor_values(s),
                          net.forward(self.state_feat(s))[:, 0])

    def classify(self, s: np.ndarray) -> str:
        return "feasible" if float(self.v_values(s)[0]) <= 0.0 else "infeasible"


def classify_feasibility(critic: FeasibilityCritic, s: np.ndarray) -> str:
    """Feasible exactly when V_h(s) <= 0 (ties count as feasible)."""
    return critic.classify(s)


def make_feasibility_critic(env: HardCMDP, dataset: OfflineDataset,
                            cfg: CriticConfig | None = None,
                            seed: int = 0,
                            cost_fn: Callable[[np.ndarray], int] | None = None
                            ) -> FeasibilityCritic:
    cfg = cfg or CriticConfig()
    if env.is_tabular:
        state_feat = onehot_state_featurizer(env)
        action_feat = onehot_action_featurizer(env)
    else:
        state_feat = normalized_featurizer(dataset.s)
        action_feat = normalized_featurizer(dataset.a)
    q_net = Mlp([state_feat.dim + action_feat.dim, *cfg.hidden, 1],
                seed=_net_seed(seed, "qh"))
    v_net = Mlp([state_feat.dim, *cfg.hidden, 1], seed=_net_seed(seed, "vh"))
    # Start the value surface at h_min, mirroring the tabular iteration:
    # safe regions are then already at their fixed point and only the
    # doomed region has to propagate upward.
    q_net.biases[-1][:] = env.h_min
    v_net.biases[-1][:] = env.h_min
    return FeasibilityCritic(
        q_net=q_net, v_net=v_net,
        q_target=q_net.copy(), v_target=v_net.copy(),
        state_feat=state_feat, action_feat=action_feat,
        cfg=cfg, h_min=env.h_min, h_max=env.h_max, cost_fn=cost_fn,
    )


def _net_seed(seed: int, label: str) -> int:
    return int(substream(seed, "critic-init", label).integers(1 << 31))


@dataclass
class _Prepared:
    """Featurized views reused across update steps."""

    feat_s: np.ndarray
    feat_a: np.ndarray
    feat_s2: np.ndarray | None
    h_s: np.ndarray
    h_s2: np.ndarray | None
    elite_next: np.ndarray | None       # (n_elites, n, d_s) raw states
    elite_floor: np.ndarray | None = None  # (n_elites, n) h at those states


def _prepare_offline(critic: FeasibilityCritic, data: OfflineDataset) -> _Prepared:
    h_s = data.h_s if data.h_s is not None else np.full(len(data), critic.h_min)
    # The relabeled cost column is the predicate at the next state.
    h_s2 = np.where(data.cost > 0, critic.h_max, critic.h_min).astype(float)
    return _Prepared(
        feat_s=critic.state_feat(data.s),
        feat_a=critic.action_feat(data.a),
        feat_s2=critic.state_feat(data.s2),
        h_s=np.asarray(h_s, dtype=float),
        h_s2=h_s2,
        elite_next=None,
    )


def _prepare_rollout(critic: FeasibilityCritic, buffer: RolloutBuffer,
                     model: EnsembleDynamics) -> _Prepared | None:
    if buffer is None or len(buffer) == 0:
        return None
    means, _ = model.elite_predictions(buffer.s, buffer.a)
    floors = np.stack([critic.floor_values(means[e])
                       for e in range(means.shape[0])])
    return _Prepared(
        feat_s=critic.state_feat(buffer.s),
        feat_a=critic.action_feat(buffer.a),
        feat_s2=None,
        h_s=buffer.h_s.astype(float),
        h_s2=None,
        elite_next=means,
        elite_floor=floors,
    )


def update_feasibility_critics(
    critic: FeasibilityCritic,
    offline: OfflineDataset,
    rollout_buffer: RolloutBuffer | None,
    model: EnsembleDynamics | None,
    steps: int,
    seed: int = 0,
    stream: tuple = (),
) -> FeasibilityCritic:
    """Run gradient steps on Q_h and V_h from offline plus rollout batches.

    The offline dataset must carry h labels (``h_s``); a missing column
    means everything sits at h_min. Rollout samples require the ensemble
    for the conservative successor values. The critic object is updated
    in place and returned.
    """
    if len(offline) == 0:
        raise ValueError("offline batch must not be empty")
    if rollout_buffer is not None and len(rollout_buffer) and model is None:
        raise ValueError("rollout samples need the dynamics ensemble")
    cfg = critic.cfg
    gamma, tau = cfg.gamma, cfg.tau

    if "q" not in critic.trainers:
        critic.trainers["q"] = Trainer(critic.q_net, lr=cfg.lr)
        critic.trainers["v"] = Trainer(critic.v_net, lr=cfg.lr)
    tr_q: Trainer = critic.trainers["q"]
    tr_v: Trainer = critic.trainers["v"]

    off = _prepare_offline(critic, offline)
    roll = _prepare_rollout(critic, rollout_buffer, model)
    rng = substream(seed, "critic-update", *stream)

    for _ in range(steps):
        idx = rng.integers(len(offline), size=min(cfg.batch_size, len(offline)))
        fs, fa, fs2 = off.feat_s[idx], off.feat_a[idx], off.feat_s2[idx]
        h = off.h_s[idx]

        v2 = np.maximum(off.h_s2[idx], critic.v_target.forward(fs2)[:, 0])
        target_off = (1 - gamma) * h + gamma * np.maximum(h, v2)

        if roll is not None:
            n_roll = len(roll.h_s)
            want = max(1, int(cfg.batch_size * cfg.rollout_batch_fraction))
            ridx = rng.integers(n_roll, size=min(want, n_roll))
            rh = roll.h_s[ridx]
            v_next = np.stack([
                np.maximum(
                    roll.elite_floor[e][ridx],
                    critic.v_target.forward(
                        critic.state_feat(roll.elite_next[e][ridx]))[:, 0],
                )
                for e in range(roll.elite_next.shape[0])
            ]).max(axis=0)
            target_roll = (1 - gamma) * rh + gamma * np.maximum(rh, v_next)
            q_in = np.concatenate([
                np.concatenate([fs, fa], axis=1),
                np.concatenate([roll.feat_s[ridx], roll.feat_a[ridx]], axis=1),
            ])
            q_tgt = np.concatenate([target_off, target_roll])
        else:
            q_in = np.concatenate([fs, fa], axis=1)
            q_tgt = target_off

        q_pred = critic.q_net.forward(q_in)[:, 0]
        upstream = (2.0 * (q_pred - q_tgt) / len(q_tgt))[:, None]
        grads, _ = critic.q_net.backward(upstream)
        tr_q.apply(grads)

        if roll is not None and cfg.include_rollout_in_v:
            v_in = np.concatenate([fs, roll.feat_s[ridx]])
            q_ref_in = q_in
        else:
            v_in = fs
            q_ref_in = np.concatenate([fs, fa], axis=1)
        q_ref = critic.q_target.forward(q_ref_in)[:, 0]
        v_pred = critic.v_net.forward(v_in)[:, 0]
        u = q_ref - v_pred
        upstream_v = (-reverse_expectile_grad(u, tau) / len(u))[:, None]
        grads_v, _ = critic.v_net.backward(upstream_v)
        tr_v.apply(grads_v)

        soft_update(critic.q_target, critic.q_net, cfg.target_rate)
        soft_update(critic.v_target, critic.v_net, cfg.target_rate)
        critic.steps_trained += 1

    return critic


# ---------------------------------------------------------------------------
# Evaluation helpers and exports
# ---------------------------------------------------------------------------


def sign_agreement(critic: FeasibilityCritic, states: np.ndarray,
                   reference_feasible: np.ndarray) -> dict:
    """Three-way agreement breakdown against a reference labeling.

    ``match`` counts identical verdicts; ``optimistic`` the states the
    critic calls feasible against an infeasible reference (the dangerous
    direction); ``pessimistic`` the opposite.
    """
    v = critic.v_values(states)
    feasible = v <= 0.0
    ref = reference_feasible.astype(bool)
    n = len(states)
    return {
        "match": float(np.mean(feasible == ref)),
        "optimistic": float(np.mean(feasible & ~ref)),
        "pessimistic": float(np.mean(~feasible & ref)),
        "n": n,
    }


def export_heatmap(path: str | Path, value_fn: Callable[[np.ndarray], np.ndarray],
                   x_range: tuple[float, float, int],
                   y_range: tuple[float, float, int],
                   fixed_tail: np.ndarray | None = None) -> None:
    """Comma-separated row-major grid of values over a 2-D state slice.

    The header line carries both axis ranges. ``fixed_tail`` appends
    constant trailing state dimensions (velocity slice for the gridworld).
    """
    x_lo, x_hi, nx = x_range
    y_lo, y_hi, ny = y_range
    xs = np.linspace(x_lo, x_hi, nx)
    ys = np.linspace(y_lo, y_hi, ny)
    tail = np.zeros(0) if fixed_tail is None else np.asarray(fixed_tail, dtype=float)
    rows = []
    for x in xs:
        states = np.stack([np.concatenate([[x, y], tail]) for y in ys])
        rows.append(value_fn(states))
    grid = np.stack(rows)
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("x_lo,x_hi,nx,y_lo,y_hi,ny\n")
        fh.write(f"{x_lo:.9g},{x_hi:.9g},{nx},{y_lo:.9g},{y_hi:.9g},{ny}\n")
        for row in grid:
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")


def save_critic(critic: FeasibilityCritic, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "cfg": {"gamma": critic.cfg.gamma, "tau": critic.cfg.tau,
                "lr": critic.cfg.lr, "batch_size": critic.cfg.batch_size,
                "target_rate": critic.cfg.target_rate,
                "hidden": list(critic.cfg.hidden),
                "include_rollout_in_v": critic.cfg.include_rollout_in_v},
        "h_min": critic.h_min, "h_max": critic.h_max,
        "steps_trained": critic.steps_trained,
        "state_feat": critic.state_feat.to_meta(),
        "action_feat": critic.action_feat.to_meta(),
    }
    (directory / "critic.json").write_text(json.dumps(meta, sort_keys=True))
    for name, net in (("qh", critic.q_net), ("vh", critic.v_net),
                      ("qh_target", critic.q_target), ("vh_target", critic.v_target)):
        save_mlp(net, directory / f"{name}.mlp")


def load_critic(directory: str | Path, env: HardCMDP) -> FeasibilityCritic:
    directory = Path(directory)
    meta = json.loads((directory / "critic.json").read_text())
    cfg = CriticConfig(**{**meta["cfg"], "hidden": tuple(meta["cfg"]["hidden"])})

    def rebuild(spec: dict, action: bool) -> Featurizer:
        if spec["kind"] == "normalized":
            return Featurizer(kind="normalized", mean=np.asarray(spec["mean"]),
                              std=np.asarray(spec["std"]))
        return onehot_action_featurizer(env) if action else onehot_state_featurizer(env)

    critic = FeasibilityCritic(
        q_net=load_mlp(directory / "qh.mlp"),
        v_net=load_mlp(directory / "vh.mlp"),
        q_target=load_mlp(directory / "qh_target.mlp"),
        v_target=load_mlp(directory / "vh_target.mlp"),
        state_feat=rebuild(meta["state_feat"], action=False),
        action_feat=rebuild(meta["action_feat"], action=True),
        cfg=cfg, h_min=meta["h_min"], h_max=meta["h_max"],
        steps_trained=meta["steps_trained"],
    )
    return critic
