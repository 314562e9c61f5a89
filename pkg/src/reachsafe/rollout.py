"""Branched model rollouts and conservative relabeling of offline data.

Rollouts branch off dataset states with exploration noise on the policy
action, step through the learned ensemble, and keep only branches whose
conservative step labels ever fire. The labels use the any-elite rule:
a step is flagged when any elite's mean successor is flagged, which is
also the label the retained data carries into critic training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .cmdp import ConfigurationError, OfflineDataset
from .dynamics import (
    EnsembleDynamics,
    conservative_cost_label_batch,
    sample_next_batch,
)
from .seeding import substream


@dataclass
class RolloutConfig:
    """Branched-rollout schedule.

    ``frequency`` is the number of gradient steps between rollout events
    during critic training; each event samples ``batch`` start states and
    rolls each for ``horizon`` steps, repeated ``epochs`` times.
    """

    frequency: int = 2500
    batch: int = 2048
    horizon: int = 1
    epochs: int = 10
    noise_std: float = 0.1
    max_horizon: int = 10

    def __post_init__(self) -> None:
        if min(self.frequency, self.batch, self.horizon, self.epochs) < 1:
            raise ConfigurationError("rollout parameters must be positive")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be nonnegative")
        if self.horizon > self.max_horizon:
            raise ConfigurationError(
                f"rollout horizon {self.horizon} exceeds the supported "
                f"maximum of {self.max_horizon}"
            )


@dataclass
class BranchTrajectory:
    """One retained branch: (state, action, label) steps plus provenance."""

    origin: int
    s: np.ndarray        # (h, d_s)
    a: np.ndarray        # (h, d_a)
    label: np.ndarray    # (h,) conservative any-elite labels
    violated: bool = field(init=False)

    def __post_init__(self) -> None:
        self.violated = bool(self.label.sum() > 0)

    def __len__(self) -> int:
        return len(self.label)


def branched_rollout(
    policy: Callable[[np.ndarray], np.ndarray],
    dataset: OfflineDataset,
    model: EnsembleDynamics,
    cost_fn: Callable[[np.ndarray], int],
    cfg: RolloutConfig,
    seed: int,
    event: int = 0,
    action_bounds: np.ndarray | None = None,
) -> list[BranchTrajectory]:
    """Run one rollout event; return only branches containing a violation.

    ``policy`` maps a batch of states to a batch of actions. Start states
    are drawn uniformly without replacement (per epoch) from the dataset's
    states plus its episode terminals. Noise, elite choice and Gaussian
    sampling all derive from (seed, event, epoch), so results do not
    depend on scheduling. Noisy actions are clipped to ``action_bounds``
    when given ((d_a, 2) lo/hi columns).
    """
    if len(dataset) == 0:
        raise ConfigurationError("cannot roll out from an empty dataset")
    pool = dataset.rollout_start_states()
    if action_bounds is not None:
        lo, hi = action_bounds[:, 0], action_bounds[:, 1]
    else:
        lo, hi = -np.inf, np.inf

    kept: list[BranchTrajectory] = []
    for epoch in range(cfg.epochs):
        rng = substream(seed, "rollout", event, epoch)
        n = min(cfg.batch, len(pool))
        starts = rng.choice(len(pool), size=n, replace=False)
        s = pool[starts].copy()
        steps_s = np.zeros((cfg.horizon, n, s.shape[1]))
        steps_a = np.zeros((cfg.horizon, n, model.d_a))
        steps_c = np.zeros((cfg.horizon, n), dtype=int)
        for t in range(cfg.horizon):
            a = np.atleast_2d(policy(s))
            if cfg.noise_std > 0:
                a = a + rng.normal(scale=cfg.noise_std, size=a.shape)
            a = np.clip(a, lo, hi)
            steps_s[t] = s
            steps_a[t] = a
            steps_c[t] = conservative_cost_label_batch(model, s, a, cost_fn)
            s = sample_next_batch(model, s, a, rng)
        violated = steps_c.sum(axis=0) > 0
        for i in np.nonzero(violated)[0]:
            kept.append(BranchTrajectory(
                origin=int(starts[i]),
                s=steps_s[:, i].copy(),
                a=steps_a[:, i].copy(),
                label=steps_c[:, i].copy(),
            ))
    return kept


@dataclass
class RolloutBuffer:
    """Flat view over retained branch steps for critic training."""

    s: np.ndarray
    a: np.ndarray
    label: np.ndarray
    h_s: np.ndarray
    origin: np.ndarray

    def __len__(self) -> int:
        return len(self.label)


def flatten_branches(branches: Sequence[BranchTrajectory], h_min: float,
                     h_max: float) -> RolloutBuffer:
    """Stack retained branches; h labels derive from the step labels."""
    if not branches:
        d = 0
        return RolloutBuffer(s=np.zeros((0, 1)), a=np.zeros((0, 1)),
                             label=np.zeros(0, dtype=int), h_s=np.zeros(0),
                             origin=np.zeros(0, dtype=int))
    s = np.concatenate([b.s for b in branches])
    a = np.concatenate([b.a for b in branches])
    label = np.concatenate([b.label for b in branches])
    origin = np.concatenate([np.full(len(b), b.origin) for b in branches])
    h_s = np.where(label > 0, h_max, h_min)
    return RolloutBuffer(s=s, a=a, label=label, h_s=h_s, origin=origin)


def relabel_offline(dataset: OfflineDataset, cost_fn: Callable[[np.ndarray], int],
                    h_min: float, h_max: float) -> OfflineDataset:
    """Fresh copy of the dataset with costs and h labels from ``cost_fn``.

    The cost column becomes the predicate at the next state; ``h_s``
    carries the label of the current state for backup targets. The input
    dataset is never touched, and the operation is idempotent.
    """
    cost = np.array([int(bool(cost_fn(s2))) for s2 in dataset.s2], dtype=int)
    cbar_s = np.array([int(bool(cost_fn(s))) for s in dataset.s], dtype=int)
    out = OfflineDataset(
        s=dataset.s.copy(), a=dataset.a.copy(), r=dataset.r.copy(),
        s2=dataset.s2.copy(), done=dataset.done.copy(), cost=cost,
        tag="mixed", meta={**dataset.meta, "relabeled": True,
                           "source_tag": dataset.tag},
        h_s=np.where(cbar_s > 0, h_max, h_min),
    )
    return out


def save_rollout_buffer(buffer: RolloutBuffer, path: str | Path,
                        meta: dict | None = None) -> None:
    """Same line-delimited shape as datasets, plus the origin index."""
    path = Path(path)
    header = {"kind": "rollout-buffer", "meta": meta or {}, "n": len(buffer)}
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(len(buffer)):
            fh.write(json.dumps({
                "s": [float(x) for x in buffer.s[i]],
                "a": [float(x) for x in buffer.a[i]],
                "r": 0.0,
                "s2": [float(x) for x in buffer.s[i]],
                "done": 0,
                "c": int(buffer.label[i]),
                "h_s": float(buffer.h_s[i]),
                "origin": int(buffer.origin[i]),
            }) + "\n")


def load_rollout_buffer(path: str | Path) -> RolloutBuffer:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "rollout-buffer":
            raise ConfigurationError(f"{path} is not a rollout buffer")
        rows = [json.loads(line) for line in fh if line.strip()]
    if not rows:
        return flatten_branches([], -1.0, 1.0)
    return RolloutBuffer(
        s=np.array([r["s"] for r in rows], dtype=float),
        a=np.array([r["a"] for r in rows], dtype=float),
        label=np.array([r["c"] for r in rows], dtype=int),
        h_s=np.array([r["h_s"] for r in rows], dtype=float),
        origin=np.array([r["origin"] for r in rows], dtype=int),
    )
