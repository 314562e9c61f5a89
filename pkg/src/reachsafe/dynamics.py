"""Ensemble Gaussian dynamics models with elite selection.

Each member is an MLP mapping a normalized (state, action) pair to the
mean and log-variance of the normalized next-state delta. Members train
on their own shuffled splits by Gaussian negative log-likelihood (a
squared-error variant is available behind ``loss='mse'``), elites are the
members with the lowest held-out mean-squared prediction error, and all
set-valued prediction and conservative labeling go through elites only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .approx import Mlp, Trainer, load_mlp, save_mlp
from .cmdp import ConfigurationError, OfflineDataset
from .seeding import substream

LOGVAR_MAX = 0.5
# The floor keeps exp(-logvar) bounded: near-deterministic dimensions
# otherwise drive the inverse variance high enough that minibatch noise
# through the shared trunk stalls every other output.
LOGVAR_MIN = -6.0


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bound_logvar(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Softly clamp raw log-variances into [LOGVAR_MIN, LOGVAR_MAX].

    Returns the bounded value and its derivative w.r.t. the raw output,
    both needed by the hand-rolled NLL backward pass.
    """
    upper = LOGVAR_MAX - _softplus(LOGVAR_MAX - raw)
    d_upper = _sigmoid(LOGVAR_MAX - raw)
    bounded = LOGVAR_MIN + _softplus(upper - LOGVAR_MIN)
    d_bounded = _sigmoid(upper - LOGVAR_MIN) * d_upper
    return bounded, d_bounded


@dataclass
class GaussianDynamicsMember:
    """One next-state-delta predictor with a diagonal Gaussian head."""

    net: Mlp
    d_s: int
    val_error: float = np.inf
    fixed_var: np.ndarray | None = None  # per-dim variance for the mse variant

    def predict_norm(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = np.atleast_2d(self.net.forward(x))
        mean = out[:, : self.d_s]
        if self.fixed_var is not None:
            var = np.broadcast_to(self.fixed_var, mean.shape).copy()
        else:
            logvar, _ = _bound_logvar(out[:, self.d_s:])
            var = np.exp(logvar)
        return mean, var


@dataclass
class TrainConfig:
    hidden: tuple[int, ...] = (128, 128)
    lr: float = 1e-3
    batch_size: int = 256
    weight_decays: tuple[float, ...] = (2.5e-5, 5e-5, 1e-4)
    loss: str = "nll"  # or "mse"


@dataclass
class EnsembleDynamics:
    """Trained ensemble with elite subset and normalization statistics."""

    members: list[GaussianDynamicsMember]
    elites: list[int]
    in_mean: np.ndarray
    in_std: np.ndarray
    delta_mean: np.ndarray
    delta_std: np.ndarray
    d_s: int
    d_a: int
    val_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        if not self.members:
            raise ConfigurationError("ensemble needs at least one member")
        if not self.elites:
            raise ConfigurationError("ensemble needs at least one elite")
        if any(e < 0 or e >= len(self.members) for e in self.elites):
            raise ConfigurationError("elite index out of range")

    @property
    def n_elites(self) -> int:
        return len(self.elites)

    def _normalize_inputs(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1)
        return (x - self.in_mean) / self.in_std

    def elite_predictions(self, s: np.ndarray, a: np.ndarray
                          ) -> tuple[np.ndarray, np.ndarray]:
        """Per-elite Gaussians over next states, denormalized.

        Returns means and variances of shape (n_elites, batch, d_s).
        """
        s2d = np.atleast_2d(np.asarray(s, dtype=float))
        x = self._normalize_inputs(s2d, np.atleast_2d(np.asarray(a, dtype=float)))
        means, variances = [], []
        for e in self.elites:
            mu, var = self.members[e].predict_norm(x)
            means.append(s2d + mu * self.delta_std + self.delta_mean)
            variances.append(var * self.delta_std ** 2)
        return np.stack(means), np.stack(variances)


def predict_set(model: EnsembleDynamics, s: np.ndarray, a: np.ndarray
                ) -> list[tuple[np.ndarray, np.ndarray]]:
    """One (mean, variance) pair per elite for a single (s, a)."""
    means, variances = model.elite_predictions(s, a)
    return [(means[k, 0], variances[k, 0]) for k in range(model.n_elites)]


def sample_next(model: EnsembleDynamics, s: np.ndarray, a: np.ndarray,
                rng: np.random.Generator, deterministic: bool = False) -> np.ndarray:
    """Draw a successor from a uniformly chosen elite."""
    means, variances = model.elite_predictions(s, a)
    pick = int(rng.integers(model.n_elites))
    mean = means[pick, 0]
    if deterministic:
        return mean
    return mean + rng.normal(size=mean.shape) * np.sqrt(variances[pick, 0])


def sample_next_batch(model: EnsembleDynamics, s: np.ndarray, a: np.ndarray,
                      rng: np.random.Generator, deterministic: bool = False
                      ) -> np.ndarray:
    """Vectorized sample_next: one uniformly chosen elite per row."""
    means, variances = model.elite_predictions(s, a)
    n = means.shape[1]
    picks = rng.integers(model.n_elites, size=n)
    rows = np.arange(n)
    mean = means[picks, rows]
    if deterministic:
        return mean
    return mean + rng.normal(size=mean.shape) * np.sqrt(variances[picks, rows])


def conservative_cost_label(model: EnsembleDynamics, s: np.ndarray, a: np.ndarray,
                            cost_fn: Callable[[np.ndarray], int]) -> int:
    """1 when any elite's mean successor is flagged by ``cost_fn``."""
    means, _ = model.elite_predictions(s, a)
    return int(any(cost_fn(means[k, 0]) for k in range(model.n_elites)))


def conservative_cost_label_batch(model: EnsembleDynamics, s: np.ndarray,
                                  a: np.ndarray,
                                  cost_fn: Callable[[np.ndarray], int]) -> np.ndarray:
    means, _ = model.elite_predictions(s, a)
    n_elites, n, _ = means.shape
    labels = np.zeros(n, dtype=int)
    for k in range(n_elites):
        for i in range(n):
            if labels[i] == 0 and cost_fn(means[k, i]):
                labels[i] = 1
    return labels


def train_ensemble(
    data: OfflineDataset,
    n_total: int = 7,
    n_elite: int = 5,
    val_fraction: float = 0.2,
    epochs: int = 40,
    seed: int = 0,
    cfg: TrainConfig | None = None,
) -> EnsembleDynamics:
    """Train all members on their own shuffled splits; pick elites.

    Determinism: every member derives its init, split and minibatch order
    from a named substream of ``seed``.
    """
    cfg = cfg or TrainConfig()
    if len(data) == 0:
        raise ConfigurationError("cannot train a dynamics model on an empty dataset")
    if n_elite > n_total or n_elite < 1:
        raise ConfigurationError("need 1 <= n_elite <= n_total")
    if cfg.loss not in ("nll", "mse"):
        raise ConfigurationError(f"unknown loss {cfg.loss!r}")

    d_s = data.s.shape[1]
    d_a = data.a.shape[1]
    inputs = np.concatenate([data.s, data.a], axis=1)
    deltas = data.s2 - data.s

    in_mean = inputs.mean(axis=0)
    in_std = np.maximum(inputs.std(axis=0), 1e-6)
    delta_mean = deltas.mean(axis=0)
    delta_std = np.maximum(deltas.std(axis=0), 1e-6)
    x_all = (inputs - in_mean) / in_std
    y_all = (deltas - delta_mean) / delta_std

    n_val = int(round(val_fraction * len(data)))
    n_train = len(data) - n_val
    if n_train < cfg.batch_size:
        raise ConfigurationError(
            f"training split of {n_train} is smaller than batch size {cfg.batch_size}"
        )

    sizes = [d_s + d_a, *cfg.hidden, 2 * d_s]
    decays: list[float] = []
    n_layers = len(sizes) - 1
    for i in range(n_layers):
        wd = cfg.weight_decays[min(i, len(cfg.weight_decays) - 1)]
        decays.extend((wd, 0.0))  # decay weights, not biases

    members: list[GaussianDynamicsMember] = []
    val_errors = np.zeros(n_total)
    for k in range(n_total):
        rng = substream(seed, "dynamics-member", k)
        perm = rng.permutation(len(data))
        val_idx = perm[:n_val]
        train_idx = perm[n_val:]
        ref_idx = val_idx if n_val else train_idx
        net = Mlp(sizes, seed=int(rng.integers(1 << 31)))
        trainer = Trainer(net, lr=cfg.lr, weight_decay=decays)
        member = GaussianDynamicsMember(net=net, d_s=d_s)
        best_err = np.inf
        best_params = [p.copy() for p in net.parameters()]

        for epoch in range(epochs):
            # Settle into the minimum once the bulk of training is done.
            trainer.opt.lr = cfg.lr * (0.2 if epoch >= (2 * epochs) // 3 else 1.0)
            order = rng.permutation(len(train_idx))
            for lo in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
                batch = train_idx[order[lo:lo + cfg.batch_size]]
                x, y = x_all[batch], y_all[batch]
                out = net.forward(x)
                mu, raw = out[:, :d_s], out[:, d_s:]
                upstream = np.zeros_like(out)
                if cfg.loss == "nll":
                    logvar, dlv = _bound_logvar(raw)
                    inv_var = np.exp(-logvar)
                    diff = mu - y
                    loss = 0.5 * float(np.mean(np.sum(diff * diff * inv_var + logvar,
                                                      axis=1)))
                    upstream[:, :d_s] = diff * inv_var / len(x)
                    upstream[:, d_s:] = 0.5 * (1.0 - diff * diff * inv_var) * dlv / len(x)
                else:
                    diff = mu - y
                    loss = float(np.mean(np.sum(diff * diff, axis=1)))
                    upstream[:, :d_s] = 2.0 * diff / len(x)
                if not np.isfinite(loss):
                    raise RuntimeError(
                        f"dynamics member {k} diverged at epoch {epoch}: loss={loss}"
                    )
                grads, _ = net.backward(upstream)
                trainer.apply(grads)

            # Snapshot the epoch with the best held-out mean prediction.
            mu_ref = net.forward(x_all[ref_idx])[:, :d_s]
            err = float(np.mean((mu_ref - y_all[ref_idx]) ** 2))
            if err < best_err:
                best_err = err
                best_params = [p.copy() for p in net.parameters()]

        net.set_parameters(best_params)
        member.val_error = best_err
        if cfg.loss == "mse":
            resid = net.forward(x_all[ref_idx])[:, :d_s] - y_all[ref_idx]
            member.fixed_var = np.maximum(resid.var(axis=0), np.exp(LOGVAR_MIN))
        val_errors[k] = member.val_error
        members.append(member)

    elites = list(np.argsort(val_errors, kind="stable")[:n_elite])
    return EnsembleDynamics(
        members=members, elites=[int(e) for e in elites],
        in_mean=in_mean, in_std=in_std,
        delta_mean=delta_mean, delta_std=delta_std,
        d_s=d_s, d_a=d_a, val_errors=val_errors,
    )


# ---------------------------------------------------------------------------
# Checkpointing: per-member approx blocks plus a JSON sidecar.
# ---------------------------------------------------------------------------


def save_ensemble(model: EnsembleDynamics, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "n_members": len(model.members),
        "elites": model.elites,
        "d_s": model.d_s,
        "d_a": model.d_a,
        "in_mean": model.in_mean.tolist(),
        "in_std": model.in_std.tolist(),
        "delta_mean": model.delta_mean.tolist(),
        "delta_std": model.delta_std.tolist(),
        "val_errors": model.val_errors.tolist(),
        "fixed_var": [m.fixed_var.tolist() if m.fixed_var is not None else None
                      for m in model.members],
    }
    (directory / "ensemble.json").write_text(json.dumps(meta, sort_keys=True))
    for k, member in enumerate(model.members):
        save_mlp(member.net, directory / f"member_{k}.mlp")


def load_ensemble(directory: str | Path) -> EnsembleDynamics:
    directory = Path(directory)
    meta = json.loads((directory / "ensemble.json").read_text())
    members = []
    for k in range(meta["n_members"]):
        net = load_mlp(directory / f"member_{k}.mlp")
        fixed = meta["fixed_var"][k]
        members.append(GaussianDynamicsMember(
            net=net, d_s=meta["d_s"],
            val_error=meta["val_errors"][k],
            fixed_var=None if fixed is None else np.asarray(fixed),
        ))
    return EnsembleDynamics(
        members=members, elites=list(meta["elites"]),
        in_mean=np.asarray(meta["in_mean"]), in_std=np.asarray(meta["in_std"]),
        delta_mean=np.asarray(meta["delta_mean"]),
        delta_std=np.asarray(meta["delta_std"]),
        d_s=meta["d_s"], d_a=meta["d_a"],
        val_errors=np.asarray(meta["val_errors"]),
    )
