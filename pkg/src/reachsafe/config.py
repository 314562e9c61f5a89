"""Experiment configuration: plain-text key/value files, defaults, hashing.

The file format is one ``dotted.key = value`` pair per line, ``#`` for
comments; values parse as JSON when possible and as bare strings
otherwise. Hashes cover the canonical serialization, so any semantic
change to the configuration invalidates stage artifacts on resume.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .cmdp import ConfigurationError, HardCMDP
from .envs import behavior_mixture, make_double_integrator, make_hazard_gridworld

ABLATIONS = ("no-model", "no-relabel", "det-rollout", "no-conservative", "ungated")


@dataclass
class EnvSection:
    name: str = "gridworld"
    width: int = 7
    height: int = 7
    hazards: list = field(default_factory=lambda: [[2, 2], [4, 4]])
    momentum: int = 1
    gamma: float = 0.99
    horizon: int = 40
    x_lim: float = 1.0
    a_max: float = 1.0
    dt: float = 0.1
    v_max: float = 1.0


@dataclass
class DataSection:
    n_transitions: int = 8000
    n_unsafe: int = 100
    behavior: list = field(default_factory=lambda: [["goal_greedy", 0.4],
                                                    ["random", 0.4],
                                                    ["straight", 0.2]])
    intervention_margin: float = 0.0


@dataclass
class DynamicsSection:
    n_total: int = 7
    n_elite: int = 5
    val_fraction: float = 0.2
    epochs: int = 25
    lr: float = 1e-3
    batch_size: int = 256
    hidden: list = field(default_factory=lambda: [128, 128])
    loss: str = "nll"


@dataclass
class CostGenSection:
    proposer: str = "scripted"
    p_min: float = 0.10
    p_max: float = 0.30
    max_queries: int = 10
    margin_step: float = 1.0
    remote_base_url: str = ""
    remote_model: str = ""
    remote_token_env: str = "REACHSAFE_API_TOKEN"


@dataclass
class LearnSection:
    total_steps: int = 7500
    critic_gamma: float = 0.95
    critic_tau: float = 0.9
    critic_lr: float = 1e-3
    critic_target_rate: float = 0.01
    policy_lr: float = 3e-4
    include_rollout_in_v: bool = True
    rollout_batch_fraction: float = 0.5
    reward_gamma: float = 0.99
    reward_expectile: float = 0.7
    reward_steps_fraction: float = 0.5
    policy_temperature: float = 3.0
    policy_weight_clip: float = 100.0
    batch_size: int = 256
    hidden: list = field(default_factory=lambda: [64, 64])
    rollout_frequency: int = 2500
    rollout_batch: int = 1024
    rollout_horizon: int = 1
    rollout_epochs: int = 10
    rollout_noise_std: float = 0.1
    rollout_window: int = 2


@dataclass
class EvalSection:
    episodes: int = 20


@dataclass
class ExperimentConfig:
    seed: int = 0
    ablations: list = field(default_factory=list)
    env: EnvSection = field(default_factory=EnvSection)
    data: DataSection = field(default_factory=DataSection)
    dynamics: DynamicsSection = field(default_factory=DynamicsSection)
    costgen: CostGenSection = field(default_factory=CostGenSection)
    learn: LearnSection = field(default_factory=LearnSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        if self.env.name not in ("gridworld", "double_integrator"):
            raise ConfigurationError(f"unknown environment {self.env.name!r}")
        for a in self.ablations:
            if a not in ABLATIONS:
                raise ConfigurationError(
                    f"unknown ablation {a!r}; choose from {ABLATIONS}")
        if not 0 < self.learn.critic_gamma < 1:
            raise ConfigurationError("critic gamma must lie in (0,1)")
        if not 0 < self.learn.critic_tau < 1:
            raise ConfigurationError("critic tau must lie in (0,1)")
        if not 0 <= self.costgen.p_min <= self.costgen.p_max <= 1:
            raise ConfigurationError("need 0 <= p_min <= p_max <= 1")
        if self.costgen.proposer not in ("scripted", "remote"):
            raise ConfigurationError("proposer must be scripted or remote")
        if self.data.n_unsafe > 100:
            raise ConfigurationError("the unsafe corpus is capped at 100")
        if self.eval.episodes < 1:
            raise ConfigurationError("need at least one evaluation episode")

    def variant(self) -> str:
        return "+".join(sorted(self.ablations)) if self.ablations else "full"


def default_config(env_name: str) -> ExperimentConfig:
    """Desk-scale defaults per environment."""
    if env_name == "gridworld":
        return ExperimentConfig()
    if env_name == "double_integrator":
        return ExperimentConfig(
            env=EnvSection(name="double_integrator", gamma=0.995, horizon=60),
            data=DataSection(
                n_transitions=8000,
                behavior=[["hover", 0.15], ["probe", 0.3], ["creep", 0.05],
                          ["random", 0.3], ["brake", 0.15], ["outward", 0.05]],
            ),
            costgen=CostGenSection(margin_step=0.04),
            learn=LearnSection(
                total_steps=15000,
                critic_gamma=0.98,
                critic_tau=0.98,
                include_rollout_in_v=False,
                rollout_batch_fraction=0.25,
                rollout_batch=2048,
                rollout_horizon=3,
            ),
        )
    raise ConfigurationError(f"unknown environment {env_name!r}")


def build_env(cfg: ExperimentConfig) -> HardCMDP:
    e = cfg.env
    if e.name == "gridworld":
        return make_hazard_gridworld(e.width, e.height,
                                     [tuple(h) for h in e.hazards],
                                     momentum=e.momentum, gamma=e.gamma,
                                     horizon=e.horizon)
    return make_double_integrator(x_lim=e.x_lim, a_max=e.a_max, dt=e.dt,
                                  horizon=e.horizon, v_max=e.v_max,
                                  gamma=e.gamma)


def build_behavior(cfg: ExperimentConfig, env: HardCMDP):
    return behavior_mixture(env, [(kind, float(w)) for kind, w in cfg.data.behavior])


# ---------------------------------------------------------------------------
# Key/value file format
# ---------------------------------------------------------------------------


def _flatten(prefix: str, obj) -> list[tuple[str, object]]:
    if isinstance(obj, dict):
        out = []
        for key in sorted(obj):
            path = f"{prefix}.{key}" if prefix else key
            out.extend(_flatten(path, obj[key]))
        return out
    return [(prefix, obj)]


def to_text(cfg: ExperimentConfig) -> str:
    pairs = _flatten("", asdict(cfg))
    lines = [f"{key} = {json.dumps(value)}" for key, value in pairs]
    return "\n".join(lines) + "\n"


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(to_text(cfg), encoding="utf-8")


def _assign(target, dotted: str, value) -> None:
    parts = dotted.split(".")
    obj = target
    for part in parts[:-1]:
        if not hasattr(obj, part):
            raise ConfigurationError(f"unknown configuration section {part!r}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not hasattr(obj, leaf):
        raise ConfigurationError(f"unknown configuration key {dotted!r}")
    current = getattr(obj, leaf)
    if isinstance(current, bool) and not isinstance(value, bool):
        raise ConfigurationError(f"{dotted} expects a boolean")
    if isinstance(current, int) and not isinstance(current, bool) \
            and isinstance(value, float) and not value.is_integer():
        raise ConfigurationError(f"{dotted} expects an integer")
    if isinstance(current, int) and not isinstance(current, bool) \
            and isinstance(value, (int, float)):
        value = int(value)
    setattr(obj, leaf, value)


def load_config(path: str | Path, base: ExperimentConfig | None = None
                ) -> ExperimentConfig:
    """Parse a key/value file over the environment-specific defaults."""
    text = Path(path).read_text(encoding="utf-8")
    pairs: list[tuple[str, object]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value_text = line.partition("=")
        value_text = value_text.strip()
        try:
            value = json.loads(value_text)
        except json.JSONDecodeError:
            value = value_text
        pairs.append((key.strip(), value))

    if base is None:
        env_name = next((v for k, v in pairs if k == "env.name"), "gridworld")
        base = default_config(str(env_name))
    for key, value in pairs:
        _assign(base, key, value)
    base.validate()
    return base


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(to_text(cfg).encode("utf-8")).hexdigest()[:16]
