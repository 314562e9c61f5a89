"""Dataset collection: intervention-truncated safe corpora and tiny unsafe sets.

Safe collection mimics supervised data gathering with a watchdog: the
instant the behavior policy's next step would violate, the violating step
is discarded and the episode ends. The returned dataset therefore has no
cost-1 transition, but its intervention terminals are typically doomed
states.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .cmdp import (
    END_HORIZON,
    END_INTERVENTION,
    ConfigurationError,
    HardCMDP,
    OfflineDataset,
    SAFE_ONLY,
    UNSAFE_SMALL,
    UNSAFE_SMALL_LIMIT,
    empty_dataset,
)
from .envs import BehaviorFn
from .seeding import substream

BehaviorSpec = "BehaviorFn | Sequence[tuple[BehaviorFn, float]]"


def _violation_gap(env: HardCMDP, s: np.ndarray) -> float:
    # Positive distance to the violating region; <= 0 once inside it.
    if env.margin_predicate is None:
        return np.inf
    lo, hi = 0.0, 64.0
    if env.margin_predicate(0.0)(s):
        return 0.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if env.margin_predicate(mid)(s):
            hi = mid
        else:
            lo = mid
    return hi


def _pick_behavior(behavior, rng: np.random.Generator) -> BehaviorFn:
    if callable(behavior):
        return behavior
    fns, weights = zip(*behavior)
    w = np.asarray(weights, dtype=float)
    return fns[int(rng.choice(len(fns), p=w / w.sum()))]


def collect_safe_dataset(
    env: HardCMDP,
    behavior,
    n_transitions: int,
    intervention_margin: float = 0.0,
    seed: int = 0,
) -> OfflineDataset:
    """Roll the behavior policy, truncating episodes before any violation.

    ``behavior`` is a policy ``(s, rng) -> a`` or a weighted list of them,
    one drawn per episode. A step whose successor violates (or comes
    within ``intervention_margin`` of violating) is discarded entirely and
    the episode ends at the previous state.
    """
    if n_transitions < 0:
        raise ConfigurationError("n_transitions must be >= 0")
    if n_transitions == 0:
        return empty_dataset(env, SAFE_ONLY, seed)

    rng_policy = substream(seed, "collect", "policy")
    rng_init = substream(seed, "collect", "init")

    s_rows, a_rows, r_rows, s2_rows, done_rows, cost_rows = [], [], [], [], [], []
    episode_ends: list[dict] = []
    episode_returns: list[float] = []
    n_intervened = 0

    while len(r_rows) < n_transitions:
        policy = _pick_behavior(behavior, rng_policy)
        s = env.initial_state(rng_init)
        ep_return = 0.0
        ep_len = 0
        for t in range(env.horizon):
            a = env.clip_action(policy(s, rng_policy))
            s2 = env.transition(s, a)
            intervene = env.cost(s2) == 1 or (
                intervention_margin > 0 and _violation_gap(env, s2) < intervention_margin
            )
            if intervene:
                if ep_len:
                    done_rows[-1] = True
                    episode_ends.append({"index": len(r_rows) - 1,
                                         "reason": END_INTERVENTION})
                n_intervened += 1
                break
            r = env.reward(s, a, s2)
            last = t == env.horizon - 1 or len(r_rows) + 1 >= n_transitions
            s_rows.append(s); a_rows.append(a); r_rows.append(r)
            s2_rows.append(s2); done_rows.append(last); cost_rows.append(0)
            ep_return += r
            ep_len += 1
            s = s2
            if len(r_rows) >= n_transitions:
                break
        else:
            episode_ends.append({"index": len(r_rows) - 1, "reason": END_HORIZON})
        if ep_len and (not episode_ends or episode_ends[-1]["index"] != len(r_rows) - 1):
            # Episode ended by the transition cap rather than by a rule above.
            episode_ends.append({"index": len(r_rows) - 1, "reason": END_HORIZON})
        if ep_len:
            episode_returns.append(ep_return)

    meta = {
        "env": env.name, "d_s": env.d_s, "d_a": env.d_a,
        "tag": SAFE_ONLY, "seed": seed,
        "episode_ends": episode_ends,
        "n_intervened_episodes": n_intervened,
        "return_min": float(min(episode_returns)) if episode_returns else 0.0,
        "return_max": float(max(episode_returns)) if episode_returns else 0.0,
    }
    if n_intervened == 0:
        meta["no_infeasible_terminals"] = True

    return OfflineDataset(
        s=np.array(s_rows), a=np.array(a_rows), r=np.array(r_rows),
        s2=np.array(s2_rows), done=np.array(done_rows, dtype=bool),
        cost=np.array(cost_rows, dtype=int), tag=SAFE_ONLY, meta=meta,
    )


class UnsafeSampleShortage(RuntimeError):
    """Random exploration could not find enough violating transitions."""

    def __init__(self, wanted: int, found: int):
        super().__init__(f"found only {found} of {wanted} requested unsafe transitions")
        self.wanted = wanted
        self.found = found


def collect_unsafe_samples(
    env: HardCMDP,
    n: int,
    seed: int = 0,
    step_budget: int | None = None,
) -> OfflineDataset:
    """Gather exactly ``n`` cost-1 transitions by random exploration.

    States are drawn across the whole state box (not just the initial
    distribution) and paired with random actions; a transition is kept
    when its successor violates.
    """
    if n > UNSAFE_SMALL_LIMIT:
        raise ConfigurationError(f"n must not exceed {UNSAFE_SMALL_LIMIT}")
    if n == 0:
        return empty_dataset(env, UNSAFE_SMALL, seed)

    rng = substream(seed, "collect", "unsafe")
    budget = step_budget if step_budget is not None else max(2000, 500 * n)

    if env.is_tabular:
        def random_state() -> np.ndarray:
            return env.states[int(rng.integers(len(env.states)))].copy()
    else:
        ranges = env.state_grid
        if ranges is None:
            raise ConfigurationError(f"{env.name} declares no state box to explore")

        def random_state() -> np.ndarray:
            return np.array([rng.uniform(lo, hi) for lo, hi, _ in ranges])

    s_rows, a_rows, r_rows, s2_rows = [], [], [], []
    for _ in range(budget):
        if len(r_rows) >= n:
            break
        s = random_state()
        if env.cost(s) == 1:
            continue  # start from a safe state so the violation is the step's doing
        a = env.clip_action(env.action_set[int(rng.integers(len(env.action_set)))]
                            if rng.random() < 0.5 else
                            rng.uniform(env.action_bounds[:, 0], env.action_bounds[:, 1]))
        s2 = env.transition(s, a)
        if env.cost(s2) == 1:
            s_rows.append(s); a_rows.append(a)
            r_rows.append(env.reward(s, a, s2)); s2_rows.append(s2)

    if len(r_rows) < n:
        raise UnsafeSampleShortage(n, len(r_rows))

    meta = {"env": env.name, "d_s": env.d_s, "d_a": env.d_a,
            "tag": UNSAFE_SMALL, "seed": seed, "episode_ends": []}
    return OfflineDataset(
        s=np.array(s_rows), a=np.array(a_rows), r=np.array(r_rows),
        s2=np.array(s2_rows), done=np.ones(n, dtype=bool),
        cost=np.ones(n, dtype=int), tag=UNSAFE_SMALL, meta=meta,
    )
