"""Conservative cost-function generation with validation and feedback.

A proposer (scripted, or a remote chat-completion endpoint) emits
candidate predicates; each candidate must flag every transition in the
tiny unsafe corpus (recall 1.0) and flag a controlled band of the safe
corpus, the conservativeness, inside [p_min, p_max]. Failing candidates
earn a feedback message describing the miss, and the loop re-queries up
to a budget; if nothing passes, the best candidate by recall, then by
band distance, then by age, is adopted.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

import requests

from .cmdp import HardCMDP, OfflineDataset
from .safexpr import ExpressionRejected, compile_predicate
from .seeding import substream


@dataclass
class GenerationConfig:
    p_min: float = 0.10
    p_max: float = 0.30
    max_queries: int = 10
    task_text: str = ""
    cost_text: str = ""
    instruction_text: str = (
        "Write a predicate that returns 1 when an observation is unsafe and 0 "
        "otherwise. Be a little more conservative than the stated constraint: "
        "flag observations that are close to violating it as unsafe too."
    )
    eval_cap: int | None = None  # optional uniform subsample of the safe corpus
    eval_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_min <= self.p_max <= 1.0:
            raise ValueError("need 0 <= p_min <= p_max <= 1")
        if self.max_queries < 1:
            raise ValueError("max_queries must be at least 1")


@dataclass
class ValidationReport:
    recall_unsafe: float
    conservativeness: float
    passed: bool
    degenerate_unsafe: bool = False

    def band_distance(self, cfg: GenerationConfig) -> float:
        if self.conservativeness < cfg.p_min:
            return cfg.p_min - self.conservativeness
        if self.conservativeness > cfg.p_max:
            return self.conservativeness - cfg.p_max
        return 0.0


@dataclass
class CostCandidate:
    predicate: Callable[[np.ndarray], int]
    provenance: str                      # scripted | remote | manual
    source: str = ""                     # expression text for remote candidates
    margin: float | None = None          # margin for scripted candidates
    report: ValidationReport | None = None


@dataclass
class Round:
    index: int
    candidate: CostCandidate | None = None
    report: ValidationReport | None = None
    feedback_sent: str | None = None
    error: str | None = None


class ProposerError(RuntimeError):
    """A proposer call failed (transport, parse, or interpreter rejection)."""


class GenerationError(RuntimeError):
    """Every proposer call failed; carries the round history."""

    def __init__(self, history: list[Round]):
        super().__init__(f"all {len(history)} proposer calls failed")
        self.history = history


def _predicate_fraction(predicate, states: np.ndarray) -> float:
    if len(states) == 0:
        return 0.0
    hits = sum(int(bool(predicate(s))) for s in states)
    return hits / len(states)


def validate(candidate: CostCandidate, d_unsafe: OfflineDataset,
             d_safe: OfflineDataset, cfg: GenerationConfig) -> ValidationReport:
    """Score a candidate on both corpora.

    Both metrics evaluate successor states: recall is the flagged fraction
    of the unsafe corpus, conservativeness the flagged fraction of the safe
    one. The pass flag requires perfect recall first; conservativeness is
    reported either way.
    """
    degenerate = len(d_unsafe) == 0
    recall = 1.0 if degenerate else _predicate_fraction(candidate.predicate, d_unsafe.s2)

    safe_states = d_safe.s2
    if cfg.eval_cap is not None and len(safe_states) > cfg.eval_cap:
        rng = substream(cfg.eval_seed, "validate-subsample")
        idx = rng.choice(len(safe_states), size=cfg.eval_cap, replace=False)
        safe_states = safe_states[idx]
    conservativeness = _predicate_fraction(candidate.predicate, safe_states)

    passed = recall == 1.0 and cfg.p_min <= conservativeness <= cfg.p_max
    return ValidationReport(recall_unsafe=recall, conservativeness=conservativeness,
                            passed=passed, degenerate_unsafe=degenerate)


def _pct(x: float) -> str:
    return f"{100.0 * x:g}"


def feedback_message(report: ValidationReport, cfg: GenerationConfig,
                     n_unsafe: int = 100) -> str:
    """Compose the correction request for a failing report."""
    if report.recall_unsafe < 1.0:
        return (
            f"For {n_unsafe} unsafe testing samples, this function achieves "
            f"{_pct(report.recall_unsafe)}% accuracy, it should be a little "
            "more conservative."
        )
    band = f"{_pct(cfg.p_min)}%-{_pct(cfg.p_max)}%"
    base = (
        f"For safe samples, this function classifies "
        f"{_pct(report.conservativeness)}% of them as unsafe. We want to "
        f"classify {band} safe samples as unsafe."
    )
    if report.conservativeness > cfg.p_max:
        return base + " It is too conservative."
    if report.conservativeness < cfg.p_min:
        return base + " It should be a little more conservative."
    return "The cost function meets all requirements."


def select_fallback(history: Sequence[Round], cfg: GenerationConfig) -> CostCandidate:
    """Deterministic fallback: best recall, then nearest the band, then oldest."""
    scored = [
        (-(r.report.recall_unsafe), r.report.band_distance(cfg), r.index, r.candidate)
        for r in history if r.candidate is not None and r.report is not None
    ]
    if not scored:
        raise GenerationError(list(history))
    scored.sort(key=lambda t: (t[0], t[1], t[2]))
    return scored[0][3]


def generation_loop(
    proposer: Callable[[int, str | None], CostCandidate],
    d_unsafe: OfflineDataset,
    d_safe: OfflineDataset,
    cfg: GenerationConfig,
) -> tuple[CostCandidate, list[Round]]:
    """Propose, validate, feed back, repeat; at most ``max_queries`` calls.

    A failed proposer call is retried once immediately (the retry counts
    against the budget and gets its own history entry); if the retry fails
    too the loop moves on with the previous feedback.
    """
    history: list[Round] = []
    feedback: str | None = None
    calls = 0
    retry_armed = True

    while calls < cfg.max_queries:
        calls += 1
        idx = len(history)
        try:
            candidate = proposer(idx, feedback)
        except ProposerError as err:
            history.append(Round(index=idx, feedback_sent=feedback, error=str(err)))
            if retry_armed:
                retry_armed = False  # one immediate retry per failure
                continue
            retry_armed = True
            continue
        retry_armed = True
        report = validate(candidate, d_unsafe, d_safe, cfg)
        candidate.report = report
        history.append(Round(index=idx, candidate=candidate, report=report,
                             feedback_sent=feedback))
        if report.passed:
            return candidate, history
        feedback = feedback_message(report, cfg, n_unsafe=max(len(d_unsafe), 1))

    return select_fallback(history, cfg), history


# ---------------------------------------------------------------------------
# Proposers
# ---------------------------------------------------------------------------


class ScriptedMarginProposer:
    """Deterministic stand-in for a language-model proposer.

    Proposes the environment's margin predicate and walks the margin per
    feedback: grow by a fixed step when asked to be more conservative,
    shrink by half a step when told it went too far. The margin never
    goes below zero, where the predicate equals the true cost indicator.
    """

    def __init__(self, env: HardCMDP, start_margin: float = 0.0,
                 step: float | None = None):
        if env.margin_predicate is None:
            raise ValueError(f"{env.name} exposes no margin predicate")
        self.env = env
        self.margin = float(start_margin)
        self.step = float(step) if step is not None else (
            1.0 if env.is_tabular else 0.04)

    def __call__(self, round_index: int, feedback: str | None) -> CostCandidate:
        if feedback is not None:
            if "too conservative" in feedback:
                self.margin = max(0.0, self.margin - 0.5 * self.step)
            elif "more conservative" in feedback:
                self.margin += self.step
        margin = self.margin
        return CostCandidate(
            predicate=self.env.margin_predicate(margin),
            provenance="scripted",
            source=f"margin={margin:g}",
            margin=margin,
        )


def scripted_margin_proposer(env: HardCMDP, round_index: int,
                             feedback: str | None,
                             state: ScriptedMarginProposer | None = None
                             ) -> CostCandidate:
    """One-shot functional form of the scripted proposer."""
    proposer = state if state is not None else ScriptedMarginProposer(env)
    return proposer(round_index, feedback)


_CODE_BLOCK = re.compile(r"```(?:[a-zA-Z0-9_+-]*)\n(.*?)```", re.DOTALL)


@dataclass
class RemoteEndpoint:
    """Chat-completion-compatible endpoint configuration.

    The bearer token comes from the environment variable named by
    ``token_env``; it is read per request and never stored.
    """

    base_url: str
    model: str
    token_env: str = "REACHSAFE_API_TOKEN"
    timeout: float = 60.0
    temperature: float = 0.2


def _default_transport(endpoint: RemoteEndpoint, payload: dict) -> dict:
    token = os.environ.get(endpoint.token_env, "")
    if not token:
        raise ProposerError(
            f"no credential: set {endpoint.token_env} to call {endpoint.base_url}")
    url = endpoint.base_url.rstrip("/") + "/chat/completions"
    try:
        resp = requests.post(
            url, json=payload, timeout=endpoint.timeout,
            headers={"Authorization": f"Bearer {token}",
                     "Content-Type": "application/json"},
        )
        resp.raise_for_status()
        return resp.json()
    except requests.RequestException as err:
        raise ProposerError(f"endpoint error: {err}") from err


class RemoteChatProposer:
    """Proposer backed by a chat-completion endpoint.

    Keeps the running transcript (instruction, replies, feedback), extracts
    the first fenced code block of each reply, and compiles it with the
    whitelist interpreter. Request/response pairs are appended to
    ``transcript_path`` as line-delimited records when a path is given.
    """

    def __init__(self, endpoint: RemoteEndpoint, env: HardCMDP,
                 cfg: GenerationConfig,
                 transport: Callable[[RemoteEndpoint, dict], dict] | None = None,
                 transcript_path: str | Path | None = None):
        self.endpoint = endpoint
        self.env = env
        self.transport = transport or _default_transport
        self.transcript_path = Path(transcript_path) if transcript_path else None
        fields = ", ".join(env.obs_fields) or "the raw observation vector"
        self.messages: list[dict] = [{
            "role": "user",
            "content": (
                f"{cfg.instruction_text}\n\n"
                f"Task: {cfg.task_text or env.task_text}\n"
                f"Safety constraint: {cfg.cost_text or env.cost_text}\n"
                f"Observation fields, in order: {fields}.\n"
                "Reply with a single fenced code block containing either one "
                "arithmetic/boolean expression over those fields or one "
                "function of the observation whose body is a single return "
                "statement. Only arithmetic, comparisons, boolean operators, "
                "abs/min/max and constant indexing are allowed."
            ),
        }]

    def _log(self, record: dict) -> None:
        if self.transcript_path is not None:
            with self.transcript_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def __call__(self, round_index: int, feedback: str | None) -> CostCandidate:
        if feedback is not None:
            last = self.messages[-1] if self.messages else None
            if not (last and last["role"] == "user" and last["content"] == feedback):
                self.messages.append({"role": "user", "content": feedback})
        payload = {
            "model": self.endpoint.model,
            "messages": list(self.messages),
            "temperature": self.endpoint.temperature,
        }
        response = self.transport(self.endpoint, payload)
        self._log({"round": round_index, "request": payload, "response": response})
        try:
            content = response["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as err:
            raise ProposerError(f"malformed endpoint response: {err}") from err

        match = _CODE_BLOCK.search(content)
        if match is None:
            raise ProposerError("reply contains no fenced code block")
        source = match.group(1).strip()
        try:
            predicate = compile_predicate(source, self.env.obs_fields)
        except ExpressionRejected as err:
            raise ProposerError(f"rejected source: {err}") from err
        try:
            predicate(self.env.initial_state(substream(0, "preflight")))
        except Exception as err:  # noqa: BLE001 - any runtime fault fails the round
            raise ProposerError(f"predicate crashed on a probe state: {err}") from err

        self.messages.append({"role": "assistant", "content": content})
        return CostCandidate(predicate=predicate, provenance="remote", source=source)


# ---------------------------------------------------------------------------
# Candidate persistence (history files and pipeline artifacts)
# ---------------------------------------------------------------------------


def candidate_to_record(candidate: CostCandidate) -> dict:
    rec = {"provenance": candidate.provenance, "source": candidate.source,
           "margin": candidate.margin}
    if candidate.report is not None:
        rec["report"] = {
            "recall_unsafe": candidate.report.recall_unsafe,
            "conservativeness": candidate.report.conservativeness,
            "passed": candidate.report.passed,
            "degenerate_unsafe": candidate.report.degenerate_unsafe,
        }
    return rec


def candidate_from_record(rec: dict, env: HardCMDP) -> CostCandidate:
    if rec["provenance"] == "scripted":
        predicate = env.margin_predicate(float(rec["margin"]))
    elif rec["provenance"] == "remote":
        predicate = compile_predicate(rec["source"], env.obs_fields)
    else:
        raise ValueError(f"cannot rebuild a {rec['provenance']!r} candidate")
    cand = CostCandidate(predicate=predicate, provenance=rec["provenance"],
                         source=rec.get("source", ""), margin=rec.get("margin"))
    if "report" in rec:
        cand.report = ValidationReport(**rec["report"])
    return cand


def save_history(history: Sequence[Round], final: CostCandidate,
                 path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": "cost-history",
                             "final": candidate_to_record(final)}) + "\n")
        for r in history:
            fh.write(json.dumps({
                "index": r.index,
                "candidate": candidate_to_record(r.candidate) if r.candidate else None,
                "feedback_sent": r.feedback_sent,
                "error": r.error,
            }, sort_keys=True) + "\n")


def load_final_candidate(path: str | Path, env: HardCMDP) -> CostCandidate:
    with Path(path).open("r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
    if header.get("kind") != "cost-history":
        raise ValueError(f"{path} is not a cost history file")
    return candidate_from_record(header["final"], env)
