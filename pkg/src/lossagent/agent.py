"""Loss agent: ask a chat backend for new loss weights and parse its reply.

Reply grammar (case-insensitive ids, whitespace allowed around delimiters)::

    id1:id2:...:idM=v1:v2:...:vM

If a reply holds several matches, the last one wins.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .backends import ChatBackend, ChatMessage, chat
from .errors import BackendError, ParseError
from .losses import WeightBounds
from .prompts import DIRECTION_SENTENCE, STAGE_HEADER, PromptBundle, format_weights_line, render

_NUMBER = r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?"
_ID_BOUNDARY = r"(?<![A-Za-z0-9_.\-])"
_TOKEN = r"[^\s:=]+"
_GENERIC = re.compile(
    rf"(?P<ids>{_TOKEN}(?:\s*:\s*{_TOKEN})*)\s*=\s*(?P<vals>{_TOKEN}(?:\s*:\s*{_TOKEN})*)"
)


def _pattern_for(term_ids: Sequence[str]) -> re.Pattern:
    ids = r"\s*:\s*".join(re.escape(t) for t in term_ids)
    vals = r"\s*:\s*".join(rf"({_NUMBER})" for _ in term_ids)
    return re.compile(
        # a trailing "." is fine (end of sentence) unless it starts another number
        rf"{_ID_BOUNDARY}{ids}\s*=\s*{vals}(?!\w)(?!\.\d)(?!\s*:\s*[\w.+-])",
        re.IGNORECASE,
    )


def _diagnose(reply: str, term_ids: Sequence[str]) -> str:
    candidates = list(_GENERIC.finditer(reply))
    if not candidates:
        return "no weight pattern found in reply"
    want = [t.lower() for t in term_ids]
    for m in reversed(candidates):
        ids = [s.strip().lower() for s in m.group("ids").split(":")]
        vals = [s.strip() for s in m.group("vals").split(":")]
        if sorted(ids) == sorted(want) and ids != want:
            return f"loss ids in wrong order: {ids} (expected {want})"
        if ids == want or ids[-len(want):] == want:
            if len(vals) != len(want):
                return f"expected {len(want)} values, found {len(vals)}"
            bad = [v for v in vals if not re.fullmatch(_NUMBER, v)]
            if bad:
                return f"non-numeric value(s) {bad}"
    return "no weight pattern with the expected loss ids found in reply"


def find_weight_pattern(reply: str, term_ids: Sequence[str]) -> list[float]:
    """Raw (unclipped) values from the last valid pattern in ``reply``."""
    if not term_ids:
        raise ValueError("term_ids must be non-empty")
    matches = list(_pattern_for(term_ids).finditer(reply))
    if not matches:
        raise ParseError(_diagnose(reply, term_ids))
    values = [float(g) for g in matches[-1].groups()]
    if not all(math.isfinite(v) for v in values):
        raise ParseError(f"non-finite value in {values}")
    return values


def parse_weights(reply: str, term_ids: Sequence[str], bounds: WeightBounds = WeightBounds()) -> np.ndarray:
    values, _ = bounds.clip(find_weight_pattern(reply, term_ids))
    return values


class RetryPolicy(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_attempts: int = Field(3, ge=1)
    temperature_schedule: tuple[float, ...] = (0.2, 0.5, 0.8)
    temperature_jitter: float = Field(0.0, ge=0.0)

    @model_validator(mode="after")
    def _non_empty(self):
        if not self.temperature_schedule:
            raise ValueError("temperature_schedule must hold at least one value")
        return self

    def temperature(self, attempt: int) -> float:
        sched = self.temperature_schedule
        return sched[min(attempt, len(sched) - 1)]


@dataclass(frozen=True)
class AgentDecision:
    weights: tuple[float, ...]
    raw_reply: str
    attempts: int
    parse_status: Literal["ok", "fallback"]
    clipped: bool = False
    replies: tuple[str, ...] = ()
    errors: tuple[str, ...] = field(default=(), compare=False)

    def reply_digest(self) -> str:
        h = hashlib.sha256()
        for r in self.replies:
            h.update(r.encode("utf-8"))
            h.update(b"\x00")
        return h.hexdigest()


def decide(
    bundle: PromptBundle,
    backend: ChatBackend,
    retry: RetryPolicy,
    previous: Sequence[float],
    term_ids: Sequence[str],
    bounds: WeightBounds = WeightBounds(),
    rng: Optional[np.random.Generator] = None,
) -> AgentDecision:
    """Query ``backend`` until a reply parses or attempts run out.

    Exhausted attempts with at least one reply fall back to ``previous``.
    If every attempt failed in transport, :class:`BackendError` is raised.
    """
    messages = render(bundle)
    replies: list[str] = []
    errors: list[str] = []
    last_transport: Optional[BackendError] = None
    for attempt in range(retry.max_attempts):
        temperature = retry.temperature(attempt)
        if retry.temperature_jitter and rng is not None:
            temperature = max(0.0, temperature + rng.uniform(-retry.temperature_jitter, retry.temperature_jitter))
        try:
            reply = chat(backend, messages, temperature)
        except BackendError as exc:
            last_transport = exc
            errors.append(str(exc))
            continue
        replies.append(reply)
        try:
            raw = find_weight_pattern(reply, term_ids)
        except ParseError as exc:
            errors.append(str(exc))
            continue
        values, clipped = bounds.clip(raw)
        return AgentDecision(
            tuple(float(v) for v in values), reply, attempt + 1, "ok", clipped, tuple(replies), tuple(errors)
        )
    if not replies:
        raise BackendError(
            f"all {retry.max_attempts} attempts failed: {last_transport}",
            last_transport.category if last_transport else "transport",
        )
    return AgentDecision(
        tuple(float(v) for v in previous), replies[-1], retry.max_attempts, "fallback", False, tuple(replies), tuple(errors)
    )


# ------------------------------------------------------- scripted hill climber

_WEIGHTS_LINE = re.compile(r"^\[Stage (\d+)\] weights: (.*)$", re.MULTILINE)


def _parse_history(user_text: str, objective: str) -> tuple[list[str], list[list[float]], list[float]]:
    ids: list[str] = []
    weights: list[list[float]] = []
    scores: list[float] = []
    blocks = STAGE_HEADER.split(user_text)
    # split yields [preamble, idx, body, idx, body, ...]
    for body in blocks[2::2]:
        head, *rest = body.split("\n")
        pairs = [p.split("=") for p in head.replace("weights:", "").split(",")]
        ids = [p[0].strip() for p in pairs]
        weights.append([float(p[1]) for p in pairs])
        score = None
        for line in rest:
            name, _, value = line.strip().partition(": ")
            if name == objective:
                score = float(value)
                break
        if score is None:
            raise ParseError(f"objective {objective!r} missing from history")
        scores.append(score)
    return ids, weights, scores


class HillClimbResponder:
    """Deterministic coordinate hill climber that reads only the rendered prompt.

    It replays its own accept/reject decisions from the history, so it holds no
    state between calls.  Moves cycle through (term 1 up, term 1 down, term 2
    up, ...); each move multiplies one weight by ``factor`` (or divides it).
    A move is kept while it improves the objective, otherwise the next move is
    tried from the best weights found so far.
    """

    def __init__(self, objective: Optional[str] = None, factor: float = 1.5, floor: float = 0.01, decimals: int = 4):
        self.objective = objective
        self.factor = factor
        self.floor = floor
        self.decimals = decimals

    def _direction(self, system: str, objective: str) -> int:
        for m in DIRECTION_SENTENCE.finditer(system):
            if m.group("name") == objective:
                return 1 if m.group("dir") == "higher" else -1
        return 1

    def _apply(self, weights: list[float], move: int) -> list[float]:
        j, up = divmod(move, 2)
        out = list(weights)
        if up == 0:
            out[j] = max(out[j], self.floor) * self.factor
        else:
            out[j] = out[j] / self.factor
        return [round(v, self.decimals) for v in out]

    def propose(self, system: str, user: str) -> tuple[list[str], list[float]]:
        objective = self.objective
        if objective is None:
            first = DIRECTION_SENTENCE.search(system)
            if first is None:
                raise ParseError("no score objective in system prompt")
            objective = first.group("name")
        sign = self._direction(system, objective)
        ids, weights, scores = _parse_history(user, objective)
        if not weights:
            raise ParseError("hill climber needs at least one history entry")
        n_moves = 2 * len(ids)
        best_w, best_s, move = weights[0], sign * scores[0], 0
        for w, s in zip(weights[1:], scores[1:]):
            if sign * s > best_s:
                best_w, best_s = w, sign * s
            else:
                move = (move + 1) % n_moves
        return ids, self._apply(best_w, move)

    def __call__(self, messages: Sequence[ChatMessage], temperature: float) -> str:
        system = next(m.content for m in messages if m.role == "system")
        user = next(m.content for m in messages if m.role == "user")
        ids, proposal = self.propose(system, user)
        return "Adjusting one weight based on the last stage.\n" + format_weights_line(ids, proposal)
