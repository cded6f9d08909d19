"""Trajectory records and their JSONL persistence.

File layout: the first line is a header object
``{"schema_version": 1, "config_digest": str, "loss_terms": [...], "objectives": [...]}``;
every following line is one :class:`TrajectoryEntry` as JSON.  Floats are
written with ``repr`` precision, so a round trip is exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterator, Optional, Sequence

from .errors import LoadError
from .experts import Feedback
from .process import StageReport

SCHEMA_VERSION = 1


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


@dataclass(frozen=True)
class DecisionSummary:
    parse_status: str
    attempts: int
    clipped: bool
    reply_digest: str
    replies: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "parse_status": self.parse_status,
            "attempts": self.attempts,
            "clipped": self.clipped,
            "reply_digest": self.reply_digest,
            "replies": list(self.replies),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionSummary":
        return cls(d["parse_status"], int(d["attempts"]), bool(d["clipped"]), d["reply_digest"], tuple(d["replies"]))

    @classmethod
    def from_decision(cls, decision) -> "DecisionSummary":
        return cls(decision.parse_status, decision.attempts, decision.clipped, decision.reply_digest(), decision.replies)


@dataclass(frozen=True)
class TrajectoryEntry:
    stage_index: int
    weights_used: tuple[float, ...]
    feedback: tuple[Feedback, ...]
    stage_report: StageReport
    decision: Optional[DecisionSummary] = None

    def feedback_for(self, name: str) -> Feedback:
        for fb in self.feedback:
            if fb.objective_name == name:
                return fb
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "stage_index": self.stage_index,
            "weights_used": list(self.weights_used),
            "feedback": [fb.to_dict() for fb in self.feedback],
            "stage_report": self.stage_report.to_dict(),
            "decision": None if self.decision is None else self.decision.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryEntry":
        return cls(
            stage_index=int(d["stage_index"]),
            weights_used=tuple(float(v) for v in d["weights_used"]),
            feedback=tuple(Feedback.from_dict(f) for f in d["feedback"]),
            stage_report=StageReport.from_dict(d["stage_report"]),
            decision=None if d.get("decision") is None else DecisionSummary.from_dict(d["decision"]),
        )


@dataclass
class Trajectory:
    """Ordered list of entries plus the header metadata that travels with the file."""

    loss_terms: list[str]
    objectives: list[str]
    config_digest: str = ""
    entries: list[TrajectoryEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[TrajectoryEntry]:
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def header(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config_digest": self.config_digest,
            "loss_terms": list(self.loss_terms),
            "objectives": list(self.objectives),
        }

    def weight_sequence(self) -> list[tuple[float, ...]]:
        return [e.weights_used for e in self.entries]


class TrajectoryWriter:
    """Append-only JSONL writer; every line is flushed as soon as it is written."""

    def __init__(self, path: str | Path, trajectory: Trajectory):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh: IO[str] = open(self.path, "w", encoding="utf-8", newline="\n")
        self._write(trajectory.header())

    def _write(self, obj) -> None:
        self._fh.write(dumps(obj) + "\n")
        self._fh.flush()

    def append(self, entry: TrajectoryEntry) -> None:
        self._write(entry.to_dict())

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def persist(trajectory: Trajectory, path: str | Path) -> None:
    with TrajectoryWriter(path, trajectory) as w:
        for e in trajectory.entries:
            w.append(e)


def loads(text: str) -> Trajectory:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    elif lines:
        # a well-formed file ends in a newline; a missing one means truncation
        raise LoadError("final line is truncated (no trailing newline)", len(lines))
    if not lines:
        raise LoadError("empty trajectory file (missing header)", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise LoadError(f"malformed header: {exc}", 1) from None
    if not isinstance(header, dict) or header.get("schema_version") != SCHEMA_VERSION:
        raise LoadError(f"unsupported schema version {header.get('schema_version') if isinstance(header, dict) else header!r}", 1)
    traj = Trajectory(list(header.get("loss_terms", [])), list(header.get("objectives", [])), header.get("config_digest", ""))
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            traj.entries.append(TrajectoryEntry.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"malformed entry: {exc}", lineno) from None
    for prev, cur in zip(traj.entries, traj.entries[1:]):
        if cur.stage_index != prev.stage_index + 1:
            raise LoadError(f"stage index jumps from {prev.stage_index} to {cur.stage_index}")
    return traj


def load(path: str | Path) -> Trajectory:
    return loads(Path(path).read_text(encoding="utf-8"))


def objective_names(trajectory: Trajectory | Sequence[TrajectoryEntry]) -> list[str]:
    if isinstance(trajectory, Trajectory) and trajectory.objectives:
        return list(trajectory.objectives)
    entries = list(trajectory)
    return [fb.objective_name for fb in entries[0].feedback] if entries else []
