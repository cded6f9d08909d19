"""Three-part prompt construction (system, historical, customized needs) and chat rendering.

Templates use :class:`string.Template` placeholders.  Available names:
``task``, ``losses``, ``objectives``, ``history``, ``rules``, ``bounds``,
``format_example``.  Override them by dropping ``system.txt``,
``historical.txt`` and/or ``needs.txt`` in a directory and loading it with
:meth:`PromptTemplates.from_dir`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from string import Template
from typing import Literal, Sequence

from pydantic import BaseModel, ConfigDict, Field

from .backends import ChatMessage
from .errors import ConfigError, IntegrityError
from .experts import ObjectiveSpec
from .losses import LossTerm, WeightBounds

EXAMPLE_VALUES = (0.7, 0.3, 0.05, 0.2, 0.1, 0.5, 0.25, 0.15)

DIRECTION_SENTENCE = re.compile(
    r"^Objective '(?P<name>[^']+)' \([^)]*\): (?P<dir>higher|lower) scores indicate better image quality\.$",
    re.MULTILINE,
)
STAGE_HEADER = re.compile(r"^\[Stage (\d+)\]", re.MULTILINE)

DEFAULT_SYSTEM = """\
You are a loss agent. You tune the loss weights used to train an image restoration model, one training stage at a time.
Task: ${task}
The model is trained on a weighted sum of these loss functions, in this order:
${losses}
After each stage you are shown the weights that were used and the feedback that evaluation experts gave on a fixed panel of test images.
Your ultimate goal is to choose weights that make the feedback on every objective below better.
${objectives}"""

DEFAULT_HISTORICAL = """\
Optimization history:
${history}"""

DEFAULT_NEEDS = """\
Rules:
${rules}
Each weight must be a decimal number between ${bounds}.
Explain your reasoning briefly, then end with exactly one line giving the new weights, loss ids in the order shown, values separated by colons, like this:
${format_example}"""


class HistoryMode(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: Literal["full", "last_k"] = "full"
    k: int = Field(2, ge=1)


@dataclass(frozen=True)
class PromptBundle:
    system: str
    historical: str
    needs: str


@dataclass(frozen=True)
class PromptTemplates:
    system: str = DEFAULT_SYSTEM
    historical: str = DEFAULT_HISTORICAL
    needs: str = DEFAULT_NEEDS

    @classmethod
    def from_dir(cls, path: str | Path) -> "PromptTemplates":
        base = Path(path)
        parts = {}
        for name in ("system", "historical", "needs"):
            f = base / f"{name}.txt"
            if f.exists():
                parts[name] = f.read_text(encoding="utf-8")
        return cls(**parts)


def _fill(template: str, values: dict) -> str:
    try:
        return Template(template).substitute(values)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad prompt template placeholder: {exc}") from None


def fmt(value: float) -> str:
    return f"{value:.4f}"


def format_weights_line(term_ids: Sequence[str], values: Sequence[float]) -> str:
    """Render ``id1:id2:...=v1:v2:...``, the grammar the agent must reply in.

    Values use the shortest repr that round-trips exactly.
    """
    return ":".join(term_ids) + "=" + ":".join(repr(float(v)) for v in values)


def format_example(term_ids: Sequence[str], bounds: WeightBounds) -> str:
    values = [EXAMPLE_VALUES[i % len(EXAMPLE_VALUES)] for i in range(len(term_ids))]
    values = [min(max(v, bounds.lower), bounds.upper) for v in values]
    return format_weights_line(term_ids, values)


def direction_sentence(obj: ObjectiveSpec) -> str:
    word = "higher" if obj.direction == "higher_better" else "lower"
    return f"Objective '{obj.name}' ({obj.expert_id}): {word} scores indicate better image quality."


def _objective_lines(objectives: Sequence[ObjectiveSpec]) -> str:
    lines = []
    for obj in objectives:
        if obj.kind == "score":
            lines.append(direction_sentence(obj))
        else:
            lines.append(
                f"Objective '{obj.name}' ({obj.expert_id}) arrives as a written critique of each test image; "
                "aim for critiques that describe better quality."
            )
    return "\n".join(lines)


def build_system_prompt(
    task_description: str,
    objectives: Sequence[ObjectiveSpec],
    loss_terms: Sequence[LossTerm],
    templates: PromptTemplates = PromptTemplates(),
) -> str:
    if not objectives:
        raise ConfigError("the system prompt needs at least one objective")
    if not loss_terms:
        raise ConfigError("the system prompt needs at least one loss term")
    losses = "\n".join(f"- {t.id}: {t.description}" for t in loss_terms)
    return _fill(templates.system, {"task": task_description, "losses": losses, "objectives": _objective_lines(objectives)})


def render_entry(entry, term_ids: Sequence[str] | None = None) -> str:
    ids = list(term_ids) if term_ids else [f"w{i + 1}" for i in range(len(entry.weights_used))]
    weights = ", ".join(f"{tid}={fmt(w)}" for tid, w in zip(ids, entry.weights_used))
    lines = [f"[Stage {entry.stage_index}] weights: {weights}"]
    for fb in entry.feedback:
        if fb.kind == "score":
            lines.append(f"  {fb.objective_name}: {fmt(fb.aggregate)}")
        else:
            lines.append(f'  {fb.objective_name}: "{fb.aggregate}"')
    return "\n".join(lines)


def select_history(trajectory: Sequence, mode: HistoryMode) -> list:
    entries = list(trajectory)
    for prev, cur in zip(entries, entries[1:]):
        if cur.stage_index != prev.stage_index + 1:
            raise IntegrityError(f"trajectory jumps from stage {prev.stage_index} to {cur.stage_index}")
    if mode.mode == "last_k":
        return entries[-mode.k :] if entries else []
    return entries


def build_historical_prompt(
    trajectory: Sequence,
    mode: HistoryMode = HistoryMode(),
    term_ids: Sequence[str] | None = None,
    templates: PromptTemplates = PromptTemplates(),
) -> str:
    entries = select_history(trajectory, mode)
    if entries:
        history = "\n".join(render_entry(e, term_ids) for e in entries)
    else:
        history = "No stages completed yet (stage 0); there is no history."
    return _fill(templates.historical, {"history": history})


def build_needs_prompt(
    rules: Sequence[str],
    loss_terms: Sequence[LossTerm],
    bounds: WeightBounds = WeightBounds(),
    templates: PromptTemplates = PromptTemplates(),
) -> str:
    ids = [t.id for t in loss_terms]
    rule_text = "\n".join(f"- {r}" for r in rules) if rules else "- (no additional rules)"
    return _fill(
        templates.needs,
        {
            "rules": rule_text,
            "bounds": f"{fmt(bounds.lower)} and {fmt(bounds.upper)}",
            "format_example": format_example(ids, bounds),
        },
    )


def build_bundle(
    task_description: str,
    objectives: Sequence[ObjectiveSpec],
    loss_terms: Sequence[LossTerm],
    trajectory: Sequence,
    mode: HistoryMode,
    rules: Sequence[str],
    bounds: WeightBounds,
    templates: PromptTemplates = PromptTemplates(),
) -> PromptBundle:
    return PromptBundle(
        system=build_system_prompt(task_description, objectives, loss_terms, templates),
        historical=build_historical_prompt(trajectory, mode, [t.id for t in loss_terms], templates),
        needs=build_needs_prompt(rules, loss_terms, bounds, templates),
    )


def render(bundle: PromptBundle) -> list[ChatMessage]:
    return [
        ChatMessage("system", bundle.system),
        ChatMessage("user", bundle.historical + "\n\n" + bundle.needs),
    ]
