import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lossagent.agent import parse_weights
from lossagent.errors import ConfigError, IntegrityError
from lossagent.experts import Feedback, ObjectiveSpec, score_feedback
from lossagent.losses import DEFAULT_TERMS, EXTENDED_TERMS, TERMS, LossTerm, WeightBounds
from lossagent.process import StageReport
from lossagent.prompts import (
    DIRECTION_SENTENCE,
    STAGE_HEADER,
    HistoryMode,
    PromptBundle,
    PromptTemplates,
    build_bundle,
    build_historical_prompt,
    build_needs_prompt,
    build_system_prompt,
    render,
)
from lossagent.trajectory import TrajectoryEntry

SHARP = ObjectiveSpec(name="sharpness", expert_id="sharpness", direction="higher_better")
NIQE = ObjectiveSpec(name="niqe_proxy", expert_id="smoothness", direction="lower_better")
CRITIC = ObjectiveSpec(name="critic", expert_id="text_critic", kind="textual")
REPO = [TERMS[t] for t in DEFAULT_TERMS]


def term(tid):
    return LossTerm(tid, f"{tid} loss", True, lambda p, t: 0.0, lambda p, t: p)


def entry(i, weights=(1.0, 0.1, 0.01), feedback=None):
    fb = feedback if feedback is not None else (score_feedback("sharpness", [0.001 * (i + 1)], i),)
    return TrajectoryEntry(i, tuple(weights), tuple(fb), StageReport(0.5, (0.1, 0.2, 0.3), 10), None)


def count_entries(text):
    return len(STAGE_HEADER.findall(text))


def test_lower_better_sentence():
    text = build_system_prompt("restore", [NIQE], REPO)
    assert "Objective 'niqe_proxy' (smoothness): lower scores indicate better image quality." in text


def test_system_prompt_lists_terms_and_goal():
    text = build_system_prompt("denoise the panel", [SHARP], REPO)
    for tid in DEFAULT_TERMS:
        assert f"- {tid}:" in text
    assert "denoise the panel" in text and "goal" in text


def test_direction_sentence_counts():
    assert len(DIRECTION_SENTENCE.findall(build_system_prompt("t", [SHARP, NIQE], REPO))) == 2
    # textual objectives have no direction sentence
    assert len(DIRECTION_SENTENCE.findall(build_system_prompt("t", [SHARP, CRITIC], REPO))) == 1


def test_zero_objectives_is_config_error():
    with pytest.raises(ConfigError):
        build_system_prompt("t", [], REPO)
    with pytest.raises(ConfigError):
        build_system_prompt("t", [SHARP], [])


def test_history_full_and_last_k():
    traj3 = [entry(i) for i in range(3)]
    assert count_entries(build_historical_prompt(traj3, HistoryMode(mode="full"))) == 3
    traj5 = [entry(i) for i in range(5)]
    text = build_historical_prompt(traj5, HistoryMode(mode="last_k", k=2))
    assert [int(s) for s in STAGE_HEADER.findall(text)] == [3, 4]


@given(st.integers(0, 12), st.integers(1, 6))
def test_entry_count_law(n, k):
    traj = [entry(i) for i in range(n)]
    assert count_entries(build_historical_prompt(traj, HistoryMode(mode="last_k", k=k))) == min(n, k)
    assert count_entries(build_historical_prompt(traj, HistoryMode())) == n


def test_empty_history():
    text = build_historical_prompt([], HistoryMode())
    assert "no history" in text and "stage 0" in text


def test_non_contiguous_history():
    with pytest.raises(IntegrityError):
        build_historical_prompt([entry(0), entry(2)], HistoryMode())


def test_entry_formatting():
    fb = (score_feedback("sharpness", [0.123456], 0), Feedback("critic", "textual", ("ok",), "ok", 0))
    text = build_historical_prompt([entry(0, (1.0, 0.1, 0.01), fb)], HistoryMode(), DEFAULT_TERMS)
    assert "[Stage 0] weights: l1=1.0000, edge=0.1000, tv=0.0100" in text
    assert "  sharpness: 0.1235" in text
    assert '  critic: "ok"' in text


def test_needs_example_for_named_terms():
    terms = [term("L1"), term("Perceptual"), term("GAN")]
    text = build_needs_prompt([], terms)
    assert "L1:Perceptual:GAN=0.7:0.3:0.05" in text
    assert "- (no additional rules)" in text
    assert "0.0000 and 10.0000" in text


def test_needs_rules_verbatim():
    text = build_needs_prompt(["keep L1 dominant", "never exceed 5"], REPO, WeightBounds(0, 5))
    assert "keep L1 dominant" in text and "never exceed 5" in text
    assert "0.0000 and 5.0000" in text


@pytest.mark.parametrize("ids", [DEFAULT_TERMS, EXTENDED_TERMS, ("a",), tuple(f"t{i}" for i in range(11))])
@pytest.mark.parametrize("bounds", [WeightBounds(), WeightBounds(0, 0.1), WeightBounds(0.4, 0.6)])
def test_needs_example_parses(ids, bounds):
    from lossagent.agent import _pattern_for

    text = build_needs_prompt([], [term(t) for t in ids], bounds)
    lines = [ln for ln in text.splitlines() if _pattern_for(ids).search(ln)]
    assert len(lines) == 1
    values = parse_weights(lines[0], ids, bounds)
    assert np.all(values >= bounds.lower) and np.all(values <= bounds.upper)


def test_render_structure():
    bundle = PromptBundle("SYS", "HIST", "NEEDS")
    msgs = render(bundle)
    assert [m.role for m in msgs] == ["system", "user"]
    assert msgs[0].content == "SYS" and msgs[1].content == "HIST\n\nNEEDS"
    assert render(PromptBundle("S", "H", ""))[1].content == "H\n\n"


def test_bundle_is_deterministic():
    traj = [entry(i) for i in range(3)]
    args = ("t", [SHARP], REPO, traj, HistoryMode(), ["r"], WeightBounds())
    assert build_bundle(*args) == build_bundle(*args)


def test_prompt_length_linear_in_history():
    sizes = [len(build_historical_prompt([entry(i) for i in range(n)], HistoryMode(), DEFAULT_TERMS)) for n in range(1, 30)]
    steps = np.diff(sizes)
    assert steps.max() <= 120 and steps.min() > 0


def test_template_override(tmp_path):
    (tmp_path / "needs.txt").write_text("Bounds ${bounds}. Reply like ${format_example}", encoding="utf-8")
    templates = PromptTemplates.from_dir(tmp_path)
    text = build_needs_prompt([], REPO, WeightBounds(), templates)
    assert text == "Bounds 0.0000 and 10.0000. Reply like l1:edge:tv=0.7:0.3:0.05"
    bad = PromptTemplates(needs="${nope}")
    with pytest.raises(ConfigError):
        build_needs_prompt([], REPO, WeightBounds(), bad)


@settings(max_examples=50)
@given(st.text(min_size=1, max_size=40).filter(lambda s: "'" not in s and "\n" not in s and ")" not in s))
def test_direction_sentence_names_any_objective(name):
    obj = ObjectiveSpec(name=name, expert_id="psnr", direction="higher_better")
    found = [m.group("name") for m in DIRECTION_SENTENCE.finditer(build_system_prompt("t", [obj], REPO))]
    assert found == [name]
