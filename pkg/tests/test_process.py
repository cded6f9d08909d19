import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lossagent.data import DatasetSpec, synthesize_dataset, synthesize_images
from lossagent.errors import DimensionError, LoadError, TrainingDiverged
from lossagent.losses import DEFAULT_TERMS, LossRepository
from lossagent.process import (
    ProcessState,
    ResponseSurface,
    TestSet,
    ToyRestorer,
    TrainingPool,
    load_checkpoint,
    save_checkpoint,
)


def small_pool(seed=0, count=3, size=10):
    spec = DatasetSpec(count=count, height=size, width=size, seed=seed)
    return synthesize_dataset(spec, test_size=2).pool


def restorer(terms=DEFAULT_TERMS, **kw):
    return ToyRestorer(LossRepository(terms), **kw)


def test_zero_iterations_is_noop_stage():
    proc = restorer()
    s0 = proc.initial_state(1)
    s1, report = proc.train_stage(s0, [1.0, 0.1, 0.01], 0, small_pool())
    assert np.array_equal(s1.parameters, s0.parameters)
    assert s1.stage_index == 1 and s1.iteration_count == 0
    assert report.steps_taken == 0
    assert len(report.mean_per_term_loss) == 3


def test_zero_learning_rate_leaves_parameters():
    proc = restorer(learning_rate=0.0)
    s0 = proc.initial_state(1)
    s1, report = proc.train_stage(s0, [1.0, 0.1, 0.01], 7, small_pool())
    assert np.array_equal(s1.parameters, s0.parameters)
    assert report.steps_taken == 7 and s1.iteration_count == 7


def test_one_parameter_mse_step_matches_closed_form(rng):
    # model y = k x; L(k) = mean((k x - t)^2); dL/dk = 2 mean((k x - t) x)
    x = rng.uniform(size=(3, 6, 6))
    t = rng.uniform(size=(3, 6, 6))
    lr = 0.01
    proc = ToyRestorer(LossRepository(["mse"]), kernel_size=1, learning_rate=lr)
    s0 = proc.initial_state(0)
    k0 = float(s0.parameters[0])
    grad = 2.0 * np.mean((k0 * x - t) * x)
    s1, _ = proc.train_stage(s0, [1.0], 1, TrainingPool(x, t))
    assert s1.parameters[0] == pytest.approx(k0 - lr * grad, rel=1e-12)


def test_infer_identity_and_zero(rng):
    proc = restorer()
    x = rng.uniform(size=(2, 9, 7))
    np.testing.assert_array_equal(proc.infer(proc.initial_state(), x), x)
    zero = ProcessState(np.zeros(25))
    out = proc.infer(zero, x)
    assert out.shape == x.shape and not out.any()


def test_infer_is_deterministic(rng):
    proc = restorer()
    state = ProcessState(rng.normal(size=25))
    x = rng.uniform(size=(2, 8, 8))
    np.testing.assert_array_equal(proc.infer(state, x), proc.infer(state, x))


@settings(max_examples=40, deadline=None)
@given(st.floats(-50, 50, allow_nan=False), st.integers(0, 2**32 - 1))
def test_infer_is_linear_in_input(a, seed):
    gen = np.random.default_rng(seed)
    state = ProcessState(gen.normal(size=25))
    x = gen.uniform(size=(1, 7, 7))
    proc = restorer()
    np.testing.assert_allclose(proc.infer(state, a * x), a * proc.infer(state, x), rtol=1e-9, atol=1e-9)


def test_train_stage_is_pure_and_replayable():
    proc = restorer(learning_rate=0.05)
    pool = TrainingPool(*synthesize_images(DatasetSpec(height=10, width=10), 4, 3), batch_size=2)
    s0 = proc.initial_state(7)
    before = s0.parameters.copy()
    a, ra = proc.train_stage(s0, [1.0, 0.1, 0.01], 5, pool)
    b, rb = proc.train_stage(s0, [1.0, 0.1, 0.01], 5, pool)
    assert np.array_equal(s0.parameters, before) and s0.stage_index == 0
    assert a == b and ra == rb
    assert a.rng_state == b.rng_state
    with pytest.raises(ValueError):
        s0.parameters[0] = 3.0


def test_train_stage_rejects_bad_inputs():
    proc = restorer()
    with pytest.raises(DimensionError):
        proc.train_stage(proc.initial_state(), [1.0, 0.1], 1, small_pool())
    with pytest.raises(ValueError):
        proc.train_stage(proc.initial_state(), [1.0, 0.1, 0.01], -1, small_pool())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_stage_and_step():
    proc = ToyRestorer(LossRepository(["mse"]), learning_rate=1e6)
    with pytest.raises(TrainingDiverged) as info:
        proc.train_stage(proc.initial_state(), [1.0], 500, small_pool())
    assert info.value.stage == 0 and info.value.step > 0


def test_monotone_descent_in_most_seeds():
    weights = [1.0, 0.1, 0.01]
    good = 0
    for seed in range(10):
        spec = DatasetSpec(count=6, height=16, width=16, seed=seed)
        data = synthesize_dataset(spec, test_size=4)
        proc = restorer()  # default learning rate
        state = proc.initial_state(seed)
        val = [proc.validation_loss(state, weights, data.test_set.degraded, data.test_set.clean)]
        for _ in range(10):
            state, _ = proc.train_stage(state, weights, 50, data.pool)
            val.append(proc.validation_loss(state, weights, data.test_set.degraded, data.test_set.clean))
        good += all(b <= a for a, b in zip(val, val[1:]))
    assert good >= 9


def test_surface_examples():
    surf = ResponseSurface([0.6, 0.3, 0.1])
    assert surf.surface_feedback([[0.6, 0.3, 0.1]]) == 1.0
    assert surf.surface_feedback([[0.0, 0.0, 0.0], [0.7, 0.3, 0.1]]) == pytest.approx(0.99, abs=1e-12)
    with pytest.raises(DimensionError):
        surf.surface_feedback([[0.1, 0.2]])
    with pytest.raises(ValueError):
        surf.surface_feedback([])


def test_surface_stage_records_weights():
    surf = ResponseSurface([0.6, 0.3, 0.1])
    s1, report = surf.train_stage(surf.initial_state(0), [0.5, 0.5, 0.5], 3)
    assert s1.parameters.tolist() == [0.5, 0.5, 0.5] and s1.stage_index == 1
    assert report.mean_composed_loss == pytest.approx(0.01 + 0.04 + 0.16)


def test_test_set_invariants():
    with pytest.raises(DimensionError):
        TestSet(np.zeros((0, 4, 4)))
    with pytest.raises(DimensionError):
        TestSet(np.zeros((2, 4, 4)), np.zeros((3, 4, 4)))
    assert TestSet(np.zeros((2, 4, 4))).size == 2


def test_checkpoint_round_trip_and_layout(tmp_path, rng):
    state = ProcessState(rng.normal(size=25), 4, 200)
    path = tmp_path / "ck.bin"
    save_checkpoint(state, path)
    raw = path.read_bytes()
    magic, version, count, stage, iters = struct.unpack_from("<8sIQQQ", raw)
    assert (magic, version, count, stage, iters) == (b"LAGCKPT\x00", 1, 25, 4, 200)
    assert len(raw) == struct.calcsize("<8sIQQQ") + 8 * 25
    back = load_checkpoint(path)
    assert np.array_equal(back.parameters, state.parameters)
    assert (back.stage_index, back.iteration_count) == (4, 200)


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(ProcessState(np.ones(4)), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(LoadError):
        load_checkpoint(path)
    path.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(LoadError):
        load_checkpoint(path)
    path.write_bytes(b"abc")
    with pytest.raises(LoadError):
        load_checkpoint(path)
