import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sernet.data import synth_dataset
from sernet.errors import DataError, NumericError, ShapeError, UsageError
from sernet.model import ModelConfig, build
from sernet.tensor import Tensor
from sernet.training import (
    DEFAULT_BATCH,
    DEFAULT_EPOCHS,
    DEFAULT_LR,
    DEFAULT_MOMENTUM,
    ClassWeights,
    HistoryRow,
    OptimState,
    class_weights_from_frequency,
    evaluate,
    history_csv,
    sgdm_step,
    step_lr,
    train,
    weighted_cross_entropy,
)

TOY = ModelConfig(num_classes=4, width_mult=0.125, seed=2)


def labels_with_counts(counts):
    v = np.concatenate([np.full(n, c) for c, n in enumerate(counts)])
    return v.reshape(1, 1, 1, -1)


# ------------------------------------------------------------ class weights


def test_inverse_frequency_example():
    w = class_weights_from_frequency([labels_with_counts([100, 300, 600])], 3).weights
    np.testing.assert_allclose(w, [10 / 3, 10 / 9, 5 / 9], rtol=1e-15)


def test_uniform_counts_give_unit_weights():
    w = class_weights_from_frequency([labels_with_counts([50, 50, 50, 50])], 4).weights
    assert np.array_equal(w, np.ones(4))


def test_absent_class_gets_zero_weight():
    w = class_weights_from_frequency([labels_with_counts([100, 0, 300])], 3).weights
    np.testing.assert_allclose(w, [400 / 300, 0.0, 400 / 900])


def test_median_frequency_weights():
    w = class_weights_from_frequency([labels_with_counts([100, 300, 600])], 3, method="median").weights
    np.testing.assert_allclose(w, [3.0, 1.0, 0.5])


def test_ignored_pixels_not_counted():
    lab = labels_with_counts([2, 2]).copy()
    lab = np.concatenate([lab, np.full((1, 1, 1, 10), 255)], axis=3)
    assert np.array_equal(class_weights_from_frequency([lab], 2).weights, np.ones(2))


def test_class_weight_errors():
    with pytest.raises(DataError):
        class_weights_from_frequency([], 3)
    with pytest.raises(DataError):
        class_weights_from_frequency([np.full((1, 1, 2, 2), 7)], 3)
    with pytest.raises(DataError):
        ClassWeights(np.zeros(3))


# -------------------------------------------------------------------- loss


def test_loss_examples():
    z = Tensor(np.zeros((1, 2, 1, 1)))
    assert weighted_cross_entropy(z, np.zeros((1, 1, 1, 1), int), ClassWeights.uniform(2)).item() == pytest.approx(math.log(2), abs=1e-15)
    z = Tensor(np.array([1.0, 0.0, 0.0]).reshape(1, 3, 1, 1))
    w = ClassWeights(np.array([2.0, 1.0, 1.0]))
    expect = -math.log(math.e / (math.e + 2))
    assert expect == pytest.approx(0.55144, abs=1e-5)
    assert weighted_cross_entropy(z, np.zeros((1, 1, 1, 1), int), w).item() == pytest.approx(expect, rel=1e-14)


def test_confident_correct_limit():
    losses = []
    for big in (1.0, 10.0, 50.0):
        z = Tensor(np.array([big, 0.0]).reshape(1, 2, 1, 1))
        losses.append(weighted_cross_entropy(z, np.zeros((1, 1, 1, 1), int), ClassWeights.uniform(2)).item())
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-20


def test_loss_matches_numpy_oracle(rng):
    z = rng.standard_normal((2, 4, 3, 3))
    y = rng.integers(0, 4, (2, 1, 3, 3))
    y[1, 0, 0, 0] = 255
    w = rng.uniform(0.1, 3, 4)
    loss = weighted_cross_entropy(Tensor(z), y, ClassWeights(w)).item()
    num = den = 0.0
    for n in range(2):
        for i in range(3):
            for j in range(3):
                c = y[n, 0, i, j]
                if c == 255:
                    continue
                p = np.exp(z[n, :, i, j]) / np.exp(z[n, :, i, j]).sum()
                num += -w[c] * np.log(p[c])
                den += w[c]
    assert loss == pytest.approx(num / den, rel=1e-13)


def test_bad_label_names_pixel():
    with pytest.raises(DataError, match=r"\(n=0, y=1, x=0\)"):
        y = np.zeros((1, 1, 2, 2), int)
        y[0, 0, 1, 0] = 9
        weighted_cross_entropy(Tensor(np.zeros((1, 3, 2, 2))), y, ClassWeights.uniform(3))
    with pytest.raises(ShapeError):
        weighted_cross_entropy(Tensor(np.zeros((1, 3, 2, 2))), np.zeros((1, 1, 2, 3), int), ClassWeights.uniform(3))


def test_all_ignored_gives_zero_loss_and_gradient():
    z = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    loss = weighted_cross_entropy(z, np.full((1, 1, 2, 2), 255), ClassWeights.uniform(2))
    loss.backward()
    assert loss.item() == 0.0 and np.all(z.grad == 0)


batch = st.tuples(st.integers(1, 3), st.integers(2, 6), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))


def _random_batch(spec):
    n, c, h, w, seed = spec
    r = np.random.default_rng(seed)
    z = r.standard_normal((n, c, h, w)) * 3
    y = r.integers(0, c, (n, 1, h, w))
    y[r.random(y.shape) < 0.1] = 255
    y.reshape(-1)[0] = 0  # keep at least one weighted pixel
    return r, z, y, ClassWeights(r.uniform(0.1, 3, c))


@given(batch)
def test_softmax_shift_invariance(spec):
    r, z, y, w = _random_batch(spec)
    shift = r.standard_normal((z.shape[0], 1) + z.shape[2:]) * 10
    a = weighted_cross_entropy(Tensor(z), y, w).item()
    b = weighted_cross_entropy(Tensor(z + shift), y, w).item()
    assert abs(a - b) <= 1e-9


@given(batch)
def test_gradient_sums_to_zero_per_pixel(spec):
    _, z, y, w = _random_batch(spec)
    t = Tensor(z, requires_grad=True)
    weighted_cross_entropy(t, y, w).backward()
    assert np.all(np.abs(t.grad.sum(axis=1)) <= 1e-9)


@given(batch, st.floats(1e-3, 1e3))
def test_weight_scale_invariance(spec, k):
    _, z, y, w = _random_batch(spec)
    a = weighted_cross_entropy(Tensor(z), y, w).item()
    b = weighted_cross_entropy(Tensor(z), y, ClassWeights(w.weights * k)).item()
    assert abs(a - b) <= 1e-9


# --------------------------------------------------------------- optimiser


def _param(v, g):
    t = Tensor(np.full((1, 1, 1, 1), v), requires_grad=True)
    t.grad = np.full((1, 1, 1, 1), g)
    return t


def test_sgdm_two_steps_by_hand():
    p = _param(0.0, 1.0)
    s = OptimState(lr=0.1, momentum=0.9, l2=0.0)
    sgdm_step(s, [("p", p)])
    assert s.velocity["p"].item() == pytest.approx(-0.1) and p.item() == pytest.approx(-0.1)
    sgdm_step(s, [("p", p)])
    assert s.velocity["p"].item() == pytest.approx(-0.19, abs=1e-15)
    assert p.item() == pytest.approx(-0.29, abs=1e-15)


def test_sgdm_zero_lr_is_noop():
    p = _param(1.5, 3.0)
    sgdm_step(OptimState(lr=0.0, momentum=0.9, l2=1e-4), [("p", p)])
    assert p.item() == 1.5


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 1))
def test_sgdm_without_momentum_is_gradient_descent(v, g, lr):
    p = _param(v, g)
    sgdm_step(OptimState(lr=lr, momentum=0.0, l2=0.0), [("p", p)])
    assert p.item() == v - lr * g


def test_sgdm_l2_term():
    p = _param(2.0, 0.0)
    sgdm_step(OptimState(lr=0.5, momentum=0.0, l2=0.1), [("p", p)])
    assert p.item() == pytest.approx(2.0 - 0.5 * 0.2)


def test_sgdm_missing_gradient():
    t = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
    with pytest.raises(UsageError, match="no gradient"):
        sgdm_step(OptimState(), [("w", t)])


def test_reference_defaults():
    assert (DEFAULT_LR, DEFAULT_BATCH, DEFAULT_MOMENTUM, DEFAULT_EPOCHS) == (0.001, 3, 0.9, 80)


def test_step_schedule():
    lrs = [step_lr(1.0, e, 80) for e in range(80)]
    assert lrs[47] == 1.0 and lrs[48] == pytest.approx(0.1) and lrs[67] == pytest.approx(0.1)
    assert lrs[68] == pytest.approx(0.01)
    assert step_lr(0.5, 10, 20, milestones=()) == 0.5


# ------------------------------------------------------------------- loop


@pytest.fixture(scope="module")
def tiny_data():
    return synth_dataset(0, 4, 32, 32, 4)


def test_zero_epochs_leaves_model_untouched(tiny_data):
    m = build(TOY)
    before = [t.data.copy() for _, t in m.parameters()]
    assert train(m, tiny_data, epochs=0) == []
    assert all(np.array_equal(a, t.data) for a, (_, t) in zip(before, m.parameters()))


def test_training_is_bit_reproducible(tiny_data):
    runs = []
    for _ in range(2):
        m = build(TOY)
        h = train(m, tiny_data, epochs=2, batch_size=3, lr=0.01, seed=7, hflip=True)
        runs.append((history_csv(h), [t.data.copy() for _, t in m.parameters()]))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))
    assert len(runs[0][0].splitlines()) == 1 + 2 * 2  # header + 2 epochs x 2 batches


def test_loss_goes_down(tiny_data):
    m = build(TOY)
    h = train(m, tiny_data, epochs=15, batch_size=4, lr=0.01, milestones=())
    assert np.mean([r.loss for r in h[-3:]]) < 0.7 * h[0].loss


def test_nan_input_aborts_with_op_name(tiny_data):
    bad = synth_dataset(0, 2, 32, 32, 4)
    bad[0].image.data[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="non-finite loss at iteration 1: op 'conv2d'"):
        train(build(TOY), bad, epochs=1, batch_size=2)


def test_empty_training_set():
    with pytest.raises(DataError):
        train(build(TOY), [], epochs=1)


def test_history_csv_format():
    text = history_csv([HistoryRow(1, 0, 0.1, 0.001)])
    assert text == "iter,epoch,loss,lr\n1,0,0.10000000000000001,0.001\n"


def test_evaluate_counts_every_pixel(tiny_data):
    cm = evaluate(build(TOY), tiny_data)
    assert cm.total == 4 * 32 * 32
