"""Optimizer update rules against hand-stepped recurrences."""

import numpy as np
import pytest

from posekd.nn.model import ParamStore
from posekd.nn.optim import (
    AdamState,
    SGDState,
    adam_step,
    init_optimizer,
    sgd_step,
)


def store_of(**arrays):
    return ParamStore({k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})


def test_sgd_zero_gradient_is_identity():
    store = store_of(w=[1.0, -2.0])
    state = SGDState.for_params(store.params)
    new, _ = sgd_step(store, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(new.params["w"], store.params["w"])


def test_sgd_single_step_no_momentum():
    store = store_of(w=[1.0])
    state = SGDState.for_params(store.params)
    new, _ = sgd_step(store, {"w": np.array([1.0])}, state, lr=0.1, momentum=0.0)
    np.testing.assert_allclose(new.params["w"], [0.9], atol=1e-15)


def test_sgd_momentum_recurrence(rng):
    store = store_of(w=rng.standard_normal(4))
    state = SGDState.for_params(store.params)
    w = store.params["w"].copy()
    v = np.zeros(4)
    for _ in range(5):
        g = rng.standard_normal(4)
        store, state = sgd_step(store, {"w": g}, state, lr=0.05, momentum=0.9)
        v = 0.9 * v + g
        w = w - 0.05 * v
    np.testing.assert_allclose(store.params["w"], w, atol=1e-14)
    np.testing.assert_allclose(state.velocity["w"], v, atol=1e-14)


def test_adam_first_step_magnitude_is_lr():
    # Bias correction makes |update| = lr * g/|g| at t=1 (up to eps), any |g|.
    for scale in (1e-4, 1.0, 1e4):
        store = store_of(w=[0.0])
        state = AdamState.for_params(store.params)
        new, _ = adam_step(store, {"w": np.array([scale])}, state, lr=0.01)
        np.testing.assert_allclose(abs(new.params["w"][0]), 0.01, rtol=1e-3)


def test_adam_recurrence(rng):
    store = store_of(w=rng.standard_normal(3))
    state = AdamState.for_params(store.params)
    lr, b1, b2, eps = 5e-3, 0.9, 0.999, 1e-8
    w = store.params["w"].copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t in range(1, 6):
        g = rng.standard_normal(3)
        store, state = adam_step(store, {"w": g}, state, lr=lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    np.testing.assert_allclose(store.params["w"], w, atol=1e-14)
    assert state.t == 5


def test_steps_return_fresh_buffers(rng):
    store = store_of(w=rng.standard_normal(2))
    state = AdamState.for_params(store.params)
    before = store.params["w"].copy()
    new, new_state = adam_step(store, {"w": np.ones(2)}, state, lr=0.1)
    np.testing.assert_array_equal(store.params["w"], before)  # input untouched
    assert new.params["w"] is not store.params["w"]
    assert new_state.m["w"] is not state.m["w"]


def test_name_misalignment_rejected():
    store = store_of(w=[1.0])
    state = SGDState.for_params(store.params)
    with pytest.raises(KeyError):
        sgd_step(store, {"wrong": np.array([1.0])}, state, lr=0.1)
    with pytest.raises(ValueError):
        sgd_step(store, {"w": np.zeros((2, 2))}, state, lr=0.1)


def test_init_optimizer_dispatch():
    params = {"w": np.zeros(2)}
    assert isinstance(init_optimizer("sgd", params), SGDState)
    assert isinstance(init_optimizer("adam", params), AdamState)
    with pytest.raises(ValueError):
        init_optimizer("rmsprop", params)
