import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tadlab.core import ContractError, make_rng
from tadlab.pretext import (
    TASK_KINDS,
    PretextTask,
    build_task,
    default_window,
    eicl_split,
    make_batch,
    swap_corrupt,
)


def test_rotation_task_artifacts():
    t = build_task("rotation", 2, {"C": 2}, seed=0)
    assert len(t.rotations) == 2
    np.testing.assert_array_equal(t.rotations[0], np.eye(2))
    Q = t.rotations[1]
    assert np.max(np.abs(Q.T @ Q - np.eye(2))) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(d=st.integers(1, 40), C=st.integers(2, 8), seed=st.integers(0, 2**32))
def test_rotations_orthonormal(d, C, seed):
    for Q in build_task("rotation", d, {"C": C}, seed).rotations:
        assert np.max(np.abs(Q.T @ Q - np.eye(d))) <= 1e-10


def test_shuffle_task():
    t = build_task("shuffle", 3, {"C": 3}, seed=0)
    perms = [tuple(p) for p in t.permutations]
    assert perms[0] == (0, 1, 2) and len(set(perms)) == 3
    with pytest.raises(ContractError):
        build_task("shuffle", 3, {"C": 7})
    assert len({tuple(p) for p in build_task("shuffle", 3, {"C": 6}).permutations}) == 6


def test_mask_class_task():
    t = build_task("mask_class", 10, {"C": 4, "r": 0.3}, seed=0)
    pats = [tuple(m) for m in t.masks]
    assert len(set(pats)) == 4 and all(sum(p) == 3 for p in pats)
    with pytest.raises(ContractError):
        build_task("mask_class", 3, {"C": 4, "r": 0.3})  # only 3 one-column masks


def test_task_contracts():
    with pytest.raises(ContractError):
        build_task("rotation", 3, {"C": 1})
    with pytest.raises(ContractError):
        build_task("mask_columns", 3, {"r": 1.0})
    with pytest.raises(ContractError):
        build_task("eicl", 4, {"k_w": 4})
    with pytest.raises(ContractError):
        build_task("nope", 4)
    assert default_window(16) == 4 and default_window(3) == 2 and default_window(2) == 1


def test_task_json_roundtrip(tmp_path):
    for kind in TASK_KINDS:
        t = build_task(kind, 6, seed=3)
        t.save_rotations(tmp_path / "r.bin")
        back = PretextTask.from_json(t.to_json(), tmp_path / "r.bin" if t.rotations else None)
        assert back.to_json() == t.to_json()
        for a, b in zip(t.rotations, back.rotations):
            assert a.tobytes() == b.tobytes()


def test_rotation_identity_class():
    t = build_task("rotation", 3, {"C": 4}, seed=0)
    X = make_rng(1).normal(size=(200, 3))
    b = make_batch(t, X, X, make_rng(2))
    zero = b.targets == 0
    assert zero.any()
    np.testing.assert_array_equal(b.inputs[zero], X[zero])


def test_mask_columns_example():
    x = np.array([[1.0, 2, 3, 4]])
    donor = np.array([[9.0, 9, 9, 9]])
    out = swap_corrupt(x, np.array([[False, True, False, True]]), donor, make_rng(0))
    np.testing.assert_array_equal(out, [[1, 9, 3, 9]])
    t = build_task("mask_columns", 4, {"r": 0.5}, seed=0)
    b = make_batch(t, x, donor, make_rng(0))
    np.testing.assert_array_equal(b.inputs, np.where(b.targets == 1, 9.0, x))
    assert b.targets.sum() == 2


def test_autoencoder_low_rate():
    t = build_task("autoencoder", 5, {"r": 1e-12}, seed=0)
    X = make_rng(3).normal(size=(10, 5))
    b = make_batch(t, X, X[::-1] + 100, make_rng(4))
    np.testing.assert_array_equal(b.inputs, X)
    np.testing.assert_array_equal(b.targets, X)


def test_eicl_split_example():
    x = np.array([[1.0, 2, 3, 4, 5]])
    a, b = eicl_split(x, 2, np.array([1]))
    np.testing.assert_array_equal(a, [[2, 3]])
    np.testing.assert_array_equal(b, [[1, 4, 5]])


def test_eicl_batch_shapes():
    t = build_task("eicl", 5, {"k_w": 2}, seed=0)
    X = make_rng(5).normal(size=(7, 5))
    b = make_batch(t, X, X, make_rng(0))
    assert b.inputs.shape == (7, 4, 2) and b.views.shape == (7, 3)
    for i, s in enumerate(b.targets):
        np.testing.assert_array_equal(b.inputs[i, s], X[i, s : s + 2])


def test_contrastive_views_differ():
    for kind in ("contrastive_rotation", "contrastive_shuffle", "contrastive_mask"):
        t = build_task(kind, 6, seed=0)
        X = make_rng(6).normal(size=(50, 6))
        b = make_batch(t, X, X, make_rng(1))
        assert b.inputs.shape == b.views.shape == X.shape
        assert not np.array_equal(b.inputs, b.views)


def test_batch_contracts():
    t = build_task("rotation", 3, seed=0)
    with pytest.raises(ContractError):
        make_batch(t, np.zeros((0, 3)), np.ones((2, 3)), make_rng(0))
    with pytest.raises(ContractError):
        make_batch(t, np.ones((2, 4)), np.ones((2, 4)), make_rng(0))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32), d=st.integers(2, 12))
def test_batch_properties(seed, d):
    rng = make_rng(seed)
    X = rng.normal(size=(16, d))
    pool = rng.normal(size=(30, d))
    rot = make_batch(build_task("rotation", d, seed=seed), X, pool, make_rng(seed))
    np.testing.assert_allclose(np.linalg.norm(rot.inputs, axis=1), np.linalg.norm(X, axis=1), rtol=1e-9)
    sh = make_batch(build_task("shuffle", d, {"C": min(4, math.factorial(d))}, seed=seed), X, pool, make_rng(seed))
    np.testing.assert_array_equal(np.sort(sh.inputs, axis=1), np.sort(X, axis=1))
    for kind in ("mask_class", "mask_columns", "autoencoder", "contrastive_mask"):
        cfg = {"C": 2} if kind == "mask_class" else {}
        b = make_batch(build_task(kind, d, cfg, seed=seed), X, pool, make_rng(seed))
        for v in (b.inputs, b.views) if b.views is not None else (b.inputs,):
            ok = (v == X) | np.any(v[:, None, :] == pool[None, :, :], axis=1)
            assert ok.all()
    mc = make_batch(build_task("mask_columns", d, seed=seed), X, pool, make_rng(seed))
    assert np.all(mc.targets.sum(axis=1) == math.ceil(round(0.3 * d, 9)))
    again = make_batch(build_task("mask_columns", d, seed=seed), X, pool, make_rng(seed))
    assert again.inputs.tobytes() == mc.inputs.tobytes()


def test_class_balance():
    t = build_task("shuffle", 5, {"C": 4}, seed=0)
    X = np.zeros((20000, 5))
    b = make_batch(t, X, X, make_rng(7))
    counts = np.bincount(b.targets, minlength=4)
    p = 0.25
    sigma = math.sqrt(20000 * p * (1 - p))
    assert np.all(np.abs(counts - 20000 * p) <= 3 * sigma)
