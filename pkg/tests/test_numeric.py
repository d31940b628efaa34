"""Autodiff core: op gradients vs finite differences, contracts, store rules."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mstmix import numeric as nx
from mstmix.errors import (
    InvalidInputError,
    ParameterError,
    ShapeError,
    VerificationError,
)
from mstmix.numeric import ParamStore, Tensor, finite_difference_gradients


def fd_check(build, tensors, eps=1e-6, tol=1e-6):
    """Central-difference check of a scalar-valued graph builder."""
    for t in tensors:
        t.grad = None
    out = build()
    out.backward()
    for t in tensors:
        flat = t.data.reshape(-1)
        grad = np.zeros_like(flat) if t.grad is None else t.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(build().data)
            flat[i] = orig - eps
            fm = float(build().data)
            flat[i] = orig
            fd = (fp - fm) / (2 * eps)
            assert abs(fd - grad[i]) <= tol * max(abs(fd), abs(grad[i]), 1.0), (
                f"coord {i}: fd={fd} ad={grad[i]}"
            )


class TestElementwiseGrads:
    def test_add_mul_div_chain(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), leaf=True)
        b = Tensor(rng.normal(size=(4,)) + 3.0, leaf=True)
        fd_check(lambda: ((a * b + a) / b - a * 0.5).sum(), [a, b])

    def test_matmul_batched(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(2, 3, 4)), leaf=True)
        b = Tensor(rng.normal(size=(4, 5)), leaf=True)
        fd_check(lambda: ((a @ b) * (a @ b)).sum(), [a, b])

    def test_reductions_and_pointwise(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.uniform(0.5, 2.0, size=(4, 5)), leaf=True)
        fd_check(lambda: (a.sqrt() + a.log() + a.exp()).mean(axis=1).sum(), [a])

    def test_relu_and_clamp(self):
        # values kept away from the kinks so central differences are valid
        a = Tensor(np.array([-1.8, -0.6, 0.5, 1.1, 2.4, -3.0]), leaf=True)
        fd_check(lambda: (a.relu() * a).sum(), [a])
        fd_check(lambda: nx.clamp_min(a, 0.25).sum(), [a])

    def test_transpose_reshape_concat(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.normal(size=(2, 3)), leaf=True)
        b = Tensor(rng.normal(size=(2, 3)), leaf=True)

        def build():
            c = nx.concat([a, b], axis=1)                 # (2, 6)
            return (c.transpose((1, 0)).reshape((3, 4)) * c.reshape((3, 4))).sum()

        fd_check(build, [a, b])

    def test_gather_scatter_rows(self):
        rng = np.random.default_rng(5)
        base = Tensor(rng.normal(size=(5, 3)), leaf=True)
        rows = Tensor(rng.normal(size=(2, 3)), leaf=True)
        idx = np.array([1, 3])
        fd_check(lambda: (nx.scatter_rows(base, idx, rows) ** 2 if False else
                          (nx.scatter_rows(base, idx, rows) * nx.scatter_rows(base, idx, rows)).sum()),
                 [base, rows])
        fd_check(lambda: (nx.gather_rows(base, np.array([0, 0, 4])) * 2.0).sum(), [base])

    def test_gather_scatter_axis1(self):
        rng = np.random.default_rng(6)
        base = Tensor(rng.normal(size=(2, 5, 3)), leaf=True)
        rows = Tensor(rng.normal(size=(2, 2, 3)), leaf=True)
        idx = np.array([[0, 2], [1, 4]])
        fd_check(lambda: (nx.scatter_axis1(base, idx, rows) * 1.5).sum(), [base, rows])
        fd_check(lambda: (nx.gather_axis1(base, idx) * rows).sum(), [base, rows])

    def test_block_diag(self):
        rng = np.random.default_rng(7)
        a = Tensor(rng.normal(size=(2, 2)), leaf=True)
        b = Tensor(rng.normal(size=(3, 3)), leaf=True)
        out = nx.block_diag([a, b])
        assert out.shape == (5, 5)
        np.testing.assert_array_equal(out.data[:2, 2:], 0.0)
        np.testing.assert_array_equal(out.data[2:, :2], 0.0)
        fd_check(lambda: (nx.block_diag([a, b]) * nx.const(np.arange(25.0).reshape(5, 5))).sum(),
                 [a, b])

    def test_block_diag_batch_roundtrip(self):
        rng = np.random.default_rng(8)
        blocks = Tensor(rng.normal(size=(3, 4, 2, 2)), leaf=True)
        out = nx.block_diag_batch(blocks)
        assert out.shape == (3, 8, 8)
        for i in range(4):
            np.testing.assert_array_equal(
                out.data[:, 2 * i:2 * i + 2, 2 * i:2 * i + 2], blocks.data[:, i]
            )
        mask = np.ones((3, 8, 8))
        fd_check(lambda: (nx.block_diag_batch(blocks) * nx.const(mask)).sum(), [blocks])

    def test_scatter_rejects_bad_indices(self):
        base = Tensor(np.zeros((4, 2)))
        rows = Tensor(np.ones((2, 2)))
        with pytest.raises(IndexError):
            nx.scatter_rows(base, np.array([1, 1]), rows)
        with pytest.raises(IndexError):
            nx.scatter_rows(base, np.array([1, 7]), rows)


class TestLogSoftmax:
    def test_symmetry_pair(self):
        out = nx.log_softmax(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, math.log(0.5), atol=1e-15)

    def test_uniform_rows(self):
        out = nx.log_softmax(Tensor([3.5, 3.5, 3.5]))
        assert np.ptp(out.data) == 0.0
        assert abs(np.exp(out.data).sum() - 1.0) < 1e-12

    def test_direct_scalar_evaluation(self):
        v = np.array([0.0, 0.5])
        out = nx.log_softmax(Tensor(v)).data
        z = np.exp(0.0) + np.exp(0.5)
        np.testing.assert_allclose(out, v - math.log(z), atol=1e-12)

    def test_extreme_inputs_no_overflow(self):
        v = np.array([-1e3, 0.0, 1e3])
        out = nx.log_softmax(Tensor(v)).data
        assert np.all(np.isfinite(out))
        assert abs(np.exp(out).sum() - 1.0) < 1e-12

    def test_rejects_nonfinite(self):
        with pytest.raises(InvalidInputError):
            nx.log_softmax(Tensor([np.nan, 0.0]))

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=8))
    @settings(max_examples=60, deadline=None)
    def test_exp_sums_to_one(self, vals):
        out = nx.log_softmax(Tensor(np.array(vals)))
        assert abs(np.exp(out.data).sum() - 1.0) < 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(3, 4)), leaf=True)
        w = nx.const(rng.normal(size=(3, 4)))
        fd_check(lambda: (nx.log_softmax(x) * w).sum(), [x])


class TestCosine:
    def test_identical(self):
        assert nx.cosine_similarity(Tensor([1.0, 0.0]), Tensor([1.0, 0.0])).item() == 1.0

    def test_orthogonal(self):
        assert nx.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0

    def test_direct_evaluation(self):
        got = nx.cosine_similarity(Tensor([1.0, 1.0]), Tensor([1.0, 0.0])).item()
        np.testing.assert_allclose(got, 1.0 / math.sqrt(2.0), atol=1e-15)

    def test_zero_norm_convention(self):
        assert nx.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 2.0])).item() == 0.0

    @given(
        st.lists(st.floats(-10, 10), min_size=2, max_size=6),
        st.floats(0.01, 100.0),
        st.floats(0.01, 100.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_symmetry_and_scale_invariance(self, vals, a, b):
        u = np.array(vals)
        v = u[::-1].copy() + 0.5
        c1 = nx.cosine_similarity(Tensor(u), Tensor(v)).item()
        c2 = nx.cosine_similarity(Tensor(v), Tensor(u)).item()
        c3 = nx.cosine_similarity(Tensor(a * u), Tensor(b * v)).item()
        assert abs(c1 - c2) < 1e-12
        assert abs(c1 - c3) < 1e-12
        assert -1.0 - 1e-12 <= c1 <= 1.0 + 1e-12

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            nx.cosine_similarity(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_gradient(self):
        rng = np.random.default_rng(10)
        u = Tensor(rng.normal(size=5), leaf=True)
        v = Tensor(rng.normal(size=5), leaf=True)
        fd_check(lambda: nx.cosine_similarity(u, v), [u, v])


class TestParamStore:
    def test_groups_and_duplicates(self):
        store = ParamStore()
        store.add("a", np.ones(3), "backbone")
        with pytest.raises(ParameterError):
            store.add("a", np.ones(3), "mixer")
        with pytest.raises(ParameterError):
            store.add("b", np.ones(3), "nope")

    def test_harvest_accumulates_and_clears(self):
        store = ParamStore()
        store.add("w", np.array([1.0, 2.0]), "mixer")
        store.bind_fresh()
        loss = (store.leaf("w") * store.leaf("w")).sum()
        loss.backward()
        norm = store.harvest(1.0)
        np.testing.assert_allclose(store.block("w").grad, [2.0, 4.0])
        np.testing.assert_allclose(norm, math.sqrt(4 + 16))
        # second harvest sees no leaf grads
        assert store.harvest(1.0) == 0.0
        # accumulators persist until explicitly zeroed
        store.bind_fresh()
        (store.leaf("w").sum()).backward()
        store.harvest(1.0)
        np.testing.assert_allclose(store.block("w").grad, [3.0, 5.0])
        store.zero_grad()
        np.testing.assert_array_equal(store.block("w").grad, 0.0)

    def test_leaf_cached_within_bind(self):
        store = ParamStore()
        store.add("w", np.ones(2), "backbone")
        store.bind_fresh()
        assert store.leaf("w") is store.leaf("w")
        t = store.leaf("w")
        store.bind_fresh()
        assert store.leaf("w") is not t


class TestFiniteDifferenceVerifier:
    def _store(self, values):
        store = ParamStore()
        store.add("theta", np.asarray(values, dtype=np.float64), "mixer")
        return store

    def test_quadratic_exact(self):
        store = self._store([1.0, 2.0])
        report = finite_difference_gradients(
            lambda s: (s.leaf("theta") * s.leaf("theta")).sum(), store, eps=1e-4
        )
        blk = report.blocks["theta"]
        np.testing.assert_allclose(blk.fd, [2.0, 4.0], atol=1e-8)
        np.testing.assert_allclose(blk.ad, [2.0, 4.0], atol=1e-12)
        assert report.max_rel_err < 1e-8

    def test_constant_block_zero(self):
        store = self._store([1.0, 2.0])
        store.add("unused", np.ones(3), "backbone")
        report = finite_difference_gradients(
            lambda s: (s.leaf("theta") * s.leaf("theta")).sum(), store
        )
        blk = report.blocks["unused"]
        np.testing.assert_array_equal(blk.fd, 0.0)
        np.testing.assert_array_equal(blk.ad, 0.0)

    def test_nondeterministic_loss_rejected(self):
        store = self._store([1.0])
        state = {"n": 0}

        def noisy(s):
            state["n"] += 1
            return s.leaf("theta").sum() * float(state["n"])

        with pytest.raises(VerificationError):
            finite_difference_gradients(noisy, store)

    def test_eps_validation(self):
        store = self._store([1.0])
        with pytest.raises(ParameterError):
            finite_difference_gradients(lambda s: s.leaf("theta").sum(), store, eps=0.5)

    def test_coordinate_sampling(self):
        store = self._store(np.arange(40.0))
        report = finite_difference_gradients(
            lambda s: (s.leaf("theta") * s.leaf("theta")).sum(), store,
            coords_per_block=5, seed=1,
        )
        assert len(report.blocks["theta"].coords) == 5
        assert report.max_rel_err < 1e-6


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3), leaf=True).backward()


def test_shared_subexpression_accumulates():
    a = Tensor(np.array([3.0]), leaf=True)
    b = a * a            # a appears twice as parent
    (b + b).sum().backward()
    np.testing.assert_allclose(a.grad, [12.0])
