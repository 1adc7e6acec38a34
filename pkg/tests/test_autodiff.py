import numpy as np
import pytest

from protclust import NumericalError, ShapeError, StateError
from protclust.autodiff import (OPS, Tensor, add, affine, backward, bce_with_logits,
                                concat, cross_entropy, gather_rows, grad_check,
                                load_checkpoint, matmul, mean_rows, mul, op_eval,
                                param, relu, save_checkpoint, segment_softmax,
                                segment_weighted_sum, sgd_step, softmax_rows, sub,
                                sum_all)

TOL = 1e-12


def fd_grad(loss_fn, arr, h=1e-5):
    """Central finite differences of a scalar loss over one parameter array."""
    flat = arr.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = float(loss_fn().data)
        flat[i] = keep - h
        down = float(loss_fn().data)
        flat[i] = keep
        out[i] = (up - down) / (2 * h)
    return out.reshape(arr.shape)


class TestForwardOracles:
    def setup_method(self):
        self.rng = np.random.default_rng(0)

    def test_matmul_triple_loop(self):
        a = self.rng.normal(size=(2, 3))
        b = self.rng.normal(size=(3, 2))
        got = matmul(Tensor(a), Tensor(b)).data
        want = np.zeros((2, 2))
        for i in range(2):
            for j in range(2):
                for k in range(3):
                    want[i, j] += a[i, k] * b[k, j]
        assert np.max(np.abs(got - want)) < TOL

    def test_elementwise_with_broadcast(self):
        a = self.rng.normal(size=(3, 4))
        b = self.rng.normal(size=(4,))
        assert np.max(np.abs(add(Tensor(a), Tensor(b)).data - (a + b))) < TOL
        assert np.max(np.abs(sub(Tensor(a), Tensor(b)).data - (a - b))) < TOL
        assert np.max(np.abs(mul(Tensor(a), Tensor(b)).data - (a * b))) < TOL

    def test_concat_both_axes(self):
        a = self.rng.normal(size=(2, 3))
        b = self.rng.normal(size=(2, 5))
        got = concat([Tensor(a), Tensor(b)], axis=1).data
        assert got.shape == (2, 8)
        assert np.array_equal(got[:, :3], a) and np.array_equal(got[:, 3:], b)
        c = self.rng.normal(size=(4, 3))
        got0 = concat([Tensor(a), Tensor(c)], axis=0).data
        assert np.array_equal(got0[:2], a) and np.array_equal(got0[2:], c)

    def test_relu_values(self):
        x = np.array([[-2.0, 0.0, 3.5]])
        assert relu(Tensor(x)).data.tolist() == [[0.0, 0.0, 3.5]]

    def test_softmax_uniform_row(self):
        got = softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data
        assert np.max(np.abs(got - 1 / 3)) < TOL

    def test_softmax_matches_naive_and_sums(self):
        x = self.rng.normal(size=(5, 7)) * 3
        got = softmax_rows(Tensor(x)).data
        e = np.exp(x)
        assert np.max(np.abs(got - e / e.sum(axis=1, keepdims=True))) < TOL
        assert np.max(np.abs(got.sum(axis=1) - 1.0)) < TOL

    def test_softmax_shift_invariance(self):
        x = self.rng.normal(size=(4, 6))
        a = softmax_rows(Tensor(x)).data
        b = softmax_rows(Tensor(x + 123.456)).data
        assert np.max(np.abs(a - b)) < TOL

    def test_gather_rows_with_repeats(self):
        x = self.rng.normal(size=(6, 3))
        idx = np.array([4, 0, 4, 2])
        got = gather_rows(Tensor(x), idx).data
        for r, i in enumerate(idx):
            assert np.array_equal(got[r], x[i])

    def test_segment_weighted_sum_column_totals(self):
        x = self.rng.normal(size=(7, 4))
        out = segment_weighted_sum(Tensor(x), Tensor(np.ones(7)), np.zeros(7, dtype=int), 1)
        assert np.max(np.abs(out.data[0] - x.sum(axis=0))) < TOL

    def test_segment_weighted_sum_naive(self):
        x = self.rng.normal(size=(10, 3))
        w = self.rng.normal(size=10)
        seg = self.rng.integers(0, 4, size=10)
        got = segment_weighted_sum(Tensor(x), Tensor(w), seg, 4).data
        want = np.zeros((4, 3))
        for k in range(10):
            want[seg[k]] += w[k] * x[k]
        assert np.max(np.abs(got - want)) < TOL

    def test_segment_softmax_naive(self):
        s = self.rng.normal(size=9) * 2
        seg = np.array([0, 0, 1, 1, 1, 2, 2, 2, 2])
        got = segment_softmax(Tensor(s), seg, 3).data
        for g in range(3):
            m = seg == g
            e = np.exp(s[m] - s[m].max())
            assert np.max(np.abs(got[m] - e / e.sum())) < TOL
            assert abs(got[m].sum() - 1.0) < TOL

    def test_affine_naive(self):
        x = self.rng.normal(size=(3, 4))
        w = self.rng.normal(size=(4, 2))
        b = self.rng.normal(size=2)
        got = affine(Tensor(x), Tensor(w), Tensor(b)).data
        assert np.max(np.abs(got - (x @ w + b))) < TOL

    def test_cross_entropy_naive(self):
        x = self.rng.normal(size=(5, 7))
        y = self.rng.integers(0, 7, size=5)
        got = float(cross_entropy(Tensor(x), y).data)
        p = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
        want = -np.log(p[np.arange(5), y]).mean()
        assert abs(got - want) < TOL

    def test_bce_naive(self):
        z = self.rng.normal(size=(2, 5)) * 2
        t = (self.rng.random((2, 5)) < 0.5).astype(float)
        got = float(bce_with_logits(Tensor(z), t).data)
        s = 1 / (1 + np.exp(-z))
        want = -(t * np.log(s) + (1 - t) * np.log(1 - s)).mean()
        assert abs(got - want) < 1e-10

    def test_mean_rows_and_sum_all(self):
        x = self.rng.normal(size=(6, 3))
        assert np.max(np.abs(mean_rows(Tensor(x)).data - x.mean(axis=0))) < TOL
        assert abs(float(sum_all(Tensor(x)).data) - x.sum()) < TOL

    def test_op_eval_dispatch(self):
        x = Tensor([[1.0, -1.0]])
        assert np.array_equal(op_eval("relu", x).data, relu(x).data)
        assert set(OPS) >= {"matmul", "relu", "softmax_rows", "segment_softmax"}
        with pytest.raises(ShapeError):
            op_eval("no_such_op", x)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
        with pytest.raises(ShapeError):
            gather_rows(Tensor(np.ones((3, 2))), [0, 3])
        with pytest.raises(ShapeError):
            affine(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))), Tensor(np.ones(3)))
        with pytest.raises(ShapeError):
            cross_entropy(Tensor(np.ones((2, 3))), [0, 1, 0])

    def test_finite_guard(self):
        with pytest.raises(NumericalError):
            relu(Tensor([np.inf]))


class TestBackward:
    def test_sum_gives_ones(self):
        p = param(np.arange(6, dtype=float).reshape(2, 3), "p")
        backward(sum_all(p))
        assert np.array_equal(p.grad, np.ones((2, 3)))

    def test_zero_factor_gives_zeros(self):
        p = param(np.ones((2, 2)), "p")
        backward(sum_all(mul(p, Tensor(np.zeros((2, 2))))))
        assert np.array_equal(p.grad, np.zeros((2, 2)))

    def test_broadcast_bias_grad_is_row_sum(self):
        b = param(np.zeros(3), "b")
        x = Tensor(np.arange(6, dtype=float).reshape(2, 3))
        backward(sum_all(mul(add(x, b), Tensor(np.full((2, 3), 2.0)))))
        assert np.array_equal(b.grad, [4.0, 4.0, 4.0])

    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(4, 5)))
        y = [0, 2, 1, 2]
        ps = {
            "w1": param(rng.normal(size=(5, 6)) * 0.5, "w1"),
            "b1": param(np.zeros(6), "b1"),
            "w2": param(rng.normal(size=(6, 3)) * 0.5, "w2"),
            "b2": param(np.zeros(3), "b2"),
        }

        def loss_fn():
            h = relu(affine(x, ps["w1"], ps["b1"]))
            return cross_entropy(affine(h, ps["w2"], ps["b2"]), y)

        backward(loss_fn())
        for name, p in ps.items():
            fd = fd_grad(loss_fn, p.data)
            denom = np.maximum(np.maximum(np.abs(fd), np.abs(p.grad)), 1e-8)
            assert np.max(np.abs(p.grad - fd) / denom) < 1e-4, name

    def test_every_op_kind_in_one_graph(self):
        # composite loss touching all fifteen ops, verified by the fd harness
        def builder(seed):
            rng = np.random.default_rng(seed)
            ps = {
                "w": param(rng.normal(size=(4, 4)) * 0.3, "w"),
                "u": param(rng.normal(size=(4, 4)) * 0.3, "u"),
                "b": param(np.zeros(4), "b"),
                "s": param(rng.normal(size=6), "s"),
            }
            x = Tensor(rng.normal(size=(6, 4)))
            seg = np.array([0, 0, 0, 1, 1, 1])

            def loss_fn():
                h = relu(affine(x, ps["w"], ps["b"]))
                h = add(h, matmul(x, ps["u"]))
                h = sub(h, Tensor(np.ones((6, 4)) * 0.1))
                h = mul(h, Tensor(np.full((6, 4), 1.5)))
                h = concat([h, gather_rows(h, [5, 4, 3, 2, 1, 0])], axis=1)
                gam = segment_softmax(ps["s"], seg, 2)
                pooled = segment_weighted_sum(h, gam, seg, 2)
                sm = softmax_rows(pooled)
                l1 = cross_entropy(pooled, [0, 3])
                l2 = bce_with_logits(mean_rows(pooled), np.zeros((1, 8)))
                return add(add(l1, l2), mul(sum_all(sm), Tensor(0.01)))

            return ps, loss_fn

        report = grad_check(builder, seed=3)
        assert report["max_rel"] < 1e-3
        assert set(report["params"]) == {"w", "u", "b", "s"}

    def test_accumulation_doubles(self):
        p = param(np.arange(4, dtype=float), "p")

        def make():
            return sum_all(mul(p, p))

        backward(make())
        once = p.grad.copy()
        backward(make())
        assert np.array_equal(p.grad, 2 * once)

    def test_shared_node_fans_in(self):
        p = param(np.array([[2.0]]), "p")
        backward(sum_all(add(p, p)))  # d/dp (2p) = 2
        assert p.grad[0, 0] == 2.0

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            backward(param(np.ones(3), "p"))

    def test_no_trainable_is_noop(self):
        t = sum_all(Tensor(np.ones((2, 2))))
        backward(t)  # nothing requires grad; must not raise


class TestSgd:
    def test_zero_lr_bitwise_unchanged(self):
        p = param(np.array([1.0, -2.0, 3.0]), "p")
        before = p.data.tobytes()
        p.grad = np.array([10.0, 10.0, 10.0])
        sgd_step([p], lr=0.0, weight_decay=0.5)
        assert p.data.tobytes() == before

    def test_weight_decay_only(self):
        p = param(np.array([2.0, -4.0]), "p")
        p.grad = np.zeros(2)
        sgd_step([p], lr=0.1, weight_decay=0.5)
        assert np.array_equal(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5))

    def test_quadratic_single_step(self):
        p = param(np.array([0.0]), "p")
        backward(sum_all(mul(sub(p, Tensor([3.0])), sub(p, Tensor([3.0])))))
        sgd_step([p], lr=0.25)
        assert p.data[0] == 1.5  # 0 - 0.25 * 2 * (0 - 3), exact in binary
        assert p.grad is None

    def test_missing_grad_raises(self):
        p = param(np.ones(2), "p")
        with pytest.raises(StateError):
            sgd_step([p], lr=0.1)

    def test_non_trainable_skipped(self):
        t = Tensor(np.ones(2))
        sgd_step([t], lr=0.1)  # silently ignored
        assert np.array_equal(t.data, np.ones(2))

    def test_descends_quadratic(self):
        p = param(np.array([0.0]), "p")
        for _ in range(100):
            backward(sum_all(mul(sub(p, Tensor([3.0])), sub(p, Tensor([3.0])))))
            sgd_step([p], lr=0.1)
        assert abs(p.data[0] - 3.0) < 1e-6


class TestGradCheckHarness:
    def test_linear_regression_tight(self):
        def builder(seed):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.normal(size=(8, 3)))
            y = Tensor(rng.normal(size=(8, 1)))
            ps = {"w": param(rng.normal(size=(3, 1)), "w")}

            def loss_fn():
                r = sub(matmul(x, ps["w"]), y)
                return sum_all(mul(r, r))

            return ps, loss_fn

        assert grad_check(builder, seed=0)["max_rel"] < 1e-6

    def test_empty_params(self):
        report = grad_check(lambda seed: ({}, lambda: sum_all(Tensor([[1.0]]))))
        assert report == {"params": {}, "max_rel": 0.0}


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        tensors = {"b": param(rng.normal(size=(3,)), "b"),
                   "a": param(rng.normal(size=(2, 4)), "a")}
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, tensors, extra={"note": "x", "k": 3})
        arrays, extra = load_checkpoint(path)
        assert set(arrays) == {"a", "b"}
        for k in arrays:
            assert np.array_equal(arrays[k], tensors[k].data)
            assert arrays[k].dtype == np.float64
            arrays[k][0] = 0.0  # loaded copies must be writable
        assert extra == {"note": "x", "k": 3}

    def test_byte_exact_and_order_free(self, tmp_path):
        a = np.arange(6, dtype=float).reshape(2, 3)
        b = np.array([7.0])
        p1, p2 = str(tmp_path / "1.ckpt"), str(tmp_path / "2.ckpt")
        save_checkpoint(p1, {"a": a, "b": b})
        save_checkpoint(p2, {"b": b, "a": a})  # insertion order must not matter
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(StateError):
            load_checkpoint(str(path))
