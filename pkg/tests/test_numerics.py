import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskvoice import numerics as nm
from deskvoice.errors import ContractError, DimensionError, FormatError, NumericError

from fd_cases import ALL_CASES, run_battery


# -- finite-difference oracle ------------------------------------------------

class TestGradientsAgainstFiniteDifferences:
    @pytest.mark.parametrize("name,build", ALL_CASES, ids=[n for n, _ in ALL_CASES])
    def test_op_matches_fd(self, name, build):
        with nm.gradcheck_mode():
            for seed in range(5):
                rng = np.random.default_rng(seed)
                f, params = build(rng)
                err = nm.check_gradients(f, params)
                assert err < 1e-4, f"{name} seed {seed}: rel err {err:.3g}"

    def test_matmul_random_5x4_4x3(self):
        with nm.gradcheck_mode():
            rng = np.random.default_rng(11)
            a = nm.Tensor(rng.standard_normal((5, 4)), requires_grad=True)
            b = nm.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
            err = nm.check_gradients(
                lambda: nm.reduce_sum(nm.matmul(a, b) ** 2.0), [a, b])
            assert err < 1e-6

    def test_softmax_jacobian_random_6vector(self):
        with nm.gradcheck_mode():
            rng = np.random.default_rng(12)
            x = nm.Tensor(rng.standard_normal(6), requires_grad=True)
            w = nm.Tensor(rng.standard_normal(6))
            err = nm.check_gradients(
                lambda: nm.reduce_sum(nm.mul(nm.softmax(x), w)), [x])
            assert err < 1e-6


# -- hand-checked forward values --------------------------------------------

class TestHandValues:
    def test_matmul_identity(self):
        eye = nm.Tensor(np.eye(2))
        m = nm.Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_allclose(nm.matmul(eye, m).data, [[1, 2], [3, 4]])

    def test_matmul_row_times_column(self):
        a = nm.Tensor([[1.0, 2.0]])
        b = nm.Tensor([[3.0], [4.0]])
        np.testing.assert_allclose(nm.matmul(a, b).data, [[11.0]])

    def test_softmax_symmetry(self):
        y = nm.softmax(nm.Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(y.data, [1 / 3] * 3, atol=1e-7)

    def test_softmax_large_logit_no_overflow(self):
        y = nm.softmax(nm.Tensor([1000.0, 0.0]))
        assert np.all(np.isfinite(y.data))
        np.testing.assert_allclose(y.data, [1.0, 0.0], atol=1e-7)

    def test_layer_norm_constant_input_gives_zeros(self):
        x = nm.Tensor(np.full((4,), 3.7))
        y = nm.layer_norm(x, nm.ones((4,)), nm.zeros((4,)))
        np.testing.assert_allclose(y.data, np.zeros(4), atol=1e-5)

    def test_attention_single_key_returns_value_row(self):
        q = nm.Tensor([[2.0]])
        k = nm.Tensor([[0.5]])
        v = nm.Tensor([[7.0]])
        np.testing.assert_allclose(nm.attention(q, k, v).data, [[7.0]], atol=1e-7)

    def test_conv1d_delta_kernel_is_identity(self):
        x = nm.Tensor(np.random.default_rng(0).standard_normal((10, 3)))
        kernel = np.zeros((3, 3, 3))
        kernel[1] = np.eye(3)  # center tap passes each channel through
        y = nm.conv1d(x, nm.Tensor(kernel), padding="same")
        np.testing.assert_allclose(y.data, x.data, atol=1e-6)

    def test_backward_square_at_3(self):
        x = nm.Tensor(3.0, requires_grad=True)
        (x ** 2.0).backward()
        np.testing.assert_allclose(x.grad, 6.0, rtol=1e-6)

    def test_backward_of_softmax_sum_is_zero(self):
        x = nm.Tensor(np.random.default_rng(1).standard_normal(5), requires_grad=True)
        nm.reduce_sum(nm.softmax(x)).backward()
        np.testing.assert_allclose(x.grad, np.zeros(5), atol=1e-6)


# -- contracts and error paths ----------------------------------------------

class TestContracts:
    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nm.matmul(nm.zeros((2, 3)), nm.zeros((4, 2)))

    def test_matmul_batch_mismatch(self):
        with pytest.raises(DimensionError):
            nm.matmul(nm.zeros((2, 3, 4)), nm.zeros((3, 4, 2)))

    def test_non_scalar_backward_rejected(self):
        with pytest.raises(ContractError):
            nm.zeros((3,)).backward()

    def test_softmax_empty_axis(self):
        with pytest.raises(DimensionError):
            nm.softmax(nm.Tensor(np.zeros((2, 0))))

    def test_suffix_broadcast_allowed(self):
        y = nm.add(nm.zeros((2, 3, 4)), nm.ones((4,)))
        assert y.shape == (2, 3, 4)

    def test_keepdims_style_broadcast_rejected(self):
        with pytest.raises(DimensionError):
            nm.add(nm.zeros((4, 5)), nm.zeros((4, 1)))

    def test_explicit_expand_covers_rejected_case(self):
        a = nm.Tensor(np.arange(4.0).reshape(4, 1))
        y = nm.add(nm.zeros((4, 5)), nm.expand(a, (4, 5)))
        np.testing.assert_allclose(y.data[:, 0], [0, 1, 2, 3])

    def test_layer_norm_gain_shape_checked(self):
        with pytest.raises(DimensionError):
            nm.layer_norm(nm.zeros((2, 5)), nm.ones((4,)), nm.zeros((4,)))

    def test_nan_detection(self):
        bad = nm.Tensor(np.array([1.0, np.nan]))
        with pytest.raises(NumericError):
            nm.check_finite(bad, "unit test")

    def test_grad_shape_matches_data(self):
        x = nm.Tensor(np.random.default_rng(2).standard_normal((3, 4)), requires_grad=True)
        nm.reduce_sum(x ** 2.0).backward()
        assert x.grad.shape == x.data.shape

    def test_no_grad_leaves_stay_clean(self):
        x = nm.Tensor(np.ones((2, 2)), requires_grad=False)
        w = nm.Tensor(np.ones((2, 2)), requires_grad=True)
        nm.reduce_sum(nm.matmul(x, w)).backward()
        assert x.grad is None and w.grad is not None


# -- properties --------------------------------------------------------------

class TestProperties:
    @given(st.lists(st.floats(min_value=-50, max_value=50, allow_nan=False),
                    min_size=1, max_size=16))
    @settings(max_examples=80, deadline=None)
    def test_softmax_rows_sum_to_one(self, values):
        y = nm.softmax(nm.Tensor(np.array(values)))
        assert abs(float(y.data.sum()) - 1.0) < 1e-6
        assert np.all(y.data > 0) and np.all(y.data < 1 + 1e-7)

    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_backward_bit_identical_across_runs(self, seed):
        def run():
            rng = np.random.default_rng(seed)
            x = nm.Tensor(rng.standard_normal((3, 4)).astype(np.float32),
                          requires_grad=True)
            w = nm.Tensor(rng.standard_normal((4, 2)).astype(np.float32),
                          requires_grad=True)
            nm.reduce_sum(nm.tanh(nm.matmul(x, w)) ** 2.0).backward()
            return x.grad.tobytes(), w.grad.tobytes()
        assert run() == run()

    def test_graph_visits_each_node_once(self):
        # diamond: y used twice; grad of x must be d(2*x^2)/dx once, not doubled
        x = nm.Tensor(2.0, requires_grad=True)
        y = x ** 2.0
        z = nm.add(y, y)
        z.backward()
        np.testing.assert_allclose(x.grad, 8.0, rtol=1e-6)

    def test_battery_smoke(self):
        worst, failures = run_battery(seeds_per_op=2)
        assert not failures, failures
        assert worst < 1e-4


# -- optimizer ---------------------------------------------------------------

class TestAdam:
    def test_quadratic_convergence(self):
        x = nm.Tensor(np.array([5.0, -3.0], dtype=np.float32), requires_grad=True)
        opt = nm.Adam([x], lr=0.2)
        for _ in range(200):
            opt.zero_grad()
            nm.reduce_sum(x ** 2.0).backward()
            opt.step()
        assert np.abs(x.data).max() < 1e-2

    def test_grad_clip_bounds_update(self):
        x = nm.Tensor(np.array([1e4], dtype=np.float32), requires_grad=True)
        opt = nm.Adam([x], lr=0.1, grad_clip=1.0)
        opt.zero_grad()
        nm.reduce_sum(x ** 2.0).backward()
        assert opt.grad_norm() > 1.0
        before = x.data.copy()
        opt.step()
        # first Adam step magnitude is bounded by lr regardless of raw grad
        assert abs(float(x.data[0] - before[0])) <= 0.1 + 1e-6

    def test_cosine_schedule_endpoints(self):
        assert nm.cosine_lr(0, 100, 1.0, warmup=10) == pytest.approx(0.1)
        assert nm.cosine_lr(9, 100, 1.0, warmup=10) == pytest.approx(1.0)
        assert nm.cosine_lr(100, 100, 1.0, warmup=10) == pytest.approx(0.0, abs=1e-9)
        mid = nm.cosine_lr(55, 100, 1.0, warmup=10)
        assert 0.4 < mid < 0.6


# -- checkpoint format -------------------------------------------------------

class TestCheckpointFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        tensors = {
            "enc.w": nm.Tensor(rng.standard_normal((3, 4)).astype(np.float32)),
            "enc.b": nm.Tensor(rng.standard_normal(4).astype(np.float32)),
            "scalar": nm.Tensor(np.float32(2.5)),
        }
        path = tmp_path / "model.falm"
        nm.save_tensors(path, tensors, meta={"epoch": 3})
        loaded, meta = nm.load_tensors(path, with_meta=True)
        assert set(loaded) == set(tensors)
        for name, t in tensors.items():
            np.testing.assert_array_equal(loaded[name], t.data)
        assert meta == {"epoch": 3}

    def test_header_layout(self, tmp_path):
        path = tmp_path / "one.falm"
        nm.save_tensors(path, {"x": nm.Tensor(np.zeros((2, 3), dtype=np.float32))})
        raw = path.read_bytes()
        assert raw[:4] == b"FALM"
        version, count = struct.unpack_from("<II", raw, 4)
        assert (version, count) == (1, 1)
        (name_len,) = struct.unpack_from("<H", raw, 12)
        assert raw[14:14 + name_len] == b"x"
        rank = raw[14 + name_len]
        assert rank == 2
        dims = struct.unpack_from("<2I", raw, 15 + name_len)
        assert dims == (2, 3)
        assert len(raw) == 15 + name_len + 8 + 2 * 3 * 4

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.falm"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            nm.load_tensors(path)

    def test_truncated_tensor_named_in_error(self, tmp_path):
        path = tmp_path / "trunc.falm"
        nm.save_tensors(path, {"layer.weight": nm.Tensor(np.ones((8, 8), dtype=np.float32))})
        raw = path.read_bytes()
        path.write_bytes(raw[:-17])
        with pytest.raises(FormatError, match="layer.weight"):
            nm.load_tensors(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "trail.falm"
        nm.save_tensors(path, {"a": nm.Tensor(np.ones(2, dtype=np.float32))})
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError):
            nm.load_tensors(path)
