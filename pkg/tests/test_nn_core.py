import struct

import numpy as np
import pytest

from ctxssd.nn import functional as F
from ctxssd.nn.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from ctxssd.nn.gradcheck import gradcheck, relative_error
from ctxssd.nn.layers import BatchNorm2d, Conv2d, L2Norm
from ctxssd.nn.optim import SGD, Adam, step_lr
from ctxssd.nn.tensor import (
    NonFiniteError, Parameter, Tensor, checked_mode, default_dtype, get_default_dtype, no_grad,
)

from gradcases import CASES, EPS, TOL


# -- loop oracles -----------------------------------------------------------

def naive_conv(x, w, b, stride, pad, dil):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            for u in range(kh):
                for v in range(kw):
                    patch = xp[:, :, i * stride + u * dil, j * stride + v * dil]  # (n, c)
                    out[:, :, i, j] += patch @ w[:, :, u, v].T
    return out + b[None, :, None, None]


def naive_deconv(x, w, b, stride, target):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    raw = (h - 1) * stride + k
    out = np.zeros((n, o, raw, raw))
    for i in range(h):
        for j in range(wd):
            out[:, :, i * stride : i * stride + k, j * stride : j * stride + k] += np.einsum(
                "nc,ocuv->nouv", x[:, :, i, j], w
            )
    out += b[None, :, None, None]
    if raw >= target:
        s = (raw - target) // 2
        return out[:, :, s : s + target, s : s + target]
    p = (target - raw) // 2
    return np.pad(out, ((0, 0), (0, 0), (p, target - raw - p), (p, target - raw - p)))


def naive_pool(x, k, s, p, ceil):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p + k), (p, p + k)), constant_values=-np.inf)
    rnd = np.ceil if ceil else np.floor
    ho = int(rnd((h + 2 * p - k) / s)) + 1
    if ceil and (ho - 1) * s >= h + p:
        ho -= 1
    out = np.empty((n, c, ho, ho))
    for i in range(ho):
        for j in range(ho):
            out[:, :, i, j] = xp[:, :, i * s : i * s + k, j * s : j * s + k].max(axis=(2, 3))
    return out


# -- conv ---------------------------------------------------------------------

def test_conv_1x1_identity_kernel_returns_input():
    x = np.random.default_rng(0).standard_normal((1, 3, 4, 4)).astype(np.float32)
    w = np.eye(3, dtype=np.float32)[:, :, None, None]
    out = F.conv2d(Tensor(x), F.ConvParams(Tensor(w)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_same_padding_shape():
    w = Tensor(np.ones((5, 1, 3, 3), np.float32))
    assert F.conv2d(Tensor(np.ones((1, 1, 4, 4), np.float32)), F.ConvParams(w, None, 1, 1)).shape == (1, 5, 4, 4)


@pytest.mark.parametrize("stride,pad,dil", [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 2, 2), (3, 0, 1), (2, 6, 6)])
def test_conv_matches_loop_oracle(stride, pad, dil):
    rng = np.random.default_rng(stride * 10 + pad + dil)
    x, w, b = rng.standard_normal((2, 3, 9, 9)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    with default_dtype(np.float64):
        out = F.conv2d(Tensor(x), F.ConvParams(Tensor(w), Tensor(b), stride, pad, dil))
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, pad, dil), rtol=1e-12, atol=1e-12)


def test_conv_sum_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    errs = gradcheck(lambda x, w: F.conv2d(x, F.ConvParams(w)).sum(), [x, w])
    assert max(errs.values()) < 1e-4


def test_conv_errors():
    w = Tensor(np.ones((2, 3, 3, 3), np.float32))
    with pytest.raises(ValueError, match="channel"):
        F.conv2d(Tensor(np.ones((1, 2, 5, 5), np.float32)), F.ConvParams(w))
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.ones((1, 3, 2, 2), np.float32)), F.ConvParams(w))
    with pytest.raises(ValueError):
        F.ConvParams(w, None, stride=0)
    with pytest.raises(ValueError):
        F.ConvParams(w, None, padding=-1)


# -- transposed conv ----------------------------------------------------------

@pytest.mark.parametrize("h,k,target,raw", [(19, 2, 38, 38), (10, 4, 38, 40), (5, 4, 19, 20), (7, 1, 7, 7)])
def test_deconv_sizes(h, k, target, raw):
    x = Tensor(np.ones((1, 2, h, h), np.float32))
    w = Tensor(np.ones((3, 2, k, k), np.float32))
    assert (h - 1) * k + k == raw
    assert F.conv_transpose2d(x, F.ConvParams(w, None, k, 0), (target, target)).shape == (1, 3, target, target)


@pytest.mark.parametrize("k,target", [(2, 6), (2, 5), (4, 10), (4, 14), (3, 9)])
def test_deconv_matches_scatter_oracle(k, target):
    rng = np.random.default_rng(k * 100 + target)
    x, w, b = rng.standard_normal((2, 3, 3, 3)), rng.standard_normal((2, 3, k, k)), rng.standard_normal(2)
    with default_dtype(np.float64):
        out = F.conv_transpose2d(Tensor(x), F.ConvParams(Tensor(w), Tensor(b), k, 0), (target, target))
    np.testing.assert_allclose(out.data, naive_deconv(x, w, b, k, target), rtol=1e-12, atol=1e-12)


def test_deconv_errors():
    w = Tensor(np.ones((1, 1, 2, 2), np.float32))
    with pytest.raises(ValueError):
        F.conv_transpose2d(Tensor(np.ones((1, 1, 4, 4), np.float32)), F.ConvParams(w, None, 2), (3, 3))
    with pytest.raises(ValueError, match="degenerate"):
        F.conv_transpose2d(Tensor(np.ones((1, 1, 2, 2), np.float32)),
                           F.ConvParams(Tensor(np.ones((1, 1, 0, 2), np.float32))), (4, 4))


# -- batch norm ---------------------------------------------------------------

def test_batchnorm_constant_input_gives_beta():
    bn = BatchNorm2d(3)
    bn.beta.data[:] = [0.5, -1.0, 2.0]
    out = bn(Tensor(np.full((2, 3, 4, 4), 7.0, np.float32)))
    np.testing.assert_allclose(out.data, np.broadcast_to(bn.beta.data[None, :, None, None], out.shape), atol=1e-6)


def test_batchnorm_eval_identity_with_unit_moments():
    bn = BatchNorm2d(4).eval()
    x = np.random.default_rng(0).standard_normal((2, 4, 3, 3)).astype(np.float32)
    np.testing.assert_allclose(bn(Tensor(x)).data, x / np.sqrt(1 + 1e-5), rtol=1e-6)


def test_batchnorm_training_statistics_and_running_update():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.0, (4, 3, 5, 5))
    with default_dtype(np.float64):
        bn = BatchNorm2d(3)
        out = bn(Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)
    m = x.mean(axis=(0, 2, 3))
    v = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(bn._buffers["running_mean"], 0.1 * m, rtol=1e-12)
    np.testing.assert_allclose(bn._buffers["running_var"], 0.9 + 0.1 * v, rtol=1e-12)


def test_batchnorm_eval_is_pure():
    bn = BatchNorm2d(2)
    bn._buffers["running_mean"][:] = [1.0, -2.0]
    bn.eval()
    x = Tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 3)).astype(np.float32))
    a, b = bn(x).data, bn(x).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(bn._buffers["running_mean"], [1.0, -2.0])


def test_batchnorm_channel_mismatch():
    with pytest.raises(ValueError):
        BatchNorm2d(3)(Tensor(np.ones((1, 2, 2, 2), np.float32)))


# -- activations --------------------------------------------------------------

def test_activation_examples():
    assert F.sigmoid(Tensor(np.zeros(1))).data[0] == pytest.approx(0.5)
    np.testing.assert_array_equal(F.relu(Tensor(np.array([-3.0, 3.0]))).data, [0.0, 3.0])
    np.testing.assert_allclose(F.softmax(Tensor(np.full((2, 5), 1.7)), -1).data, 0.2, rtol=1e-6)


def test_softmax_sums_and_sigmoid_range():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 30, (4, 7, 3))
    with default_dtype(np.float64):
        np.testing.assert_allclose(F.softmax(Tensor(x), 1).data.sum(axis=1), 1.0, atol=1e-6)
        s = F.sigmoid(Tensor(np.clip(x, -30, 30))).data
    assert np.all((s > 0) & (s < 1))
    big = F.sigmoid(Tensor(np.array([-1e4, 1e4], np.float32))).data
    assert np.all(np.isfinite(big))
    assert np.all(np.isfinite(F.softmax(Tensor(np.array([[1e4, -1e4]], np.float32)), -1).data))


# -- L2 norm ------------------------------------------------------------------

def test_l2_normalize_examples():
    x = Tensor(np.array([3.0, 4.0]).reshape(1, 2, 1, 1))
    np.testing.assert_allclose(F.l2_normalize_channels(x, Tensor(np.ones(2))).data.ravel(), [0.6, 0.8])
    z = F.l2_normalize_channels(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.ones(3)))
    np.testing.assert_array_equal(z.data, 0.0)


def test_l2_normalize_norms_equal_scale():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 5, 3, 3))
    with default_dtype(np.float64):
        layer = L2Norm(5, init_scale=1.0)
        out = layer(Tensor(x)).data
    np.testing.assert_allclose(np.sqrt((out ** 2).sum(axis=1)), 1.0, atol=1e-5)
    assert L2Norm(4).scale.data.tolist() == [20.0] * 4


# -- pool / concat / mul ------------------------------------------------------

def test_pool_concat_mul_examples():
    assert F.max_pool2d(Tensor(np.zeros((1, 1, 38, 38), np.float32)), 2, 2).shape == (1, 1, 19, 19)
    parts = [Tensor(np.zeros((1, c, 38, 38), np.float32)) for c in (512, 256, 256)]
    assert F.concat_channels(parts).shape == (1, 1024, 38, 38)
    x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 4, 4)).astype(np.float32))
    np.testing.assert_array_equal(F.mul(x, Tensor(np.ones((1, 3, 4, 4), np.float32))).data, x.data)


@pytest.mark.parametrize("k,s,p,ceil", [(2, 2, 0, True), (2, 2, 0, False), (3, 2, 1, False), (3, 1, 1, False), (3, 2, 0, True)])
@pytest.mark.parametrize("size", [19, 10, 5, 7])
def test_pool_matches_loop_oracle(k, s, p, ceil, size):
    x = np.random.default_rng(size).standard_normal((1, 2, size, size))
    with default_dtype(np.float64):
        out = F.max_pool2d(Tensor(x), k, s, p, ceil).data
    np.testing.assert_array_equal(out, naive_pool(x, k, s, p, ceil))


def test_concat_slices_recover_inputs_bit_exactly():
    rng = np.random.default_rng(5)
    xs = [rng.standard_normal((2, c, 3, 3)).astype(np.float32) for c in (4, 2, 3)]
    cat = F.concat_channels([Tensor(x) for x in xs]).data
    start = 0
    for x in xs:
        assert np.array_equal(cat[:, start : start + x.shape[1]], x)
        start += x.shape[1]


def test_shape_mismatch_errors():
    with pytest.raises(ValueError):
        F.concat_channels([Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 4, 4)))])
    with pytest.raises(ValueError):
        F.mul(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 4, 4))))


# -- gradients ----------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradcheck_cases(name, seed):
    fn, inputs = CASES[name](seed)
    errs = gradcheck(fn, inputs, eps=EPS, tol=TOL)
    assert errs and max(errs.values()) < TOL


def test_gradcheck_detects_wrong_gradient():
    from ctxssd.nn.tensor import make_result

    def bad_square(x):
        return make_result(x.data ** 2, (x,), lambda g: (g * x.data,), "bad")  # missing factor 2

    with pytest.raises(AssertionError):
        gradcheck(bad_square, [Tensor(np.random.default_rng(0).standard_normal(5), requires_grad=True)])
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_gradient_accumulates_over_reuse_and_no_grad_detaches():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, [3.0, 5.0])
    with no_grad():
        y = x * x
    assert not y.requires_grad


def test_default_dtype_and_checked_mode():
    assert get_default_dtype() == np.float32
    assert Conv2d(2, 2, 1).weight.dtype == np.float32
    with default_dtype(np.float64):
        assert Conv2d(2, 2, 1).weight.dtype == np.float64
    assert get_default_dtype() == np.float32
    bad = Tensor(np.array([np.inf, 1.0], np.float32))
    F.relu(bad)  # unchecked by default
    with checked_mode():
        with pytest.raises(NonFiniteError):
            F.relu(bad)


# -- checkpoint ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    state = {
        "a.weight": rng.standard_normal((3, 2, 1, 1)).astype(np.float32),
        "b": rng.standard_normal(4),
        "step": np.array([17], np.int64),
        "ids": np.arange(6, dtype=np.int32).reshape(2, 3),
        "scalar": np.float32(2.5),
    }
    save_checkpoint(tmp_path / "c.bin", state)
    back = load_checkpoint(tmp_path / "c.bin")
    assert list(back) == list(state)
    for k, v in state.items():
        assert back[k].dtype == np.asarray(v).dtype
        np.testing.assert_array_equal(back[k], v)


def test_checkpoint_byte_layout_written_by_hand(tmp_path):
    name = b"w"
    vals = np.array([[1.0, -2.0]], "<f8")
    blob = MAGIC + struct.pack("<I", len(name)) + name + struct.pack("<BI", 2, 2) + struct.pack("<QQ", 1, 2) + vals.tobytes()
    (tmp_path / "h.bin").write_bytes(blob)
    np.testing.assert_array_equal(load_checkpoint(tmp_path / "h.bin")["w"], vals)
    save_checkpoint(tmp_path / "again.bin", {"w": vals})
    assert (tmp_path / "again.bin").read_bytes() == blob


def test_checkpoint_rejects_bad_input(tmp_path):
    good = MAGIC + struct.pack("<I", 1) + b"w" + struct.pack("<BI", 9, 1) + struct.pack("<Q", 1) + b"\0" * 8
    (tmp_path / "tag.bin").write_bytes(good)
    with pytest.raises(CheckpointError, match="dtype"):
        load_checkpoint(tmp_path / "tag.bin")
    (tmp_path / "magic.bin").write_bytes(b"NOTSSD1" + good[7:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "magic.bin")
    save_checkpoint(tmp_path / "t.bin", {"w": np.ones(10, np.float32)})
    data = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-3])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.bin")


def test_module_state_dict_shape_mismatch():
    a, b = Conv2d(2, 3, 3, rng=np.random.default_rng(0)), Conv2d(2, 4, 3)
    with pytest.raises(ValueError):
        b.load_state_dict(a.state_dict())
    c = Conv2d(2, 3, 3)
    c.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(c.weight.data, a.weight.data)


# -- optimisers ---------------------------------------------------------------

def test_sgd_momentum_weight_decay_by_hand():
    p = Parameter(np.array([1.0, -2.0], np.float32))
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.5)
    p.grad = np.array([0.2, 0.4], np.float32)
    opt.step()  # v = g + wd*p = [0.7, -0.6]; p -= 0.1 v
    np.testing.assert_allclose(p.data, [0.93, -1.94], rtol=1e-6)
    p.grad = np.array([0.0, 0.0], np.float32)
    opt.step()  # v = 0.9*[0.7,-0.6] + 0.5*[0.93,-1.94] = [1.095, -1.51]
    np.testing.assert_allclose(p.data, [0.93 - 0.1095, -1.94 + 0.151], rtol=1e-6)


def test_adam_first_step_is_lr_sign():
    p = Parameter(np.array([1.0, -1.0, 0.5], np.float64))
    opt = Adam([p], lr=0.01)
    p.grad = np.array([3.0, -0.2, 1e-3])
    opt.step()
    np.testing.assert_allclose(p.data, [0.99, -0.99, 0.49], atol=1e-5)


def test_step_lr_schedule():
    assert step_lr(1e-3, 0, 100) == 1e-3
    assert step_lr(1e-3, 59, 100) == 1e-3
    assert step_lr(1e-3, 60, 100) == pytest.approx(1e-4)
    assert step_lr(1e-3, 80, 100) == pytest.approx(1e-5)
