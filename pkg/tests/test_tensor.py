import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowshot import nn
from lowshot import tensor as T
from lowshot.gradcheck import gradcheck
from lowshot.tensor import ShapeError, Tape, Tensor

TOL = 1e-4


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def assert_grad(fn, inputs, **kw):
    res = gradcheck(fn, inputs, **kw)
    assert res.checked > 0
    assert res.max_rel_error < TOL, res


# -- brute-force oracles -------------------------------------------------------
def correlate_loops(f, k):
    h, w, d = f.shape
    s = k.shape[0]
    p = (s - 1) // 2
    out = np.zeros((h, w, d))
    for y in range(h):
        for x in range(w):
            for c in range(d):
                acc = 0.0
                for i in range(s):
                    for j in range(s):
                        yy, xx = y + i - p, x + j - p
                        if 0 <= yy < h and 0 <= xx < w:
                            acc += f[yy, xx, c] * k[i, j, c]
                out[y, x, c] = acc
    return out


def bilinear_at(f, yc, xc):
    """Value of ``f`` at continuous pixel-centre coordinates, border-clamped."""
    h, w, _ = f.shape
    yc = min(max(yc, 0.0), h - 1)
    xc = min(max(xc, 0.0), w - 1)
    y0, x0 = int(np.floor(yc)), int(np.floor(xc))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    dy, dx = yc - y0, xc - x0
    return (
        f[y0, x0] * (1 - dy) * (1 - dx)
        + f[y0, x1] * (1 - dy) * dx
        + f[y1, x0] * dy * (1 - dx)
        + f[y1, x1] * dy * dx
    )


# -- matmul ----------------------------------------------------------------
def test_matmul_identity(rng):
    x = rand(rng, 2, 3)
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), x).data, x.data)


def test_matmul_arithmetic():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_shape_error_names_shapes(rng):
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(rand(rng, 2, 3), rand(rng, 4, 5))


def test_matmul_grad(rng, backend):
    assert_grad(T.matmul, [rand(rng, 4, 5), rand(rng, 5, 3)])


# -- softmax -----------------------------------------------------------------
def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)


def test_softmax_large_logits_stable():
    out = T.softmax_lastdim(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-6)


def test_softmax_rows_sum_to_one(rng):
    out = T.softmax_lastdim(rand(rng, 5, 9) * 10.0).data
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


def test_softmax_empty():
    with pytest.raises(ShapeError):
        T.softmax_lastdim(Tensor(np.zeros((0,))))


def test_softmax_grad(rng):
    assert_grad(T.softmax_lastdim, [rand(rng, 3, 7)])


# -- layer norm --------------------------------------------------------------
def test_layer_norm_constant_row():
    out = T.layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_normalized_row():
    out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, np.array([1.0, -1.0]) / np.sqrt(1.0 + 1e-5), rtol=1e-6)


def test_layer_norm_width_mismatch(rng):
    with pytest.raises(ShapeError):
        T.layer_norm(rand(rng, 2, 4), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_layer_norm_grad(rng):
    assert_grad(T.layer_norm, [rand(rng, 2, 8), rand(rng, 8), rand(rng, 8)])


# -- attention ---------------------------------------------------------------
@pytest.fixture
def mha(rng):
    return nn.MultiHeadAttention(8, 2, rng)


def test_mha_single_key_ignores_queries(rng, mha):
    k, v = rand(rng, 1, 8), rand(rng, 1, 8)
    a = mha(rand(rng, 3, 8), k, v).data
    b = mha(rand(rng, 3, 8) * 5.0, k, v).data
    p = mha.params()
    expected = (v.data @ p["wv"].data + p["bv"].data) @ p["wo"].data + p["bo"].data
    np.testing.assert_allclose(a, np.repeat(expected, 3, axis=0), atol=1e-6)
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_mha_key_value_permutation(rng, mha):
    q, k, v = rand(rng, 3, 8), rand(rng, 5, 8), rand(rng, 5, 8)
    perm = rng.permutation(5)
    a = mha(q, k, v).data
    b = mha(q, Tensor(k.data[perm]), Tensor(v.data[perm])).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_mha_errors(rng):
    with pytest.raises(ValueError):
        nn.MultiHeadAttention(8, 3, rng)
    m = nn.MultiHeadAttention(8, 2, rng)
    with pytest.raises(ShapeError):
        m(rand(rng, 3, 8), rand(rng, 5, 8), rand(rng, 4, 8))


def test_mha_grad(rng, mha):
    q, k, v = rand(rng, 3, 8), rand(rng, 5, 8), rand(rng, 5, 8)
    assert_grad(lambda q, k, v: mha(q, k, v), [q, k, v], extra=mha.parameters())


# -- depthwise correlation ---------------------------------------------------
def test_correlate_zero_kernel(rng):
    out = T.depthwise_correlate(rand(rng, 5, 5, 3), Tensor(np.zeros((3, 3, 3))))
    np.testing.assert_array_equal(out.data, 0.0)


def test_correlate_scalar_kernel():
    f = Tensor(np.stack([[[1, 2], [3, 4]], [[5, 6], [7, 8]]], axis=-1))  # 2x2x2
    k = Tensor(np.array([2.0, 0.0]).reshape(1, 1, 2))
    out = T.depthwise_correlate(f, k).data
    np.testing.assert_array_equal(out[..., 0], [[2, 4], [6, 8]])
    np.testing.assert_array_equal(out[..., 1], 0.0)


def test_correlate_matches_loops(rng, backend):
    f, k = rng.standard_normal((4, 4, 2)), rng.standard_normal((3, 3, 2))
    out = T.depthwise_correlate(Tensor(f), Tensor(k)).data
    np.testing.assert_allclose(out, correlate_loops(f, k), atol=1e-6)


def test_correlate_stack_of_kernels(rng, backend):
    f, k = rng.standard_normal((5, 6, 3)), rng.standard_normal((2, 3, 3, 3))
    out = T.depthwise_correlate(Tensor(f), Tensor(k)).data
    for i in range(2):
        np.testing.assert_allclose(out[i], correlate_loops(f, k[i]), atol=1e-5)


def test_correlate_errors(rng):
    with pytest.raises(ShapeError, match="odd"):
        T.depthwise_correlate(rand(rng, 4, 4, 2), rand(rng, 2, 2, 2))
    with pytest.raises(ShapeError, match="channels"):
        T.depthwise_correlate(rand(rng, 4, 4, 2), rand(rng, 3, 3, 3))


def test_correlate_grad(rng, backend):
    assert_grad(T.depthwise_correlate, [rand(rng, 5, 4, 2), rand(rng, 3, 3, 2)])


# -- max over set ------------------------------------------------------------
def test_max_single_is_identity(rng):
    a = rand(rng, 2, 2, 3)
    assert T.max_over_set([a]) is a


def test_max_dominance_routes_grad(rng):
    a = Tensor(rng.standard_normal((3, 3, 2)), requires_grad=True)
    b = Tensor(a.data + 1.0, requires_grad=True)
    out = T.max_over_set([a, b])
    np.testing.assert_array_equal(out.data, b.data)
    out.sum().backward()
    np.testing.assert_array_equal(a.grad, 0.0)
    np.testing.assert_array_equal(b.grad, 1.0)


def test_max_ties_go_to_lowest_index():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    T.max_over_set([a, b]).sum().backward()
    np.testing.assert_array_equal(a.grad, 1.0)
    np.testing.assert_array_equal(b.grad, 0.0)


def test_max_permutation_symmetric(rng):
    maps = [rand(rng, 3, 4, 2) for _ in range(4)]
    ref = T.max_over_set(maps).data
    for perm in itertools.permutations(range(4)):
        np.testing.assert_array_equal(T.max_over_set([maps[i] for i in perm]).data, ref)


def test_max_errors(rng):
    with pytest.raises(ShapeError):
        T.max_over_set([])
    with pytest.raises(ShapeError):
        T.max_over_set([rand(rng, 2, 2), rand(rng, 2, 3)])


def test_max_grad(rng):
    assert_grad(lambda a, b, c: T.max_over_set([a, b, c]), [rand(rng, 3, 3, 2) for _ in range(3)])


# -- roi pooling ---------------------------------------------------------------
def test_roi_constant_map(backend):
    f = Tensor(np.full((6, 7, 3), 2.5))
    out = T.roi_pool(f, (0.1, 0.2, 0.6, 0.9), 3).data
    assert out.shape == (3, 3, 3)
    np.testing.assert_allclose(out, 2.5, atol=1e-6)


def test_roi_full_box_identity(rng, backend):
    f = rng.standard_normal((5, 5, 4))
    out = T.roi_pool(Tensor(f), (0.0, 0.0, 1.0, 1.0), 5).data
    np.testing.assert_allclose(out, f, atol=1e-6)


def test_roi_matches_bilinear_oracle(rng, backend):
    f = rng.standard_normal((8, 8, 3))
    x1, y1 = rng.uniform(0, 0.6, 2)
    x2, y2 = x1 + rng.uniform(0.05, 0.4), y1 + rng.uniform(0.05, 0.4)
    s = 3
    out = T.roi_pool(Tensor(f), (x1, y1, x2, y2), s).data
    for i in range(s):
        for j in range(s):
            yc = y1 * 8 + (i + 0.5) * (y2 - y1) * 8 / s - 0.5
            xc = x1 * 8 + (j + 0.5) * (x2 - x1) * 8 / s - 0.5
            np.testing.assert_allclose(out[i, j], bilinear_at(f, yc, xc), atol=1e-6)


def test_roi_degenerate_box(rng):
    with pytest.raises(ValueError, match="degenerate"):
        T.roi_pool(rand(rng, 4, 4, 2), (0.3, 0.3, 0.3, 0.6), 3)


def test_roi_grad(rng, backend):
    boxes = [(0.1, 0.15, 0.55, 0.8), (0.4, 0.2, 0.95, 0.45)]
    assert_grad(lambda f: T.roi_pool(f, boxes, 3), [rand(rng, 6, 6, 2)])


# -- bilinear resize ---------------------------------------------------------
def test_resize_identity(rng, backend):
    x = rand(rng, 3, 4, 2)
    np.testing.assert_array_equal(T.bilinear_resize(x, 3, 4).data, x.data)


def test_resize_from_single_pixel(backend):
    out = T.bilinear_resize(Tensor(np.full((1, 1, 2), 3.0)), 4, 5).data
    np.testing.assert_allclose(out, 3.0)


def test_resize_2x2_to_4x4_hand_weights(backend):
    # half-pixel centres: output taps at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
    out = T.bilinear_resize(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]), 4, 4).data[..., 0]
    expected = [
        [1.0, 1.25, 1.75, 2.0],
        [1.5, 1.75, 2.25, 2.5],
        [2.5, 2.75, 3.25, 3.5],
        [3.0, 3.25, 3.75, 4.0],
    ]
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_resize_bad_extent(rng):
    with pytest.raises(ShapeError):
        T.bilinear_resize(rand(rng, 2, 2, 1), 0, 3)


@pytest.mark.parametrize("out", [(8, 6), (2, 3), (5, 5)])
def test_resize_grad(rng, backend, out):
    assert_grad(lambda x: T.bilinear_resize(x, *out), [rand(rng, 4, 3, 2)])


def test_resize_batched(rng, backend):
    x = rng.standard_normal((2, 3, 5, 2))
    out = T.bilinear_resize(Tensor(x), 6, 4).data
    for i in range(2):
        np.testing.assert_allclose(out[i], T.bilinear_resize(Tensor(x[i]), 6, 4).data, atol=1e-6)


# -- conv2d ------------------------------------------------------------------
def conv_loops(x, w, b, stride, pad):
    h, wd, cin = x.shape
    k = w.shape[0]
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((ho, wo, w.shape[3]))
    for y in range(ho):
        for xx in range(wo):
            patch = xp[y * stride : y * stride + k, xx * stride : xx * stride + k]
            out[y, xx] = np.tensordot(patch, w, axes=([0, 1, 2], [0, 1, 2])) + b
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)])
def test_conv_matches_loops(rng, backend, stride, pad, k):
    x, w, b = rng.standard_normal((7, 6, 3)), rng.standard_normal((k, k, 3, 4)), rng.standard_normal(4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(out, conv_loops(x, w, b, stride, pad), atol=1e-5)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_grad(rng, backend, stride):
    assert_grad(
        lambda x, w, b: T.conv2d(x, w, b, stride, 1),
        [rand(rng, 2, 5, 6, 2), rand(rng, 3, 3, 2, 3), rand(rng, 3)],
    )


# -- small primitives -----------------------------------------------------------
@pytest.mark.parametrize(
    "fn,n",
    [
        (lambda a, b: a + b, 2),
        (lambda a, b: a - b, 2),
        (lambda a, b: a * b, 2),
        (lambda a: T.relu(a), 1),
        (lambda a: T.leaky_relu(a), 1),
        (lambda a: a.sum(axis=1), 1),
        (lambda a: a.mean(), 1),
        (lambda a: a.reshape(4, 3).transpose(1, 0), 1),
        (lambda a, b: T.concat([a, b], axis=0), 2),
        (lambda a: T.square(a), 1),
    ],
)
def test_primitive_grads(rng, fn, n):
    assert_grad(fn, [rand(rng, 3, 4) for _ in range(n)])


def test_broadcast_add_grad(rng):
    assert_grad(lambda a, b: a + b, [rand(rng, 3, 4), rand(rng, 4)])


def test_dropout_eval_is_identity(rng):
    x = rand(rng, 4, 4)
    assert T.dropout(x, 0.1, False, rng) is x


def test_dropout_train_scaling():
    x = Tensor(np.ones((200, 200)))
    out = T.dropout(x, 0.25, True, np.random.default_rng(0)).data
    kept = out != 0
    np.testing.assert_allclose(out[kept], 1 / 0.75, rtol=1e-6)
    assert abs(kept.mean() - 0.75) < 0.01


def test_dropout_grad_fixed_mask(rng):
    assert_grad(lambda a: T.dropout(a, 0.3, True, np.random.default_rng(7)), [rand(rng, 4, 5)])


def test_leaky_slope():
    np.testing.assert_allclose(T.leaky_relu(Tensor([-2.0, 3.0])).data, [-0.02, 3.0], rtol=1e-6)


# -- tape ----------------------------------------------------------------------
def test_tape_visits_each_entry_once(rng):
    a = Tensor(rng.standard_normal(3), requires_grad=True)
    b = a * a
    c = b + a  # diamond
    d = (c * b).sum()
    tape = d.backward()
    assert tape.visits == len(tape.entries) == 4
    seqs = [e._seq for e in tape.entries]
    assert seqs == sorted(seqs)
    np.testing.assert_allclose(a.grad, 4 * a.data**3 + 3 * a.data**2, rtol=1e-5)


def test_root_grad_is_one(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    assert loss.grad == 1.0


def test_forward_bitwise_deterministic(rng):
    m = nn.MultiHeadAttention(8, 2, np.random.default_rng(5))
    q = rand(rng, 4, 8)
    np.testing.assert_array_equal(m(q, q, q).data, m(q, q, q).data)


@pytest.mark.filterwarnings("ignore:invalid value")
def test_first_nonfinite_names_op():
    x = Tensor([1.0, -1.0], requires_grad=True)
    y = T.sqrt(x)
    z = (y * 2.0).sum()
    assert Tape(z).first_nonfinite() == "sqrt"


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_property(xs):
    out = T.softmax_lastdim(Tensor(xs)).data
    assert abs(out.sum() - 1.0) < 1e-5
    assert np.all(out >= 0)


def test_gradcheck_detects_wrong_gradient(rng):
    def bad_square(a):
        x = a.data
        return T._make(x * x, (a,), lambda g: (g * x,), "bad_square")  # missing factor 2

    res = gradcheck(bad_square, [rand(rng, 3, 3)])
    assert res.max_rel_error > 0.1


def test_gradcheck_skips_kink_crossings():
    x = Tensor(np.array([1e-4, 0.5, -0.7]))
    res = gradcheck(T.relu, [x])
    assert res.skipped_kinks == 1
    assert res.max_rel_error < TOL
