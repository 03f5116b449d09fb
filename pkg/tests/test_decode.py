import numpy as np
import pytest

from lowshot import tensor as T
from lowshot.config import toy_model_config
from lowshot.decode import (
    DensityMap,
    RegressionHead,
    ResponseTensor,
    correlate_all,
    estimate_count,
    fuse,
    regress_density,
)
from lowshot.density import gt_density
from lowshot.model import LowShotCounter
from lowshot.tensor import ShapeError, Tensor


def correlate_loops(f, k):
    h, w, d = f.shape
    s = k.shape[0]
    p = s // 2
    out = np.zeros((h, w, d))
    for y in range(h):
        for x in range(w):
            for i in range(s):
                for j in range(s):
                    yy, xx = y + i - p, x + j - p
                    if 0 <= yy < h and 0 <= xx < w:
                        out[y, x] += f[yy, xx] * k[i, j]
    return out


@pytest.fixture
def model():
    m = LowShotCounter(toy_model_config(), seed=4)
    m.eval()
    return m


BOXES = np.array([[0.1, 0.1, 0.35, 0.3], [0.5, 0.55, 0.8, 0.75], [0.2, 0.6, 0.4, 0.9]])


# -- correlation and fusion ----------------------------------------------------
def test_zero_prototype_zero_response(rng):
    f = Tensor(rng.standard_normal((4, 4, 2)))
    (r,) = correlate_all(f, Tensor(np.zeros((1, 3, 3, 2))))
    np.testing.assert_array_equal(r.values.data, 0.0)


def test_identical_prototypes_identical_responses(rng):
    f = Tensor(rng.standard_normal((4, 4, 2)))
    k = rng.standard_normal((3, 3, 2))
    a, b = correlate_all(f, Tensor(np.stack([k, k])))
    np.testing.assert_array_equal(a.values.data, b.values.data)


def test_correlate_matches_loop_oracle(rng):
    f = rng.standard_normal((4, 4, 2))
    ks = rng.standard_normal((2, 3, 3, 2))
    out = correlate_all(Tensor(f), Tensor(ks))
    for r, k in zip(out, ks):
        assert isinstance(r, ResponseTensor) and r.values.shape == (4, 4, 2)
        np.testing.assert_allclose(r.values.data, correlate_loops(f, k), atol=1e-6)


def test_correlate_channel_mismatch(rng):
    with pytest.raises(ShapeError, match="channels"):
        correlate_all(Tensor(rng.standard_normal((4, 4, 2))), Tensor(rng.standard_normal((1, 3, 3, 3))))


def test_doubling_prototype_doubles_response(rng):
    f = Tensor(rng.standard_normal((5, 5, 3)).astype(np.float32))
    k = rng.standard_normal((1, 3, 3, 3)).astype(np.float32)
    (a,) = correlate_all(f, Tensor(k))
    (b,) = correlate_all(f, Tensor(2 * k))
    np.testing.assert_array_equal(b.values.data, 2 * a.values.data)


def test_fuse_is_elementwise_max(rng):
    rs = [ResponseTensor(Tensor(rng.standard_normal((3, 3, 2)))) for _ in range(3)]
    out = fuse(rs).values.data
    np.testing.assert_array_equal(out, np.max([r.values.data for r in rs], axis=0))
    np.testing.assert_array_equal(fuse(rs[:1]).values.data, rs[0].values.data)
    with pytest.raises(ShapeError):
        fuse([])


# -- regression head -----------------------------------------------------------
@pytest.mark.parametrize("h", [2, 4, 6])
def test_head_output_resolution(rng, h):
    head = RegressionHead(8, (8, 4, 4), rng)
    dm = regress_density(ResponseTensor(Tensor(rng.standard_normal((h, h, 8)))), head)
    assert isinstance(dm, DensityMap)
    assert dm.shape == (8 * h, 8 * h)


def test_head_config_mismatch(rng):
    head = RegressionHead(8, (8, 4, 4), rng)
    with pytest.raises(ShapeError, match="8"):
        regress_density(Tensor(rng.standard_normal((4, 4, 8))), head, input_size=64)


def test_head_can_output_negative_values(rng):
    # the final Leaky ReLU lets small negative densities through
    head = RegressionHead(4, (4, 4, 4), rng)
    head.out.bias.data[:] = -1.0
    dm = regress_density(Tensor(rng.standard_normal((2, 2, 4))), head)
    assert np.all(dm.numpy() < 0)
    assert estimate_count(dm) < 0
    assert estimate_count(dm, clamp=True) == 0.0


# -- counting ------------------------------------------------------------------
def test_estimate_count_zero_map():
    assert estimate_count(DensityMap(np.zeros((8, 8), np.float32))) == 0.0


def test_estimate_count_gt_map():
    pts = np.array([[0.2, 0.3], [0.7, 0.7], [0.0, 1.0]])
    dm = DensityMap(gt_density(pts, BOXES, 32, 32))
    assert abs(estimate_count(dm) - 3) < 1e-4


def test_estimate_count_matches_accumulation(rng):
    v = rng.standard_normal((16, 16)).astype(np.float32)
    acc = 0.0
    for x in v.ravel():
        acc += float(x)
    assert abs(estimate_count(DensityMap(v)) - acc) < 1e-5


def test_density_count_never_stale(rng):
    dm = DensityMap(np.ones((4, 4), np.float32))
    assert dm.count == 16
    dm.values.data[0, 0] = 5.0
    assert dm.count == 20
    with pytest.raises(ShapeError):
        DensityMap(np.ones((2, 4, 4)))


# -- end-to-end prediction -----------------------------------------------------
def test_predict_output_and_determinism(model, rng):
    img = rng.random((32, 32, 3)).astype(np.float32)
    dm, count = model.predict(img, BOXES)
    assert dm.shape == (32, 32)
    assert isinstance(count, float) and np.isfinite(count)
    dm2, count2 = model.predict(img, BOXES)
    np.testing.assert_array_equal(dm.numpy(), dm2.numpy())
    assert count == count2


def test_predict_exemplar_permutation_invariance(model, rng):
    img = rng.random((32, 32, 3)).astype(np.float32)
    base = model.predict(img, BOXES)[0].numpy()
    for perm in ([1, 0, 2], [2, 1, 0], [1, 2, 0]):
        np.testing.assert_allclose(model.predict(img, BOXES[perm])[0].numpy(), base, atol=1e-5)


def test_predict_zero_shot_matches_zero_shot_path(model, rng):
    img = rng.random((32, 32, 3)).astype(np.float32)
    dm, _ = model.predict(img, [])
    with T.no_grad():
        feats = model.encode(img)
        ps = model.ope(feats, None, model.encoder.pos)
        ref = model.densities(feats, [ps.prototypes])[0].data[0]
    np.testing.assert_array_equal(dm.numpy(), ref)


def test_forward_returns_aux_maps(model, rng):
    imgs = rng.random((2, 32, 32, 3)).astype(np.float32)
    final, aux, ps = model.forward(imgs, [BOXES, BOXES[:3]])
    assert final.shape == (2, 32, 32)
    assert len(aux) == model.cfg.iterations - 1
    assert all(a.shape == (2, 32, 32) for a in aux)
    assert len(ps.intermediates) == model.cfg.iterations


def test_batch_box_count_mismatch(model, rng):
    imgs = rng.random((2, 32, 32, 3)).astype(np.float32)
    with pytest.raises(ValueError):
        model.forward(imgs, [BOXES])
    with pytest.raises(ShapeError):
        model.forward(imgs, [BOXES, BOXES[:2]])


def test_untrained_density_starts_small(rng):
    m = LowShotCounter(toy_model_config(), seed=0)
    _, count = m.predict(rng.random((32, 32, 3)).astype(np.float32), BOXES)
    assert abs(count) < 5.0
