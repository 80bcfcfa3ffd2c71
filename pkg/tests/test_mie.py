import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group
from sklearn.metrics import silhouette_samples as sk_silhouette_samples

from unitrans import autodiff as ad
from unitrans import mie
from unitrans import nn
from unitrans import workbench as wb
from unitrans.autodiff import Tensor


# -- descriptors ---------------------------------------------------------------
def test_moments_examples():
    mu, sigma = mie.channel_moments(np.full((3, 4, 4), 2.5))
    assert np.allclose(mu.data, 2.5) and np.allclose(sigma.data, 0.0)
    mu, sigma = mie.channel_moments(np.array([[[0.0, 2.0], [0.0, 2.0]]]))
    assert np.allclose(mu.data, [1.0]) and np.allclose(sigma.data, [1.0])


def test_moments_match_double_loop():
    F = np.random.default_rng(0).normal(size=(16, 32, 32))
    mu, sigma = mie.channel_moments(F)
    for c in range(16):
        acc = 0.0
        for h in range(32):
            for w in range(32):
                acc += F[c, h, w]
        m = acc / 1024
        v = sum((F[c, h, w] - m) ** 2 for h in range(32) for w in range(32)) / 1024
        assert mu.data[c] == pytest.approx(m, abs=1e-5)
        assert sigma.data[c] == pytest.approx(np.sqrt(v), abs=1e-5)


def test_gram_examples():
    F = np.array([[[1.0]], [[2.0]]])
    assert np.allclose(mie.gram_descriptor(F, 1, 1).data, [1.0, 2.0, 4.0])
    assert not mie.gram_descriptor(np.zeros((16, 32, 32))).data.any()
    assert mie.gram_descriptor(np.zeros((16, 32, 32))).shape == (136,)
    with pytest.raises(ad.ShapeError):
        mie.gram_descriptor(np.zeros((16, 30, 32)))


def test_gram_is_psd():
    for seed in range(5):
        F = np.random.default_rng(seed).normal(size=(4, 8, 8))
        g = mie.gram_matrix(F, 4, 4).data.astype(np.float64)
        assert np.linalg.eigvalsh(g).min() >= -1e-5


def test_response_examples():
    assert np.allclose(mie.response_features(np.full((2, 4, 4), 3.0)).data, 3.0)
    spike = np.zeros((1, 4, 4))
    spike[0, 1, 2] = 9.0
    assert np.allclose(mie.response_features(spike).data, [9.0, 9.0 / 16])


def _permute(F, rng):
    c, h, w = F.shape
    return F.reshape(c, -1)[:, rng.permutation(h * w)].reshape(c, h, w)


def test_descriptors_permutation_invariant():
    rng = np.random.default_rng(1)
    F = rng.normal(size=(4, 8, 8))
    P = _permute(F, rng)
    for fn in (lambda x: mie.channel_moments(x)[0], lambda x: mie.channel_moments(x)[1],
               mie.response_features, lambda x: mie.gram_descriptor(x, 1, 1)):
        assert np.allclose(fn(F).data, fn(P).data, atol=1e-5)
    # 8x8 pooling of a 16x16 map: shuffling inside each 2x2 block changes nothing
    G = rng.normal(size=(4, 16, 16))
    blocks = G.reshape(4, 8, 2, 8, 2)[:, :, ::-1, :, ::-1].reshape(4, 16, 16)
    assert np.allclose(mie.gram_descriptor(G).data, mie.gram_descriptor(blocks).data, atol=1e-5)


# -- losses ----------------------------------------------------------------------
def test_info_nce_hand_example():
    loss = mie.info_nce(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), [0, 0, 1], 1.0)
    assert float(loss.data) == pytest.approx(2 * -np.log(np.e / (np.e + 1)), abs=1e-4)


def test_info_nce_identical_codes_is_zero():
    assert float(mie.info_nce(np.ones((3, 4)), [0, 0, 0], 0.9).data) == pytest.approx(0.0, abs=1e-6)


def test_info_nce_errors():
    with pytest.raises(mie.DegenerateBatch):
        mie.info_nce(np.eye(3), [0, 1, 2], 0.9)
    with pytest.raises(ValueError):
        mie.info_nce(np.eye(3), [0, 0, 1], 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_info_nce_nonnegative_and_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(10, 4))
    labels = rng.integers(0, 3, 10)
    if np.bincount(labels).max() < 2:
        return
    base = float(mie.info_nce(z, labels, 0.9).data)
    assert base >= -1e-6
    R = ortho_group.rvs(4, random_state=seed)
    assert float(mie.info_nce(z @ R.T, labels, 0.9).data) == pytest.approx(base, abs=1e-4)


def test_info_nce_gradient():
    rng = np.random.default_rng(2)
    rep = ad.grad_check(lambda t: mie.info_nce(t, [0, 0, 1, 1, 2], 0.9),
                        rng.normal(size=(5, 3)), tol=1e-3)
    assert rep.passed


def test_cls_loss_examples():
    lin = nn.Linear(4, 8, np.random.default_rng(0))
    lin.weight.data[:] = 0
    assert float(mie.modality_cls_loss(Tensor(np.ones((5, 4))), [0, 1, 2, 3, 7], lin).data) == \
        pytest.approx(np.log(8), abs=1e-6)
    onehot = lambda z: Tensor(20.0 * np.eye(8)[[2, 5]])  # noqa: E731
    assert float(mie.modality_cls_loss(None, [2, 5], onehot).data) < 1e-6
    with pytest.raises(ValueError):
        mie.modality_cls_loss(Tensor(np.ones((1, 4))), [8], lin)


def test_cls_loss_gradient():
    rng = np.random.default_rng(3)
    w = rng.uniform(-1, 1, size=(3, 4))
    rep = ad.grad_check(
        lambda t: mie.modality_cls_loss(t, [0, 3, 1], lambda z: ad.matmul(z, Tensor(w))),
        rng.normal(size=(3, 3)), tol=1e-3)
    assert rep.passed


# -- silhouette ----------------------------------------------------------------------
def test_silhouette_examples():
    pts = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])
    s = mie.silhouette_samples(pts, [0, 0, 1, 1], "euclidean")
    b = (np.hypot(10, 10) + np.hypot(10, 11)) / 2
    assert s[0] == pytest.approx((b - 1) / b, abs=1e-9)
    assert s[0] == pytest.approx(0.9310, abs=1e-4)
    far = np.array([[0.0, 0.0]] * 3 + [[50.0, 50.0]] * 3)
    assert mie.silhouette(far, [0] * 3 + [1] * 3, "euclidean") == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mie.silhouette(pts, [0] * 4)


def test_silhouette_random_labels_near_zero():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(500, 3))
    assert abs(mie.silhouette(pts, rng.integers(0, 3, 500), "euclidean")) < 0.1


@pytest.mark.parametrize("metric", ["euclidean", "cosine"])
def test_silhouette_matches_sklearn(metric):
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(60, 4)) + np.repeat(rng.normal(size=(3, 4)) * 2, 20, axis=0)
    labels = np.repeat([0, 1, 2], 20)
    ours = mie.silhouette_samples(pts, labels, metric)
    assert np.allclose(ours, sk_silhouette_samples(pts, labels, metric=metric), atol=1e-9)


def test_silhouette_singletons_score_zero():
    pts = np.array([[0.0, 0.0], [0.0, 1.0], [5.0, 5.0]])
    s = mie.silhouette_samples(pts, [0, 0, 1], "euclidean")
    assert s[2] == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 100))
def test_silhouette_relabel_and_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(30, 3))
    labels = rng.integers(0, 3, 30)
    if len(np.unique(labels)) < 2:
        return
    base = mie.silhouette(pts, labels, "euclidean")
    perm = rng.permutation(3)
    assert mie.silhouette(pts, perm[labels], "euclidean") == pytest.approx(base, abs=1e-9)
    assert mie.silhouette(pts * scale, labels, "euclidean") == pytest.approx(base, abs=1e-9)


# -- encoder --------------------------------------------------------------------------
def test_encoder_shapes_and_determinism():
    enc = mie.IntrinsicEncoder(d=4, n_modalities=8, seed=0)
    F = np.random.default_rng(0).normal(size=(3, 16, 32, 32)).astype(np.float32)
    z1, z2 = enc.codes(F), enc.codes(F)
    assert z1.shape == (3, 4) and z1.tobytes() == z2.tobytes()
    assert enc.codes(F[0]).shape == (4,)
    assert enc.surrogate(Tensor(z1)).shape == (3, 8)


def test_encoder_permutation_invariant_with_1x1_pooling():
    enc = mie.IntrinsicEncoder(d=4, seed=1, pool=1)
    rng = np.random.default_rng(5)
    F = rng.normal(size=(16, 8, 8)).astype(np.float32)
    assert np.allclose(enc.codes(F), enc.codes(_permute(F, rng)), atol=1e-5)


def test_encoder_state_round_trip():
    a = mie.IntrinsicEncoder(d=4, seed=0)
    F = np.random.default_rng(6).normal(size=(4, 16, 32, 32)).astype(np.float32)
    a.fit_normalizer(F)
    b = mie.IntrinsicEncoder.from_state(a.state_dict())
    assert b.codes(F).tobytes() == a.codes(F).tobytes()
    assert any(k.startswith("norm/") for k in a.state_dict())


def test_stage1_short_run_is_bitwise_reproducible():
    split = wb.make_split()
    cfg = mie.Stage1Config(steps=6, batch_scenes=4, norm_scenes=4)
    r1, r2 = mie.stage1_train(split, cfg), mie.stage1_train(split, cfg)
    assert np.array(r1.step_losses).tobytes() == np.array(r2.step_losses).tobytes()
    assert all(np.isfinite(r1.step_losses))


def test_stage1_needs_two_modalities():
    split = wb.make_split()
    split.training_modalities = split.training_modalities[:1]
    with pytest.raises(ValueError):
        mie.stage1_train(split, mie.Stage1Config(steps=1))


def test_report_csv_layout():
    rep = mie.IntrinsicReport({"modality_silhouette": (0.5, 0.75)})
    assert rep.to_csv().splitlines()[0] == "metric,raw,intrinsic"
    assert rep["modality_silhouette"] == (0.5, 0.75)
