import numpy as np
import pytest

from unitrans import autodiff as ad
from unitrans import mie as mie_mod
from unitrans import stage2 as s2
from unitrans import workbench as wb
from unitrans.autodiff import Tensor


# -- losses ----------------------------------------------------------------------
def test_feat_distill_examples():
    F = np.random.default_rng(0).normal(size=(16, 4, 4)).astype(np.float32)
    assert float(s2.feat_distill_loss(F, F).data) == 0.0
    assert float(s2.feat_distill_loss(F + 1, F).data) == pytest.approx(16 * 4 * 4, rel=1e-5)
    with pytest.raises(ad.ShapeError):
        s2.feat_distill_loss(F, F[:8])


def test_feat_distill_gradient_and_pair_average():
    rng = np.random.default_rng(1)
    target = rng.normal(size=(2, 3, 2, 2))
    assert ad.grad_check(lambda t: s2.feat_distill_loss(t, target), rng.normal(size=(2, 3, 2, 2)),
                         tol=1e-3).passed
    x = rng.normal(size=(2, 3, 2, 2))
    per_pair = [float(s2.feat_distill_loss(x[i], target[i]).data) for i in range(2)]
    assert float(s2.feat_distill_loss(x, target).data) == pytest.approx(np.mean(per_pair), rel=1e-5)


def test_routing_contrastive_examples():
    tau = 0.9
    alpha = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    loss = float(s2.routing_contrastive_loss(alpha, [0, 0, 1], tau).data)
    term = -np.log(np.exp(1 / tau) / (np.exp(1 / tau) + 1.0))
    assert loss == pytest.approx(2 * term, abs=1e-5)
    same = np.tile([[0.3, 0.7]], (4, 1))
    assert float(s2.routing_contrastive_loss(same, [5] * 4, tau).data) == pytest.approx(0, abs=1e-6)
    perm = [2, 0, 1]
    assert float(s2.routing_contrastive_loss(alpha[perm], np.array([0, 0, 1])[perm], tau).data) \
        == pytest.approx(loss, abs=1e-6)


def test_importance_load_examples():
    imp, load = s2.importance_load(np.array([[1.0, 0.0], [0.0, 1.0]]), 1)
    assert np.allclose(imp.data, [1, 1]) and load.tolist() == [1, 1]
    imp, load = s2.importance_load(np.full((2, 2), 0.5), 1)
    assert np.allclose(imp.data, [1, 1]) and load.tolist() == [2, 0]


def test_importance_load_identities():
    a = np.random.default_rng(2).dirichlet(np.ones(8), size=24)
    imp, load = s2.importance_load(a, 3)
    assert float(imp.data.sum()) == pytest.approx(24, rel=1e-6)
    assert load.sum() == 24 * 3


def test_router_reg_examples():
    u = Tensor(np.zeros((2, 2)))
    assert float(s2.router_reg_loss(ad.softmax(u, axis=-1), u, 1).data) == \
        pytest.approx(1.0 + np.log(2) ** 2, abs=1e-4)
    u = Tensor(np.array([[10.0, -10.0], [-10.0, 10.0]]))
    assert float(s2.router_reg_loss(ad.softmax(u, axis=-1), u, 1).data) == pytest.approx(101.0, abs=1e-3)


def test_router_reg_gradient_ignores_load():
    """With the log-partition penalty removed, only imp carries gradient: d/dalpha = K*load/B^2."""
    alpha = Tensor(np.array([[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]]), requires_grad=True)
    zero_u = Tensor(np.full((2, 3), -50.0))  # lse ~ -48.9, constant
    ad.backward(s2.router_reg_loss(alpha, zero_u, 1))
    _, load = s2.importance_load(alpha.data, 1)
    assert np.allclose(alpha.grad, np.tile(3 * load / 4, (2, 1)))


def test_task_loss_examples():
    y = (np.random.default_rng(3).random((4, 4)) > 0.5).astype(np.float32)
    assert float(s2.task_loss(np.where(y > 0, 20.0, -20.0), y).data) < 1e-8
    assert float(s2.task_loss(np.zeros((4, 4)), y).data) == pytest.approx(np.log(2), abs=1e-6)
    assert ad.grad_check(lambda t: s2.task_loss(t, y), np.random.default_rng(4).normal(size=(4, 4)),
                         tol=1e-3).passed
    with pytest.raises(ad.ShapeError):
        s2.task_loss(np.zeros((4, 4)), np.zeros((4, 3)))


def test_fuse_examples():
    rng = np.random.default_rng(5)
    F, a, b = rng.normal(size=(3, 2, 3, 3))
    assert s2.fuse(F) is F
    assert np.array_equal(s2.fuse(F, [F]), F)
    assert np.array_equal(s2.fuse(F, [a, b]), s2.fuse(F, [b, a]))
    with pytest.raises(ad.ShapeError):
        s2.fuse(F, [a[:1]])


# -- head and config ---------------------------------------------------------------
def test_task_head_uses_own_modality_detector():
    spec = wb.modality_spec(2)
    head = s2.TaskHead()
    F = wb.encode(spec, 5, 0).values
    w, b = wb.modality_head(spec)
    expect = np.tensordot(w, F, axes=1) + b
    assert np.allclose(head(F, spec).data, expect, atol=1e-5)
    head.scale.data[:] = 2.0
    head.shift.data[:] = -1.0
    assert np.allclose(head(F[None], [spec]).data[0], 2 * expect - 1, atol=1e-4)
    with pytest.raises(ValueError):
        head(np.stack([F, F]), [spec])


@pytest.mark.parametrize("kw", [{"lambda_feat": -1}, {"tau_alpha": 0}, {"top_k": 9}, {"crop": 12}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        s2.Stage2Config(**kw).validate()


# -- pairs and a short training run ------------------------------------------------------
@pytest.fixture(scope="module")
def tiny_mie():
    return mie_mod.stage1_train(wb.make_split(), mie_mod.Stage1Config(steps=3, batch_scenes=2,
                                                                      norm_scenes=2)).mie


def test_build_pairs_enumerates_all_ordered_pairs(tiny_mie):
    split = wb.make_split()
    batch = s2.build_pairs(tiny_mie, split, np.random.default_rng(0), 2, crop=16)
    assert batch.F_nbr.shape == (24, 16, 16, 16) and batch.teacher.shape == batch.F_nbr.shape
    assert batch.z_nbr.shape == (24, 4) and batch.labels.shape == (8, 16, 16)
    assert set(batch.mapping[:, 0]) | set(batch.mapping[:, 1]) <= set(split.train_seeds)
    for e in range(8):
        assert np.sum(batch.ego_index == e) == 3


def test_short_training_run(tiny_mie):
    split = wb.make_split()
    before = ad.parameters_checksum(tiny_mie.state_dict())
    cfg = s2.Stage2Config(steps=3, batch_scenes=1, n_blocks=1, steps_per_epoch=2)
    res = s2.stage2_train(tiny_mie, split, cfg)
    assert ad.parameters_checksum(tiny_mie.state_dict()) == before == res.mie_checksum
    for row in res.metrics:
        recomposed = (row["L_task"] + cfg.lambda_feat * row["L_feat"] + cfg.lambda_ctr * row["L_ctr"]
                      + cfg.lambda_r * row["L_r"])
        assert recomposed == pytest.approx(row["total"], rel=1e-6)
    assert res.metrics_csv().splitlines()[0] == ",".join(s2.METRIC_FIELDS)
    assert len(res.importance) == 2
    keys = res.state_dict()
    assert {k.split("/")[0] for k in keys} == {"tpb", "mmr", "head"}
    again = s2.stage2_train(tiny_mie, split, cfg)
    assert again.metrics_csv() == res.metrics_csv()
