import numpy as np
import pytest

from unitrans import evaluation as ev
from unitrans import mie as mie_mod
from unitrans import workbench as wb
from unitrans.mie import Stage1Config
from unitrans.stage2 import Stage2Config, TaskHead
from unitrans.translator import ExpertBank, MappingRouter, MctArchitecture


@pytest.fixture(scope="module")
def split():
    return wb.make_split()


@pytest.fixture(scope="module")
def untrained(split):
    arch = MctArchitecture()
    enc = mie_mod.IntrinsicEncoder(d=4, seed=0)
    return ev.Translator(enc, ExpertBank(arch.manifest(), K=8), MappingRouter(d=4, K=8),
                         TaskHead(), arch)


def test_f1_examples():
    assert ev.f1_score([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(0.5)
    assert ev.f1_score([0, 0], [0, 0]) == 1.0
    assert ev.f1_score([1, 1], [1, 1]) == 1.0


def test_mean_pairwise_cosine():
    a = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert ev.mean_pairwise_cosine(a) == pytest.approx(1 / 3)
    assert ev.mean_pairwise_cosine(a[:1]) is None
    assert ev.mean_pairwise_cosine(a[:1], a[2:]) == pytest.approx(0.0)


def test_emerging_pairs_cover_every_pair_once(split):
    pairs = ev.emerging_pairs(split)
    assert len(pairs) == len(set(pairs)) == 34
    em = set(split.emerging_seeds)
    assert all(j != i and (i in em or j in em) for j, i in pairs)


def test_leakage_guard(split):
    ev.check_leakage(split, [{"stage": "stage1", "train_modalities": split.train_seeds}])
    with pytest.raises(ev.LeakageError, match="stage2"):
        ev.check_leakage(split, [{"stage": "stage2", "train_modalities": [split.emerging_seeds[0]]}])
    with pytest.raises(ev.LeakageError):
        ev.zero_shot_eval(None, split, [{"seen_modalities": split.emerging_seeds}])


def test_pair_data_uses_opposite_agents(split):
    d = ev.pair_data(split, 9, 1, [800, 801])
    obs = wb.make_observation(wb.generate_scene(801), 3)
    assert np.array_equal(d.F_nbr[1], wb.build_encoder(split.spec(9))(obs).values)
    assert np.array_equal(d.teacher[1], wb.teacher_feature(split.spec(1), obs).values)


def test_same_modality_identity_is_exact(split, untrained):
    """With ego == neighbor modality the teacher is the neighbor map itself."""
    row = ev.evaluate_pair(untrained, split, 1, 1, [800, 801])
    assert row["mse_identity"] == 0.0
    assert row["mse_translated"] >= 0.0


def test_report_rows_and_csv(split, untrained):
    rep = ev.zero_shot_eval(untrained, split, n_scenes=1, pairs=[(9, 1), (1, 10)],
                            intrinsic=False)
    assert [(r["nbr_mod"], r["ego_mod"]) for r in rep.rows] == [(9, 1), (1, 10)]
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(ev.EVAL_FIELDS) and len(lines) == 3
    assert "pairs with translated f1 < raw f1" in rep.summary()


def test_profile_invariants(split, untrained):
    rep = ev.profile(untrained, top_k=3, trials=1, split=split)
    assert rep.passes("unitrans") == 1 and rep.passes("classic_moe") == 3
    assert rep.ratio <= 0.6
    backbone = untrained.arch.backbone_madds(32, 32)
    uni = next(r["madds"] for r in rep.rows if r["method"] == "unitrans")
    # one backbone pass, plus the combination, router and code overhead
    assert backbone <= uni <= 1.05 * backbone
    assert rep.to_csv().splitlines()[0] == "method,madds,passes,wall_ms_median"


def test_profile_top1_matches_within_combination_overhead(split, untrained):
    rep = ev.profile(untrained, top_k=1, trials=0, split=split)
    m = {r["method"]: r["madds"] for r in rep.rows}
    overhead = untrained.bank.K * untrained.arch.manifest_size()
    assert abs(m["unitrans"] - m["classic_moe"]) <= overhead


def test_routing_consistency_runs(split, untrained):
    stats = ev.routing_consistency(untrained, split, n_scenes=2, modalities=[1, 2])
    assert len(stats.per_mapping) == 4
    assert -1 <= stats.across <= 1 and -1 <= stats.within <= 1
    single = ev.routing_consistency(untrained, split, n_scenes=1, modalities=[1, 2])
    assert all(v is None for v in single.per_mapping.values()) and single.within is None


@pytest.mark.parametrize("axis, value, check", [
    ("d", 8, lambda c1, c2, r: c1.d == 8 and r),
    ("K", 1, lambda c1, c2, r: c2.K == 1 and c2.top_k == 1 and not r),
    ("shared", 0, lambda c1, c2, r: c2.n_shared == 0),
    ("loss-term", "feat", lambda c1, c2, r: c2.lambda_feat == 0 and c2.lambda_ctr == 0.01),
    ("loss-term", "none", lambda c1, c2, r: c2 == Stage2Config()),
])
def test_ablation_config(axis, value, check):
    assert check(*ev.ablation_config(axis, value, Stage1Config(), Stage2Config()))


def test_ablation_config_errors():
    with pytest.raises(ValueError):
        ev.ablation_config("depth", 1, Stage1Config(), Stage2Config())
    with pytest.raises(ValueError):
        ev.ablation_config("loss-term", "task", Stage1Config(), Stage2Config())


def test_k1_bank_routes_with_unit_weight(untrained):
    mmr = MappingRouter(d=4, K=1)
    from unitrans.translator import route, mapping_descriptor
    a = route(mapping_descriptor(np.ones(4), np.zeros(4), mmr), mmr).alpha.data
    assert np.array_equal(a, [1.0])


def test_shared_zero_bank_has_no_shared_expert():
    bank = ExpertBank(MctArchitecture(n_blocks=1).manifest(), K=2, n_shared=0)
    assert bank.shared_sum() is None and not any(k.startswith("shared") for k in bank.state_dict())
