"""Zero-shot evaluation, routing diagnostics, ablation sweeps and profiling."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import workbench as wb
from .autodiff import Tensor
from .mie import IntrinsicEncoder, Stage1Config, intrinsic_space_report, stage1_train
from .stage2 import Stage2Config, TaskHead, fuse, stage2_train
from .translator import (ExpertBank, MappingRouter, MctArchitecture, classic_moe_forward,
                         default_backbone, instrument, mapping_descriptor, route,
                         translate, translate_batch)

log = logging.getLogger(__name__)

EVAL_FIELDS = ("ego_mod", "nbr_mod", "mse_translated", "mse_identity", "f1_ego", "f1_raw",
               "f1_translated", "alpha_consistency")
PROFILE_FIELDS = ("method", "madds", "passes", "wall_ms_median")
ABLATION_FIELDS = ("axis", "value", "seed", "mse_translated", "mse_identity", "mse_reduction",
                   "f1_translated", "f1_raw", "min_imp")


class LeakageError(RuntimeError):
    """An emerging modality was seen by a trained component."""


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in fields])
    return buf.getvalue()


@dataclass
class Translator:
    """The trained pieces needed at inference time."""

    mie: IntrinsicEncoder
    bank: ExpertBank
    mmr: MappingRouter
    head: TaskHead
    arch: MctArchitecture = field(default_factory=MctArchitecture)


# -- leakage guard --------------------------------------------------------------
def check_leakage(split: wb.ModalitySplit, provenance: list[dict]):
    """Refuse to evaluate if any emerging modality appears in a training record."""
    emerging = set(split.emerging_seeds)
    for rec in provenance:
        seen = set(rec.get("train_modalities", ())) | set(rec.get("seen_modalities", ()))
        bad = sorted(emerging & seen)
        if bad:
            raise LeakageError(
                f"emerging modalities {bad} appear in the {rec.get('stage', '?')} training log"
            )


# -- metrics --------------------------------------------------------------------
def f1_score(pred: np.ndarray, labels: np.ndarray) -> float:
    pred, labels = np.asarray(pred, bool), np.asarray(labels, bool)
    tp = np.sum(pred & labels)
    denom = 2 * tp + np.sum(pred & ~labels) + np.sum(~pred & labels)
    return 1.0 if denom == 0 else float(2 * tp / denom)


def mean_pairwise_cosine(a: np.ndarray, b: np.ndarray | None = None) -> float | None:
    """Mean cosine over distinct pairs within ``a``, or over all pairs across ``a`` and ``b``."""
    u = a / np.linalg.norm(a, axis=-1, keepdims=True)
    if b is None:
        n = len(u)
        if n < 2:
            return None
        s = u @ u.T
        return float((s.sum() - np.trace(s)) / (n * (n - 1)))
    v = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return float((u @ v.T).mean())


def emerging_pairs(split: wb.ModalitySplit) -> list[tuple[int, int]]:
    """Ordered (neighbor, ego) modality pairs, distinct, with at least one emerging side."""
    ids = split.train_seeds + split.emerging_seeds
    emerging = set(split.emerging_seeds)
    return [
        (j, i) for i in ids for j in ids
        if i != j and (i in emerging or j in emerging)
    ]


def _pair_scenes(split: wb.ModalitySplit, n_scenes: int) -> list[int]:
    lo, hi = split.test_scenes
    return list(range(lo, min(hi, lo + n_scenes)))


@dataclass
class PairData:
    F_nbr: np.ndarray
    F_ego: np.ndarray
    teacher: np.ndarray
    labels: np.ndarray


def pair_data(split: wb.ModalitySplit, nbr_mod: int, ego_mod: int, scenes) -> PairData:
    """Ego agent ``s % 4`` paired with the agent facing the opposite way."""
    nbr_spec, ego_spec = split.spec(nbr_mod), split.spec(ego_mod)
    rows = {"n": [], "e": [], "t": [], "y": []}
    for s in scenes:
        scene = wb.generate_scene(s)
        ego = s % wb.N_AGENTS
        nbr = (ego + 2) % wb.N_AGENTS
        o_e, o_n = wb.make_observation(scene, ego), wb.make_observation(scene, nbr)
        rows["n"].append(wb.build_encoder(nbr_spec)(o_n).values)
        rows["e"].append(wb.build_encoder(ego_spec)(o_e).values)
        rows["t"].append(wb.teacher_feature(ego_spec, o_n).values)
        rows["y"].append(wb.task_labels(scene))
    return PairData(*(np.stack(rows[k]) for k in "nety"))


def translate_many(model: Translator, F_nbr: np.ndarray, F_ego: np.ndarray, chunk: int = 25):
    """Batched translation; returns (translated maps, routing weights)."""
    backbone = default_backbone(model.arch)
    outs, alphas = [], []
    with ad.no_grad():
        z_n, z_e = model.mie.codes(F_nbr), model.mie.codes(F_ego)
        for lo in range(0, len(F_nbr), chunk):
            sl = slice(lo, lo + chunk)
            y, rv = translate_batch(model.bank, model.mmr, z_n[sl], z_e[sl],
                                    F_nbr[sl], F_ego[sl], backbone)
            outs.append(y.data)
            alphas.append(rv.alpha.data)
    return np.concatenate(outs), np.concatenate(alphas)


def _predict(head: TaskHead, F: np.ndarray, spec) -> np.ndarray:
    with ad.no_grad():
        return head(F, spec).data > 0


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    intrinsic: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        return _csv(EVAL_FIELDS, self.rows)

    def mean(self, key: str, rows=None) -> float:
        return float(np.mean([r[key] for r in (rows or self.rows)]))

    def mse_reduction(self) -> float:
        """``1 - mean(translated MSE) / mean(identity MSE)`` over the report rows."""
        return 1.0 - self.mean("mse_translated") / self.mean("mse_identity")

    def summary(self) -> str:
        lines = [f"{len(self.rows)} pairs",
                 f"mean mse translated {self.mean('mse_translated'):.4f} "
                 f"identity {self.mean('mse_identity'):.4f} "
                 f"(reduction {100 * self.mse_reduction():.1f}%)",
                 f"mean f1 ego {self.mean('f1_ego'):.4f} raw {self.mean('f1_raw'):.4f} "
                 f"translated {self.mean('f1_translated'):.4f}"]
        worse = [r for r in self.rows if r["f1_translated"] < r["f1_raw"]]
        lines.append(f"pairs with translated f1 < raw f1: {len(worse)}")
        return "\n".join(lines)


def evaluate_pair(model: Translator, split, nbr_mod: int, ego_mod: int, scenes) -> dict:
    data = pair_data(split, nbr_mod, ego_mod, scenes)
    translated, alpha = translate_many(model, data.F_nbr, data.F_ego)
    y = data.labels
    ego = split.spec(ego_mod)
    return {
        "ego_mod": ego_mod, "nbr_mod": nbr_mod,
        "mse_translated": float(np.mean((translated - data.teacher) ** 2, dtype=np.float64)),
        "mse_identity": float(np.mean((data.F_nbr - data.teacher) ** 2, dtype=np.float64)),
        "f1_ego": f1_score(_predict(model.head, data.F_ego, ego), y),
        "f1_raw": f1_score(_predict(model.head, fuse(data.F_ego, [data.F_nbr]), ego), y),
        "f1_translated": f1_score(_predict(model.head, fuse(data.F_ego, [translated]), ego), y),
        "alpha_consistency": mean_pairwise_cosine(alpha) or float("nan"),
    }


def zero_shot_eval(model: Translator, split: wb.ModalitySplit, provenance=(),
                   n_scenes: int = 50, pairs=None, intrinsic: bool = True) -> EvalReport:
    """Score every emerging pair on held-out scenes without any further training."""
    check_leakage(split, list(provenance))
    scenes = _pair_scenes(split, n_scenes)
    report = EvalReport()
    for nbr_mod, ego_mod in pairs or emerging_pairs(split):
        report.rows.append(evaluate_pair(model, split, nbr_mod, ego_mod, scenes))
    if intrinsic:
        rep = intrinsic_space_report(model.mie, split, n_scenes=n_scenes)
        report.intrinsic = {k: v[1] for k, v in rep.rows.items()}
    return report


# -- routing consistency --------------------------------------------------------------
@dataclass
class RoutingStats:
    per_mapping: dict  # (nbr, ego) -> within-label mean cosine (None if single sample)
    within: float | None
    across: float


def routing_consistency(model: Translator, split: wb.ModalitySplit, n_scenes: int = 12,
                        modalities=None) -> RoutingStats:
    """Within- vs across-mapping cosine of routing weights on held-out scenes."""
    mods = list(modalities or split.train_seeds)
    scenes = _pair_scenes(split, n_scenes)
    codes = {}
    for m in mods:
        enc = wb.build_encoder(split.spec(m))
        for role, shift in (("ego", 0), ("nbr", 2)):
            F = np.stack([
                enc(wb.make_observation(wb.generate_scene(s), (s + shift) % wb.N_AGENTS)).values
                for s in scenes
            ])
            codes[m, role] = model.mie.codes(F)
    alphas = {}
    with ad.no_grad():
        for j, i in itertools.product(mods, mods):
            delta = mapping_descriptor(codes[j, "nbr"], codes[i, "ego"], model.mmr)
            alphas[(j, i)] = route(delta, model.mmr).alpha.data.astype(np.float64)
    per = {k: mean_pairwise_cosine(a) for k, a in alphas.items()}
    defined = [v for v in per.values() if v is not None]
    within = float(np.mean(defined)) if defined else None
    keys = list(alphas)
    across = float(np.mean([
        mean_pairwise_cosine(alphas[a], alphas[b]) for a, b in itertools.combinations(keys, 2)
    ]))
    return RoutingStats(per, within, across)


# -- profiling ----------------------------------------------------------------------------
@dataclass
class ProfileReport:
    rows: list
    top_k: int

    @property
    def ratio(self) -> float:
        m = {r["method"]: r["madds"] for r in self.rows}
        return m["unitrans"] / m["classic_moe"]

    def passes(self, method: str) -> int:
        return next(r["passes"] for r in self.rows if r["method"] == method)

    def to_csv(self) -> str:
        return _csv(PROFILE_FIELDS, self.rows)


def profile(model: Translator, top_k: int = 3, trials: int = 100, seed: int = 0,
            split: wb.ModalitySplit | None = None) -> ProfileReport:
    """Count multiply-adds and backbone passes per translation; time both methods."""
    split = split or wb.make_split()
    a, b = split.train_seeds[0], split.emerging_seeds[0]
    scene = wb.generate_scene(split.test_scenes[0] + seed)
    F_n = wb.build_encoder(split.spec(b))(wb.make_observation(scene, 0)).values
    F_e = wb.build_encoder(split.spec(a))(wb.make_observation(scene, 2)).values
    methods = {
        "unitrans": lambda: translate(model.bank, model.mmr, model.mie, F_n, F_e, model.arch),
        "classic_moe": lambda: classic_moe_forward(model.bank, model.mmr, model.mie, F_n, F_e,
                                                   top_k, model.arch),
    }
    rows = []
    for name, fn in methods.items():
        with ad.no_grad():
            with instrument() as inst:
                fn()
            times = []
            for _ in range(trials):
                t0 = time.perf_counter()
                fn()
                times.append(1e3 * (time.perf_counter() - t0))
        rows.append({"method": name, "madds": inst.madds, "passes": inst.passes,
                     "wall_ms_median": float(np.median(times)) if times else float("nan")})
    rep = ProfileReport(rows, top_k)
    if rep.passes("unitrans") != 1 or rep.passes("classic_moe") != top_k:
        raise AssertionError(f"pass-count invariant violated: {rows}")
    return rep


# -- ablations --------------------------------------------------------------------------------
LOSS_TERMS = {"none": None, "feat": "lambda_feat", "ctr": "lambda_ctr", "r": "lambda_r"}
AXES = ("d", "K", "shared", "loss-term")


def train_pipeline(split, s1: Stage1Config, s2: Stage2Config, mie: IntrinsicEncoder | None = None,
                   on_step=None) -> Translator:
    mie = mie or stage1_train(split, s1).mie
    res = stage2_train(mie, split, s2, on_step=on_step)
    return Translator(mie, res.bank, res.mmr, res.head, s2.architecture()), res


def ablation_config(axis: str, value, s1: Stage1Config, s2: Stage2Config):
    if axis == "d":
        return replace(s1, d=int(value)), s2, True
    if axis == "K":
        k = int(value)
        return s1, replace(s2, K=k, top_k=min(s2.top_k, k)), False
    if axis == "shared":
        return s1, replace(s2, n_shared=int(value)), False
    if axis == "loss-term":
        if value not in LOSS_TERMS:
            raise ValueError(f"unknown loss term {value!r}; choose from {sorted(LOSS_TERMS)}")
        name = LOSS_TERMS[value]
        return s1, (replace(s2, **{name: 0.0}) if name else s2), False
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {AXES}")


def ablation_sweep(axis: str, values, split: wb.ModalitySplit, s1: Stage1Config,
                   s2: Stage2Config, seeds=(0,), n_scenes: int = 20,
                   mie: IntrinsicEncoder | None = None) -> str:
    """Retrain the affected stages per value and seed; one CSV row each.

    Only the ``d`` axis retrains Stage 1. Other axes reuse ``mie`` (trained
    once from ``s1`` if not given) and vary the Stage-2 seed.
    """
    rows = []
    if axis != "d" and mie is None:
        mie = stage1_train(split, s1).mie
    for seed in seeds:
        for value in values:
            c1, c2, retrain_s1 = ablation_config(axis, value, replace(s1, seed=seed),
                                                 replace(s2, seed=seed))
            enc = stage1_train(split, c1).mie if retrain_s1 else mie
            model, res = train_pipeline(split, c1, c2, mie=enc)
            rep = zero_shot_eval(model, split, n_scenes=n_scenes, intrinsic=False)
            rows.append({
                "axis": axis, "value": value, "seed": seed,
                "mse_translated": rep.mean("mse_translated"),
                "mse_identity": rep.mean("mse_identity"),
                "mse_reduction": rep.mse_reduction(),
                "f1_translated": rep.mean("f1_translated"), "f1_raw": rep.mean("f1_raw"),
                "min_imp": float(np.min(res.importance[-1])),
            })
            log.info("ablation %s=%s seed %d: mse %.4f", axis, value, seed,
                     rows[-1]["mse_translated"])
    return _csv(ABLATION_FIELDS, rows)
