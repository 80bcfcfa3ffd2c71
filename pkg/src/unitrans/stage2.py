"""Second training stage: router and parameter bank on top of a frozen MIE.

Each step samples scenes, gives every agent a random training modality,
translates every ordered (neighbor -> ego) pair with one instantiated
translator, fuses the translated maps into each ego map and scores the fused
maps with a per-cell linear head.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import workbench as wb
from .autodiff import Tensor
from .mie import DegenerateBatch, IntrinsicEncoder, TrainingDiverged, info_nce
from .nn import Adam, Module, param
from .translator import (ExpertBank, MappingRouter, MctArchitecture, default_backbone,
                         top_k_indices, translate_batch)

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "L_task", "L_feat", "L_ctr", "L_r", "total", "min_imp", "max_imp")


# -- losses ---------------------------------------------------------------------
def feat_distill_loss(translated, teacher) -> Tensor:
    """Summed squared error; a leading pair axis is averaged over."""
    t = translated if isinstance(translated, Tensor) else Tensor(np.asarray(translated))
    target = np.asarray(getattr(teacher, "data", teacher))
    if t.shape != target.shape:
        raise ad.ShapeError(f"translated {t.shape} vs teacher {target.shape}")
    sq = ad.square(t - Tensor(target.astype(t.dtype)))
    if t.ndim == 4:
        return sq.sum() * (1.0 / t.shape[0])
    return sq.sum()


def routing_contrastive_loss(alpha, mapping_labels, tau_alpha: float) -> Tensor:
    """InfoNCE over routing vectors, positives being pairs with the same mapping."""
    return info_nce(alpha, mapping_labels, tau_alpha)


def importance_load(alpha, top_k: int) -> tuple[Tensor, np.ndarray]:
    """Per-expert summed routing weight (differentiable) and TopK selection count."""
    a = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha))
    imp = a.sum(axis=0)
    chosen = top_k_indices(a.data, top_k)
    load = np.bincount(chosen.ravel(), minlength=a.shape[-1]).astype(np.float64)
    return imp, load


def router_reg_loss(alpha, logits, top_k: int) -> Tensor:
    """Switch-style balance term plus a squared log-partition penalty on the logits."""
    a = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha))
    u = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits))
    b, k = a.shape
    imp, load = importance_load(a, top_k)
    balance = (imp * Tensor((load / b).astype(a.dtype))).sum() * (k / b)
    penalty = ad.square(ad.logsumexp(u, axis=-1)).mean()
    return balance + penalty


def task_loss(logits, labels) -> Tensor:
    """Mean binary cross-entropy with logits, computed stably."""
    x = logits if isinstance(logits, Tensor) else Tensor(np.asarray(logits))
    y = np.asarray(labels, dtype=x.dtype)
    if x.shape != y.shape:
        raise ad.ShapeError(f"logits {x.shape} vs labels {y.shape}")
    # log(1 + e^x) - y x, with log(1 + e^x) = max(x, 0) + log(1 + e^-|x|)
    soft = ad.relu(x) + ad.log(ad.exp(-ad.absolute(x)) + 1.0)
    return (soft - x * Tensor(y)).mean()


def fuse(F_ego, translated=()):
    """Elementwise maximum over the ego map and any translated neighbor maps."""
    out = F_ego
    for t in translated:
        if t.shape != out.shape:
            raise ad.ShapeError(f"cannot fuse {t.shape} into {out.shape}")
        out = ad.maximum(out, t) if isinstance(out, Tensor) or isinstance(t, Tensor) \
            else np.maximum(out, t)
    return out


class TaskHead(Module):
    """Frozen per-modality detector followed by a learned affine calibration.

    Each ego scores maps with its own modality's detector
    (:func:`workbench.modality_head`); the only trained parameters are a
    shared logit scale and shift.
    """

    def __init__(self):
        self.scale = param(np.ones(1))
        self.shift = param(np.zeros(1))

    def __call__(self, F, specs) -> Tensor:
        """Logits ``(E, H, W)`` for maps ``(E, C, H, W)``; ``specs`` gives each ego's modality."""
        x = F if isinstance(F, Tensor) else Tensor(np.asarray(F))
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        if isinstance(specs, wb.ModalitySpec):
            specs = [specs] * x.shape[0]
        if len(specs) != x.shape[0]:
            raise ValueError("one modality per map is required")
        heads = [wb.modality_head(sp) for sp in specs]
        w = Tensor(np.stack([h[0] for h in heads])[:, :, None])  # (E, C, 1)
        b = Tensor(np.array([h[1] for h in heads], dtype=np.float32)[:, None, None])
        e, c, hh, ww = x.shape
        cells = ad.swapaxes(x.reshape(e, c, hh * ww), -1, -2)  # (E, HW, C)
        raw = ad.matmul(cells, w).reshape(e, hh, ww) + b
        out = raw * self.scale + self.shift
        return out.reshape(out.shape[1:]) if single else out

    def parameters(self):
        return {"scale": self.scale, "shift": self.shift}


# -- training -------------------------------------------------------------------
@dataclass
class Stage2Config:
    lambda_feat: float = 5.0
    lambda_ctr: float = 0.01
    lambda_r: float = 0.001
    tau_alpha: float = 0.9
    lr: float = 1e-3
    top_k: int = 3
    K: int = 8
    n_shared: int = 1
    n_blocks: int = 2
    window: int = 4
    heads: int = 4
    batch_scenes: int = 2
    steps: int = 600
    crop: int = 16
    clip_norm: float = 5.0
    steps_per_epoch: int = 25
    seed: int = 0

    def validate(self):
        lams = (self.lambda_feat, self.lambda_ctr, self.lambda_r)
        if min(lams) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau_alpha <= 0:
            raise ValueError("tau_alpha must be positive")
        if self.top_k > self.K:
            raise ValueError("top_k cannot exceed K")
        if self.crop % self.window or wb.GRID % self.crop:
            raise ValueError("crop must be a multiple of the window and divide the grid")

    def architecture(self) -> MctArchitecture:
        return MctArchitecture(n_blocks=self.n_blocks, window=self.window, heads=self.heads)


@dataclass
class PairBatch:
    F_nbr: np.ndarray  # (P, C, h, w)
    F_ego: np.ndarray
    teacher: np.ndarray
    z_nbr: np.ndarray  # (P, d)
    z_ego: np.ndarray
    mapping: np.ndarray  # (P, 2) modality ids (neighbor, ego)
    ego_index: np.ndarray  # (P,) row into the ego arrays below
    ego_maps: np.ndarray  # (E, C, h, w)
    ego_specs: list
    labels: np.ndarray  # (E, h, w)


def build_pairs(mie: IntrinsicEncoder, split: wb.ModalitySplit, rng: np.random.Generator,
                n_scenes: int, crop: int | None = None) -> PairBatch:
    """Sample scenes and modalities, then enumerate every ordered agent pair."""
    lo, hi = split.train_scenes
    specs = split.training_modalities
    size = crop or wb.GRID
    rows = {k: [] for k in ("nbr", "ego", "teacher", "mapping", "ego_index", "nbr_index")}
    ego_maps, full_maps, labels, ego_specs = [], [], [], []
    for s in rng.integers(lo, hi, size=n_scenes):
        scene = wb.generate_scene(int(s))
        mods = [specs[int(rng.integers(0, len(specs)))] for _ in range(wb.N_AGENTS)]
        top, left = rng.integers(0, wb.GRID - size + 1, size=2) if crop else (0, 0)
        win = (slice(None), slice(top, top + size), slice(left, left + size))
        obs = [wb.make_observation(scene, a) for a in range(wb.N_AGENTS)]
        full = [wb.build_encoder(m)(o).values for m, o in zip(mods, obs)]
        own = [f[win] for f in full]
        base = len(ego_maps)
        ego_maps += own
        full_maps += full
        ego_specs += mods
        labels += [wb.task_labels(scene)[win[1:]]] * wb.N_AGENTS
        for i in range(wb.N_AGENTS):
            for j in range(wb.N_AGENTS):
                if i == j:
                    continue
                rows["nbr"].append(own[j])
                rows["ego"].append(own[i])
                rows["teacher"].append(wb.teacher_feature(mods[i], obs[j]).values[win])
                rows["mapping"].append((mods[j].modality_id, mods[i].modality_id))
                rows["ego_index"].append(base + i)
                rows["nbr_index"].append(base + j)
    # codes always describe the agent's whole map, even when training on crops
    codes = mie.codes(np.stack(full_maps))
    idx = np.asarray(rows["ego_index"])
    nbr_idx = np.asarray(rows["nbr_index"])
    return PairBatch(
        F_nbr=np.stack(rows["nbr"]), F_ego=np.stack(rows["ego"]),
        teacher=np.stack(rows["teacher"]),
        z_nbr=codes[nbr_idx], z_ego=codes[idx],
        mapping=np.asarray(rows["mapping"], dtype=np.int64), ego_index=idx,
        ego_maps=np.stack(ego_maps), ego_specs=ego_specs, labels=np.stack(labels).astype(np.float32),
    )


def mapping_ids(mapping: np.ndarray) -> np.ndarray:
    """Collapse (neighbor, ego) modality id pairs to one integer label per pair."""
    _, inv = np.unique(mapping, axis=0, return_inverse=True)
    return inv.ravel()


def fused_logits(head: TaskHead, batch: PairBatch, translated: Tensor) -> Tensor:
    fused = []
    for e in range(len(batch.ego_maps)):
        rows = np.flatnonzero(batch.ego_index == e)
        fused.append(fuse(Tensor(batch.ego_maps[e]), [translated[int(r)] for r in rows]))
    return head(ad.stack(fused), batch.ego_specs)


@dataclass
class Stage2Losses:
    total: Tensor
    task: Tensor
    feat: Tensor
    ctr: Tensor
    reg: Tensor
    imp: np.ndarray


def stage2_loss(bank, mmr, head, batch: PairBatch, cfg: Stage2Config, backbone) -> Stage2Losses:
    translated, rv = translate_batch(bank, mmr, batch.z_nbr, batch.z_ego,
                                     batch.F_nbr, batch.F_ego, backbone)
    zero = Tensor(np.zeros((), dtype=np.float32))
    l_task = task_loss(fused_logits(head, batch, translated), batch.labels)
    l_feat = feat_distill_loss(translated, batch.teacher)
    try:
        l_ctr = routing_contrastive_loss(rv.alpha, mapping_ids(batch.mapping), cfg.tau_alpha)
    except DegenerateBatch:
        l_ctr = zero
    l_reg = router_reg_loss(rv.alpha, rv.logits, cfg.top_k)
    total = l_task + l_feat * cfg.lambda_feat + l_ctr * cfg.lambda_ctr + l_reg * cfg.lambda_r
    imp = rv.alpha.data.sum(axis=0) / rv.alpha.shape[0]
    return Stage2Losses(total, l_task, l_feat, l_ctr, l_reg, imp)


@dataclass
class Stage2Result:
    bank: ExpertBank
    mmr: MappingRouter
    head: TaskHead
    metrics: list = field(default_factory=list)
    importance: list = field(default_factory=list)  # per-epoch mean imp_k / B
    mie_checksum: str = ""

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in self.metrics:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])
        return buf.getvalue()

    def importance_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch"] + [f"imp_{k + 1}" for k in range(self.bank.K)])
        for e, hist in enumerate(self.importance):
            w.writerow([e] + [repr(float(v)) for v in hist])
        return buf.getvalue()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"tpb/{k}": v for k, v in self.bank.state_dict().items()}
        out.update({f"mmr/{k}": v for k, v in self.mmr.state_dict().items()})
        out.update({f"head/{k}": v for k, v in self.head.state_dict().items()})
        return out


def new_components(cfg: Stage2Config, d: int):
    arch = cfg.architecture()
    bank = ExpertBank(arch.manifest(), K=cfg.K, n_shared=cfg.n_shared, seed=cfg.seed)
    mmr = MappingRouter(d=d, K=cfg.K, seed=cfg.seed)
    head = TaskHead()
    return bank, mmr, head


def stage2_train(mie: IntrinsicEncoder, split: wb.ModalitySplit,
                 cfg: Stage2Config | None = None, on_step=None) -> Stage2Result:
    cfg = cfg or Stage2Config()
    cfg.validate()
    checksum = ad.parameters_checksum(mie.state_dict())
    bank, mmr, head = new_components(cfg, mie.d)
    backbone = default_backbone(cfg.architecture())
    params = [*bank.parameters().values(), *mmr.parameters().values(),
              *head.parameters().values()]
    opt = Adam(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    result = Stage2Result(bank, mmr, head, mie_checksum=checksum)
    epoch_imp = []
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step, 2])
        batch = build_pairs(mie, split, rng, cfg.batch_scenes, cfg.crop)
        opt.zero_grad()
        losses = stage2_loss(bank, mmr, head, batch, cfg, backbone)
        value = float(losses.total.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"stage-2 loss became {value} at step {step}")
        ad.backward(losses.total)
        opt.step()
        row = {
            "step": step, "L_task": float(losses.task.data), "L_feat": float(losses.feat.data),
            "L_ctr": float(losses.ctr.data), "L_r": float(losses.reg.data), "total": value,
            "min_imp": float(losses.imp.min()), "max_imp": float(losses.imp.max()),
        }
        result.metrics.append(row)
        epoch_imp.append(losses.imp)
        if len(epoch_imp) == cfg.steps_per_epoch or step == cfg.steps - 1:
            result.importance.append(np.mean(epoch_imp, axis=0))
            epoch_imp = []
            log.info("stage2 step %d total %.3f feat %.3f task %.4f", step, value,
                     row["L_feat"], row["L_task"])
        if on_step is not None:
            on_step(row)
    if ad.parameters_checksum(mie.state_dict()) != checksum:
        raise RuntimeError("frozen MIE parameters changed during stage 2")
    return result
