"""Modality-intrinsic encoder: descriptors, contrastive pretraining, diagnostics.

The encoder summarises a feature map by pooled statistics (channel moments,
a pooled Gram matrix and response statistics) and maps them through small
MLPs to a ``d``-dimensional code whose direction identifies the modality.
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
from .nn import MLP, Adam, Linear, Module

log = logging.getLogger(__name__)


class DegenerateBatch(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def _batched(F) -> tuple[Tensor, bool]:
    t = F if isinstance(F, Tensor) else Tensor(getattr(F, "values", F))
    if t.ndim == 3:
        return t.reshape((1,) + t.shape), True
    return t, False


def _unbatch(t: Tensor, single: bool) -> Tensor:
    return t.reshape(t.shape[1:]) if single else t


# -- descriptors --------------------------------------------------------------
def channel_moments(F) -> tuple[Tensor, Tensor]:
    """Per-channel spatial mean and population standard deviation."""
    x, single = _batched(F)
    if x.shape[-1] * x.shape[-2] < 2:
        raise ad.ShapeError("need at least two spatial positions")
    mu = x.mean(axis=(-2, -1))
    var = x.var(axis=(-2, -1))
    sigma = ad.sqrt(var)
    return _unbatch(mu, single), _unbatch(sigma, single)


def triu_indices(channels: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(channels)


def gram_matrix(F, pool_h: int = 8, pool_w: int = 8) -> Tensor:
    x, single = _batched(F)
    b, c = x.shape[:2]
    pooled = ad.avg_pool2d(x, pool_h, pool_w).reshape(b, c, pool_h * pool_w)
    g = ad.matmul(pooled, ad.swapaxes(pooled, -1, -2)) * (1.0 / (pool_h * pool_w))
    return _unbatch(g, single)


def gram_descriptor(F, pool_h: int = 8, pool_w: int = 8) -> Tensor:
    """Upper triangle (with diagonal) of the pooled Gram matrix, length C(C+1)/2."""
    x, single = _batched(F)
    g = gram_matrix(x, pool_h, pool_w)
    iu, ju = triu_indices(g.shape[-1])
    return _unbatch(g[:, iu, ju], single)


def response_features(F) -> Tensor:
    """Concatenation of per-channel spatial max and per-channel mean of |F|."""
    x, single = _batched(F)
    b, c = x.shape[:2]
    flat = x.reshape(b, c, -1)
    r = ad.concat([flat.max(axis=-1), ad.absolute(flat).mean(axis=-1)], axis=-1)
    return _unbatch(r, single)


# -- losses --------------------------------------------------------------------
def cosine_matrix(z: Tensor, eps: float = 1e-12) -> Tensor:
    norm = ad.sqrt((z * z).sum(axis=-1, keepdims=True) + eps)
    u = z / norm
    return ad.matmul(u, ad.swapaxes(u, -1, -2))


def info_nce(vectors, labels, tau: float) -> Tensor:
    """Multi-positive InfoNCE with cosine similarity, summed over anchors.

    Anchors without any positive are skipped; a batch where every anchor is
    skipped raises :class:`DegenerateBatch`.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = vectors if isinstance(vectors, Tensor) else Tensor(np.asarray(vectors))
    labels = np.asarray(labels)
    n = z.shape[0]
    if n < 2:
        raise DegenerateBatch("need at least two codes")
    same = labels[:, None] == labels[None, :]
    offdiag = ~np.eye(n, dtype=bool)
    pos = same & offdiag
    anchors = np.flatnonzero(pos.any(axis=1))
    if anchors.size == 0:
        raise DegenerateBatch("degenerate batch: no anchor has a positive")
    e = ad.exp(cosine_matrix(z) * (1.0 / tau))
    num = (e * pos.astype(z.dtype)).sum(axis=1)
    den = (e * offdiag.astype(z.dtype)).sum(axis=1)
    per_anchor = ad.log(den[anchors]) - ad.log(num[anchors])
    return per_anchor.sum()


def modality_cls_loss(codes, labels, head) -> Tensor:
    """Mean negative log-likelihood of ``softmax(head(codes))`` at the labels."""
    logits = head(codes)
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError("label outside the training modality set")
    logp = ad.log_softmax(logits, axis=-1)
    return -(logp[np.arange(labels.size), labels].mean())


# -- the encoder ----------------------------------------------------------------
class IntrinsicEncoder(Module):
    def __init__(self, channels: int = wb.CHANNELS, d: int = 4, n_modalities: int = 8,
                 seed: int = 0, pool: int = 8):
        rng = np.random.default_rng([seed, 101])
        self.channels, self.d, self.pool = channels, d, pool
        n_tri = channels * (channels + 1) // 2
        self.gram_projector = MLP([n_tri, 32, 16], rng)
        self.fusion = MLP([4 * channels + 16, 64, d], rng)
        self.surrogate = Linear(d, n_modalities, rng)
        # fixed descriptor standardisation; identity until fit_normalizer is called
        widths = {"mu": channels, "sigma": channels, "r": 2 * channels, "gram": n_tri}
        self.norm = {k: (np.zeros(w, np.float32), np.ones(w, np.float32))
                     for k, w in widths.items()}

    def fit_normalizer(self, F, floor: float = 1e-3):
        """Estimate per-entry descriptor mean and spread from a batch of maps."""
        with ad.no_grad():
            desc = self.descriptors(F)
        self.norm = {
            k: (v.data.mean(axis=0).astype(np.float32),
                (v.data.std(axis=0) + floor).astype(np.float32))
            for k, v in desc.items()
        }

    def state_dict(self):
        out = super().state_dict()
        for k, (m, sd) in self.norm.items():
            out[f"norm/{k}/mean"] = m.copy()
            out[f"norm/{k}/std"] = sd.copy()
        return out

    def load_state_dict(self, state):
        super().load_state_dict(state)
        for k in self.norm:
            if f"norm/{k}/mean" in state:
                self.norm[k] = (np.asarray(state[f"norm/{k}/mean"], np.float32).copy(),
                                np.asarray(state[f"norm/{k}/std"], np.float32).copy())

    def parameters(self):
        out = {}
        for prefix, mod in (("psi_g", self.gram_projector), ("psi_i", self.fusion),
                            ("q", self.surrogate)):
            for k, v in mod.parameters().items():
                out[f"{prefix}/{k}"] = v
        return out

    def descriptors(self, F) -> dict:
        x, _ = _batched(F)
        mu, sigma = channel_moments(x)
        return {
            "mu": mu,
            "sigma": sigma,
            "r": response_features(x),
            "gram": gram_descriptor(x, self.pool, self.pool),
        }

    def encode_descriptors(self, desc: dict) -> Tensor:
        desc = {k: (v - Tensor(self.norm[k][0])) * Tensor(1.0 / self.norm[k][1])
                for k, v in desc.items()}
        g = self.gram_projector(desc["gram"])
        return self.fusion(ad.concat([desc["mu"], desc["sigma"], desc["r"], g], axis=-1))

    def __call__(self, F) -> Tensor:
        """Codes for a ``(C,H,W)`` map or a ``(B,C,H,W)`` batch."""
        x, single = _batched(F)
        z = self.encode_descriptors(self.descriptors(x))
        return _unbatch(z, single)

    def codes(self, F) -> np.ndarray:
        with ad.no_grad():
            return self(F).data

    @classmethod
    def from_state(cls, state: dict, seed: int = 0) -> "IntrinsicEncoder":
        d = state["psi_i/1/w"].shape[1]
        n_mod = state["q/w"].shape[1]
        n_tri = state["psi_g/0/w"].shape[0]
        c = int((np.sqrt(8 * n_tri + 1) - 1) / 2)
        enc = cls(channels=c, d=d, n_modalities=n_mod, seed=seed)
        enc.load_state_dict(state)
        return enc


def encode(F, params: IntrinsicEncoder) -> np.ndarray:
    return params.codes(F)


# -- stage 1 -------------------------------------------------------------------
@dataclass
class Stage1Config:
    d: int = 4
    tau: float = 0.9
    lambda_is: float = 0.1
    lambda_ic: float = 1.0
    lr: float = 1e-3
    steps: int = 600
    batch_scenes: int = 8
    steps_per_epoch: int = 25
    pool: int = 8
    norm_scenes: int = 16
    seed: int = 0


@dataclass
class Stage1Result:
    mie: IntrinsicEncoder
    step_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)


def sample_features(split: wb.ModalitySplit, rng: np.random.Generator, n_scenes: int,
                    scene_range=None):
    """Draw scenes and a uniformly random training modality per agent."""
    lo, hi = scene_range or split.train_scenes
    scenes = rng.integers(lo, hi, size=n_scenes)
    specs = split.training_modalities
    feats, labels = [], []
    for s in scenes:
        scene = wb.generate_scene(int(s))
        for agent in range(wb.N_AGENTS):
            k = int(rng.integers(0, len(specs)))
            obs = wb.make_observation(scene, agent)
            feats.append(wb.build_encoder(specs[k])(obs).values)
            labels.append(k)
    return np.stack(feats), np.asarray(labels)


def stage1_loss(mie: IntrinsicEncoder, F: np.ndarray, labels: np.ndarray, cfg: Stage1Config):
    z = mie(F)
    total = Tensor(np.zeros((), dtype=np.float32))
    l_ic = l_is = None
    if cfg.lambda_ic > 0:
        l_ic = info_nce(z, labels, cfg.tau)
        total = total + l_ic * cfg.lambda_ic
    if cfg.lambda_is > 0:
        l_is = modality_cls_loss(z, labels, mie.surrogate)
        total = total + l_is * cfg.lambda_is
    return total, l_ic, l_is


def stage1_train(split: wb.ModalitySplit, cfg: Stage1Config | None = None) -> Stage1Result:
    cfg = cfg or Stage1Config()
    if len(split.training_modalities) < 2:
        raise ValueError("need at least two training modalities")
    mie = IntrinsicEncoder(d=cfg.d, n_modalities=len(split.training_modalities),
                           seed=cfg.seed, pool=cfg.pool)
    F_fit, _ = sample_features(split, np.random.default_rng([cfg.seed, 7]), cfg.norm_scenes)
    mie.fit_normalizer(F_fit)
    params = mie.parameters()
    opt = Adam(params.values(), lr=cfg.lr)
    result = Stage1Result(mie)
    running = []
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, step, 1])
        F, labels = sample_features(split, rng, cfg.batch_scenes)
        opt.zero_grad()
        total, _, _ = stage1_loss(mie, F, labels, cfg)
        value = float(total.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"stage-1 loss became {value} at step {step}")
        ad.backward(total)
        opt.step()
        result.step_losses.append(value)
        running.append(value)
        if len(running) == cfg.steps_per_epoch or step == cfg.steps - 1:
            result.epoch_losses.append(float(np.mean(running)))
            log.info("stage1 epoch %d loss %.4f", len(result.epoch_losses), result.epoch_losses[-1])
            running = []
    return result


# -- diagnostics ------------------------------------------------------------------
def pairwise_distances(points: np.ndarray, metric: str = "cosine") -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if metric == "euclidean":
        sq = (x * x).sum(axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
        np.fill_diagonal(d2, 0.0)
        return np.sqrt(d2)
    if metric == "cosine":
        u = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
        d = 1.0 - u @ u.T
        np.fill_diagonal(d, 0.0)
        return np.maximum(d, 0.0)
    raise ValueError(f"unknown metric {metric!r}")


def silhouette_samples(points, labels, metric: str = "cosine") -> np.ndarray:
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least two clusters")
    dist = pairwise_distances(points, metric)
    n = len(labels)
    member = labels[None, :] == uniq[:, None]  # (k, n)
    sizes = member.sum(axis=1)
    sums = dist @ member.T.astype(np.float64)  # (n, k)
    own = np.searchsorted(uniq, labels)
    s = np.zeros(n)
    for i in range(n):
        k = own[i]
        if sizes[k] < 2:
            continue
        a = sums[i, k] / (sizes[k] - 1)
        others = np.delete(sums[i] / sizes, k)
        b = others.min()
        denom = max(a, b)
        s[i] = 0.0 if denom == 0 else (b - a) / denom
    return s


def silhouette(points, labels, metric: str = "cosine") -> float:
    """Mean silhouette coefficient; singletons score 0."""
    return float(silhouette_samples(points, labels, metric).mean())


@dataclass
class IntrinsicReport:
    rows: dict  # metric -> (raw, intrinsic)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "raw", "intrinsic"])
        for k, (raw, code) in self.rows.items():
            w.writerow([k, repr(float(raw)), repr(float(code))])
        return buf.getvalue()

    def __getitem__(self, key):
        return self.rows[key]


def raw_descriptor(F: np.ndarray) -> np.ndarray:
    """Concatenated channel mean and standard deviation (the raw baseline descriptor)."""
    with ad.no_grad():
        mu, sigma = channel_moments(F)
    return np.concatenate([mu.data, sigma.data], axis=-1)


def _mean_pair_distance(dist, mask) -> float:
    vals = dist[mask]
    return float(vals.mean()) if vals.size else float("nan")


def intrinsic_space_report(mie: IntrinsicEncoder, split: wb.ModalitySplit, n_scenes: int = 50,
                           include_emerging: bool = True) -> IntrinsicReport:
    """Silhouette and cosine-distance statistics of raw descriptors versus codes.

    Uses held-out scenes; each scene is encoded by every modality through the
    same agent view so that same-scene / cross-modality pairs exist.
    """
    lo, hi = split.test_scenes
    scenes = list(range(lo, min(hi, lo + n_scenes)))
    specs = list(split.training_modalities)
    if include_emerging:
        specs += list(split.emerging_modalities)
    feats, mod, scn = [], [], []
    for s in scenes:
        obs = wb.make_observation(wb.generate_scene(s), s % wb.N_AGENTS)
        for spec in specs:
            feats.append(wb.build_encoder(spec)(obs).values)
            mod.append(spec.modality_id)
            scn.append(s)
    F = np.stack(feats)
    mod, scn = np.asarray(mod), np.asarray(scn)
    raw = raw_descriptor(F)
    codes = mie.codes(F)
    train_mask = np.isin(mod, split.train_seeds)

    rows = {}
    rows["modality_silhouette"] = (
        silhouette(raw[train_mask], mod[train_mask]),
        silhouette(codes[train_mask], mod[train_mask]),
    )
    same_mod = (mod[:, None] == mod[None, :]) & (scn[:, None] != scn[None, :])
    same_scene = (scn[:, None] == scn[None, :]) & (mod[:, None] != mod[None, :])
    tm = train_mask[:, None] & train_mask[None, :]
    d_raw = pairwise_distances(raw[train_mask], "cosine")
    d_code = pairwise_distances(codes[train_mask], "cosine")
    sub = np.ix_(train_mask, train_mask)
    rows["same_modality_diff_scene_distance"] = (
        _mean_pair_distance(d_raw, (same_mod & tm)[sub]),
        _mean_pair_distance(d_code, (same_mod & tm)[sub]),
    )
    rows["diff_modality_same_scene_distance"] = (
        _mean_pair_distance(d_raw, (same_scene & tm)[sub]),
        _mean_pair_distance(d_code, (same_scene & tm)[sub]),
    )
    if include_emerging and split.emerging_modalities:
        em = ~train_mask
        rows["emerging_silhouette"] = (
            float(silhouette_samples(raw, mod)[em].mean()),
            float(silhouette_samples(codes, mod)[em].mean()),
        )
    return IntrinsicReport(rows)
