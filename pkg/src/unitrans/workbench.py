"""Synthetic multi-agent, multi-modality BEV workbench.

Scenes are occupancy grids of axis-aligned rectangles. Each agent sees a
seeded half-plane-plus-disk part of the scene, and each modality is a frozen,
seed-derived encoder turning the visible occupancy into a ``C x H x W``
feature map. Everything is a pure function of integer seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from . import checkpoint

GRID = 32
CHANNELS = 16
N_AGENTS = 4
MIN_OBJECTS, MAX_OBJECTS = 3, 8
MIN_COVERAGE = 0.40
# object response amplitude; sets scene-driven spread of channel statistics
MIX_SCALE = 3.0

# stream tags keep the per-purpose random streams independent
_SCENE, _VIEW, _MODALITY, _NOISE, _BASE = 11, 23, 37, 41, 53

NONLINEARITIES = ("relu", "gelu", "tanh")


@dataclass(frozen=True)
class Rect:
    row: int  # center row
    col: int  # center col
    height: int
    width: int

    @property
    def top(self) -> int:
        return self.row - self.height // 2

    @property
    def left(self) -> int:
        return self.col - self.width // 2


@dataclass(eq=False)
class Scene:
    scene_id: int
    grid: np.ndarray  # (G, G) bool
    objects: tuple


@dataclass(eq=False)
class Observation:
    scene: Scene
    agent_id: int
    view_mask: np.ndarray  # (G, G) bool
    masked_grid: np.ndarray  # (G, G) float32

    @property
    def scene_id(self) -> int:
        return self.scene.scene_id


@dataclass(eq=False)
class ModalitySpec:
    modality_id: int
    seed: int
    channel_mix: np.ndarray
    gain: np.ndarray
    bias: np.ndarray
    nonlinearity: str
    blur_radius: int
    noise_scale: float


@dataclass(eq=False)
class FeatureMap:
    values: np.ndarray  # (C, H, W) float32
    modality_id: int
    scene_id: int
    agent_id: int

    @property
    def shape(self):
        return self.values.shape


# -- scenes and observations ------------------------------------------------
def generate_scene(seed: int, grid_size: int = GRID) -> Scene:
    rng = np.random.default_rng([int(seed), _SCENE])
    n = int(rng.integers(MIN_OBJECTS, MAX_OBJECTS + 1))
    grid = np.zeros((grid_size, grid_size), dtype=bool)
    objects = []
    max_side = max(2, grid_size // 4)
    for _ in range(n):
        h = int(rng.integers(2, max_side + 1))
        w = int(rng.integers(2, max_side + 1))
        top = int(rng.integers(0, grid_size - h + 1))
        left = int(rng.integers(0, grid_size - w + 1))
        rect = Rect(top + h // 2, left + w // 2, h, w)
        objects.append(rect)
        grid[top : top + h, left : left + w] = True
    return Scene(int(seed), grid, tuple(objects))


def view_mask(scene_id: int, agent_id: int, grid_size: int = GRID) -> np.ndarray:
    """Half-plane facing the agent's side, plus a disk around the grid center."""
    if not 0 <= agent_id < N_AGENTS:
        raise ValueError(f"agent_id must be in [0, {N_AGENTS - 1}]")
    rng = np.random.default_rng([int(scene_id), int(agent_id), _VIEW])
    c = (grid_size - 1) / 2.0
    rows, cols = np.mgrid[0:grid_size, 0:grid_size].astype(np.float64)
    dr, dc = rows - c, cols - c
    for _ in range(16):
        theta = agent_id * np.pi / 2 + rng.uniform(-0.3, 0.3)
        offset = rng.uniform(0.0, 0.1 * grid_size)
        radius = rng.uniform(0.12, 0.25) * grid_size
        half = dr * np.cos(theta) + dc * np.sin(theta) >= -offset
        disk = dr**2 + dc**2 <= radius**2
        mask = half | disk
        if mask.mean() >= MIN_COVERAGE:
            return mask
    raise RuntimeError("could not draw a view mask with enough coverage")


def make_observation(scene: Scene, agent_id: int) -> Observation:
    mask = view_mask(scene.scene_id, agent_id, scene.grid.shape[0])
    masked = (scene.grid & mask).astype(np.float32)
    return Observation(scene, int(agent_id), mask, masked)


def task_labels(obs_or_scene, out_size: int | None = None, threshold: float = 0.5) -> np.ndarray:
    """Full-scene occupancy (not masked) block-averaged to ``out_size``, thresholded."""
    scene = obs_or_scene.scene if isinstance(obs_or_scene, Observation) else obs_or_scene
    g = scene.grid.shape[0]
    out_size = out_size or g
    if g % out_size:
        raise ValueError("label size must divide the grid size")
    k = g // out_size
    cover = scene.grid.astype(np.float32).reshape(out_size, k, out_size, k).mean(axis=(1, 3))
    return (cover >= threshold).astype(np.float32)


# -- modalities ---------------------------------------------------------------
@lru_cache(maxsize=None)
def _base_bias(channels: int) -> np.ndarray:
    rng = np.random.default_rng([_BASE, channels])
    return rng.normal(0.0, 1.0, channels).astype(np.float32)


@lru_cache(maxsize=None)
def _positional(channels: int, size: int) -> np.ndarray:
    """Fixed positional patterns shared by every modality (channel 0 is constant)."""
    rng = np.random.default_rng([_BASE, channels, size, 1])
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64) / size
    pats = [np.ones((size, size))]
    for _ in range(channels - 1):
        fr, fc = rng.integers(-2, 3, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        pats.append(np.cos(2 * np.pi * (fr * rows + fc * cols) + phase))
    return np.stack(pats).astype(np.float32)


def modality_spec(seed: int, channels: int = CHANNELS) -> ModalitySpec:
    rng = np.random.default_rng([int(seed), _MODALITY])
    nonlin = NONLINEARITIES[int(rng.integers(0, len(NONLINEARITIES)))]
    while True:
        mix = MIX_SCALE * (np.eye(channels) + rng.normal(0.0, 0.35, (channels, channels)))
        if np.linalg.cond(mix) < 100:
            break
    gain = rng.uniform(0.6, 1.6, channels)
    bias = _base_bias(channels) + rng.normal(0.0, 0.5, channels)
    blur = int(rng.integers(0, 3))
    noise = float(rng.uniform(0.0, 0.05))
    return ModalitySpec(
        modality_id=int(seed),
        seed=int(seed),
        channel_mix=mix.astype(np.float32),
        gain=gain.astype(np.float32),
        bias=bias.astype(np.float32),
        nonlinearity=nonlin,
        blur_radius=blur,
        noise_scale=noise,
    )


def _activate(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "gelu":
        return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))
    raise ValueError(f"unknown nonlinearity {kind!r}")


def lift(masked_grid: np.ndarray, channels: int = CHANNELS, size: int | None = None) -> np.ndarray:
    """Shared 1 -> C expansion: occupancy times fixed positional patterns."""
    g = masked_grid.shape[0]
    size = size or g
    occ = masked_grid.astype(np.float32)
    if size != g:
        k = g // size
        occ = occ.reshape(size, k, size, k).mean(axis=(1, 3))
    return occ[None] * _positional(channels, size)


@dataclass(eq=False)
class FrozenEncoder:
    spec: ModalitySpec
    feature_size: int = GRID

    def __call__(self, obs: Observation) -> FeatureMap:
        s = self.spec
        c = s.channel_mix.shape[0]
        lifted = lift(obs.masked_grid, c, self.feature_size)
        pre = np.tensordot(s.channel_mix, lifted, axes=([1], [0]))
        act = _activate(s.nonlinearity, pre) * s.gain[:, None, None] + s.bias[:, None, None]
        if s.noise_scale > 0:
            rng = np.random.default_rng([obs.scene_id, obs.agent_id, s.seed, _NOISE])
            act = act + s.noise_scale * rng.standard_normal(act.shape)
        if s.blur_radius > 0:
            k = 2 * s.blur_radius + 1
            act = uniform_filter(act, size=(1, k, k), mode="nearest")
        return FeatureMap(act.astype(np.float32), s.modality_id, obs.scene_id, obs.agent_id)


def build_encoder(spec: ModalitySpec, feature_size: int = GRID) -> FrozenEncoder:
    return FrozenEncoder(spec, feature_size)


def teacher_feature(ego_spec: ModalitySpec, neighbor_obs: Observation,
                    feature_size: int = GRID) -> FeatureMap:
    """Ego-modality encoding of the neighbor's observation (distillation target)."""
    return build_encoder(ego_spec, feature_size)(neighbor_obs)


def encode(spec: ModalitySpec, scene_seed: int, agent_id: int, feature_size: int = GRID) -> FeatureMap:
    obs = make_observation(generate_scene(scene_seed), agent_id)
    return build_encoder(spec, feature_size)(obs)


# -- per-modality detectors ----------------------------------------------------
HEAD_SCENES = (0, 64)


def _fit_logistic(X: np.ndarray, y: np.ndarray, l2: float, iters: int) -> np.ndarray:
    """Newton iterations for L2-regularised logistic regression (last column = intercept)."""
    w = np.zeros(X.shape[1])
    reg = np.full(X.shape[1], l2)
    reg[-1] = 0.0
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-(X @ w)))
        grad = X.T @ (p - y) + reg * w
        hess = (X * (p * (1 - p))[:, None]).T @ X + np.diag(reg + 1e-9)
        w = w - np.linalg.solve(hess, grad)
    return w


@lru_cache(maxsize=None)
def _head_for_seed(seed: int, channels: int, lo: int, hi: int, l2: float, iters: int):
    spec = modality_spec(seed, channels)
    enc = build_encoder(spec)
    X, y = [], []
    for s in range(lo, hi):
        scene = generate_scene(s)
        for a in range(N_AGENTS):
            obs = make_observation(scene, a)
            X.append(enc(obs).values.reshape(channels, -1).T)
            y.append(obs.masked_grid.reshape(-1))
    X = np.concatenate(X).astype(np.float64)
    X = np.hstack([X, np.ones((len(X), 1))])
    w = _fit_logistic(X, np.concatenate(y).astype(np.float64), l2, iters)
    return w[:-1].astype(np.float32), np.float32(w[-1])


def modality_head(spec: ModalitySpec, scenes=HEAD_SCENES, l2: float = 1.0, iters: int = 15):
    """The modality's own per-cell occupancy detector: weights ``(C,)`` and intercept.

    Fitted once per modality on its own single-agent observations, the way an
    agent's perception stack ships with a head matched to its encoder.
    """
    return _head_for_seed(spec.seed, spec.channel_mix.shape[0], scenes[0], scenes[1], l2, iters)


# -- splits -------------------------------------------------------------------
@dataclass(eq=False)
class ModalitySplit:
    training_modalities: tuple
    emerging_modalities: tuple
    train_scenes: tuple  # [lo, hi)
    test_scenes: tuple  # [lo, hi)
    extra: dict = field(default_factory=dict)

    @property
    def train_seeds(self) -> list[int]:
        return [m.seed for m in self.training_modalities]

    @property
    def emerging_seeds(self) -> list[int]:
        return [m.seed for m in self.emerging_modalities]

    def spec(self, modality_id: int) -> ModalitySpec:
        for m in self.training_modalities + self.emerging_modalities:
            if m.modality_id == modality_id:
                return m
        raise KeyError(modality_id)

    def to_json(self) -> str:
        return json.dumps(
            {
                "train_modalities": self.train_seeds,
                "emerging_modalities": self.emerging_seeds,
                "train_scenes": list(self.train_scenes),
                "test_scenes": list(self.test_scenes),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ModalitySplit":
        d = json.loads(text)
        return _checked_split(
            d["train_modalities"], d["emerging_modalities"], d["train_scenes"], d["test_scenes"]
        )


def _checked_split(train_seeds, emerging_seeds, train_scenes, test_scenes) -> ModalitySplit:
    if set(train_seeds) & set(emerging_seeds):
        raise ValueError("training and emerging modalities overlap")
    lo_a, hi_a = map(int, train_scenes)
    lo_b, hi_b = map(int, test_scenes)
    if lo_a >= hi_a or lo_b >= hi_b:
        raise ValueError("empty scene range")
    if lo_a < hi_b and lo_b < hi_a:
        raise ValueError("training and test scene ranges overlap")
    return ModalitySplit(
        tuple(modality_spec(s) for s in train_seeds),
        tuple(modality_spec(s) for s in emerging_seeds),
        (lo_a, hi_a),
        (lo_b, hi_b),
    )


def make_split(
    n_train_modalities: int = 8,
    n_emerging: int = 2,
    scene_ranges=((0, 800), (800, 1000)),
    modality_seed_base: int = 1,
) -> ModalitySplit:
    """Disjoint training / emerging modality seeds and scene ranges.

    Seeds are consecutive integers from ``modality_seed_base``; the first
    ``n_train_modalities`` are training-visible.
    """
    if n_train_modalities < 4:
        raise ValueError("need at least 4 training modalities")
    if n_emerging < 2:
        raise ValueError("need at least 2 emerging modalities")
    seeds = list(range(modality_seed_base, modality_seed_base + n_train_modalities + n_emerging))
    return _checked_split(seeds[:n_train_modalities], seeds[n_train_modalities:], *scene_ranges)


# -- debugging dumps ------------------------------------------------------------
def dump(path, scenes=(), features=()):
    """Write scenes and feature maps into a UTCK container."""
    tensors = {}
    for s in scenes:
        tensors[f"scene/{s.scene_id}/grid"] = s.grid.astype(np.float32)
    for f in features:
        tensors[f"feat/{f.scene_id}/{f.agent_id}/{f.modality_id}"] = f.values
    checkpoint.save(Path(path), tensors)
