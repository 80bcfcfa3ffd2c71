"""Translator parameter bank, mapping router and the cross-attention backbone.

A translator is never stored per modality pair. For each (neighbor, ego)
pair the router turns the two intrinsic codes into combination weights over
``K`` expert parameter sets, the bank combines them with the shared expert
into one parameter set, and the backbone runs once with those parameters.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, Module, param

_local = threading.local()

STAGES = ("win", "grid")
LN_ENTRIES = ("ln1_g", "ln1_b", "ln2_g", "ln2_b")


# -- instrumentation ------------------------------------------------------------
class Instrumentation:
    """Counts backbone passes and multiply-adds while active."""

    def __init__(self):
        self.passes = 0
        self.counter = ad.MaddCounter()

    @property
    def madds(self) -> int:
        return self.counter.madds


def _active() -> list:
    stack = getattr(_local, "instr", None)
    if stack is None:
        stack = _local.instr = []
    return stack


@contextlib.contextmanager
def instrument():
    inst = Instrumentation()
    _active().append(inst)
    with ad.count_madds(inst.counter):
        try:
            yield inst
        finally:
            _active().remove(inst)


def _count_passes(n: int):
    for inst in _active():
        inst.passes += n


# -- architecture ---------------------------------------------------------------
@dataclass(frozen=True)
class MctArchitecture:
    n_blocks: int = 2
    channels: int = 16
    window: int = 4
    heads: int = 4
    ffn_hidden: int | None = None

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError("channels must be divisible by heads")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def hidden(self) -> int:
        return self.ffn_hidden or 2 * self.channels

    def manifest(self) -> list[tuple[str, tuple]]:
        c, f = self.channels, self.hidden
        out = []
        for b in range(self.n_blocks):
            for s in STAGES:
                p = f"b{b}/{s}/"
                out += [
                    (p + "ln1_g", (c,)), (p + "ln1_b", (c,)),
                    (p + "wq", (c, c)), (p + "wk", (c, c)), (p + "wv", (c, c)), (p + "wo", (c, c)),
                    (p + "ln2_g", (c,)), (p + "ln2_b", (c,)),
                    (p + "w1", (c, f)), (p + "b1", (f,)), (p + "w2", (f, c)), (p + "b2", (c,)),
                ]
        return out

    def check_input(self, h: int, w: int):
        if h % self.window or w % self.window:
            raise ad.ShapeError(f"feature size {h}x{w} not divisible by window {self.window}")

    def backbone_madds(self, h: int, w: int) -> int:
        """Closed-form multiply-adds of one backbone pass on an ``h x w`` map."""
        self.check_input(h, w)
        t, c, f = h * w, self.channels, self.hidden
        n_win = self.window**2
        n_grid = t // n_win
        per_stage = lambda n: 4 * t * c * c + 2 * t * n * c + 2 * t * c * f  # noqa: E731
        return self.n_blocks * (per_stage(n_win) + per_stage(n_grid))

    def manifest_size(self) -> int:
        return int(sum(np.prod(s) for _, s in self.manifest()))


def _init_entry(name: str, shape: tuple, rng: np.random.Generator, expert: bool) -> np.ndarray:
    key = name.rsplit("/", 1)[-1]
    if key in LN_ENTRIES or key in ("b1", "b2"):
        if expert:
            return rng.normal(0.0, 0.01, shape)
        return np.ones(shape) if key.endswith("_g") else np.zeros(shape)
    std = 1.0 / np.sqrt(shape[0])
    if key in ("wo", "w2"):
        std *= 0.5
    return rng.normal(0.0, std * (0.1 if expert else 1.0), shape)


# -- bank and router ----------------------------------------------------------------
class ExpertBank(Module):
    """Shared expert(s) plus ``K`` experts over one positional parameter manifest."""

    def __init__(self, manifest, K: int = 8, n_shared: int = 1, seed: int = 0,
                 init: Callable | None = None):
        if K < 1:
            raise ValueError("the bank needs at least one expert")
        self.manifest = [(n, tuple(s)) for n, s in manifest]
        self.K, self.n_shared = K, n_shared
        init = init or _init_entry
        rng = np.random.default_rng([seed, 202])
        self.shared = [
            {n: param(init(n, s, rng, False)) for n, s in self.manifest} for _ in range(n_shared)
        ]
        # without a shared expert the experts carry the full-scale initialisation
        self.experts = {
            n: param(np.stack([init(n, s, rng, n_shared > 0) for _ in range(K)]))
            for n, s in self.manifest
        }

    def parameters(self):
        out = {}
        for i, sh in enumerate(self.shared):
            tag = "shared" if self.n_shared == 1 else f"shared{i}"
            for n, t in sh.items():
                out[f"{tag}/{n}"] = t
        for n, t in self.experts.items():
            out[f"experts/{n}"] = t
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        """Flattened to ``shared/<t>`` and ``e<k>/<t>`` (k = 1..K)."""
        out = {}
        for i, sh in enumerate(self.shared):
            tag = "shared" if self.n_shared == 1 else f"shared{i}"
            for n, t in sh.items():
                out[f"{tag}/{n}"] = t.data.copy()
        for k in range(self.K):
            for n, t in self.experts.items():
                out[f"e{k + 1}/{n}"] = t.data[k].copy()
        return out

    def load_state_dict(self, state):
        for i, sh in enumerate(self.shared):
            tag = "shared" if self.n_shared == 1 else f"shared{i}"
            for n, t in sh.items():
                t.data = np.asarray(state[f"{tag}/{n}"], dtype=np.float32).copy()
        for n, t in self.experts.items():
            t.data = np.stack([state[f"e{k + 1}/{n}"] for k in range(self.K)]).astype(np.float32)

    def expert(self, k: int) -> dict[str, np.ndarray]:
        """Parameters of expert ``k`` (1-based, as in the bank layout)."""
        return {n: t.data[k - 1] for n, t in self.experts.items()}

    def shared_sum(self) -> dict[str, np.ndarray] | None:
        if not self.shared:
            return None
        return {n: np.mean([sh[n].data for sh in self.shared], axis=0) for n, _ in self.manifest}


@dataclass
class RoutingVector:
    alpha: Tensor  # (..., K)
    logits: Tensor  # (..., K)


class MappingRouter(Module):
    def __init__(self, d: int = 4, K: int = 8, hidden: int = 16, seed: int = 0):
        rng = np.random.default_rng([seed, 303])
        self.d, self.K = d, K
        self.g = Linear(3 * d, hidden, rng)
        self.h = Linear(hidden, K, rng)

    def parameters(self):
        return {
            "g/w": self.g.weight, "g/b": self.g.bias,
            "h/w": self.h.weight, "h/b": self.h.bias,
        }

    @classmethod
    def from_state(cls, state) -> "MappingRouter":
        d = state["g/w"].shape[0] // 3
        r = cls(d=d, K=state["h/w"].shape[1], hidden=state["g/w"].shape[1])
        r.load_state_dict(state)
        return r


def mapping_descriptor(z_src, z_dst, mmr: MappingRouter | None = None) -> Tensor:
    """``g(concat(z_src, z_dst, z_src - z_dst))``; raw concatenation when ``mmr`` is None."""
    zs = z_src if isinstance(z_src, Tensor) else Tensor(np.asarray(z_src, dtype=np.float32))
    zd = z_dst if isinstance(z_dst, Tensor) else Tensor(np.asarray(z_dst, dtype=np.float32))
    if zs.shape[-1] != zd.shape[-1]:
        raise ad.ShapeError(f"code dimensions differ: {zs.shape} vs {zd.shape}")
    delta = ad.concat([zs, zd, zs - zd], axis=-1)
    return mmr.g(delta) if mmr is not None else delta


def route(delta: Tensor, mmr: MappingRouter) -> RoutingVector:
    u = mmr.h(delta)
    return RoutingVector(ad.softmax(u, axis=-1), u)


def instantiate(bank: ExpertBank, alpha) -> dict[str, Tensor]:
    """Per manifest entry: ``shared + sum_k alpha_k * expert_k``.

    ``alpha`` of shape ``(K,)`` gives unbatched tensors; ``(P, K)`` gives a
    leading pair axis.
    """
    a = alpha if isinstance(alpha, Tensor) else Tensor(np.asarray(alpha, dtype=np.float32))
    single = a.ndim == 1
    if single:
        a = a.reshape(1, -1)
    if a.shape[-1] != bank.K:
        raise ValueError(f"alpha has {a.shape[-1]} entries, bank has {bank.K} experts")
    p = a.shape[0]
    out = {}
    for name, shape in bank.manifest:
        e = bank.experts[name]
        mixed = ad.matmul(a, e.reshape(bank.K, -1)).reshape((p,) + shape)
        if bank.shared:
            base = bank.shared[0][name]
            for extra in bank.shared[1:]:
                base = base + extra[name]
            if len(bank.shared) > 1:
                base = base * (1.0 / len(bank.shared))
            mixed = base + mixed
        out[name] = mixed.reshape(shape) if single else mixed
    return out


# -- backbone ------------------------------------------------------------------------
def window_partition(x: Tensor, w: int) -> Tensor:
    """``(P, C, H, W)`` -> ``(P, nW, w*w, C)``."""
    p, c, h, wd = x.shape
    t = x.reshape(p, c, h // w, w, wd // w, w).transpose(0, 2, 4, 3, 5, 1)
    return t.reshape(p, (h // w) * (wd // w), w * w, c)


def window_merge(t: Tensor, w: int, h: int, wd: int) -> Tensor:
    p, _, _, c = t.shape
    x = t.reshape(p, h // w, wd // w, w, w, c).transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(p, c, h, wd)


def _pp(t: Tensor, lead: int) -> Tensor:
    """Insert broadcast axes after the pair axis so ``t`` lines up with token arrays."""
    return t.reshape((t.shape[0],) + (1,) * lead + t.shape[1:])


def cross_attention(xq: Tensor, xkv: Tensor, wq, wk, wv, wo, heads: int) -> Tensor:
    """Multi-head attention, queries from ``xq`` and keys/values from ``xkv``.

    Token arrays are ``(P, G, n, C)``; attention runs independently per group.
    """
    p, g, n, c = xq.shape
    nk = xkv.shape[2]
    dh = c // heads
    q = ad.matmul(xq, wq).reshape(p, g, n, heads, dh).transpose(0, 1, 3, 2, 4)
    k = ad.matmul(xkv, wk).reshape(p, g, nk, heads, dh).transpose(0, 1, 3, 4, 2)
    v = ad.matmul(xkv, wv).reshape(p, g, nk, heads, dh).transpose(0, 1, 3, 2, 4)
    att = ad.softmax(ad.matmul(q, k) * (1.0 / np.sqrt(dh)), axis=-1)
    o = ad.matmul(att, v).transpose(0, 1, 3, 2, 4).reshape(p, g, n, c)
    return ad.matmul(o, wo)


def mct_stage(x: Tensor, e: Tensor, phi: dict, prefix: str, heads: int) -> Tensor:
    P = lambda k, lead=1: _pp(phi[prefix + k], lead)  # noqa: E731
    xn = ad.layernorm(x, P("ln1_g", 2), P("ln1_b", 2))
    en = ad.layernorm(e, P("ln1_g", 2), P("ln1_b", 2))
    x = x + cross_attention(xn, en, P("wq"), P("wk"), P("wv"), P("wo"), heads)
    hn = ad.layernorm(x, P("ln2_g", 2), P("ln2_b", 2))
    hid = ad.gelu(ad.matmul(hn, P("w1")) + P("b1", 2))
    return x + ad.matmul(hid, P("w2")) + P("b2", 2)


def mct_forward(phi: dict, F_neighbor, F_ego, arch: MctArchitecture) -> Tensor:
    """Translate neighbor maps with instantiated parameters ``phi``.

    Accepts ``(C, H, W)`` maps with unbatched ``phi`` or ``(P, C, H, W)`` maps
    with ``phi`` carrying a leading pair axis. Each block runs window-local
    cross-attention + FFN, then the same on the transposed (grid) layout.
    """
    xn = F_neighbor if isinstance(F_neighbor, Tensor) else Tensor(np.asarray(F_neighbor))
    xe = F_ego if isinstance(F_ego, Tensor) else Tensor(np.asarray(F_ego))
    single = xn.ndim == 3
    if single:
        xn, xe = xn.reshape((1,) + xn.shape), xe.reshape((1,) + xe.shape)
        phi = {k: v.reshape((1,) + v.shape) for k, v in phi.items()}
    if xn.shape != xe.shape:
        raise ad.ShapeError(f"neighbor {xn.shape} and ego {xe.shape} maps differ")
    p, c, h, w = xn.shape
    if c != arch.channels:
        raise ad.ShapeError(f"expected {arch.channels} channels, got {c}")
    arch.check_input(h, w)
    _count_passes(p)

    x = window_partition(xn, arch.window)
    e = window_partition(xe, arch.window)
    e_grid = ad.swapaxes(e, 1, 2)
    for b in range(arch.n_blocks):
        x = mct_stage(x, e, phi, f"b{b}/win/", arch.heads)
        x = ad.swapaxes(mct_stage(ad.swapaxes(x, 1, 2), e_grid, phi, f"b{b}/grid/", arch.heads), 1, 2)
    out = window_merge(x, arch.window, h, w)
    return out.reshape(out.shape[1:]) if single else out


# -- end-to-end translation ---------------------------------------------------------------
Backbone = Callable[[dict, object, object], Tensor]


def default_backbone(arch: MctArchitecture) -> Backbone:
    return lambda phi, fn, fe: mct_forward(phi, fn, fe, arch)


def _codes(mie, F) -> Tensor:
    with ad.no_grad():
        return Tensor(mie.codes(F))


def translate_batch(bank: ExpertBank, mmr: MappingRouter, z_neighbor, z_ego, F_neighbor, F_ego,
                    backbone: Backbone):
    """Batched translation from precomputed codes; returns (translated, routing)."""
    delta = mapping_descriptor(z_neighbor, z_ego, mmr)
    rv = route(delta, mmr)
    phi = instantiate(bank, rv.alpha)
    return backbone(phi, F_neighbor, F_ego), rv


def translate(bank, mmr, mie, F_neighbor, F_ego, arch: MctArchitecture | None = None,
              backbone: Backbone | None = None) -> Tensor:
    """Codes -> routing -> one instantiated parameter set -> one backbone pass."""
    backbone = backbone or default_backbone(arch or MctArchitecture())
    fn = np.asarray(getattr(F_neighbor, "values", F_neighbor))
    fe = np.asarray(getattr(F_ego, "values", F_ego))
    out, _ = translate_batch(bank, mmr, _codes(mie, fn), _codes(mie, fe), fn, fe, backbone)
    return out


def top_k_indices(alpha: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries along the last axis; ties go to the lower index."""
    order = np.argsort(-np.asarray(alpha), axis=-1, kind="stable")
    return order[..., :k]


def classic_moe_forward(bank, mmr, mie, F_neighbor, F_ego, top_k: int = 3,
                        arch: MctArchitecture | None = None,
                        backbone: Backbone | None = None) -> Tensor:
    """Output-mixing baseline: run the backbone once per selected expert.

    Expert ``k`` runs with ``shared + expert_k``; outputs are mixed with the
    routing weights renormalised over the selected experts.
    """
    if top_k > bank.K:
        raise ValueError(f"top_k={top_k} exceeds the number of experts {bank.K}")
    backbone = backbone or default_backbone(arch or MctArchitecture())
    fn = np.asarray(getattr(F_neighbor, "values", F_neighbor))
    fe = np.asarray(getattr(F_ego, "values", F_ego))
    delta = mapping_descriptor(_codes(mie, fn), _codes(mie, fe), mmr)
    alpha = route(delta, mmr).alpha
    chosen = top_k_indices(alpha.data, top_k)
    weights = alpha.data[chosen] / alpha.data[chosen].sum()
    shared = bank.shared_sum()
    n_manifest = sum(int(np.prod(s)) for _, s in bank.manifest)
    out = None
    for k, wk in zip(chosen, weights):
        expert = bank.expert(int(k) + 1)
        phi = {n: Tensor(expert[n] + shared[n] if shared else expert[n]) for n, _ in bank.manifest}
        ad.record_madds(n_manifest)
        y = backbone(phi, fn, fe) * float(wk)
        ad.record_madds(y.size)
        out = y if out is None else out + y
    return out
