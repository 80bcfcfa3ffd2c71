"""Fast, hermetic invariant checks behind ``unitrans selftest``."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .stage2 import importance_load, router_reg_loss, task_loss
from .translator import ExpertBank, MctArchitecture, instantiate, mct_forward


def _grad_ops():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(3, 4))
    w = rng.uniform(-1, 1, size=(4, 2))
    v = rng.uniform(-1, 1, size=(3, 4))
    checks = {
        "matmul": (lambda t: ad.matmul(t, Tensor(w)).sum(), x),
        "tanh": (lambda t: ad.tanh(t).sum(), x),
        "gelu": (lambda t: (ad.gelu(t) * Tensor(v)).sum(), x),
        "exp": (lambda t: ad.exp(t * 0.5).sum(), x),
        "log": (lambda t: ad.log(t).sum(), np.abs(x) + 0.5),
        "softmax": (lambda t: (ad.softmax(t, axis=-1) * Tensor(v)).sum(), x),
        "logsumexp": (lambda t: ad.logsumexp(t, axis=-1).sum(), x),
        "layernorm": (lambda t: (ad.layernorm(t, Tensor(np.ones(4)), Tensor(np.zeros(4)))
                                 * Tensor(v)).sum(), x),
    }
    for name, (f, p) in checks.items():
        rep = ad.grad_check(f, p, tol=1e-4)
        assert rep.passed, f"{name}: max rel err {rep.max_rel_err:.2e}"


def _softmax_layernorm():
    s = ad.softmax(Tensor(np.array([1.0, 2.0, 3.0]) + 100.0)).data
    assert abs(s.sum() - 1.0) < 1e-6
    y = ad.layernorm(Tensor(np.arange(8.0).reshape(2, 4)), Tensor(np.ones(4)),
                     Tensor(np.zeros(4))).data
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-6)
    assert np.allclose(y.var(axis=-1), 1.0, atol=1e-4)


def _instantiate_linearity():
    bank = ExpertBank([("w", (3, 2)), ("b", (2,))], K=4, seed=1)
    rng = np.random.default_rng(1)
    a1, a2 = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
    lam = 0.3
    mixed = instantiate(bank, lam * a1 + (1 - lam) * a2)
    p1, p2 = instantiate(bank, a1), instantiate(bank, a2)
    for k in mixed:
        assert np.allclose(mixed[k].data, lam * p1[k].data + (1 - lam) * p2[k].data, atol=1e-6)
    onehot = instantiate(bank, np.eye(4)[1])
    shared = bank.shared_sum()
    for k in onehot:
        assert np.array_equal(onehot[k].data, shared[k] + bank.expert(2)[k])


def _zero_weight_identity():
    arch = MctArchitecture(n_blocks=1, channels=4, window=2, heads=2)
    phi = {n: Tensor(np.ones(s) if n.endswith("_g") else np.zeros(s)) for n, s in arch.manifest()}
    x = np.random.default_rng(2).normal(size=(4, 4, 4))
    y = mct_forward(phi, x, x[::-1].copy(), arch).data
    assert np.array_equal(y, x.astype(y.dtype))


def _routing_examples():
    imp, load = importance_load(np.array([[1.0, 0.0], [0.0, 1.0]]), 1)
    assert np.allclose(imp.data, [1, 1]) and np.array_equal(load, [1, 1])
    imp, load = importance_load(np.full((2, 2), 0.5), 1)
    assert np.allclose(imp.data, [1, 1]) and np.array_equal(load, [2, 0])
    u = np.zeros((2, 2))
    val = float(router_reg_loss(ad.softmax(Tensor(u), axis=-1), Tensor(u), 1).data)
    assert abs(val - (1.0 + np.log(2) ** 2)) < 1e-3, val
    assert abs(float(task_loss(np.zeros((3, 3)), np.ones((3, 3))).data) - np.log(2)) < 1e-6


def _checkpoint_paths():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "x.utck"
        checkpoint.save(path, {"a": np.arange(6, dtype=np.float32).reshape(2, 3)})
        assert np.array_equal(checkpoint.load(path)["a"], np.arange(6).reshape(2, 3))
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        try:
            checkpoint.loads(bytes(raw))
        except checkpoint.CheckpointError as exc:
            assert "magic" in str(exc)
        else:
            raise AssertionError("corrupted magic was accepted")


CHECKS = {
    "gradient checks": _grad_ops,
    "softmax / layernorm": _softmax_layernorm,
    "instantiate linearity": _instantiate_linearity,
    "zero-weight translator identity": _zero_weight_identity,
    "importance / load / router penalty examples": _routing_examples,
    "checkpoint round trip and bad magic": _checkpoint_paths,
}


def run(report=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        try:
            fn()
            report(f"PASS {name}")
        except Exception as exc:  # noqa: BLE001 - every failure is reported, not raised
            ok = False
            report(f"FAIL {name}: {exc}")
    return ok
