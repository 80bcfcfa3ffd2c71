"""``unitrans`` command line: pretrain-stage1, train-stage2, eval, selftest.

Exit codes: 0 ok, 1 selftest failure, 2 config error, 3 training divergence,
4 checkpoint mismatch, 5 split leakage.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, checkpoint
from . import config as config_mod
from .autodiff import parameters_checksum
from .evaluation import (LeakageError, Translator, ablation_sweep, check_leakage, profile,
                         routing_consistency, zero_shot_eval)
from .mie import IntrinsicEncoder, TrainingDiverged, intrinsic_space_report, stage1_train
from .stage2 import TaskHead, stage2_train
from .translator import ExpertBank, MappingRouter

log = logging.getLogger("unitrans")

EXIT_OK, EXIT_SELFTEST, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CKPT, EXIT_LEAK = 0, 1, 2, 3, 4, 5

MIE_FILE = "mie.utck"
STAGE2_FILE = "stage2.utck"
PROVENANCE_FILE = "provenance.json"


class CheckpointMismatch(RuntimeError):
    pass


def thread_limit():
    """Cap BLAS threads from ``UNITRANS_THREADS`` (default 1, for bitwise reruns)."""
    raw = os.environ.get("UNITRANS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise config_mod.ConfigError(f"UNITRANS_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise config_mod.ConfigError("UNITRANS_THREADS must be at least 1")
    return threadpool_limits(limits=n)


# -- provenance -----------------------------------------------------------------
def read_provenance(out_dir: Path) -> list[dict]:
    path = Path(out_dir) / PROVENANCE_FILE
    if not path.exists():
        return []
    return json.loads(path.read_text())["records"]


def write_provenance(out_dir: Path, record: dict):
    records = [r for r in read_provenance(out_dir) if r["stage"] != record["stage"]]
    records.append(record)
    records.sort(key=lambda r: r["stage"])
    text = json.dumps({"records": records}, indent=2, sort_keys=True) + "\n"
    (Path(out_dir) / PROVENANCE_FILE).write_text(text)


def _record(cfg, stage: str, split, **extra) -> dict:
    return {
        "stage": stage, "config_sha256": cfg.digest(), "seed": cfg.seed,
        "versions": {"unitrans": __version__, "numpy": np.__version__},
        "train_modalities": split.train_seeds, "train_scenes": list(split.train_scenes),
        **extra,
    }


# -- checkpoints ------------------------------------------------------------------
def load_mie(path: Path, d: int | None = None) -> IntrinsicEncoder:
    try:
        state = checkpoint.strip_prefix(checkpoint.load(path), "mie/")
        mie = IntrinsicEncoder.from_state(state)
    except FileNotFoundError as exc:
        raise CheckpointMismatch(f"stage-1 checkpoint not found: {path}") from exc
    except (checkpoint.CheckpointError, KeyError, ValueError) as exc:
        raise CheckpointMismatch(f"unusable stage-1 checkpoint {path}: {exc}") from exc
    if d is not None and mie.d != d:
        raise CheckpointMismatch(f"stage-1 checkpoint has d={mie.d}, config asks for d={d}")
    return mie


def load_translator(ckpt_dir: Path, cfg) -> Translator:
    s2 = cfg.stage2()
    mie = load_mie(ckpt_dir / MIE_FILE, cfg.doc["mie"]["d"])
    try:
        state = checkpoint.load(ckpt_dir / STAGE2_FILE)
        arch = s2.architecture()
        bank = ExpertBank(arch.manifest(), K=s2.K, n_shared=s2.n_shared)
        bank.load_state_dict(checkpoint.strip_prefix(state, "tpb/"))
        mmr = MappingRouter.from_state(checkpoint.strip_prefix(state, "mmr/"))
        head = TaskHead()
        head.load_state_dict(checkpoint.strip_prefix(state, "head/"))
    except FileNotFoundError as exc:
        raise CheckpointMismatch(f"stage-2 checkpoint not found in {ckpt_dir}") from exc
    except (checkpoint.CheckpointError, KeyError, ValueError) as exc:
        raise CheckpointMismatch(f"stage-2 checkpoint does not match the config: {exc}") from exc
    if mmr.d != mie.d:
        raise CheckpointMismatch(f"router expects d={mmr.d}, encoder has d={mie.d}")
    return Translator(mie, bank, mmr, head, arch)


# -- commands -----------------------------------------------------------------------
def cmd_pretrain_stage1(args) -> int:
    cfg = config_mod.load(args.config)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    split = cfg.split()
    res = stage1_train(split, cfg.stage1())
    checkpoint.save(out / MIE_FILE, checkpoint.with_prefix(res.mie.state_dict(), "mie/"))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    w.writerows([i, repr(v)] for i, v in enumerate(res.step_losses))
    (out / "stage1_loss.csv").write_text(buf.getvalue())
    report = intrinsic_space_report(res.mie, split, n_scenes=cfg.doc["workbench"]["eval_scenes"])
    (out / "intrinsic_report.csv").write_text(report.to_csv())
    write_provenance(out, _record(cfg, "stage1", split))
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    cfg = config_mod.load(args.config)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    stage1_path = Path(args.stage1) if args.stage1 else out / MIE_FILE
    mie = load_mie(stage1_path, cfg.doc["mie"]["d"])
    if stage1_path.resolve() != (out / MIE_FILE).resolve():
        (out / MIE_FILE).write_bytes(stage1_path.read_bytes())
    split = cfg.split()
    res = stage2_train(mie, split, cfg.stage2())
    checkpoint.save(out / STAGE2_FILE, res.state_dict())
    (out / "stage2_metrics.csv").write_text(res.metrics_csv())
    (out / "stage2_importance.csv").write_text(res.importance_csv())
    write_provenance(out, _record(cfg, "stage2", split, mie_checksum=res.mie_checksum,
                                  mie_checksum_after=parameters_checksum(mie.state_dict())))
    last = res.metrics[-1]
    print(f"stage2 done: total {last['total']:.4f} min_imp {last['min_imp']:.4f} "
          f"mie checksum {res.mie_checksum[:16]}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = config_mod.load(args.config)
    ckpt = Path(args.ckpt) if args.ckpt else cfg.out_dir
    split = cfg.split()
    mode = args.mode
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    ev = cfg.doc["eval"]
    if mode == "zeroshot":
        model = load_translator(ckpt, cfg)
        rep = zero_shot_eval(model, split, read_provenance(ckpt),
                             n_scenes=cfg.doc["workbench"]["eval_scenes"])
        (out / "eval_zeroshot.csv").write_text(rep.to_csv())
        rc = routing_consistency(model, split)
        print(rep.summary())
        print(f"routing cosine within {rc.within:.4f} across {rc.across:.4f}")
        for k, v in rep.intrinsic.items():
            print(f"{k} {v:.4f}")
    elif mode == "profile":
        model = load_translator(ckpt, cfg)
        rep = profile(model, top_k=cfg.stage2().top_k, trials=ev["profile_trials"], split=split)
        (out / "profile.csv").write_text(rep.to_csv())
        for r in rep.rows:
            print(f"{r['method']:12s} madds {r['madds']:>12d} passes {r['passes']} "
                  f"wall {r['wall_ms_median']:.2f} ms")
        print(f"ratio r = {rep.ratio:.4f}")
    elif mode.startswith("ablate:"):
        axis = mode.split(":", 1)[1]
        values = ev["ablation_values"].get(axis)
        if args.values:
            values = [v if axis == "loss-term" else int(v) for v in args.values.split(",")]
        if values is None:
            raise config_mod.ConfigError(f"unknown ablation axis '{axis}'")
        s2 = replace(cfg.stage2(), steps=ev["ablation_steps"])
        mie = None if axis == "d" else load_mie(ckpt / MIE_FILE, cfg.doc["mie"]["d"])
        check_leakage(split, read_provenance(ckpt))
        text = ablation_sweep(axis, values, split, cfg.stage1(), s2,
                              seeds=ev["ablation_seeds"], n_scenes=ev["ablation_scenes"], mie=mie)
        (out / f"ablation_{axis}.csv").write_text(text)
        print(text, end="")
    else:
        raise config_mod.ConfigError(f"unknown eval mode '{mode}'")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest

    return EXIT_OK if selftest.run() else EXIT_SELFTEST


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unitrans", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    s1 = sub.add_parser("pretrain-stage1", help="train the intrinsic encoder")
    s1.add_argument("config")
    s1.set_defaults(fn=cmd_pretrain_stage1)
    s2 = sub.add_parser("train-stage2", help="train router, bank and head")
    s2.add_argument("config")
    s2.add_argument("--stage1", help="stage-1 checkpoint (default: <out_dir>/mie.utck)")
    s2.set_defaults(fn=cmd_train_stage2)
    ev = sub.add_parser("eval", help="zero-shot evaluation, profiling or ablations")
    ev.add_argument("config")
    ev.add_argument("--ckpt", help="directory holding the checkpoints (default: out_dir)")
    ev.add_argument("--mode", default="zeroshot", help="zeroshot | profile | ablate:<axis>")
    ev.add_argument("--values", help="comma-separated ablation values overriding the config")
    ev.set_defaults(fn=cmd_eval)
    st = sub.add_parser("selftest", help="fast invariant checks")
    st.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = thread_limit()
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    with contextlib.ExitStack() as stack:
        stack.callback(limiter.restore_original_limits)
        try:
            return args.fn(args)
        except config_mod.ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except TrainingDiverged as exc:
            print(f"training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        except CheckpointMismatch as exc:
            print(f"checkpoint mismatch: {exc}", file=sys.stderr)
            return EXIT_CKPT
        except LeakageError as exc:
            print(f"leakage guard: {exc}", file=sys.stderr)
            return EXIT_LEAK


if __name__ == "__main__":
    sys.exit(main())
