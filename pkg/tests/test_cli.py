import csv
import json

import numpy as np
import pytest

from unitrans import checkpoint, cli
from unitrans import config as config_mod

TINY = {
    "seed": 0,
    "workbench": {"eval_scenes": 2},
    "mie": {"steps": 4, "batch_scenes": 2},
    "stage2": {"steps": 2, "batch_scenes": 1},
    "bank": {"blocks": 1},
    "eval": {"profile_trials": 2, "ablation_steps": 1, "ablation_seeds": [0],
             "ablation_scenes": 1},
}


def write_config(tmp_path, name="cfg.json", **over):
    doc = json.loads(json.dumps(TINY))
    doc["out_dir"] = str(tmp_path / "out")
    for k, v in over.items():
        if isinstance(v, dict):
            doc.setdefault(k, {}).update(v)
        else:
            doc[k] = v
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_config(tmp)
    assert cli.main(["pretrain-stage1", str(cfg)]) == 0
    assert cli.main(["train-stage2", str(cfg)]) == 0
    return tmp, cfg


# -- config ---------------------------------------------------------------------
def test_config_defaults_and_errors():
    cfg = config_mod.from_dict({"seed": 3})
    assert cfg.doc["mie"]["tau"] == 0.9 and cfg.doc["stage2"]["lambda_feat"] == 5.0
    assert cfg.doc["bank"]["K"] == 8 and cfg.stage2().top_k == 3
    with pytest.raises(config_mod.ConfigError, match="missing required field 'seed'"):
        config_mod.from_dict({})
    with pytest.raises(config_mod.ConfigError, match="unknown config key 'mie.alpha'"):
        config_mod.from_dict({"seed": 0, "mie": {"alpha": 1}})
    with pytest.raises(config_mod.ConfigError):
        config_mod.from_dict({"seed": 0, "stage2": {"top_k": 9}})
    with pytest.raises(config_mod.ConfigError):
        config_mod.from_dict({"seed": 0, "mie": {"steps": 1.5}})


def test_config_digest_tracks_content():
    a, b = config_mod.from_dict({"seed": 0}), config_mod.from_dict({"seed": 1})
    assert a.digest() != b.digest() and a.digest() == config_mod.from_dict({"seed": 0}).digest()


@pytest.mark.parametrize("doc", [{}, {"seed": 0, "bogus": 1}, {"seed": -1}])
def test_config_errors_exit_2(tmp_path, doc, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(doc))
    assert cli.main(["pretrain-stage1", str(path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_file_exit_2(tmp_path):
    assert cli.main(["pretrain-stage1", str(tmp_path / "nope.json")]) == 2


def test_bad_thread_env_exit_2(tmp_path, monkeypatch):
    monkeypatch.setenv("UNITRANS_THREADS", "many")
    assert cli.main(["selftest"]) == 2


def test_selftest_passes(capsys):
    assert cli.main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == 6


# -- pipeline ------------------------------------------------------------------------
def test_stage_outputs(trained):
    tmp, _ = trained
    out = tmp / "out"
    for name in ("mie.utck", "stage1_loss.csv", "intrinsic_report.csv", "stage2.utck",
                 "stage2_metrics.csv", "stage2_importance.csv", "provenance.json"):
        assert (out / name).exists(), name
    assert all(k.startswith("mie/") for k in checkpoint.load(out / "mie.utck"))
    prefixes = {k.split("/")[0] for k in checkpoint.load(out / "stage2.utck")}
    assert prefixes == {"tpb", "mmr", "head"}
    rows = list(csv.reader((out / "stage2_metrics.csv").open()))
    assert rows[0] == ["step", "L_task", "L_feat", "L_ctr", "L_r", "total", "min_imp", "max_imp"]
    prov = json.loads((out / "provenance.json").read_text())["records"]
    assert [r["stage"] for r in prov] == ["stage1", "stage2"]
    assert prov[1]["mie_checksum"] == prov[1]["mie_checksum_after"]
    assert prov[0]["train_modalities"] == list(range(1, 9))


def test_eval_modes(trained):
    tmp, cfg = trained
    assert cli.main(["eval", str(cfg)]) == 0
    rows = list(csv.DictReader((tmp / "out" / "eval_zeroshot.csv").open()))
    assert len(rows) == 34
    assert list(rows[0]) == ["ego_mod", "nbr_mod", "mse_translated", "mse_identity", "f1_ego",
                             "f1_raw", "f1_translated", "alpha_consistency"]
    assert cli.main(["eval", str(cfg), "--mode", "profile"]) == 0
    prof = list(csv.DictReader((tmp / "out" / "profile.csv").open()))
    assert [(r["method"], r["passes"]) for r in prof] == [("unitrans", "1"), ("classic_moe", "3")]
    assert cli.main(["eval", str(cfg), "--mode", "ablate:K", "--values", "1"]) == 0
    abl = list(csv.DictReader((tmp / "out" / "ablation_K.csv").open()))
    assert [r["value"] for r in abl] == ["1"]
    assert cli.main(["eval", str(cfg), "--mode", "nonsense"]) == 2


def test_rerun_is_bitwise_identical(trained, tmp_path, monkeypatch):
    tmp, _ = trained
    monkeypatch.setenv("UNITRANS_THREADS", "1")
    cfg = write_config(tmp_path)
    assert cli.main(["pretrain-stage1", str(cfg)]) == 0
    assert cli.main(["train-stage2", str(cfg)]) == 0
    for name in ("mie.utck", "stage1_loss.csv", "intrinsic_report.csv", "stage2.utck",
                 "stage2_metrics.csv", "stage2_importance.csv"):
        assert (tmp_path / "out" / name).read_bytes() == (tmp / "out" / name).read_bytes(), name


def test_checkpoint_mismatch_exit_4(trained, tmp_path):
    tmp, _ = trained
    d8 = write_config(tmp_path, mie={"d": 8}, out_dir=str(tmp / "out"))
    assert cli.main(["train-stage2", str(d8), "--stage1", str(tmp / "out" / "mie.utck")]) == 4
    bad = tmp_path / "bad.utck"
    raw = bytearray((tmp / "out" / "mie.utck").read_bytes())
    raw[:4] = b"NOPE"
    bad.write_bytes(bytes(raw))
    cfg = write_config(tmp_path)
    assert cli.main(["train-stage2", str(cfg), "--stage1", str(bad)]) == 4
    assert cli.main(["eval", str(cfg), "--ckpt", str(tmp_path / "empty")]) == 4


def test_leakage_exit_5(trained, tmp_path):
    tmp, cfg = trained
    ckpt = tmp_path / "ckpt"
    ckpt.mkdir()
    for name in ("mie.utck", "stage2.utck"):
        (ckpt / name).write_bytes((tmp / "out" / name).read_bytes())
    prov = json.loads((tmp / "out" / "provenance.json").read_text())
    prov["records"][0]["train_modalities"].append(9)  # an emerging modality
    (ckpt / "provenance.json").write_text(json.dumps(prov))
    assert cli.main(["eval", str(cfg), "--ckpt", str(ckpt)]) == 5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(tmp_path):
    cfg = write_config(tmp_path, mie={"lr": float("inf")})
    assert cli.main(["pretrain-stage1", str(cfg)]) == 3
