import hashlib
import json
import os
import shutil

import numpy as np
import pytest

from gripcvae import asset_path
from gripcvae.cli import main

HAND = str(asset_path("al16_synth.urdf"))


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_fk_prints_all_links(capsys):
    config = ",".join(["0"] * 16)
    code, out, err = run(capsys, "fk", "--hand", HAND, "--config", config)
    assert code == 0
    lines = [l for l in out.strip().splitlines() if l]
    assert len(lines) == 17
    assert lines[0].startswith("palm")


def test_fk_wrong_joint_count(capsys):
    code, out, err = run(capsys, "fk", "--hand", HAND, "--config", "0,0,0")
    assert code == 1
    assert "16" in err


def test_collision_check_valid_and_invalid(capsys):
    from conftest import THUMB_ON_FINGER1
    from gripcvae import load_builtin_hand

    model = load_builtin_hand()
    nominal = ",".join(["0"] * 16)
    code, out, _ = run(capsys, "collision-check", "--hand", HAND,
                       "--config", nominal)
    assert code == 0 and "VALID" in out
    bad = model.config(THUMB_ON_FINGER1).radians
    # "=" form: a leading minus sign would otherwise read as a flag
    code, out, _ = run(capsys, "collision-check", "--hand", HAND,
                       "--config=" + ",".join(f"{v:.6f}" for v in bad))
    assert code == 0 and "INVALID" in out


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["fk", "--hand", HAND, "--config", "0", "--bogus"])
    assert e.value.code == 2


def test_missing_required_flag_is_usage_error():
    with pytest.raises(SystemExit) as e:
        main(["gen", "--hand", HAND])
    assert e.value.code == 2


def test_gen_deterministic_and_manifested(tmp_path, capsys):
    args = ["gen", "--hand", HAND, "--variant", "dense", "--points", "48",
            "--count", "6", "--seed", "9", "--jobs", "1"]
    out1 = tmp_path / "a.gcvd"
    out2 = tmp_path / "b.gcvd"
    assert run(capsys, *args, "--out", str(out1))[0] == 0
    assert run(capsys, *args, "--out", str(out2))[0] == 0
    assert sha(out1) == sha(out2)
    manifest = json.loads((tmp_path / "a.gcvd.manifest.json").read_text())
    assert manifest["subcommand"] == "gen"
    assert manifest["config"]["seed"] == 9
    assert str(out1) in manifest["outputs"]


def test_gen_jobs_invariant(tmp_path, capsys):
    base = ["gen", "--hand", HAND, "--variant", "dense", "--points", "48",
            "--count", "6", "--seed", "9"]
    serial = tmp_path / "serial.gcvd"
    parallel = tmp_path / "parallel.gcvd"
    assert run(capsys, *base, "--jobs", "1", "--out", str(serial))[0] == 0
    assert run(capsys, *base, "--jobs", "2", "--out", str(parallel))[0] == 0
    assert sha(serial) == sha(parallel)


def test_split_stats_roundtrip(tmp_path, capsys):
    data = tmp_path / "d.gcvd"
    run(capsys, "gen", "--hand", HAND, "--points", "48", "--count", "10",
        "--seed", "3", "--jobs", "1", "--out", str(data))
    code, out, _ = run(capsys, "split", "--in", str(data),
                       "--out-train", str(tmp_path / "tr.gcvd"),
                       "--out-test", str(tmp_path / "te.gcvd"),
                       "--fraction", "0.8", "--seed", "4")
    assert code == 0 and "8 train / 2 test" in out
    code, out, _ = run(capsys, "stats", "--in", str(data),
                       "--csv", str(tmp_path / "stats.csv"))
    assert code == 0
    assert "pooled std" in out
    assert (tmp_path / "stats.csv").exists()


def test_ingest(tmp_path, capsys):
    from gripcvae import load_builtin_hand

    model = load_builtin_hand()
    rows = [",".join(repr(float(v)) for v in model.limits_lo)]
    csv_path = tmp_path / "configs.csv"
    csv_path.write_text("\n".join(rows))
    out = tmp_path / "ingested.gcvd"
    code, text, _ = run(capsys, "ingest", "--hand", HAND, "--csv",
                        str(csv_path), "--points", "48", "--seed", "5",
                        "--out", str(out))
    assert code == 0 and "ingested 1" in text
    assert out.exists()


def test_dry_run_writes_nothing(tmp_path, capsys):
    out = tmp_path / "never.gcvd"
    code, text, _ = run(capsys, "gen", "--hand", HAND, "--count", "5",
                        "--points", "48", "--out", str(out), "--dry-run")
    assert code == 0 and "dry run ok" in text
    assert not out.exists()


def test_dry_run_catches_missing_input(capsys):
    code, _, err = run(capsys, "stats", "--in", "/nonexistent.gcvd", "--dry-run")
    assert code == 1
    assert "not found" in err


def test_train_eval_infer_pipeline(tmp_path, capsys):
    data = tmp_path / "d.gcvd"
    run(capsys, "gen", "--hand", HAND, "--points", "32", "--count", "12",
        "--seed", "6", "--jobs", "1", "--out", str(data))
    run(capsys, "split", "--in", str(data), "--out-train",
        str(tmp_path / "tr.gcvd"), "--out-test", str(tmp_path / "te.gcvd"),
        "--seed", "1")
    code, out, err = run(capsys, "train", "--hand", HAND,
                         "--train", str(tmp_path / "tr.gcvd"),
                         "--test", str(tmp_path / "te.gcvd"),
                         "--out-dir", str(tmp_path / "run"),
                         "--epochs", "2", "--batch-size", "4",
                         "--latent", "2", "--seed", "2")
    assert code == 0, err
    ckpt = tmp_path / "run" / "best.ckpt"
    assert ckpt.exists()
    assert (tmp_path / "run" / "training_log.csv").exists()

    code, out, err = run(capsys, "eval", "--hand", HAND, "--checkpoint",
                         str(ckpt), "--data", str(tmp_path / "te.gcvd"),
                         "--out-dir", str(tmp_path / "eval"), "--k", "2",
                         "--seed", "3", "--jobs", "1")
    assert code == 0, err
    assert (tmp_path / "eval" / "report.csv").exists()
    assert (tmp_path / "eval" / "summary.csv").exists()

    code, out, err = run(capsys, "infer", "--hand", HAND, "--checkpoint",
                         str(ckpt), "--data", str(tmp_path / "te.gcvd"),
                         "--index", "0", "--samples", "3", "--seed", "4")
    assert code == 0, err
    assert out.count("sample ") == 3


def test_eval_hand_mismatch_is_domain_error(tmp_path, capsys):
    from conftest import TWO_LINK_ANN, TWO_LINK_URDF

    data = tmp_path / "d.gcvd"
    run(capsys, "gen", "--hand", HAND, "--points", "32", "--count", "8",
        "--seed", "6", "--jobs", "1", "--out", str(data))
    run(capsys, "split", "--in", str(data), "--out-train",
        str(tmp_path / "tr.gcvd"), "--out-test", str(tmp_path / "te.gcvd"),
        "--seed", "1")
    run(capsys, "train", "--hand", HAND, "--train", str(tmp_path / "tr.gcvd"),
        "--test", str(tmp_path / "te.gcvd"), "--out-dir", str(tmp_path / "run"),
        "--epochs", "1", "--batch-size", "4", "--latent", "2", "--seed", "2")
    other_urdf = tmp_path / "other.urdf"
    other_urdf.write_text(TWO_LINK_URDF)
    (tmp_path / "other.hand.json").write_text(TWO_LINK_ANN)
    code, _, err = run(capsys, "eval", "--hand", str(other_urdf),
                       "--checkpoint", str(tmp_path / "run" / "best.ckpt"),
                       "--data", str(tmp_path / "te.gcvd"),
                       "--out-dir", str(tmp_path / "eval2"), "--jobs", "1")
    assert code == 1
    assert "match" in err


def test_config_file_overrides_with_cli_priority(tmp_path, capsys):
    data = tmp_path / "d.gcvd"
    run(capsys, "gen", "--hand", HAND, "--points", "32", "--count", "10",
        "--seed", "6", "--jobs", "1", "--out", str(data))
    run(capsys, "split", "--in", str(data), "--out-train",
        str(tmp_path / "tr.gcvd"), "--out-test", str(tmp_path / "te.gcvd"),
        "--seed", "1")
    cfg = tmp_path / "train.cfg"
    cfg.write_text("epochs = 3\nlatent = 2\nbatch-size = 4  # comment\n")
    code, out, err = run(capsys, "train", "--hand", HAND,
                         "--train", str(tmp_path / "tr.gcvd"),
                         "--test", str(tmp_path / "te.gcvd"),
                         "--out-dir", str(tmp_path / "run2"),
                         "--config-file", str(cfg),
                         "--epochs", "1", "--seed", "2")  # CLI epochs wins
    assert code == 0, err
    log = (tmp_path / "run2" / "training_log.csv").read_text().strip().splitlines()
    assert len(log) == 1 + 1  # header + one epoch


def test_help_snapshot():
    import io
    from contextlib import redirect_stdout

    from gripcvae.cli import build_parser

    parser = build_parser()
    buf = io.StringIO()
    with redirect_stdout(buf):
        try:
            parser.parse_args(["gen", "--help"])
        except SystemExit:
            pass
    text = buf.getvalue()
    snapshot = os.path.join(os.path.dirname(__file__), "data", "help_gen.txt")
    expected = open(snapshot).read()
    assert text == expected


def test_env_seed_fallback(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("GRIPCVAE_SEED", "77")
    import importlib

    from gripcvae import cli as cli_mod
    parser = cli_mod.build_parser()
    args = parser.parse_args(["gen", "--hand", HAND, "--count", "1",
                              "--out", str(tmp_path / "x.gcvd")])
    assert args.seed == 77
