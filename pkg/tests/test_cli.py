"""CLI contract: subcommands, exit codes, run-directory discipline."""

import json

import numpy as np
import pytest

from spikeshort.cli import main


def tiny_config(tmp_path, mode="evolutionary", seed=1, epochs=2):
    cfg = {
        "mode": mode,
        "seed": seed,
        "out": str(tmp_path / "runs"),
        "network": {"preset": "small3", "classes": 4, "timesteps": 2},
        "data": {
            "kind": "synthetic",
            "classes": 4,
            "train_per_class": 6,
            "test_per_class": 3,
            "image_size": 9,
            "sigma": 0.2,
        },
        "trainer": {"epochs": epochs, "batch": 12},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path, cfg


def run_dir_of(tmp_path):
    runs = list((tmp_path / "runs").iterdir())
    assert len(runs) == 1
    return runs[0]


# ---------------------------------------------------------------------------
# train


def test_train_writes_run_artifacts(tmp_path, capsys):
    cfg_path, _ = tiny_config(tmp_path)
    assert main(["train", "--config", str(cfg_path)]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    d = run_dir_of(tmp_path)
    assert (d / "config.json").exists()
    assert (d / "metrics.csv").exists()
    assert (d / "checkpoint_best.ckpt").exists()
    assert (d / "checkpoint_final.ckpt").exists()
    assert (d / "summary.json").exists()
    assert 0.0 <= out["final_acc"] <= 1.0 and out["final_lambda"] == 0.0


def test_train_rerun_same_dir_is_collision(tmp_path, capsys):
    cfg_path, _ = tiny_config(tmp_path)
    assert main(["train", "--config", str(cfg_path)]) == 0
    assert main(["train", "--config", str(cfg_path)]) == 1
    assert "collision" in capsys.readouterr().err


def test_train_rerun_reproduces_metrics_byte_identically(tmp_path):
    cfg_path, _ = tiny_config(tmp_path)
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "r1")]) == 0
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "r2")]) == 0
    m1 = next((tmp_path / "r1").iterdir()) / "metrics.csv"
    m2 = next((tmp_path / "r2").iterdir()) / "metrics.csv"
    assert m1.read_bytes() == m2.read_bytes()


def test_train_vanilla_lambda_column_all_zero(tmp_path):
    cfg_path, _ = tiny_config(tmp_path, mode="vanilla")
    assert main(["train", "--config", str(cfg_path)]) == 0
    lines = (run_dir_of(tmp_path) / "metrics.csv").read_text().strip().splitlines()
    lam = lines[0].split(",").index("lambda")
    assert all(row.split(",")[lam] == "0.0" for row in lines[1:])


def test_train_invalid_config_exits_one(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"mode": "evolutionary", "bogus": 1}')
    assert main(["train", "--config", str(path)]) == 1
    assert "bogus" in capsys.readouterr().err


def test_train_malformed_json_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"mode": "evolutionary",\n  broken\n}')
    assert main(["train", "--config", str(path)]) == 1
    assert "line 2" in capsys.readouterr().err


def test_train_config_copy_reparses_equal(tmp_path):
    cfg_path, _ = tiny_config(tmp_path)
    assert main(["train", "--config", str(cfg_path)]) == 0
    from spikeshort.config import parse_config

    d = run_dir_of(tmp_path)
    original = parse_config(json.loads(cfg_path.read_text()))
    written = parse_config(json.loads((d / "config.json").read_text()))
    assert original == written


def test_train_override_flags(tmp_path, capsys):
    cfg_path, _ = tiny_config(tmp_path, mode="vanilla", seed=1)
    assert (
        main(
            [
                "train",
                "--config",
                str(cfg_path),
                "--mode",
                "shortcut",
                "--seed",
                "9",
                "--timesteps",
                "3",
                "--out",
                str(tmp_path / "o"),
            ]
        )
        == 0
    )
    d = next((tmp_path / "o").iterdir())
    assert d.name.endswith("-s9")
    eff = json.loads((d / "config.json").read_text())
    assert eff["mode"] == "shortcut" and eff["network"]["timesteps"] == 3


# ---------------------------------------------------------------------------
# eval


def trained_checkpoint(tmp_path, mode="shortcut"):
    cfg_path, _ = tiny_config(tmp_path, mode=mode)
    assert main(["train", "--config", str(cfg_path)]) == 0
    return cfg_path, run_dir_of(tmp_path) / "checkpoint_final.ckpt"


def test_eval_prints_single_json_line(tmp_path, capsys):
    cfg_path, ckpt = trained_checkpoint(tmp_path)
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(ckpt)]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1
    parsed = json.loads(out[0])
    assert 0.0 <= parsed["accuracy"] <= 1.0 and parsed["samples"] == 12


def test_eval_stripped_equals_unstripped(tmp_path, capsys):
    from spikeshort.network import strip_checkpoint

    cfg_path, ckpt = trained_checkpoint(tmp_path)
    lean = tmp_path / "lean.ckpt"
    strip_checkpoint(ckpt, lean)
    assert lean.stat().st_size < ckpt.stat().st_size
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(ckpt)]) == 0
    full_out = capsys.readouterr().out
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(lean)]) == 0
    assert capsys.readouterr().out == full_out


def test_eval_corrupted_header_exits_two(tmp_path, capsys):
    cfg_path, ckpt = trained_checkpoint(tmp_path)
    bad = tmp_path / "bad.ckpt"
    blob = bytearray(ckpt.read_bytes())
    blob[0] = ord("X")
    bad.write_bytes(bytes(blob))
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", str(bad)]) == 2


def test_eval_shape_mismatch_names_parameter(tmp_path, capsys):
    cfg_path, ckpt = trained_checkpoint(tmp_path)
    other = {
        "mode": "vanilla",
        "seed": 1,
        "out": str(tmp_path / "runs2"),
        "network": {"preset": "small3", "classes": 7, "timesteps": 2},
        "data": {
            "kind": "synthetic",
            "classes": 7,
            "train_per_class": 2,
            "test_per_class": 2,
            "image_size": 9,
        },
        "trainer": {"epochs": 1, "batch": 4},
    }
    other_path = tmp_path / "other.json"
    other_path.write_text(json.dumps(other))
    assert main(["eval", "--config", str(other_path), "--checkpoint", str(ckpt)]) == 1
    assert "head.l3.weight" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# diagnose


def test_diagnose_writes_reports_and_summary(tmp_path, capsys):
    cfg_path, _ = tiny_config(tmp_path)
    assert main(["diagnose", "--config", str(cfg_path), "--seeds", "0,1,2"]) == 0
    d = next(p for p in (tmp_path / "runs").iterdir() if p.name.endswith("-diagnose"))
    files = sorted(p.name for p in d.iterdir())
    assert files == [
        "seed0_shortcut.json",
        "seed0_vanilla.json",
        "seed1_shortcut.json",
        "seed1_vanilla.json",
        "seed2_shortcut.json",
        "seed2_vanilla.json",
        "summary.json",
    ]
    summary = json.loads((d / "summary.json").read_text())
    assert 0 <= summary["ratio_win_count"] <= 3
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["total"] == 3


def test_diagnose_parallel_matches_serial(tmp_path, monkeypatch):
    cfg_path, _ = tiny_config(tmp_path)
    monkeypatch.setenv("SPIKESHORT_THREADS", "1")
    assert main(["diagnose", "--config", str(cfg_path), "--seeds", "0,1", "--out", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("SPIKESHORT_THREADS", "2")
    assert main(["diagnose", "--config", str(cfg_path), "--seeds", "0,1", "--out", str(tmp_path / "b")]) == 0
    da = next(p for p in (tmp_path / "a").iterdir() if p.name.endswith("-diagnose"))
    db = next(p for p in (tmp_path / "b").iterdir() if p.name.endswith("-diagnose"))
    for name in ("seed0_vanilla.json", "seed1_shortcut.json", "summary.json"):
        assert (da / name).read_bytes() == (db / name).read_bytes(), name


def test_diagnose_empty_seed_list_rejected(tmp_path):
    cfg_path, _ = tiny_config(tmp_path)
    assert main(["diagnose", "--config", str(cfg_path), "--seeds", ""]) == 1


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_ops_pass(capsys):
    assert main(["gradcheck", "--scope", "op", "--seeds", "3"]) == 0
    out = capsys.readouterr().out
    assert "all gradient checks passed" in out
    assert "fire[triangular]" in out


def test_gradcheck_corrupted_surrogate_names_fire(capsys, monkeypatch):
    import spikeshort.neuron as neuron

    real = neuron.surrogate_grad_values

    def corrupted(u_pre, cfg, sg):
        return real(u_pre, cfg, sg) * 1.5 + 0.01

    monkeypatch.setattr(neuron, "surrogate_grad_values", corrupted)
    assert main(["gradcheck", "--scope", "op", "--seeds", "2"]) == 1
    out = capsys.readouterr().out
    assert "FAILED: " in out and "fire[" in out.split("FAILED: ", 1)[1]
