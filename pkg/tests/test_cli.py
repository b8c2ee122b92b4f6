import subprocess
import sys

import numpy as np
import pytest

from mixreorg.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from mixreorg.config import ModelConfig

SMALL = dict(image_size=16, patch_size=4, dim=8, heads=2, mlp_ratio=2, s1=4, s2=2, stage1_layers=1, P=1,
             post_layers1=1, post_layers2=1, joint_dim=8, text_dim=8, text_layers=1, K=2, M=2,
             batch_size=8, steps=3)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "corpus.txt").write_text("count = 8\nseed = 3\nimage_size = 16\n")
    ModelConfig(**SMALL).save(root / "small.cfg")
    assert main(["gen-data", "--spec", str(root / "corpus.txt"), "--out", str(root / "data.mxds")]) == EXIT_OK
    assert main(["train", "--config", str(root / "small.cfg"), "--data", str(root / "data.mxds"),
                 "--out", str(root / "run")]) == EXIT_OK
    return root


def _ckpt(work):
    return str(work / "run" / "ckpt_000003.mxck")


def test_train_writes_checkpoints_and_metrics(work):
    names = sorted(p.name for p in (work / "run").iterdir())
    assert "metrics.tsv" in names and "ckpt_000003.mxck" in names


@pytest.mark.parametrize("mode", ["miou", "reorg", "classify"])
def test_eval_modes_exit_ok(work, mode, capsys):
    rc = main(["eval", "--ckpt", _ckpt(work), "--data", str(work / "data.mxds"), "--mode", mode])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    key = {"miou": "miou\t", "reorg": "mean_diagonal\t", "classify": "acc@1\t"}[mode]
    assert key in out


def test_eval_reorg_writes_rasters(work, tmp_path):
    rc = main(["eval", "--ckpt", _ckpt(work), "--data", str(work / "data.mxds"), "--mode", "reorg",
               "--rasters", str(tmp_path / "r")])
    assert rc == EXIT_OK
    assert len(list((tmp_path / "r").glob("*.ppm"))) > 0


def test_segment_by_index_and_file(work, tmp_path):
    classes = work / "classes.txt"
    classes.write_text("red circle\nblue square\n")
    out = tmp_path / "seg.pgm"
    rc = main(["segment", "--ckpt", _ckpt(work), "--image", "0", "--data", str(work / "data.mxds"),
               "--classes", str(classes), "--out", str(out)])
    assert rc == EXIT_OK and out.read_bytes().startswith(b"P5")
    np.save(tmp_path / "img.npy", np.full((16, 16, 3), 0.5, dtype=np.float32))
    rc = main(["segment", "--ckpt", _ckpt(work), "--image", str(tmp_path / "img.npy"),
               "--classes", str(classes), "--out", str(out)])
    assert rc == EXIT_OK


def test_usage_errors_exit_1(work, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--ckpt", "x", "--data", "y", "--mode", "bogus"])
    assert exc.value.code == EXIT_USAGE
    # an index without a dataset
    rc = main(["segment", "--ckpt", _ckpt(work), "--image", "0", "--classes", str(work / "classes.txt"),
               "--out", str(tmp_path / "s.pgm")])
    assert rc == EXIT_USAGE
    rc = main(["ablate", "--axis", "depth", "--values", "1,2", "--config", str(work / "small.cfg"),
               "--data", str(work / "data.mxds")])
    assert rc == EXIT_USAGE
    assert "valid axes" in capsys.readouterr().err


def test_corrupted_dataset_exits_2(work, tmp_path):
    blob = (work / "data.mxds").read_bytes()
    bad = tmp_path / "bad.mxds"
    bad.write_bytes(blob[: len(blob) - 7])
    assert main(["train", "--config", str(work / "small.cfg"), "--data", str(bad),
                 "--out", str(tmp_path / "run")]) == EXIT_DATA
    bad.write_bytes(b"JUNK" + blob[4:])
    assert main(["eval", "--ckpt", _ckpt(work), "--data", str(bad), "--mode", "miou"]) == EXIT_DATA
    assert main(["eval", "--ckpt", _ckpt(work), "--data", str(tmp_path / "missing.mxds"),
                 "--mode", "miou"]) == EXIT_DATA


def test_corrupted_checkpoint_exits_2(work, tmp_path, capsys):
    blob = bytearray((work / "run" / "ckpt_000003.mxck").read_bytes())
    bad = tmp_path / "bad.mxck"
    bad.write_bytes(bytes(blob[:-5]))
    assert main(["eval", "--ckpt", str(bad), "--data", str(work / "data.mxds"), "--mode", "reorg"]) == EXIT_DATA
    # byte 10 sits inside the stored config digest
    blob[10] ^= 0xFF
    bad.write_bytes(bytes(blob))
    assert main(["eval", "--ckpt", str(bad), "--data", str(work / "data.mxds"), "--mode", "reorg"]) == EXIT_DATA
    assert "digest" in capsys.readouterr().err


def test_bad_config_exits_2(work, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("dim = 8\nwidth = 3\n")
    assert main(["grad-check", "--config", str(cfg)]) == EXIT_DATA


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort_exits_3(work, tmp_path):
    # a huge learning rate blows the weights up within a few steps
    cfg = tmp_path / "hot.cfg"
    ModelConfig(**{**SMALL, "lr": 1e30, "warmup_frac": 0.0}).save(cfg)
    rc = main(["train", "--config", str(cfg), "--data", str(work / "data.mxds"), "--out", str(tmp_path / "run")])
    assert rc == EXIT_NUMERIC


@pytest.mark.parametrize("passed", [True, False])
def test_grad_check_exit_code_follows_report(tmp_path, monkeypatch, capsys, passed):
    from mixreorg.numerics import GradCheckReport
    from mixreorg.pipeline import verify

    err = 1e-6 if passed else 1e-1
    monkeypatch.setattr(verify, "end_to_end_grad_check",
                        lambda cfg, tolerance: (GradCheckReport(err, tolerance, [err]), ["patch.w"]))
    cfg = tmp_path / "tiny.cfg"
    ModelConfig(**{**SMALL, "hard_assign": False}).save(cfg)
    rc = main(["grad-check", "--config", str(cfg)])
    assert rc == (EXIT_OK if passed else EXIT_NUMERIC)
    assert ("PASS" if passed else "FAIL") in capsys.readouterr().out


def test_grad_check_rejects_hard_assignment(tmp_path):
    cfg = tmp_path / "hard.cfg"
    ModelConfig(**{**SMALL, "hard_assign": True}).save(cfg)
    assert main(["grad-check", "--config", str(cfg)]) == EXIT_DATA


def test_ablate_over_m_gives_deterministic_three_rows(work, tmp_path, capsys):
    argv = ["ablate", "--axis", "M", "--values", "2,4,8", "--config", str(work / "small.cfg"),
            "--data", str(work / "data.mxds"), "--steps", "2"]
    assert main(argv + ["--out", str(tmp_path / "a.tsv")]) == EXIT_OK
    first = capsys.readouterr().out
    assert main(argv) == EXIT_OK
    second = capsys.readouterr().out
    assert first == second == (tmp_path / "a.tsv").read_text()
    rows = first.strip().splitlines()
    assert len(rows) == 4
    assert [r.split("\t")[:2] for r in rows[1:]] == [["M", "2"], ["M", "4"], ["M", "8"]]


def test_console_entry_point_runs_as_module(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mixreorg.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "grad-check" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "mixreorg.cli", "train"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
