import json

import numpy as np
import pytest

from tokenmark.bench.cli import SUBCOMMANDS, build_parser, main
from tokenmark.bench.config import RunConfig
from tokenmark.bench.imageio import read_png, write_png
from tokenmark.bench.pipeline import Workspace, save_denoiser, save_detector, save_vae
from tokenmark.tokenforge import TokenEmbedding
from tokenmark.toyldm import VAE, Denoiser, TextEncoder

from tiny import tiny_detector


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_all_subcommands_registered():
    ap = build_parser()
    choices = ap._subparsers._group_actions[0].choices
    assert set(SUBCOMMANDS) == set(choices)


def test_usage_errors_exit_1(capsys):
    assert run(capsys, "nonsense")[0] == 1
    assert run(capsys, "detect")[0] == 1
    assert run(capsys, "attack", "--image", "a.png", "--attack", "x", "--out", "b.png", "--bogus")[0] == 1


def test_runtime_failure_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "attack", "--image", str(tmp_path / "missing.png"), "--attack", "blur:1", "--out", "x.png")
    assert code == 2 and "attack" in err


def test_dataset_and_attack_round_trip(capsys, tmp_path):
    code, _, _ = run(capsys, "dataset", "--n", "3", "--seed", "7", "--out", str(tmp_path / "d"))
    assert code == 0
    meta = json.loads((tmp_path / "d" / "captions.json").read_text())
    assert len(meta) == 3 and meta[0]["caption"].startswith("a ")
    src = tmp_path / "d" / "00000.png"
    assert run(capsys, "attack", "--image", str(src), "--attack", "identity", "--out", str(tmp_path / "i.png"))[0] == 0
    assert np.array_equal(read_png(src), read_png(tmp_path / "i.png"))
    assert run(capsys, "attack", "--image", str(src), "--attack", "jpeg:80", "--out", str(tmp_path / "j.png"))[0] == 0


def test_detect_prints_accuracy_and_decision(capsys, tmp_path, rng):
    det = tiny_detector(16)
    save_detector(tmp_path / "d.ckpt", det)
    write_png(tmp_path / "x.png", rng.random((3, 32, 32)))
    (tmp_path / "k.txt").write_text("1010101010101010\n")
    code, out, _ = run(
        capsys, "detect", "--image", str(tmp_path / "x.png"), "--detector", str(tmp_path / "d.ckpt"),
        "--key-file", str(tmp_path / "k.txt"),
    )
    assert code == 0
    rep = json.loads(out)
    assert 0 <= rep["bit_accuracy"] <= 1 and rep["threshold"] == 15
    assert rep["watermarked"] == (rep["matched_bits"] >= 15)
    (tmp_path / "k8.txt").write_text("10101010")
    code, _, _ = run(
        capsys, "detect", "--image", str(tmp_path / "x.png"), "--detector", str(tmp_path / "d.ckpt"),
        "--key-file", str(tmp_path / "k8.txt"),
    )
    assert code == 2


def test_heatmap_writes_png_and_json(capsys, tmp_path, rng):
    save_detector(tmp_path / "d.ckpt", tiny_detector(16))
    write_png(tmp_path / "x.png", rng.random((3, 32, 32)))
    code, _, _ = run(
        capsys, "heatmap", "--image", str(tmp_path / "x.png"), "--detector", str(tmp_path / "d.ckpt"),
        "--stride", "4", "--out", str(tmp_path / "h.png"),
    )
    assert code == 0
    assert read_png(tmp_path / "h.png").shape == (3, 32, 32)
    assert json.loads((tmp_path / "h.json").read_text())["stride"] == 4


@pytest.fixture
def tiny_workspace(tmp_path):
    cfg = RunConfig(data_dir=str(tmp_path / "data"))
    ws = Workspace(cfg, train=False)
    save_vae(ws.vae_path(), VAE(width=8, seed=0))
    save_denoiser(ws.denoiser_path(), Denoiser(ch=16, seed=2), TextEncoder(seed=1))
    return cfg


def test_generate_with_and_without_watermark(capsys, tmp_path, tiny_workspace):
    data = tiny_workspace.data_dir
    code, _, _ = run(capsys, "generate", "--data-dir", data, "--prompt", "a red circle", "--seed", "3",
                     "--out", str(tmp_path / "p.png"))
    assert code == 0 and read_png(tmp_path / "p.png").shape == (3, 32, 32)
    assert "tokens" in json.loads((tmp_path / "p.attention.json").read_text())
    TokenEmbedding(np.zeros((1, 64), np.float32), np.zeros(16, np.uint8), 8).save(tmp_path / "t.ckpt")
    code, _, _ = run(capsys, "generate", "--data-dir", data, "--prompt", "a [red circle W*] and a blue square",
                     "--token", str(tmp_path / "t.ckpt"), "--seed", "3", "--out", str(tmp_path / "w.png"))
    assert code == 0 and (tmp_path / "w.png").exists()


def test_report_summarizes(capsys, tmp_path):
    (tmp_path / "r.json").write_text(json.dumps({"experiment": "table1", "bit_accuracy": 0.9, "psnr_db": 30.0}))
    code, out, _ = run(capsys, "report", str(tmp_path / "r.json"))
    assert code == 0 and json.loads(out)[0]["bit_accuracy"] == 0.9


def test_threads_flag_sets_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
    (tmp_path / "r.json").write_text("{}")
    assert run(capsys, "report", "--threads", "1", str(tmp_path / "r.json"))[0] == 0
    import os

    assert os.environ["OMP_NUM_THREADS"] == "1"
    assert run(capsys, "report", "--threads", "0", str(tmp_path / "r.json"))[0] == 1
