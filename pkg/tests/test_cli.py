import subprocess
import sys

import numpy as np
import pytest

from microisp.cli import build_parser, main
from microisp.imaging import read_rgb
from microisp.model import ModelConfig, build_model, load_weights, save_weights


def _tree(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(d), "--count", "3", "--size", "48", "--seed", "7"]) == 0
    return d


@pytest.fixture(scope="module")
def weights(tmp_path_factory):
    p = tmp_path_factory.mktemp("w") / "w.misp"
    save_weights(build_model(ModelConfig(0.25), 2), p)
    return p


def test_synth_deterministic(tmp_path):
    args = ["synth", "--count", "2", "--size", "32", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert a == b and sorted(a) == ["synth_0000.braw", "synth_0000.ppm", "synth_0001.braw", "synth_0001.ppm"]
    assert b"65535" in a["synth_0000.ppm"][:20]


def test_infer_modes_identical(tmp_path, data_dir, weights, capsys):
    raw = str(data_dir / "synth_0000.braw")
    common = ["infer", "--weights", str(weights), "--input", raw]
    assert main(common + ["--output", str(tmp_path / "s.ppm")]) == 0
    assert main(common + ["--output", str(tmp_path / "p.ppm"), "--branch-mode", "parallel",
                          "--threads", "8", "--report-mem", "--depth", "8"]) == 0
    assert (tmp_path / "s.ppm").read_bytes() == (tmp_path / "p.ppm").read_bytes()
    assert "peak activation memory" in capsys.readouterr().out
    assert main(common + ["--output", str(tmp_path / "d.ppm"), "--depth", "16"]) == 0
    assert read_rgb(tmp_path / "d.ppm").shape == (48, 48, 3)


def test_train_outputs_and_threads(tmp_path, data_dir):
    sched = tmp_path / "s.ini"
    sched.write_text("[schedule]\nbatch_size = 2\nseed = 3\naugment = true\n\n"
                     "[stage1]\nepochs = 2\nlr = 0.001\nw_mse = 1\n\n"
                     "[stage2]\nepochs = 1\nlr = 0.001\nw_mse = 1\nw_ssim = 2\nnormalize = true\n")
    outs = []
    for threads in ("1", "8"):
        out = tmp_path / f"w{threads}.misp"
        assert main(["train", "--data", str(data_dir), "--schedule", str(sched), "--out", str(out),
                     "--multiplier", "0.25", "--seed", "5", "--threads", threads]) == 0
        outs.append(out)
    assert outs[0].read_bytes() == outs[1].read_bytes()
    hist = (tmp_path / "w1.misp.history.tsv").read_text().splitlines()
    assert hist[0] == "stage\tepoch\tloss\tpsnr_db" and len(hist) == 4
    resumed = tmp_path / "r.misp"
    assert main(["train", "--data", str(data_dir), "--schedule", str(sched), "--out", str(resumed),
                 "--resume", str(outs[0]), "--max-iterations", "1"]) == 0
    assert load_weights(resumed).config == ModelConfig(0.25)


def test_eval_report(tmp_path, data_dir, weights):
    report = tmp_path / "r.tsv"
    assert main(["eval", "--weights", str(weights), "--data", str(data_dir), "--report", str(report)]) == 0
    lines = report.read_text().splitlines()
    assert [l.split("\t")[0] for l in lines[1:4]] == ["synth_0000", "synth_0001", "synth_0002"]
    assert lines[-1].startswith("# mean over 3 images")


def test_bench(tmp_path, capsys):
    rep = tmp_path / "bench.txt"
    assert main(["bench", "--resolution", "64x48", "--reps", "1", "--multiplier", "0.25",
                 "--mode", "parallel", "--report", str(rep)]) == 0
    assert rep.read_text().startswith("# name\tmacs")


def test_gradcheck_exit_zero(capsys):
    assert main(["gradcheck", "--depth", "0.25"]) == 0
    assert capsys.readouterr().out.splitlines()[-1].startswith("PASS")


@pytest.mark.parametrize("argv", [
    ["infer", "--weights", "w"],
    ["synth", "--out", "d", "--bogus"],
    ["bench", "--resolution", "100"],
    ["bench", "--resolution", "65x64"],
    ["synth", "--out", "d", "--count", "0"],
    ["infer", "--weights", "w", "--input", "x", "--output", "y", "--depth", "12"],
    ["fly"],
    [],
])
def test_usage_errors_exit_one(argv, capsys):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) >= 1 and "--help" in err[-1]


def test_semantic_usage_error(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--size", "31"]) == 1
    assert "--help" in capsys.readouterr().err


def test_runtime_failure_exit_two(tmp_path, data_dir, capsys):
    assert main(["infer", "--weights", str(tmp_path / "nope"), "--input", "x", "--output", "y"]) == 2
    bad = tmp_path / "bad.misp"
    bad.write_bytes(b"MISP\x01\x00garbage")
    out = tmp_path / "y.ppm"
    assert main(["infer", "--weights", str(bad), "--input", str(data_dir / "synth_0000.braw"),
                 "--output", str(out)]) == 2
    assert not out.exists()
    assert main(["eval", "--weights", str(bad), "--data", str(tmp_path)]) == 2


def test_help_documents_every_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
    assert "w_ssim" in sub.choices["train"].format_help()


def test_console_script(tmp_path):
    r = subprocess.run([sys.executable, "-m", "microisp", "synth", "--out", str(tmp_path),
                        "--count", "1", "--size", "32"], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "microisp", "synth", "--nope"], capture_output=True, text=True)
    assert r.returncode == 1
