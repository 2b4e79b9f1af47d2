"""End-to-end tests for the command-line interface.

Each test drives ``convkit.cli.main`` in-process with a real argv list and
checks the exit code plus the files it leaves behind.  Exit codes: 0 on
success, 2 for bad input, 3 for engine failures, 4 when a protocol cannot
be satisfied by the data.
"""

import argparse
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from convkit import cli
from convkit.cli import build_parser, main
from convkit.features import FeatureMatrix, load_features, save_features
from convkit.network import load_spec, load_weights

SPEC224 = """\
input 3 224 224
c1 conv out=4 kernel=32x32 stride=32 act=relu
f1 fc out=8 act=relu
f2 fc out=2
sm softmax
"""

SPEC16 = """\
input 3 16 16
c1 conv out=4 kernel=4x4 stride=4 act=relu
f1 fc out=8 act=relu
f2 fc out=2
sm softmax
"""


def write_ppm(path, pixels):
    h, w, _ = pixels.shape
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def blob_features(path, n_per, dim=6, classes=("a", "b"), seed=0,
                  labeled=True):
    rng = np.random.default_rng(seed)
    rows, labels, ids = [], [], []
    for k, name in enumerate(classes):
        center = np.zeros(dim)
        center[k % dim] = 4.0
        rows.append(center + 0.3 * rng.standard_normal((n_per, dim)))
        labels += [name if labeled else None] * n_per
        ids += [f"{name}{i}" for i in range(n_per)]
    fm = FeatureMatrix(
        features=np.concatenate(rows).astype(np.float32),
        ids=ids, labels=labels, layer="f1", source_hash="cli-test")
    save_features(fm, path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "net224.spec").write_text(SPEC224)
    (root / "net16.spec").write_text(SPEC16)
    imgdir = root / "images"
    imgdir.mkdir()
    rng = np.random.default_rng(5)
    lines = []
    for i, label in enumerate(["a", "b", "a"]):
        pixels = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        write_ppm(imgdir / f"img{i}.ppm", pixels)
        lines.append(f"img{i}.ppm\t{label}")
    (imgdir / "images.tsv").write_text("\n".join(lines) + "\n")
    blob_features(root / "feats.fmx", n_per=16, seed=0)
    blob_features(root / "source.fmx", n_per=10, seed=1)
    blob_features(root / "target.fmx", n_per=8, seed=2)
    blob_features(root / "small.fmx", n_per=6, dim=5, seed=3)
    blob_features(root / "wide.fmx", n_per=8, dim=600, seed=4)
    blob_features(root / "unlabeled.fmx", n_per=6, seed=5, labeled=False)
    return root


# ---------------------------------------------------------------------------
# parser shell


def test_no_subcommand_prints_help(capsys):
    assert main([]) == 2
    assert "usage:" in capsys.readouterr().out


def test_module_and_script_entry_points():
    proc = subprocess.run([sys.executable, "-m", "convkit", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "extract" in proc.stdout
    proc = subprocess.run(["convkit", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0


def test_every_flag_documents_itself():
    def walk(parser):
        for action in parser._actions:
            if isinstance(action, argparse._SubParsersAction):
                for sub in action.choices.values():
                    yield from walk(sub)
            else:
                yield action

    undocumented = [a.option_strings or a.dest
                    for a in walk(build_parser()) if not a.help]
    assert undocumented == []


def test_threads_flag_pins_environment(monkeypatch, workdir, tmp_path):
    for var in cli._THREAD_VARS:
        monkeypatch.setenv(var, "sentinel")
    rc = main(["--threads", "2", "profile",
               "--spec", str(workdir / "net16.spec"), "--random-weights",
               "--repeats", "3", "--out", str(tmp_path / "prof.csv")])
    assert rc == 0
    for var in cli._THREAD_VARS:
        assert os.environ[var] == "2"


def test_threads_default_from_environment(monkeypatch):
    monkeypatch.setenv("CONVKIT_THREADS", "3")
    args = build_parser().parse_args(["embed", "--features", "x"])
    assert args.threads == 3


def test_threads_zero_rejected():
    with pytest.raises(SystemExit) as exc:
        main(["--threads", "0"])
    assert exc.value.code == 2


# ---------------------------------------------------------------------------
# extract


def extract_args(workdir, out, layer="f1", extra=()):
    return ["extract", "--spec", str(workdir / "net224.spec"),
            "--random-weights", "--seed", "1",
            "--images", str(workdir / "images" / "images.tsv"),
            "--layer", layer, "--out", str(out), *extra]


def test_extract_writes_features(workdir, tmp_path, capsys):
    out = tmp_path / "out.fmx"
    csv = tmp_path / "out.csv"
    assert main(extract_args(workdir, out, extra=["--csv", str(csv)])) == 0
    assert "extracted 3 x 8" in capsys.readouterr().out
    fm = load_features(out)
    assert fm.features.shape == (3, 8)
    assert fm.ids == ["img0.ppm", "img1.ppm", "img2.ppm"]
    assert fm.labels == ["a", "b", "a"]
    assert fm.layer == "f1"
    assert csv.read_text().startswith("id,label,f0,")


def test_extract_reruns_byte_identical(workdir, tmp_path):
    first = tmp_path / "one.fmx"
    second = tmp_path / "two.fmx"
    assert main(extract_args(workdir, first)) == 0
    assert main(extract_args(workdir, second)) == 0
    assert first.read_bytes() == second.read_bytes()


def test_extract_mean_override_changes_features(workdir, tmp_path):
    plain = tmp_path / "plain.fmx"
    zeroed = tmp_path / "zeroed.fmx"
    assert main(extract_args(workdir, plain, layer="f2")) == 0
    assert main(extract_args(workdir, zeroed, layer="f2",
                             extra=["--mean", "0,0,0"])) == 0
    a = load_features(plain).features
    b = load_features(zeroed).features
    assert not np.array_equal(a, b)


def test_extract_unknown_layer_exits_2(workdir, tmp_path, capsys):
    rc = main(extract_args(workdir, tmp_path / "x.fmx", layer="fc99"))
    assert rc == 2
    assert "fc99" in capsys.readouterr().err


def test_extract_missing_weights_exits_2(workdir, tmp_path, capsys):
    missing = str(workdir / "nope.dcf")
    rc = main(["extract", "--spec", str(workdir / "net224.spec"),
               "--weights", missing,
               "--images", str(workdir / "images" / "images.tsv"),
               "--layer", "f1", "--out", str(tmp_path / "x.fmx")])
    assert rc == 2
    assert "nope.dcf" in capsys.readouterr().err


def test_extract_without_output_exits_2(workdir, capsys):
    rc = main(["extract", "--spec", str(workdir / "net224.spec"),
               "--random-weights",
               "--images", str(workdir / "images" / "images.tsv"),
               "--layer", "f1"])
    assert rc == 2
    assert "--out" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval


def test_eval_fixed_split_report(workdir, tmp_path, capsys):
    report = tmp_path / "report.json"
    confusion = tmp_path / "confusion.csv"
    rc = main(["eval", "--features", str(workdir / "feats.fmx"),
               "--train-per-class", "4", "--splits", "2", "--seed", "3",
               "--reg", "0.01", "--report", str(report),
               "--confusion", str(confusion)])
    assert rc == 0
    assert "mean per-class accuracy" in capsys.readouterr().out
    data = json.loads(report.read_text())
    assert data["protocol"] == "fixed-split"
    assert data["splits"] == 2
    assert data["classes"] == ["a", "b"]
    assert data["chosen_reg"] == 0.01
    assert data["extra"]["dropout"] is False
    assert 0.0 <= data["mean"] <= 1.0
    assert confusion.read_text().splitlines()[0] == "split,true\\pred,a,b"


def test_eval_rerun_byte_identical(workdir, tmp_path):
    args = lambda p: ["eval", "--features", str(workdir / "feats.fmx"),
                      "--train-per-class", "4", "--splits", "2",
                      "--reg", "0.01", "--report", str(p)]
    first, second = tmp_path / "a.json", tmp_path / "b.json"
    assert main(args(first)) == 0
    assert main(args(second)) == 0
    assert first.read_bytes() == second.read_bytes()


def test_eval_grid_selection(workdir, tmp_path):
    report = tmp_path / "report.json"
    rc = main(["eval", "--features", str(workdir / "feats.fmx"),
               "--train-per-class", "4", "--splits", "2",
               "--grid", "0.0001,0.01", "--crossval-train", "2",
               "--crossval-val", "2", "--crossval-rounds", "2",
               "--report", str(report)])
    assert rc == 0
    data = json.loads(report.read_text())
    assert data["grid"] == [0.0001, 0.01]
    assert data["chosen_reg"] in data["grid"]


def test_eval_grid_needs_crossval_sizes(workdir, tmp_path, capsys):
    rc = main(["eval", "--features", str(workdir / "feats.fmx"),
               "--train-per-class", "4", "--grid", "0.01",
               "--report", str(tmp_path / "r.json")])
    assert rc == 2
    assert "--crossval-train" in capsys.readouterr().err


def test_eval_needs_reg_or_grid(workdir, tmp_path):
    rc = main(["eval", "--features", str(workdir / "feats.fmx"),
               "--train-per-class", "4",
               "--report", str(tmp_path / "r.json")])
    assert rc == 2


def test_eval_oversized_split_exits_4(workdir, tmp_path, capsys):
    rc = main(["eval", "--features", str(workdir / "feats.fmx"),
               "--train-per-class", "100", "--reg", "0.01",
               "--report", str(tmp_path / "r.json")])
    assert rc == 4
    assert "protocol infeasible" in capsys.readouterr().err


def test_eval_unlabeled_rows_exit_2(workdir, tmp_path):
    rc = main(["eval", "--features", str(workdir / "unlabeled.fmx"),
               "--train-per-class", "2", "--reg", "0.01",
               "--report", str(tmp_path / "r.json")])
    assert rc == 2


def test_eval_transfer_modes(workdir, tmp_path):
    for mode in ("S", "T", "ST"):
        report = tmp_path / f"report_{mode}.json"
        rc = main(["eval", "--source", str(workdir / "source.fmx"),
                   "--target", str(workdir / "target.fmx"), "--mode", mode,
                   "--source-per-class", "4", "--target-per-class", "2",
                   "--splits", "2", "--reg", "0.01",
                   "--report", str(report)])
        assert rc == 0
        data = json.loads(report.read_text())
        assert data["protocol"] == f"domain-{mode}"
        assert data["splits"] == 2
        assert data["classes"] == ["a", "b"]


def test_eval_transfer_needs_all_flags(workdir, tmp_path, capsys):
    rc = main(["eval", "--source", str(workdir / "source.fmx"),
               "--mode", "T", "--reg", "0.01",
               "--report", str(tmp_path / "r.json")])
    assert rc == 2
    assert "transfer eval needs" in capsys.readouterr().err


def test_eval_curve_report_and_plot(workdir, tmp_path, capsys):
    report = tmp_path / "curve.json"
    plot = tmp_path / "curve.svg"
    rc = main(["eval", "--features", str(workdir / "feats.fmx"),
               "--curve", "2,4", "--splits", "2", "--reg", "0.01",
               "--report", str(report), "--plot", str(plot)])
    assert rc == 0
    assert "curve over sizes [2, 4]" in capsys.readouterr().out
    data = json.loads(report.read_text())
    assert data["protocol"] == "curve"
    assert data["extra"]["curve_sizes"] == [2, 4]
    assert len(data["extra"]["curve_mean"]) == 2
    assert plot.read_bytes().startswith(b"<?xml")


def test_eval_curve_needs_fixed_reg(workdir, tmp_path, capsys):
    rc = main(["eval", "--features", str(workdir / "feats.fmx"),
               "--curve", "2,4", "--report", str(tmp_path / "r.json")])
    assert rc == 2
    assert "--reg" in capsys.readouterr().err


def test_eval_curve_rejects_transfer_flags(workdir, tmp_path):
    rc = main(["eval", "--features", str(workdir / "feats.fmx"),
               "--curve", "2", "--reg", "0.01", "--mode", "T",
               "--report", str(tmp_path / "r.json")])
    assert rc == 2


# ---------------------------------------------------------------------------
# embed


def test_embed_coords_and_scatter(workdir, tmp_path, capsys):
    out = tmp_path / "coords.csv"
    plot = tmp_path / "scatter.svg"
    args = ["embed", "--features", str(workdir / "small.fmx"),
            "--perplexity", "3", "--iters", "50", "--seed", "2",
            "--out", str(out), "--plot", str(plot)]
    assert main(args) == 0
    assert "embedded 12 points" in capsys.readouterr().out
    lines = out.read_text().splitlines()
    assert lines[0] == "id,label,x,y"
    assert len(lines) == 13
    assert plot.read_bytes().startswith(b"<?xml")
    again_out = tmp_path / "coords2.csv"
    again_plot = tmp_path / "scatter2.svg"
    assert main(["embed", "--features", str(workdir / "small.fmx"),
                 "--perplexity", "3", "--iters", "50", "--seed", "2",
                 "--out", str(again_out), "--plot", str(again_plot)]) == 0
    assert again_out.read_bytes() == out.read_bytes()
    assert again_plot.read_bytes() == plot.read_bytes()


def test_embed_limit_rows(workdir, tmp_path):
    out = tmp_path / "coords.csv"
    rc = main(["embed", "--features", str(workdir / "small.fmx"),
               "--perplexity", "2", "--iters", "30", "--limit", "8",
               "--out", str(out)])
    assert rc == 0
    assert len(out.read_text().splitlines()) == 9


def test_embed_projects_wide_features(workdir, tmp_path):
    out = tmp_path / "coords.csv"
    rc = main(["embed", "--features", str(workdir / "wide.fmx"),
               "--perplexity", "3", "--iters", "20", "--out", str(out)])
    assert rc == 0
    assert len(out.read_text().splitlines()) == 17


def test_embed_infeasible_perplexity_exits_4(workdir, tmp_path, capsys):
    rc = main(["embed", "--features", str(workdir / "small.fmx"),
               "--perplexity", "50", "--out", str(tmp_path / "c.csv")])
    assert rc == 4
    assert "protocol infeasible" in capsys.readouterr().err


def test_embed_without_output_exits_2(workdir):
    rc = main(["embed", "--features", str(workdir / "small.fmx")])
    assert rc == 2


def test_embed_bad_group_map_exits_2(workdir, tmp_path):
    groups = tmp_path / "groups.tsv"
    groups.write_text("cat\tpets\ncat\twild\n")
    rc = main(["embed", "--features", str(workdir / "small.fmx"),
               "--perplexity", "3", "--iters", "20",
               "--plot", str(tmp_path / "s.svg"), "--groups", str(groups)])
    assert rc == 2


# ---------------------------------------------------------------------------
# profile


def test_profile_table_and_artifacts(workdir, tmp_path, capsys):
    out = tmp_path / "profile.csv"
    plot = tmp_path / "pie.svg"
    rc = main(["profile", "--spec", str(workdir / "net16.spec"),
               "--random-weights", "--batch", "2", "--repeats", "3",
               "--out", str(out), "--plot", str(plot)])
    assert rc == 0
    table = capsys.readouterr().out
    assert "layer" in table and "total" in table
    header = out.read_text().splitlines()[0]
    assert header == "layer,kind,mean_ms,std_ms,median_ms,total_ms,share"
    assert plot.read_bytes().startswith(b"<?xml")


def test_profile_too_few_repeats_exits_2(workdir, tmp_path):
    rc = main(["profile", "--spec", str(workdir / "net16.spec"),
               "--random-weights", "--repeats", "2",
               "--out", str(tmp_path / "p.csv")])
    assert rc == 2


# ---------------------------------------------------------------------------
# train


def npz_dataset(path, n=12, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 3, 16, 16)).astype(np.float32)
    X[: n // 2, 0] += 2.0
    y = np.array([0] * (n // 2) + [1] * (n - n // 2))
    np.savez(path, X=X, y=y)


def test_train_from_npz(workdir, tmp_path, capsys):
    data = tmp_path / "data.npz"
    npz_dataset(data)
    out = tmp_path / "model.dcf"
    losses = tmp_path / "losses.csv"
    rc = main(["train", "--spec", str(workdir / "net16.spec"),
               "--data", str(data), "--epochs", "3", "--batch", "4",
               "--lr", "0.01", "--out", str(out), "--losses", str(losses)])
    assert rc == 0
    assert "final loss" in capsys.readouterr().out
    bundle = load_weights(out, load_spec(workdir / "net16.spec"))
    assert set(bundle.params) == {"c1", "f1", "f2"}
    lines = losses.read_text().splitlines()
    assert lines[0] == "epoch,loss"
    assert len(lines) == 4


def test_train_from_image_directory(workdir, tmp_path):
    out = tmp_path / "model.dcf"
    rc = main(["train", "--spec", str(workdir / "net224.spec"),
               "--data", str(workdir / "images"), "--epochs", "1",
               "--batch", "4", "--out", str(out)])
    assert rc == 0
    assert out.exists()


def test_train_npz_missing_labels_exits_2(workdir, tmp_path, capsys):
    data = tmp_path / "data.npz"
    np.savez(data, X=np.zeros((4, 3, 16, 16), dtype=np.float32))
    rc = main(["train", "--spec", str(workdir / "net16.spec"),
               "--data", str(data), "--out", str(tmp_path / "m.dcf")])
    assert rc == 2
    assert "needs arrays X and y" in capsys.readouterr().err


def test_train_divergence_exits_3(workdir, tmp_path, capsys):
    data = tmp_path / "data.npz"
    npz_dataset(data)
    with np.errstate(over="ignore", invalid="ignore"):
        rc = main(["train", "--spec", str(workdir / "net16.spec"),
                   "--data", str(data), "--epochs", "5", "--batch", "4",
                   "--lr", "1e12", "--out", str(tmp_path / "m.dcf")])
    assert rc == 3
    assert "engine error" in capsys.readouterr().err
