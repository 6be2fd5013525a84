import json
import subprocess
import sys

import numpy as np
import pytest

from hact.cli import main
from hact.graph_build import HactGraph
from hact.pipeline import read_image, write_image
from hact.stain_norm import StainBasis
from hact.synthetic import render_he_image, two_stain_image

SMALL = {"hidden_dim": 8, "embedding_dim": 8, "classifier_hidden": 8, "batch_size": 8, "learning_rate": 0.01}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "config.json").write_text(json.dumps(SMALL))
    assert main(["synth-data", "--output", str(root / "data"), "--n-per-class", "9", "--seed", "1"]) == 0
    return root


def test_synth_train_eval(workspace, capsys):
    root = workspace
    manifest = str(root / "data" / "manifest.jsonl")
    cfg = str(root / "config.json")
    assert main(["train", "--manifest", manifest, "--config", cfg, "--epochs", "3", "--output", str(root / "run"), "--quiet"]) == 0
    log = json.loads((root / "run" / "train_log.json").read_text())
    assert [e["epoch"] for e in log] == [1, 2, 3]
    assert main(["eval", "--checkpoint", str(root / "run" / "best.ckpt"), "--manifest", manifest, "--output", str(root / "m.json")]) == 0
    metrics = json.loads((root / "m.json").read_text())
    n_test = sum('"test"' in line for line in (root / "data" / "manifest.jsonl").read_text().splitlines())
    assert sum(map(sum, metrics["confusion"])) == n_test
    assert "weighted F1" in capsys.readouterr().out


def test_train_resume_from_cli(workspace):
    root = workspace
    manifest = str(root / "data" / "manifest.jsonl")
    cfg = str(root / "config.json")
    args = ["train", "--manifest", manifest, "--config", cfg, "--quiet"]
    assert main(args + ["--epochs", "2", "--output", str(root / "a")]) == 0
    assert main(args + ["--epochs", "2", "--output", str(root / "b"), "--resume", str(root / "a" / "last.ckpt")]) == 0
    assert (root / "a" / "best.ckpt").read_bytes() == (root / "b" / "best.ckpt").read_bytes()


def test_train_with_seeds(workspace):
    root = workspace
    out = root / "seeds"
    args = ["train", "--manifest", str(root / "data" / "manifest.jsonl"), "--config", str(root / "config.json")]
    assert main(args + ["--epochs", "1", "--seeds", "0", "1", "--output", str(out), "--quiet"]) == 0
    summary = json.loads((out / "seeds_summary.json").read_text())
    assert summary["seeds"] == [0, 1] and "std_weighted_f1" in summary


def test_ablate_grid(workspace):
    root = workspace
    out = root / "ablate.json"
    args = [
        "ablate", "--manifest", str(root / "data" / "manifest.jsonl"), "--config", str(root / "config.json"),
        "--epochs", "1", "--seeds", "0", "--features", "morph", "none", "--layer-types", "gin",
        "--jk-modes", "none", "--models", "hact", "cg", "--output", str(out),
    ]
    assert main(args) == 0
    rows = json.loads(out.read_text())
    assert len(rows) == 4
    assert {(r["features"], r["model"]) for r in rows} == {("morph", "hact"), ("morph", "cg"), ("none", "hact"), ("none", "cg")}


def test_gradcheck_command(capsys):
    args = ["gradcheck", "--n-graphs", "3", "--max-cells", "8", "--max-regions", "3", "--max-entries", "3", "--jk", "none"]
    assert main(args) == 0
    assert "max relative error" in capsys.readouterr().out


def test_stain_normalize_command(tmp_path, rng):
    src, ref = two_stain_image(rng, 48), two_stain_image(rng, 48)
    write_image(src.image, tmp_path / "src.png")
    write_image(ref.image, tmp_path / "ref.png")
    args = ["stain-normalize", "--input", str(tmp_path / "src.png"), "--target", str(tmp_path / "ref.png")]
    assert main(args + ["--output", str(tmp_path / "out.png"), "--save-basis", str(tmp_path / "basis.json")]) == 0
    out = read_image(tmp_path / "out.png")
    assert out.shape == src.image.shape
    np.testing.assert_array_equal(out[~src.foreground], src.image[~src.foreground])
    StainBasis.load(tmp_path / "basis.json")
    args = ["stain-normalize", "--input", str(tmp_path / "src.png"), "--target-basis", str(tmp_path / "basis.json")]
    assert main(args + ["--output", str(tmp_path / "out2.png")]) == 0
    np.testing.assert_array_equal(read_image(tmp_path / "out2.png"), out)


def test_build_graph_from_image(tmp_path, rng):
    sample = render_he_image(rng)
    write_image(sample.image, tmp_path / "img.png")
    np.savetxt(tmp_path / "nuclei.csv", sample.nuclei.centroids, delimiter=",", fmt="%d")
    args = [
        "build-graph", "--image", str(tmp_path / "img.png"), "--nuclei", str(tmp_path / "nuclei.csv"),
        "--out", str(tmp_path / "g.json"), "--n-segments", "30", "--superpixels-out", str(tmp_path / "sp.png"),
    ]
    assert main(args) == 0
    g = HactGraph.load(tmp_path / "g.json")
    assert g.cell_graph.node_count == len(sample.nuclei)
    assert (tmp_path / "sp.png").exists()


def test_build_graphs_from_image_manifest(tmp_path):
    assert main(["synth-data", "--kind", "images", "--n-per-class", "3", "--output", str(tmp_path / "img")]) == 0
    args = ["build-graph", "--manifest", str(tmp_path / "img" / "manifest.jsonl"), "--output", str(tmp_path / "graphs")]
    assert main(args + ["--n-segments", "20", "--feature-mode", "none"]) == 0
    lines = (tmp_path / "graphs" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 1 + 6


def test_errors_return_code_two(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--manifest", str(tmp_path / "m.jsonl")]) == 2
    assert "error" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "hact", "--help"], capture_output=True, text=True, check=True)
    for cmd in ("stain-normalize", "build-graph", "synth-data", "train", "eval", "gradcheck", "ablate"):
        assert cmd in out.stdout
