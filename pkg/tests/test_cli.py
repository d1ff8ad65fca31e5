import io

import pytest

from numstr.cli import run
from numstr.data import load_dataset, read_pgm

SMALL_TRAIN = ["--epochs", "2", "--patience", "2", "--batch-size", "8", "--scales", "64x64,64x96"]


def cli(*argv):
    out = io.StringIO()
    code = run([str(a) for a in argv], out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory, mnist_paths):
    images, labels = mnist_paths
    d = tmp_path_factory.mktemp("synth") / "d"
    code, out = cli("synth", "--digits-images", images, "--digits-labels", labels, "--out", d, "--count", 40, "--min-len", 2, "--max-len", 3, "--seed", 42)
    assert code == 0, out
    return d


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("model")
    code, _ = cli("anchors", "--data", synth_dir, "--k", 3, "--seed", 1, "--out", root / "anchors.txt")
    assert code == 0
    code, out = cli("train", "--train", synth_dir, "--val", synth_dir, "--anchors", root / "anchors.txt", "--out", root / "m.nsrm", *SMALL_TRAIN)
    assert code == 0, out
    return root / "m.nsrm"


def test_synth_layout(synth_dir):
    sizes = {split: len(load_dataset(synth_dir / split)) for split in ("train", "val", "test")}
    assert sizes == {"train": 28, "val": 6, "test": 6}
    assert (synth_dir / "train" / "annotations.tsv").exists()


def test_synth_byte_identical_rerun(synth_dir, tmp_path, mnist_paths):
    images, labels = mnist_paths
    code, _ = cli("synth", "--digits-images", images, "--digits-labels", labels, "--out", tmp_path / "again", "--count", 40, "--min-len", 2, "--max-len", 3, "--seed", 42)
    assert code == 0
    for f in sorted(synth_dir.rglob("*")):
        if f.is_file():
            assert (tmp_path / "again" / f.relative_to(synth_dir)).read_bytes() == f.read_bytes()


def test_anchors_rows(synth_dir):
    code, out = cli("anchors", "--data", synth_dir, "--k", 3, "--seed", 1)
    rows = out.strip().splitlines()
    assert code == 0 and len(rows) == 3
    assert all(len(r.split()) == 2 for r in rows)
    assert cli("anchors", "--data", synth_dir, "--k", 3, "--seed", 1)[1] == out


def test_train_byte_identical(trained, synth_dir, tmp_path):
    anchors = trained.parent / "anchors.txt"
    code, _ = cli("train", "--train", synth_dir, "--val", synth_dir, "--anchors", anchors, "--out", tmp_path / "m2.nsrm", *SMALL_TRAIN)
    assert code == 0
    assert (tmp_path / "m2.nsrm").read_bytes() == trained.read_bytes()
    assert (tmp_path / "m2.nsrm.meta").read_bytes() == (trained.parent / "m.nsrm.meta").read_bytes()


def test_predict_and_overlay(trained, synth_dir, tmp_path):
    img = synth_dir / "test" / "images" / "000000.pgm"
    code, out = cli("predict", "--model", trained, "--image", img, "--overlay", tmp_path / "o.pgm", "--conf", "0.01")
    assert code == 0
    name, text, prob, boxes = out.rstrip("\n").split("\t")
    assert name == "000000.pgm" and text.isdigit() or text == ""
    assert 0.0 <= float(prob) <= 1.0
    assert len([b for b in boxes.split(";") if b]) == len(text)
    assert read_pgm(tmp_path / "o.pgm").shape == read_pgm(img).shape


def test_eval_table_and_tsv(trained, synth_dir, tmp_path):
    code, out = cli("eval", "--model", trained, "--data", synth_dir, "--tsv", tmp_path / "r.tsv")
    assert code == 0
    assert out.splitlines()[0].split() == ["Length", "Samples", "Accuracy", "Classification", "Detection"]
    assert (tmp_path / "r.tsv").read_text().startswith("length\taccuracy\tclass_err\tdet_err\tsamples")


def test_context_exp_runs(synth_dir, tmp_path, mnist_paths):
    images, labels = mnist_paths
    iso = tmp_path / "iso"
    assert cli("synth", "--digits-images", images, "--digits-labels", labels, "--out", iso, "--count", 30, "--min-len", 1, "--max-len", 1)[0] == 0
    code, out = cli("context-exp", "--isolated", iso, "--strings", synth_dir, "--out", tmp_path / "ctx", *SMALL_TRAIN)
    assert code == 0, out
    assert "isolated-trained" in out and "gap" in out
    assert (tmp_path / "ctx" / "isolated.nsrm").exists() and (tmp_path / "ctx" / "strings.tsv").exists()


def test_usage_errors(tmp_path, mnist_paths):
    images, labels = mnist_paths
    assert cli()[0] == 1
    assert cli("frobnicate")[0] == 1
    assert cli("synth", "--bogus")[0] == 1
    assert cli("anchors")[0] == 1
    code, _ = cli("synth", "--digits-images", images, "--digits-labels", labels, "--out", tmp_path / "x", "--min-len", 4, "--max-len", 2)
    assert code == 1
    assert not (tmp_path / "x").exists()


def test_data_errors(tmp_path, mnist_paths):
    images, _ = mnist_paths
    assert cli("synth", "--digits-images", images, "--digits-labels", tmp_path / "nope", "--out", tmp_path / "x")[0] == 2
    bad = tmp_path / "bad-labels"
    bad.write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x05\x01")
    assert cli("synth", "--digits-images", images, "--digits-labels", bad, "--out", tmp_path / "y")[0] == 2
    assert not (tmp_path / "y").exists()
    assert cli("eval", "--model", tmp_path / "missing.nsrm", "--data", tmp_path)[0] == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_error_exit_code(synth_dir, trained, tmp_path):
    anchors = trained.parent / "anchors.txt"
    code, _ = cli("train", "--train", synth_dir, "--val", synth_dir, "--anchors", anchors, "--out", tmp_path / "m.nsrm", *SMALL_TRAIN, "--lr", "1e6", "--final-lr", "1e6")
    assert code == 3


def test_config_file_precedence(synth_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# anchors settings\nk=2\nseed=1\n")
    code, out = cli("--config", cfg, "anchors", "--data", synth_dir)
    assert code == 0 and len(out.strip().splitlines()) == 2
    code, out = cli("--config", cfg, "anchors", "--data", synth_dir, "--k", 4)
    assert code == 0 and len(out.strip().splitlines()) == 4
    cfg.write_text("nonsense=1\n")
    assert cli("--config", cfg, "anchors", "--data", synth_dir)[0] == 1
