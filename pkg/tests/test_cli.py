import json

import pytest

from fmtk import cli
from fmtk.cli import dispatch, resolve, worker_cap

TINY = ["--epochs", "1", "--batch", "8", "--image-size", "16"]


def _run(*argv):
    return dispatch([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert _run("gen-data", "--count", 40, "--seed", 7, "--out", root / "d", "--image-size", 16) == 0
    assert _run("train-teacher", "--manifest", root / "d" / "manifest.csv", *TINY, "--out", root / "t") == 0
    assert _run("pseudo-label", "--teacher", root / "t" / "teacher_best.fmtk", "--manifest",
                root / "d" / "manifest.csv", "--image-size", 16, "--out", root / "q") == 0
    assert _run("pretrain", "--manifest", root / "d" / "manifest.csv", *TINY, "--out", root / "st") == 0
    return root


def test_no_arguments_is_usage_error(capsys):
    assert dispatch([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_command_and_bad_flag():
    assert dispatch(["frobnicate"]) == 1
    assert dispatch(["gen-data", "--count", "x", "--out", "o"]) == 1
    assert dispatch(["gen-data", "--out", "o"]) == 1  # --count is required


def test_gen_data_deterministic(tmp_path):
    for name in ("a", "b"):
        assert _run("gen-data", "--count", 100, "--style", "3class", "--seed", 7, "--out", tmp_path / name) == 0
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
    run = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
    assert run["command"] == "gen-data" and run["seed"] == 7 and run["config"]["count"] == 100


def test_data_error_exit_codes(tmp_path, workspace):
    assert _run("gen-data", "--count", 5, "--out", tmp_path / "x") == 2
    assert _run("evaluate", "--model", tmp_path / "missing.fmtk", "--manifest",
                workspace / "d" / "manifest.csv", "--out", tmp_path / "e") == 2
    assert _run("gradcam", "--model", workspace / "st" / "pretrain_best.fmtk", "--image",
                workspace / "d" / "images" / "img_00000.png", "--target", "B:9", "--image-size", 16,
                "--out", tmp_path / "g") == 2


def test_internal_error_exit_code(tmp_path, monkeypatch):
    def boom(cfg, out, run):
        raise RuntimeError("boom")

    monkeypatch.setitem(cli.HANDLERS, "gen-data", boom)
    assert _run("gen-data", "--count", 20, "--out", tmp_path) == 3


def test_precedence_flags_over_file_over_defaults(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"count": 30, "seed": 3, "out": "from-file"}))
    got = resolve("gen-data", {"seed": 9}, cfg)
    assert got["seed"] == 9 and got["count"] == 30 and got["out"] == "from-file"
    assert got["style"] == "3class"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert _run("gen-data", "--config", cfg, "--count", 20, "--out", tmp_path / "o") == 2


def test_replay_from_run_manifest(tmp_path, workspace):
    m = workspace / "d" / "manifest.csv"
    assert _run("pretrain", "--manifest", m, *TINY, "--seed", 4, "--out", tmp_path / "a") == 0
    assert _run("pretrain", "--config", tmp_path / "a" / "run_manifest.json", "--out", tmp_path / "b") == 0
    for name in ("pretrain_best.fmtk", "pretrain_last.fmtk", "pretrain_record.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_downstream_commands(tmp_path, workspace):
    q = workspace / "q" / "manifest.csv"
    st = workspace / "st" / "pretrain_best.fmtk"
    assert _run("finetune", "--model", st, "--manifest", q, *TINY, "--out", tmp_path / "mt") == 0
    mt = tmp_path / "mt" / "finetune_best.fmtk"
    assert _run("evaluate", "--model", mt, "--manifest", q, "--image-size", 16, "--out", tmp_path / "ev") == 0
    doc = json.loads((tmp_path / "ev" / "evaluation.json").read_text())
    assert "details" in doc and "overall" in doc
    assert (tmp_path / "ev" / "confusion_normalized.csv").is_file()
    assert _run("compare", "--model-a", mt, "--model-b", st, "--manifest", q, "--image-size", 16,
                "--n-boot", 100, "--out", tmp_path / "cmp") == 0
    assert "macro_f1" in (tmp_path / "cmp" / "comparison.txt").read_text()
    assert _run("gradcam", "--model", mt, "--image", workspace / "d" / "images" / "img_00001.png",
                "--target", "A:1", "--image-size", 16, "--out", tmp_path / "gc") == 0
    assert (tmp_path / "gc" / "overlay.png").is_file() and (tmp_path / "gc" / "heatmap.csv").is_file()
    assert _run("export-embeddings", "--model", mt, "--manifest", q, "--image-size", 16,
                "--out", tmp_path / "emb") == 0
    assert len((tmp_path / "emb" / "embeddings.csv").read_text().splitlines()) == 41
    assert _run("tune-lambdas", "--model", st, "--manifest", q, "--grid", "0.5:1", "--tune-epochs", 1,
                "--batch", 8, "--image-size", 16, "--out", tmp_path / "tune") == 0
    assert json.loads((tmp_path / "tune" / "lambdas.json").read_text())["best"] == [0.5, 1.0]


def test_finetune_without_pseudo_labels_is_data_error(tmp_path, workspace):
    assert _run("finetune", "--model", workspace / "st" / "pretrain_best.fmtk", "--manifest",
                workspace / "d" / "manifest.csv", *TINY, "--out", tmp_path) == 2


def test_worker_cap(monkeypatch):
    monkeypatch.delenv("FMTK_THREADS", raising=False)
    assert worker_cap(4) == 4
    monkeypatch.setenv("FMTK_THREADS", "2")
    assert worker_cap(4) == 2 and worker_cap(1) == 1
    monkeypatch.setenv("FMTK_THREADS", "zero")
    with pytest.raises(Exception, match="FMTK_THREADS"):
        worker_cap(2)
