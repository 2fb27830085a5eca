"""
Tests for the command-line harness: exit codes, run directories and report formats.
"""

import os
from pathlib import Path

import pytest


GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(autouse=True)
def setup_and_teardown(tmp_path):
    """Isolate the run registry per test."""
    import mgcn.db as db_module

    db_module.reset_db()
    os.environ["MGCN_DB_PATH"] = str(tmp_path / "test.db")

    yield

    db_module.reset_db()
    if "MGCN_DB_PATH" in os.environ:
        del os.environ["MGCN_DB_PATH"]


def _train(out, *extra):
    from mgcn.cli import run

    argv = [
        "train", "--model", "cnn", "--synth", "5", "--img-size", "16",
        "--epochs", "2", "--batch-size", "4", "--seed", "3", "--out", str(out), *extra,
    ]
    return run(argv)


def _write_run(run_dir, model, head, train, validation, params):
    """Hand-written manifest and one-epoch history, as train would leave them."""
    run_dir.mkdir(parents=True)
    manifest = [
        f"model={model}", "img_size=16", "channels=1", "dataset=synth", "split=0.8",
        "epochs=1", "batch_size=32", "optimizer=adam", "learning_rate=0.001",
        "beta1=0.9", "beta2=0.999", "epsilon=1e-08", "seed=0", "threshold=0.5",
        f"params={params}", f"head={head}", "synth_per_class=5",
    ]
    (run_dir / "manifest.txt").write_text("\n".join(manifest) + "\n")

    lines = ["epochs=1"]
    for phase, (acc, prec, rec, loss) in (("train", train), ("validation", validation)):
        f1 = 2 * prec * rec / (prec + rec)
        lines += [
            f"epoch.1.{phase}.accuracy={acc!r}",
            f"epoch.1.{phase}.precision={prec!r}",
            f"epoch.1.{phase}.recall={rec!r}",
            f"epoch.1.{phase}.f1={f1!r}",
            f"epoch.1.{phase}.misclassification_rate={1.0 - acc!r}",
            f"epoch.1.{phase}.bce_loss={loss!r}",
            f"epoch.1.{phase}.degenerate=",
        ]
    (run_dir / "history.txt").write_text("\n".join(lines) + "\n")
    return run_dir


@pytest.fixture
def compared_runs(tmp_path):
    cnn = _write_run(
        tmp_path / "cnn-seed0", "cnn", "", (0.975, 0.96, 0.99, 0.07123), (0.95, 0.9412, 0.96, 0.15234), 1234
    )
    vgg = _write_run(
        tmp_path / "vgg", "vgg-mini", "vgg16", (0.9, 0.88, 0.92, 0.25), (0.875, 0.85, 0.9, 0.3), 5678
    )
    return cnn, vgg


class TestExitCodes:
    def test_unknown_model_is_usage_error(self, capsys):
        from mgcn.cli import run

        assert run(["train", "--model", "resnet", "--synth", "5"]) == 1
        assert "valid models" in capsys.readouterr().err

    def test_missing_model(self, capsys):
        from mgcn.cli import run

        assert run(["train", "--synth", "5"]) == 1
        assert "--model is required" in capsys.readouterr().err

    def test_data_and_synth_together(self, tmp_path):
        from mgcn.cli import run

        assert run(["train", "--model", "cnn", "--synth", "5", "--data", str(tmp_path)]) == 1

    def test_unknown_flag(self):
        from mgcn.cli import run

        assert run(["train", "--model", "cnn", "--bogus"]) == 1

    def test_compare_without_runs(self):
        from mgcn.cli import run

        assert run(["compare"]) == 1

    def test_evaluate_missing_checkpoint(self, tmp_path, capsys):
        from mgcn.cli import run

        assert run(["evaluate", "--checkpoint", str(tmp_path / "absent.mgcn"), "--synth", "2"]) == 2
        assert "checkpoint not found" in capsys.readouterr().err

    def test_missing_dataset_directory(self, tmp_path):
        from mgcn.cli import run

        code = run(["train", "--model", "cnn", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")])
        assert code == 2

    def test_unknown_config_key(self, tmp_path):
        from mgcn.cli import run

        cfg = tmp_path / "run.conf"
        cfg.write_text("epochs = 1\nmomentum = 0.9\n")
        assert run(["train", "--model", "cnn", "--synth", "5", "--config", str(cfg)]) == 1

    def test_head_on_model_without_heads(self, capsys):
        from mgcn.cli import run

        assert run(["summary", "--model", "alexnet", "--img-size", "67", "--head", "vgg16"]) == 1

    def test_grad_check_failure_is_numeric(self, monkeypatch, capsys):
        from mgcn import tensor
        from mgcn.cli import run

        original = tensor._conv2d_grads

        def flipped(g, saved):
            return tuple(-d for d in original(g, saved))

        monkeypatch.setattr(tensor, "_conv2d_grads", flipped)
        assert run(["grad-check", "--trials", "2"]) == 3
        captured = capsys.readouterr()
        assert "conv2d" in captured.err
        assert "FAIL" in captured.out


class TestTrain:
    def test_writes_run_directory(self, tmp_path, capsys):
        from mgcn.report import read_kv

        out = tmp_path / "run"
        assert _train(out) == 0
        assert {p.name for p in out.iterdir()} == {"model.mgcn", "history.txt", "manifest.txt"}
        manifest = read_kv(out / "manifest.txt")
        assert manifest["model"] == "cnn"
        assert manifest["dataset"] == "synth"
        assert read_kv(out / "history.txt")["epochs"] == "2"
        stdout = capsys.readouterr().out
        assert stdout.startswith("Performance Metrics of CNN (epoch 2)")
        assert "Misclassification Rate" in stdout

    def test_identical_runs_are_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert _train(a) == 0
        assert _train(b) == 0
        for name in ("model.mgcn", "history.txt", "manifest.txt"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_config_file_and_defaults(self, tmp_path):
        from mgcn.cli import run
        from mgcn.report import read_kv

        cfg = tmp_path / "run.conf"
        cfg.write_text("# desk-scale run\nmodel = cnn\nsynth = 5\nimg-size = 16\nepochs = 5\n")
        out = tmp_path / "run"
        assert run(["train", "--config", str(cfg), "--epochs", "1", "--out", str(out)]) == 0
        manifest = read_kv(out / "manifest.txt")
        assert manifest["epochs"] == "1"
        assert manifest["img_size"] == "16"
        assert manifest["batch_size"] == "32"
        assert manifest["optimizer"] == "adam"
        assert float(manifest["learning_rate"]) == 1e-3
        assert float(manifest["split"]) == 0.8

    def test_source_flag_replaces_config_source(self, tmp_path):
        from mgcn.cli import run
        from mgcn.report import read_kv

        cfg = tmp_path / "run.conf"
        cfg.write_text(f"data = {tmp_path / 'nowhere'}\nepochs = 1\nbatch-size = 4\n")
        out = tmp_path / "run"
        code = run([
            "train", "--model", "cnn", "--synth", "4", "--img-size", "16",
            "--config", str(cfg), "--out", str(out),
        ])
        assert code == 0
        manifest = read_kv(out / "manifest.txt")
        assert manifest["dataset"] == "synth"
        assert manifest["synth_per_class"] == "4"
        assert manifest["epochs"] == "1"

    def test_registry_records_run(self, tmp_path):
        from mgcn.runs import list_runs

        _train(tmp_path / "run")
        rows = list_runs()
        assert len(rows) == 1
        assert rows[0]["status"] == "completed"
        assert rows[0]["model"] == "cnn"
        assert rows[0]["param_count"] > 0

    def test_trains_from_png_directory(self, tmp_path):
        from mgcn.cli import run
        from mgcn.report import read_kv

        images = tmp_path / "images"
        assert run(["synth", "--per-class", "5", "--img-size", "16", "--out", str(images)]) == 0
        out = tmp_path / "run"
        assert run([
            "train", "--model", "cnn", "--data", str(images), "--img-size", "16",
            "--epochs", "1", "--batch-size", "4", "--out", str(out),
        ]) == 0
        assert read_kv(out / "manifest.txt")["dataset"] == str(images.resolve())
        assert run(["evaluate", "--run", str(out)]) == 0


class TestEvaluate:
    def test_matches_final_validation_entry(self, tmp_path, capsys):
        from mgcn.cli import run
        from mgcn.metrics import METRIC_NAMES
        from mgcn.report import read_kv

        out = tmp_path / "run"
        _train(out)
        capsys.readouterr()
        assert run(["evaluate", "--run", str(out)]) == 0
        assert "on validation split" in capsys.readouterr().out

        history = read_kv(out / "history.txt")
        evaluation = read_kv(out / "report.txt")
        assert evaluation["records"] == "2"
        for name in METRIC_NAMES:
            assert evaluation[f"cnn.{name}.evaluation"] == history[f"epoch.2.validation.{name}"]
        assert evaluation["cnn.bce_loss.evaluation"] == history["epoch.2.validation.bce_loss"]

    def test_checkpoint_on_synthetic_data(self, tmp_path):
        from mgcn.cli import run
        from mgcn.report import read_kv

        out = tmp_path / "run"
        _train(out)
        report_path = tmp_path / "eval.txt"
        code = run([
            "evaluate", "--checkpoint", str(out / "model.mgcn"), "--synth", "3",
            "--threshold", "0.4", "--out", str(report_path),
        ])
        assert code == 0
        values = read_kv(report_path)
        assert values["records"] == "6"
        assert values["threshold"] == "0.4"
        assert 0.0 <= float(values["cnn.accuracy.evaluation"]) <= 1.0

    def test_checkpoint_alone_needs_data(self, tmp_path):
        from mgcn.cli import run

        out = tmp_path / "run"
        _train(out)
        assert run(["evaluate", "--checkpoint", str(out / "model.mgcn")]) == 1


class TestCompare:
    def test_table_matches_golden(self, compared_runs, tmp_path, capsys):
        from mgcn.cli import run

        kv_path = tmp_path / "compare.txt"
        assert run(["compare", *map(str, compared_runs), "--out", str(kv_path)]) == 0
        assert capsys.readouterr().out == (GOLDEN / "compare_ct.txt").read_text()

    def test_key_value_form(self, compared_runs, tmp_path):
        from mgcn.cli import run
        from mgcn.report import read_kv

        kv_path = tmp_path / "compare.txt"
        run(["compare", *map(str, compared_runs), "--out", str(kv_path)])
        values = read_kv(kv_path)
        assert values["cnn.params"] == "1234"
        assert values["cnn.accuracy.train"] == "0.975"
        assert values["cnn.bce_loss.validation"] == "0.15234"
        assert values["vgg-mini-vgg16.recall.validation"] == "0.9"

    def test_misclassification_loss_and_xray_caption(self, compared_runs, capsys):
        from mgcn.cli import run

        assert run(["compare", *map(str, compared_runs), "--modality", "xray", "--loss", "misclassification"]) == 0
        stdout = capsys.readouterr().out
        assert stdout.startswith("Performance Metrics for X-ray Images")
        assert "Loss (Misclassification)" in stdout
        assert "Validation Result" in stdout
        assert "cnn.misclassification_rate.validation=" in stdout

    def test_duplicate_models_are_disambiguated(self, tmp_path, capsys):
        from mgcn.cli import run

        row = (0.9, 0.9, 0.9, 0.2)
        a = _write_run(tmp_path / "a", "cnn", "", row, row, 10)
        b = _write_run(tmp_path / "b", "cnn", "", row, row, 10)
        assert run(["compare", str(a), str(b)]) == 0
        stdout = capsys.readouterr().out
        assert "CNN [a]" in stdout and "CNN [b]" in stdout
        assert "cnn_1.params=10" in stdout and "cnn_2.params=10" in stdout

    def test_missing_manifest(self, tmp_path):
        from mgcn.cli import run

        (tmp_path / "empty").mkdir()
        assert run(["compare", str(tmp_path / "empty")]) == 2


class TestSynth:
    def test_writes_pngs(self, tmp_path, capsys):
        from mgcn.cli import run

        out = tmp_path / "data"
        assert run(["synth", "--per-class", "3", "--img-size", "8", "--seed", "1", "--out", str(out)]) == 0
        assert capsys.readouterr().out.strip() == f"wrote 6 images to {out}"
        assert len(list((out / "COVID").glob("*.png"))) == 3
        assert len(list((out / "NORMAL").glob("*.png"))) == 3

    def test_same_seed_same_bytes(self, tmp_path):
        from mgcn.cli import run

        for name in ("a", "b"):
            run(["synth", "--per-class", "2", "--img-size", "8", "--seed", "4", "--out", str(tmp_path / name)])
        a = sorted((tmp_path / "a").rglob("*.png"))
        b = sorted((tmp_path / "b").rglob("*.png"))
        assert [p.relative_to(tmp_path / "a") for p in a] == [p.relative_to(tmp_path / "b") for p in b]
        assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))

    def test_loadable_by_directory_loader(self, tmp_path):
        from mgcn.cli import run
        from mgcn.data import PreprocessConfig, load_directory

        out = tmp_path / "data"
        assert run(["synth", "--per-class", "50", "--img-size", "16", "--seed", "1", "--out", str(out)]) == 0
        ds = load_directory(out, PreprocessConfig(16))
        assert len(ds) == 100
        assert ds.class_counts() == (50, 50)

    def test_unwritable_destination(self, tmp_path):
        from mgcn.cli import run

        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert run(["synth", "--per-class", "1", "--img-size", "8", "--out", str(blocker / "data")]) == 2


class TestGradCheck:
    def test_passes_and_lists_every_op(self, capsys):
        from mgcn.cli import run
        from mgcn.gradcheck import CHECKS

        assert run(["grad-check", "--trials", "2"]) == 0
        stdout = capsys.readouterr().out
        assert stdout.startswith("Op")
        for name in CHECKS:
            assert name in stdout
        assert "FAIL" not in stdout

    def test_seeded_runs_repeat(self, capsys):
        from mgcn.cli import run

        run(["grad-check", "--trials", "2", "--seed", "5"])
        first = capsys.readouterr().out
        run(["grad-check", "--trials", "2", "--seed", "5"])
        assert capsys.readouterr().out == first


class TestInspection:
    def test_summary(self, capsys):
        from mgcn.cli import run
        from mgcn.zoo import model_blueprint

        assert run(["summary", "--model", "cnn", "--img-size", "16"]) == 0
        stdout = capsys.readouterr().out
        total, _ = model_blueprint("cnn", 16).count_params()
        assert stdout.startswith("CNN on 16x16x1 input")
        assert f"Total params: {total}" in stdout
        assert "Non-trainable params: 0" in stdout

    def test_summary_with_head(self, capsys):
        from mgcn.cli import run

        assert run(["summary", "--model", "vgg-mini", "--img-size", "16", "--head", "vgg16"]) == 0
        stdout = capsys.readouterr().out
        assert "VGG-mini (vgg16 head)" in stdout
        assert "Non-trainable params: 0" not in stdout

    def test_runs_empty_then_listed(self, tmp_path, capsys):
        from mgcn.cli import run

        assert run(["runs"]) == 0
        assert "no runs recorded" in capsys.readouterr().out
        _train(tmp_path / "run")
        capsys.readouterr()
        assert run(["runs", "--limit", "5"]) == 0
        stdout = capsys.readouterr().out
        assert "completed" in stdout
        assert "Val Accuracy" in stdout
