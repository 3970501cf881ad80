"""Command-line surface: artifacts, determinism, and structured errors."""
import csv
import json
import subprocess
import sys

import pytest

from mindkit.cli import main
from mindkit.schemas import validate_artifact


def run_ok(argv):
    assert main(argv) == 0


def read(path):
    return json.loads(path.read_text())


def structured_error(capsys, argv, command):
    rc = main(argv)
    err = capsys.readouterr().err
    assert rc == 1
    doc = json.loads(err.strip().splitlines()[-1])
    assert doc["schema"] == "mindkit.error/1"
    assert doc["command"] == command
    return doc


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One planted-feature run of gen-data -> train-model ->
    train-transform -> score, shared by the artifact tests."""
    root = tmp_path_factory.mktemp("pipeline")
    gen_cfg = root / "gen.json"
    gen_cfg.write_text(json.dumps({"n": 300, "d": 5, "planted": [0],
                                   "label_noise": 0.0}))
    run_ok(["gen-data", "--config", str(gen_cfg), "--seed", "17",
            "--out", str(root / "data")])
    train_cfg = root / "train.json"
    train_cfg.write_text(json.dumps({"max_epochs": 60, "lr": 0.02}))
    run_ok(["train-model", "--data", str(root / "data" / "data.csv"),
            "--arch", "mlp", "--hidden", "8", "--config", str(train_cfg),
            "--seed", "5", "--out", str(root / "model")])
    mind_cfg = root / "mind.json"
    mind_cfg.write_text(json.dumps({
        "lam": 0.05, "similarity": "inner_product", "weight_decay": 0.01,
        "max_epochs": 40, "restarts": 3, "top_k": 2}))
    run_ok(["train-transform", "--data", str(root / "data" / "data.csv"),
            "--model", str(root / "model" / "model.json"),
            "--kind", "gating", "--config", str(mind_cfg), "--seed", "3",
            "--out", str(root / "transform")])
    run_ok(["score", "--manifest", str(root / "transform" / "manifest.json"),
            "--out", str(root / "score")])
    return {
        "root": root,
        "data": root / "data" / "data.csv",
        "truth": root / "data" / "truth.json",
        "model": root / "model" / "model.json",
        "history": root / "model" / "history.json",
        "mind_cfg": mind_cfg,
        "manifest": root / "transform" / "manifest.json",
        "report": root / "score" / "report.json",
        "report_csv": root / "score" / "report.csv",
    }


class TestOracle:
    def test_prints_uncorrelated_solution(self, capsys):
        run_ok(["oracle", "--beta", "1,2", "--lam", "1.0"])
        assert "g = (0.5, 0.875)" in capsys.readouterr().out

    def test_writes_validating_artifact(self, tmp_path, capsys):
        run_ok(["oracle", "--beta", "1,2", "--lam", "1.0",
                "--out", str(tmp_path)])
        capsys.readouterr()
        doc = read(tmp_path / "oracle.json")
        assert validate_artifact(doc) == "mindkit.oracle/1"
        assert doc["gates"] == [0.5, 0.875]
        assert doc["degenerate"] is False

    def test_degenerate_moment_warns_on_stderr(self, tmp_path, capsys):
        moment = tmp_path / "moment.csv"
        moment.write_text("1.0,1.0\n1.0,1.0\n")
        run_ok(["oracle", "--beta", "1,1", "--lam", "0.5",
                "--moment-csv", str(moment), "--out", str(tmp_path)])
        captured = capsys.readouterr()
        assert "degenerate" in captured.err
        assert read(tmp_path / "oracle.json")["degenerate"] is True

    def test_bad_beta_is_a_structured_error(self, capsys):
        doc = structured_error(
            capsys, ["oracle", "--beta", "1,abc", "--lam", "1.0"], "oracle")
        assert doc["error"] == "DataError"

    def test_console_entry_point(self):
        out = subprocess.run(["mindkit", "oracle", "--beta", "1,2",
                              "--lam", "1.0"],
                             capture_output=True, text=True, timeout=120)
        assert out.returncode == 0
        assert "g = (0.5, 0.875)" in out.stdout


class TestGenData:
    def test_deterministic_bytes(self, tmp_path, capsys):
        cfg = tmp_path / "gen.json"
        cfg.write_text(json.dumps({"n": 40, "d": 3, "seq_len": 4,
                                   "duplicates": [[0, 2]]}))
        for name in ("a", "b"):
            run_ok(["gen-data", "--config", str(cfg), "--seed", "9",
                    "--out", str(tmp_path / name)])
        capsys.readouterr()
        for fname in ("data.csv", "data.sidecar.json", "truth.json"):
            assert (tmp_path / "a" / fname).read_bytes() \
                == (tmp_path / "b" / fname).read_bytes()
        truth = read(tmp_path / "a" / "truth.json")
        assert validate_artifact(truth) == "mindkit.truth/1"
        assert truth["duplicates"] == [[0, 2]]

    def test_planted_weight_recorded_as_zero(self, pipeline):
        truth = read(pipeline["truth"])
        assert truth["weights"][0] == 0.0
        assert truth["invariant_features"] == [0]

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "gen.json"
        cfg.write_text(json.dumps({"n": 40, "d": 3, "bogus": 1}))
        doc = structured_error(
            capsys, ["gen-data", "--config", str(cfg),
                     "--out", str(tmp_path / "o")], "gen-data")
        assert "bogus" in doc["message"]


class TestTrainModel:
    def test_artifacts_validate(self, pipeline):
        assert validate_artifact(read(pipeline["model"])) == "mindkit.model/1"
        hist = read(pipeline["history"])
        assert validate_artifact(hist) == "mindkit.train/1"
        assert len(hist["history"]["val_loss"]) >= 1

    def test_deterministic_checkpoint(self, pipeline, tmp_path, capsys):
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({"max_epochs": 60, "lr": 0.02}))
        run_ok(["train-model", "--data", str(pipeline["data"]),
                "--arch", "mlp", "--hidden", "8", "--config", str(cfg),
                "--seed", "5", "--out", str(tmp_path / "again")])
        capsys.readouterr()
        assert (tmp_path / "again" / "model.json").read_bytes() \
            == pipeline["model"].read_bytes()

    def test_missing_data_is_a_structured_error(self, tmp_path, capsys):
        doc = structured_error(
            capsys, ["train-model", "--data", str(tmp_path / "nope.csv"),
                     "--out", str(tmp_path / "o")], "train-model")
        assert doc["error"] == "DataError"


class TestTransformPipeline:
    def test_planted_feature_flagged(self, pipeline):
        report = read(pipeline["report"])
        assert validate_artifact(report) == "mindkit.report/1"
        scores = report["score_mean"]
        assert scores[0] < 0.05  # the generating model ignores feature 0
        assert all(s > scores[0] + 0.1 for s in scores[1:])

    def test_plot_csv_matches_report(self, pipeline):
        report = read(pipeline["report"])
        with open(pipeline["report_csv"], newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["feature"] for r in rows] == report["features"]
        got = [float(r["score_mean"]) for r in rows]
        assert got == pytest.approx(report["score_mean"], abs=1e-12)

    def test_deterministic_manifest(self, pipeline, tmp_path, capsys):
        run_ok(["train-transform", "--data", str(pipeline["data"]),
                "--model", str(pipeline["model"]), "--kind", "gating",
                "--config", str(pipeline["mind_cfg"]), "--seed", "3",
                "--out", str(tmp_path / "again")])
        capsys.readouterr()
        assert (tmp_path / "again" / "manifest.json").read_bytes() \
            == pipeline["manifest"].read_bytes()

    def test_transform_checkpoint_validates(self, pipeline):
        doc = read(pipeline["root"] / "transform" / "transform.json")
        assert validate_artifact(doc) == "mindkit.transform/1"
        assert doc["kind"] == "gating"

    def test_score_rejects_wrong_schema(self, pipeline, capsys):
        doc = structured_error(
            capsys, ["score", "--manifest", str(pipeline["truth"]),
                     "--out", str(pipeline["root"] / "bad")], "score")
        assert "mindkit.report/1" in doc["message"]


class TestTuneLambda:
    def test_writes_trace_and_transform(self, pipeline, tmp_path, capsys):
        cfg = tmp_path / "mind.json"
        cfg.write_text(json.dumps({"similarity": "inner_product",
                                   "max_epochs": 4}))
        run_ok(["tune-lambda", "--data", str(pipeline["data"]),
                "--model", str(pipeline["model"]), "--config", str(cfg),
                "--seed", "2", "--out", str(tmp_path / "tune")])
        out = capsys.readouterr().out
        assert "lambda =" in out
        doc = read(tmp_path / "tune" / "tune.json")
        assert validate_artifact(doc) == "mindkit.tune/1"
        assert len(doc["trace"]) >= 1
        assert isinstance(doc["feasible"], bool)
        assert (tmp_path / "tune" / "transform.json").exists()


class TestSanityCheck:
    def test_mismatched_reference_is_an_error(self, pipeline, tmp_path,
                                              capsys):
        manifest = read(pipeline["manifest"])
        manifest["features"] = [f"other{i}" for i in range(5)]
        bad = tmp_path / "bad_report.json"
        bad.write_text(json.dumps(manifest))
        doc = structured_error(
            capsys, ["sanity-check", "--data", str(pipeline["data"]),
                     "--model", str(pipeline["model"]),
                     "--report", str(bad), "--config",
                     str(pipeline["mind_cfg"]),
                     "--out", str(tmp_path / "o")], "sanity-check")
        assert "do not match" in doc["message"]

    def test_smoke_writes_validating_artifact(self, pipeline, tmp_path,
                                              capsys):
        cfg = tmp_path / "mind.json"
        cfg.write_text(json.dumps({
            "lam": 0.05, "similarity": "inner_product", "max_epochs": 4,
            "restarts": 3, "top_k": 2}))
        run_ok(["sanity-check", "--data", str(pipeline["data"]),
                "--model", str(pipeline["model"]),
                "--report", str(pipeline["manifest"]),
                "--config", str(cfg), "--shuffles", "1", "--seed", "0",
                "--out", str(tmp_path / "sanity")])
        out = capsys.readouterr().out
        assert "baseline rho" in out
        doc = read(tmp_path / "sanity" / "sanity.json")
        assert validate_artifact(doc) == "mindkit.sanity/1"
        assert [e["layer"] for e in doc["layers"]] == ["w0", "w1"]


class TestBaselines:
    def test_attribution_tables(self, pipeline, tmp_path, capsys):
        run_ok(["baselines", "--data", str(pipeline["data"]),
                "--model", str(pipeline["model"]),
                "--report", str(pipeline["manifest"]),
                "--steps", "512", "--out", str(tmp_path / "base")])
        capsys.readouterr()
        doc = read(tmp_path / "base" / "baselines.json")
        assert validate_artifact(doc) == "mindkit.baselines/1"
        assert doc["ig_steps"] == 512
        assert len(doc["saliency"]) == 5
        assert len(doc["integrated_gradients"]) == 5
        assert doc["completeness_gap"] < 1e-3
        pairs = [tuple(row["pair"]) for row in doc["spearman"]]
        assert ("saliency", "integrated_gradients") in pairs
        assert len(pairs) == 3


@pytest.fixture(scope="module")
def seq_pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("seq")
    gen_cfg = root / "gen.json"
    gen_cfg.write_text(json.dumps({"n": 200, "d": 3, "seq_len": 6}))
    run_ok(["gen-data", "--config", str(gen_cfg), "--seed", "11",
            "--out", str(root / "data")])
    tcfg = root / "t.json"
    tcfg.write_text(json.dumps({"max_epochs": 10}))
    run_ok(["train-model", "--data", str(root / "data" / "data.csv"),
            "--arch", "seqconv", "--hidden", "4", "--config", str(tcfg),
            "--seed", "4", "--out", str(root / "model")])
    mcfg = root / "m.json"
    mcfg.write_text(json.dumps({"lam": 0.05, "max_epochs": 6, "restarts": 2,
                                "top_k": 2}))
    return root, mcfg


class TestSequenceTransforms:
    def test_basis_kind_reports_channels(self, seq_pipeline, tmp_path,
                                         capsys):
        root, mcfg = seq_pipeline
        run_ok(["train-transform", "--data", str(root / "data" / "data.csv"),
                "--model", str(root / "model" / "model.json"),
                "--kind", "basis", "--basis", "pulse", "--basis-k", "3",
                "--config", str(mcfg), "--seed", "6",
                "--out", str(tmp_path / "basis")])
        capsys.readouterr()
        man = read(tmp_path / "basis" / "manifest.json")
        assert man["score_kind"] == "gates_by_channel"
        assert man["channels"]["names"] == ["window0", "window1", "window2"]
        tr = read(tmp_path / "basis" / "transform.json")
        assert tr["kind"] == "basis"
        assert tr["basis"] == {"kind": "pulse", "K": 3, "T": 6,
                               "residual_channel": False}

    def test_residual_kind_reports_correlations(self, seq_pipeline, tmp_path,
                                                capsys):
        root, mcfg = seq_pipeline
        run_ok(["train-transform", "--data", str(root / "data" / "data.csv"),
                "--model", str(root / "model" / "model.json"),
                "--kind", "residual", "--config", str(mcfg), "--seed", "6",
                "--out", str(tmp_path / "res")])
        capsys.readouterr()
        man = read(tmp_path / "res" / "manifest.json")
        assert man["score_kind"] == "correlation"

    def test_basis_on_vector_data_rejected(self, pipeline, tmp_path, capsys):
        doc = structured_error(
            capsys, ["train-transform", "--data", str(pipeline["data"]),
                     "--model", str(pipeline["model"]), "--kind", "basis",
                     "--out", str(tmp_path / "o")], "train-transform")
        assert "sequence" in doc["message"]
