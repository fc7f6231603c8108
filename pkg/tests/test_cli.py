import json

import numpy as np
import pytest

from uedanomaly import cli, imagio

SMALL_RUN = ["--epochs", "2", "--restarts", "12", "--keep", "3", "--threads", "1", "--seed", "4"]
ARTIFACTS = ("scores.csv", "fit.json", "report.md", "classified.csv", "roc.csv", "model.cae1", "tiles.npy")


def run(argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    data = tmp_path_factory.mktemp("data")
    assert run(["synth", "--normal", 14, "--anomalous", 8, "--image-size", 128, "--seed", 4,
                "--out-dir", data, "-q"]) == 0
    return data


@pytest.fixture(scope="module")
def run_all(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run(["run-all", "--data", corpus, "--out-dir", out, "-q"] + SMALL_RUN) == 0
    return out


def test_synth_outputs(corpus):
    assert len(list(corpus.glob("*.pgm"))) == 22
    manifest = imagio.load_manifest(corpus / "manifest.txt")
    assert [lab for _, lab in manifest.entries].count("anomalous") == 8
    assert (corpus / "anomalies.csv").read_text().startswith("path,anomaly\n")
    assert json.loads((corpus / "synth_config.json").read_text())["stage"] == "synth"


def test_run_all_artifacts(run_all):
    for name in ARTIFACTS + ("train_loss.csv", "histogram.csv", "skipped.csv", "tiles.csv", "images.csv"):
        assert (run_all / name).exists(), name
    for stage in ("preprocess", "train", "score", "fit", "threshold", "roc", "report", "run-all"):
        assert (run_all / f"{stage}_config.json").exists(), stage
    fit = json.loads((run_all / "fit.json").read_text())
    assert fit["e_t"] is not None and fit["seed"] == 4
    assert "## " in (run_all / "report.md").read_text()


def test_run_all_is_reproducible(corpus, run_all, tmp_path):
    assert run(["run-all", "--data", corpus, "--out-dir", tmp_path, "-q"] + SMALL_RUN) == 0
    for name in ARTIFACTS:
        assert (tmp_path / name).read_bytes() == (run_all / name).read_bytes(), name


def test_stages_match_run_all(corpus, run_all, tmp_path):
    seed = ["--seed", 4, "--threads", 1, "--out-dir", tmp_path, "-q"]
    assert run(["preprocess", "--data", corpus] + seed) == 0
    assert run(["train", "--tiles", tmp_path, "--epochs", 2] + seed) == 0
    assert run(["score", "--model", tmp_path / "model.cae1", "--data", corpus, "--tiles", tmp_path] + seed) == 0
    assert run(["fit", "--scores", tmp_path / "scores.csv", "--restarts", 12, "--keep", 3] + seed) == 0
    assert run(["threshold", "--fit", tmp_path / "fit.json", "--scores", tmp_path / "scores.csv"] + seed) == 0
    assert run(["roc", "--scores", tmp_path / "scores.csv", "--fit", tmp_path / "fit.json"] + seed) == 0
    assert run(["report", "--scores", tmp_path / "scores.csv", "--fit", tmp_path / "fit.json"] + seed) == 0
    for name in ARTIFACTS:
        assert (tmp_path / name).read_bytes() == (run_all / name).read_bytes(), name


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["fit", "--scores", "x.csv", "--no-such-flag"])
    assert exc.value.code == 64
    with pytest.raises(SystemExit) as exc:
        run(["fit", "--scores", "x.csv", "--threads", "0"])
    assert exc.value.code == 64


def test_missing_prerequisite_is_io_error(tmp_path, capsys):
    assert run(["fit", "--scores", tmp_path / "absent.csv", "--out-dir", tmp_path]) == 3
    assert "missing prerequisite" in capsys.readouterr().err
    assert run(["report", "--scores", tmp_path / "absent.csv", "--fit", tmp_path / "f.json",
                "--out-dir", tmp_path]) == 3


def test_too_few_scores_is_data_error(tmp_path, capsys):
    rows = [f"i{k},{-8 + 0.1 * k!r},,normal" for k in range(10)]
    (tmp_path / "scores.csv").write_text("id,log_mse,posterior_normal,label\n" + "\n".join(rows) + "\n")
    assert run(["fit", "--scores", tmp_path / "scores.csv", "--out-dir", tmp_path, "-q"]) == 2
    assert "DataError" in capsys.readouterr().err


def test_zero_epochs_warns_and_writes_model(run_all, tmp_path):
    with pytest.warns(RuntimeWarning, match="untrained"):
        assert run(["train", "--tiles", run_all, "--epochs", 0, "--out-dir", tmp_path, "-q"]) == 0
    assert (tmp_path / "model.cae1").exists()
    assert (tmp_path / "train_loss.csv").read_text() == "epoch,mean_loss\n"


def test_report_needs_threshold(run_all, tmp_path):
    fit = json.loads((run_all / "fit.json").read_text())
    fit["e_t"] = None
    (tmp_path / "fit.json").write_text(json.dumps(fit))
    assert run(["report", "--scores", run_all / "scores.csv", "--fit", tmp_path / "fit.json",
                "--out-dir", tmp_path, "-q"]) == 2


def test_parse_mix():
    mix = cli.parse_mix("blur:2,dropout:0.5")
    assert [m.kind for m in mix] == ["blur", "dropout"] and mix[0].params == (2.0,)
    for bad in ("sparkle:1", "blur:x", "streak:1"):
        with pytest.raises(Exception) as exc:
            cli.parse_mix(bad)
        assert type(exc.value).__name__ == "ContractViolation"


def test_load_tiles_round_trip(run_all):
    batches = cli.load_tiles(run_all)
    stack = np.load(run_all / "tiles.npy")
    assert sum(b.n_retained for b in batches.values()) == len(stack)
    first = next(iter(batches.values()))
    assert first.tiles[0].pixels.shape == (80, 80)
