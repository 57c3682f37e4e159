import json

import numpy as np
import pytest

from xalign.cli import main
from xalign.config import load_run_config, parse_config_text
from xalign.errors import ConfigError
from xalign.ingest import read_xaln, write_xaln
from xalign.manifest import RunManifest

SMALL = ["--set", "align.spectral_dim=16", "--set", "align.text_dim=32", "--set", "align.max_epochs=5",
         "--set", "align.spectral_hidden=32", "--set", "align.text_hidden=32", "--set", "align.shared_dim=16"]


def run(*argv):
    return main(["--quiet", *argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, out = root / "data", root / "out"
    assert run("synth", "--n", "200", "--latent-dim", "4", "--out", str(data), "--seed", "3", *SMALL) == 0
    assert run("train", "--data", str(data), "--out", str(out), "--seed", "3", *SMALL) == 0
    return data, out


class TestConfig:
    def test_defaults(self):
        cfg = load_run_config()
        assert cfg.align.shared_dim == 64 and cfg.regress["k"] == 3 and cfg.anomaly["n_trees"] == 100

    def test_file_and_overrides(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\nseed=4\nalign.shared_dim=32  # trailing\ngrid.hidden_dims=16|64,32\n")
        cfg = load_run_config(p, ["align.lr=0.0005"])
        assert cfg.seed == 4 and cfg.align.seed == 4
        assert cfg.align.shared_dim == 32 and cfg.align.lr == 0.0005
        assert cfg.grid["hidden_dims"] == [(16,), (64, 32)]

    def test_seed_flag_wins(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("seed=4\n")
        assert load_run_config(p, seed=9).seed == 9

    @pytest.mark.parametrize("item", ["nosuch.key=1", "align.shared_dim=big", "regress.alpha=1", "noequals"])
    def test_bad_assignments(self, item):
        with pytest.raises(ConfigError):
            load_run_config(overrides=[item])

    def test_bad_line_is_cited(self):
        with pytest.raises(ConfigError, match="f.cfg:2"):
            parse_config_text("seed=1\njunk\n", "f.cfg")

    def test_digest_tracks_content(self):
        assert load_run_config().digest() == load_run_config().digest()
        assert load_run_config().digest() != load_run_config(overrides=["regress.k=5"]).digest()


class TestCommands:
    def test_train_outputs(self, workspace):
        _, out = workspace
        assert (out / "model.ckpt").is_file() and (out / "model.ckpt.params.xaln").is_file()
        log = json.loads((out / "model_trainlog.json").read_text())
        assert len(log["train_loss"]) <= 5

    def test_eval_retrieval(self, workspace, tmp_path):
        data, out = workspace
        ck = str(out / "model.ckpt")
        assert run("eval-retrieval", "--data", str(data), "--checkpoint", ck, "--out", str(tmp_path)) == 0
        rep = json.loads((tmp_path / "retrieval.json").read_text())
        assert set(rep["recall_at"]) == {"1", "5", "10", "20", "50"}
        assert rep["candidate_count"] == len(rep["ranks"])
        curve = (tmp_path / "recall_curve.csv").read_text().splitlines()
        assert curve[0] == "k_percent,recall" and len(curve) == 101

    def test_ensemble_of_identical_checkpoints(self, workspace, tmp_path):
        data, out = workspace
        ck = str(out / "model.ckpt")
        run("eval-retrieval", "--data", str(data), "--checkpoint", ck, "--out", str(tmp_path / "a"))
        run("eval-retrieval", "--data", str(data), "--checkpoint", ck, "--checkpoint", ck,
            "--out", str(tmp_path / "b"))
        assert (tmp_path / "a/retrieval.json").read_text() == (tmp_path / "b/retrieval.json").read_text()

    def test_eval_regression_covers_present_variables(self, workspace, tmp_path):
        data, out = workspace
        assert run("eval-regression", "--data", str(data), "--checkpoint", str(out / "model.ckpt"),
                   "--out", str(tmp_path), "--set", "regress.bootstrap_n=20") == 0
        rep = json.loads((tmp_path / "regression.json").read_text())
        assert len(rep["variables"]) == 20
        corr = json.loads((tmp_path / "correlations.json").read_text())
        assert len(corr["top"]) == 10

    def test_detect_outliers(self, workspace, tmp_path):
        data, out = workspace
        (tmp_path / "classes.csv").write_text("source_id,class\nSYN000000,QSO\n")
        assert run("detect-outliers", "--data", str(data), "--checkpoint", str(out / "model.ckpt"),
                   "--out", str(tmp_path), "--split", "all", "--classes", str(tmp_path / "classes.csv"),
                   "--set", "anomaly.n_trees=20") == 0
        rep = json.loads((tmp_path / "anomalies.json").read_text())
        assert len(rep["scores"]) == 200 and len(rep["flagged"]) == 2
        assert rep["class_summary"]["QSO"]["count"] == 1

    def test_export_latents_round_trip(self, workspace, tmp_path):
        data, out = workspace
        assert run("export-latents", "--data", str(data), "--checkpoint", str(out / "model.ckpt"),
                   "--out", str(tmp_path)) == 0
        meta = json.loads((tmp_path / "latents/latents.json").read_text())
        assert meta["dims"]["post_both"] == 32 and meta["dims"]["pre_both"] == 48
        post = read_xaln(tmp_path / "latents/post_both.xaln")
        np.testing.assert_array_equal(post[:, :16], read_xaln(tmp_path / "latents/post_spectra.xaln"))

    def test_tune_temp(self, workspace, tmp_path):
        data, out = workspace
        assert run("tune-temp", "--data", str(data), "--checkpoint", str(out / "model.ckpt"),
                   "--out", str(tmp_path)) == 0
        t = json.loads((tmp_path / "temperature.json").read_text())
        assert t["temperature"] in (0.01, 0.05, 0.1, 0.2, 0.5, 1.0) and len(t["table"]) == 6

    def test_grid_search(self, workspace, tmp_path):
        data, _ = workspace
        assert run("grid-search", "--data", str(data), "--out", str(tmp_path), *SMALL, "--set", "grid.lr=0.001",
                   "--set", "grid.shared_dim=16,32", "--set", "grid.dropout=0.1", "--set", "grid.hidden_dims=16",
                   "--set", "grid.ensemble_size=1") == 0
        board = json.loads((tmp_path / "leaderboard.json").read_text())
        assert len(board["ranked"]) == 2
        assert (tmp_path / "rank01.ckpt").is_file() and not (tmp_path / "rank02.ckpt").exists()

    def test_preprocess(self, tmp_path):
        rows = ["source_id," + ",".join(f"b{i}" for i in range(400))]
        rows += [f"s{k}," + ",".join(str(float((i * (k + 1)) % 7)) for i in range(400)) for k in range(2)]
        rows.append("flat," + ",".join(["3.0"] * 400))
        (tmp_path / "raw.csv").write_text("\n".join(rows) + "\n")
        assert run("preprocess", "--spectra", str(tmp_path / "raw.csv"), "--out", str(tmp_path / "o")) == 0
        rep = json.loads((tmp_path / "o/preprocess_report.json").read_text())
        assert rep["spectra"] == 3 and rep["degenerate"] == 1

    def test_preprocess_events_with_embedding(self, tmp_path):
        r = np.random.default_rng(0)
        lines = ["source_id,energy_kev"] + [f"s{k},{e:.4f}" for k in range(4) for e in r.uniform(0.5, 8, 50)]
        (tmp_path / "ev.csv").write_text("\n".join(lines) + "\n")
        (tmp_path / "ex.csv").write_text("source_id,exposure_s\n" + "".join(f"s{k},100\n" for k in range(4)))
        assert run("preprocess", "--events", str(tmp_path / "ev.csv"), "--exposures", str(tmp_path / "ex.csv"),
                   "--embed", "--ae-epochs", "2", "--out", str(tmp_path / "o")) == 0
        assert read_xaln(tmp_path / "o/spectral.xaln").shape == (4, 64)


class TestExitCodes:
    def test_empty_spectra_file(self, tmp_path):
        (tmp_path / "raw.csv").write_text("")
        assert run("preprocess", "--spectra", str(tmp_path / "raw.csv"), "--out", str(tmp_path)) == 2

    def test_missing_input(self, tmp_path):
        assert run("train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)) == 2

    def test_bad_magic(self, workspace, tmp_path):
        data, _ = workspace
        bad = tmp_path / "bad.xaln"
        bad.write_bytes(b"JUNK" + bytes(12))
        assert run("train", "--data", str(data), "--spectral", str(bad), "--out", str(tmp_path)) == 2

    def test_checkpoint_dimension_mismatch(self, workspace, tmp_path):
        _, out = workspace
        other = tmp_path / "d"
        assert run("synth", "--n", "60", "--out", str(other), "--set", "align.spectral_dim=16",
                   "--set", "align.text_dim=48") == 0
        assert run("eval-retrieval", "--data", str(other), "--checkpoint", str(out / "model.ckpt"),
                   "--out", str(tmp_path)) == 3

    def test_bad_config_value(self, workspace, tmp_path):
        data, _ = workspace
        assert run("train", "--data", str(data), "--out", str(tmp_path), "--set", "align.shared_dim=4") == 3

    def test_missing_checkpoint_flag(self, workspace, tmp_path):
        data, _ = workspace
        assert run("eval-retrieval", "--data", str(data), "--out", str(tmp_path)) == 3

    def test_non_finite_embedding(self, workspace, tmp_path):
        data, _ = workspace
        m = read_xaln(data / "spectral.xaln").copy()
        m[3, 0] = np.nan
        ids = (data / "spectral.xaln.ids.csv").read_text().splitlines()[1:]
        write_xaln(tmp_path / "s.xaln", m, [line.split(",", 1)[1] for line in ids], version=2)
        assert run("train", "--data", str(data), "--spectral", str(tmp_path / "s.xaln"),
                   "--out", str(tmp_path)) == 2


class TestManifest:
    def test_records_and_verifies(self, workspace):
        _, out = workspace
        m = RunManifest(out)
        assert m.data["runs"][-1]["command"] == "train"
        assert "model.ckpt" in m.data["runs"][-1]["outputs"]
        assert m.verify() == []

    def test_detects_modified_input(self, tmp_path):
        data, out = tmp_path / "d", tmp_path / "o"
        assert run("synth", "--n", "80", "--out", str(data), *SMALL) == 0
        assert run("train", "--data", str(data), "--out", str(out), *SMALL) == 0
        assert run("verify-manifest", "--out", str(out)) == 0
        with open(data / "physicals.csv", "a") as fh:
            fh.write("\n")
        problems = RunManifest(out).verify()
        assert len(problems) == 1 and "physicals.csv" in problems[0]
        assert run("verify-manifest", "--out", str(out)) == 2
