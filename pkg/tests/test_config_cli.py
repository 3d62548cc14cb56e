"""Configuration parsing and the ``segnn`` command line: outputs, exit codes, reproducibility."""
import json
import subprocess
import sys

import pytest

from segnn.cli import main
from segnn.config import RunConfig, digest_view, dump_config, file_digest, load_config, parse_config_text
from segnn.exceptions import ConfigError, ParseError

FAST = ["--n-points", "256", "--episodes-per-combo", "2", "--d", "4"]


def run_cli(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--out", str(out), "--n-scenes", "12", "--seed", "3"]) == 0
    return out


class TestConfigFile:
    def test_parse_types(self):
        vals = parse_config_text("d = 12\ntheta=40.5 # note\ncolor-shuffle = yes\ncorpus = none\n")
        assert vals == {"d": 12, "theta": 40.5, "color_shuffle": True, "corpus": None}

    def test_unknown_key(self):
        with pytest.raises(ParseError, match="line 2"):
            parse_config_text("d = 3\nwhat = 1\n")

    def test_bad_value(self):
        with pytest.raises(ParseError):
            parse_config_text("layers = three\n")

    def test_missing_equals(self):
        with pytest.raises(ParseError):
            parse_config_text("layers 3\n")

    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("d = 12\nseed = 4\n")
        cfg = load_config(path, {"seed": 9, "d": None})
        assert cfg.d == 12 and cfg.seed == 9

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.cfg")

    def test_dump_round_trip(self):
        cfg = RunConfig(d=7, corpus="x", color_shuffle=True)
        assert RunConfig(**parse_config_text(dump_config(cfg))) == cfg

    def test_method_defaults(self):
        assert RunConfig().with_defaults("segnn").d == 20
        assert RunConfig().with_defaults("segpn").d == 10
        assert RunConfig(d=5).with_defaults("segpn").d == 5

    @pytest.mark.parametrize("bad", [{"gamma": 0.0}, {"ways": 0}, {"episodes": -1}, {"aggregate": "mode"},
                                     {"n_points": 4, "layers": 3}, {"d": 0}, {"seed": -2}])
    def test_validation(self, bad):
        with pytest.raises(ConfigError):
            RunConfig(**bad).validate()

    def test_digest_ignores_out_and_hashes_inputs(self, tmp_path):
        f = tmp_path / "c.bin"
        f.write_bytes(b"abc")
        a = digest_view(RunConfig(out="one", corpus=str(f)))
        b = digest_view(RunConfig(out="two", corpus=str(f)))
        assert a == b and a["corpus"] == "sha256:" + file_digest(f)


class TestCommands:
    def test_synth_report(self, corpus_dir):
        rep = json.loads((corpus_dir / "synth.json").read_text())
        assert rep["scenes"] == 12 and rep["train_scenes"] == 6
        assert (corpus_dir / "manifest.txt").exists() and (corpus_dir / "config.txt").exists()

    def test_eval_nn_writes_metrics(self, corpus_dir, tmp_path, capsys):
        code, out, _ = run_cli(["eval-nn", "--corpus", str(corpus_dir), "--out", str(tmp_path), *FAST], capsys)
        assert code == 0
        rep = json.loads(out)
        assert rep == json.loads((tmp_path / "metrics.json").read_text())
        assert rep["episodes"] == 12
        assert set(rep) >= {"per_class_iou", "miou", "accuracy", "episodes", "config_digest"}

    def test_eval_nn_byte_identical(self, corpus_dir, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert run_cli(["eval-nn", "--corpus", str(corpus_dir), "--out", str(d), *FAST], capsys)[0] == 0
        assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()

    def test_threads_do_not_change_results(self, corpus_dir, tmp_path, capsys, monkeypatch):
        outs = []
        for threads in ("1", "3"):
            monkeypatch.setenv("SEGNN_THREADS", threads)
            out = tmp_path / threads
            assert run_cli(["eval-nn", "--corpus", str(corpus_dir), "--out", str(out), *FAST], capsys)[0] == 0
            outs.append((out / "metrics.json").read_bytes())
        assert outs[0] == outs[1]

    def test_dump_predictions(self, corpus_dir, tmp_path, capsys):
        argv = ["eval-nn", "--corpus", str(corpus_dir), "--out", str(tmp_path), "--dump-predictions", *FAST,
                "--episodes-per-combo", "1"]
        assert run_cli(argv, capsys)[0] == 0
        assert len(list((tmp_path / "predictions").iterdir())) == 6 * 2

    def test_train_then_eval_pn(self, corpus_dir, tmp_path, capsys):
        common = ["--corpus", str(corpus_dir), "--n-points", "256", "--d", "2", "--hidden", "16"]
        code, out, _ = run_cli(["train-pn", "--out", str(tmp_path), "--episodes", "3", *common], capsys)
        assert code == 0
        rep = json.loads(out)
        assert rep["episodes"] == 3 and (tmp_path / "segpn.ckpt").exists()
        assert len((tmp_path / "loss.csv").read_text().strip().splitlines()) >= 3
        code, out, _ = run_cli(["eval-pn", "--out", str(tmp_path / "ev"), "--ckpt", str(tmp_path / "segpn.ckpt"),
                                "--episodes-per-combo", "1", *common], capsys)
        assert code == 0 and json.loads(out)["method"] == "seg-pn"

    def test_classify(self, tmp_path, capsys):
        argv = ["classify", "--out", str(tmp_path), "--objects-per-class", "4", "--episodes", "5", "--d", "4",
                "--layers", "1"]
        code, out, _ = run_cli(argv, capsys)
        rep = json.loads(out)
        assert code == 0 and rep["episodes"] == 5 and 0.0 <= rep["accuracy"] <= 1.0

    def test_gradcheck(self, tmp_path, capsys):
        code, out, _ = run_cli(["gradcheck", "--out", str(tmp_path), "--seeds", "1"], capsys)
        rep = json.loads(out)
        assert code == 0 and rep["passed"] and rep["seeds"] == 1

    def test_config_file_with_override(self, corpus_dir, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("d = 4\nn_points = 256\nepisodes_per_combo = 1\nseed = 1\n")
        code, out, _ = run_cli(["eval-nn", "--config", str(cfg), "--corpus", str(corpus_dir),
                                "--out", str(tmp_path / "o"), "--seed", "2"], capsys)
        assert code == 0 and json.loads(out)["seed"] == 2
        assert "seed = 2" in (tmp_path / "o" / "config.txt").read_text()


class TestExitCodes:
    def check_error(self, argv, code, capsys):
        got, out, err = run_cli(argv, capsys)
        assert got == code and out == ""
        payload = json.loads(err.strip().splitlines()[-1])
        assert payload["exit_code"] == code and payload["message"]
        return payload

    def test_bad_flag_value(self, capsys):
        self.check_error(["eval-nn", "--gamma", "-1", "--out", "x"], 2, capsys)

    def test_unknown_flag(self, capsys):
        self.check_error(["eval-nn", "--nonsense"], 2, capsys)

    def test_missing_corpus_flag(self, tmp_path, capsys):
        self.check_error(["eval-nn", "--out", str(tmp_path)], 2, capsys)

    def test_missing_corpus_dir(self, tmp_path, capsys):
        self.check_error(["eval-nn", "--out", str(tmp_path), "--corpus", str(tmp_path / "nope")], 3, capsys)

    def test_missing_checkpoint(self, corpus_dir, tmp_path, capsys):
        self.check_error(["eval-pn", "--out", str(tmp_path), "--corpus", str(corpus_dir),
                          "--ckpt", str(tmp_path / "none.ckpt")], 3, capsys)

    def test_too_many_ways(self, corpus_dir, tmp_path, capsys):
        self.check_error(["eval-nn", "--out", str(tmp_path), "--corpus", str(corpus_dir), "--ways", "5", *FAST],
                         3, capsys)

    def test_bad_thread_count(self, corpus_dir, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("SEGNN_THREADS", "zero")
        self.check_error(["eval-nn", "--out", str(tmp_path), "--corpus", str(corpus_dir), *FAST], 2, capsys)

    def test_console_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "segnn.cli", "eval-nn", "--layers", "0", "--out", str(tmp_path)],
                              capture_output=True, text=True)
        assert proc.returncode == 2
        assert json.loads(proc.stderr.strip().splitlines()[-1])["error"] == "ConfigError"
