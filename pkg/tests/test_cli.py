import json

import pytest

from omdl import cli
from omdl.bench import read_records_csv

SMALL = ["--rows", "4", "--atoms", "6", "--sparsity", "2", "--trials", "2", "--steps", "12"]


def write(path, text):
    path.write_text(text)
    return path


class TestConfig:
    def test_defaults(self, tmp_path):
        spec = cli.parse_config(write(tmp_path / "c.toml", ""), env={})
        g, l = spec.gen, spec.learner
        assert (g.modes, g.rows, g.atoms, g.sparsity, g.snr, g.trials, g.steps) == \
            (3, 10, 20, 10, 50.0, 100, 2000)
        assert (l.lambda0, l.tau, l.window) == (0.8, 100, 20)
        assert spec.algos == ["omdl-sd", "omdl-qn", "tmod"]

    def test_zero_sparsity_accepted(self, tmp_path):
        assert cli.parse_config(write(tmp_path / "c.toml", "sparsity = 0\n"), env={}) \
            .gen.sparsity == 0

    @pytest.mark.parametrize("text,key", [("lambda0 = 1.5\n", "lambda0"),
                                          ("bogus = 1\n", "bogus"),
                                          ("rows = 30\n", "atoms"),
                                          ("window = 3\n", "window"),
                                          ("algos = ['nope']\n", "algos"),
                                          ("trials = 'many'\n", "trials")])
    def test_rejects_naming_key(self, tmp_path, text, key):
        with pytest.raises(cli.ConfigError) as exc:
            cli.parse_config(write(tmp_path / "c.toml", text), env={})
        assert exc.value.key == key

    def test_flags_beat_file(self, tmp_path):
        path = write(tmp_path / "c.toml", "steps = 30\nseed = 4\n")
        spec = cli.parse_config(path, {"steps": 7}, env={})
        assert spec.gen.steps == 7 and spec.gen.seed == 4
        spec = cli.parse_config(path, {"steps": 7}, env={}, override=True)
        assert spec.gen.steps == 30

    def test_environment(self, tmp_path):
        env = {"OMDL_OUTPUT_DIR": str(tmp_path / "x"), "OMDL_WORKERS": "3"}
        spec = cli.parse_config(None, {}, env=env)
        assert spec.output == tmp_path / "x" and spec.workers == 3
        path = write(tmp_path / "c.toml", "workers = 2\n")
        assert cli.parse_config(path, {}, env=env).workers == 2

    def test_validate_exit_codes(self, tmp_path, capsys):
        assert cli.main(["validate-config", str(write(tmp_path / "ok.toml", "rows = 5\n"))]) == 0
        assert json.loads(capsys.readouterr().out)["rows"] == 5
        assert cli.main(["validate-config", str(write(tmp_path / "bad.toml", "lambda0 = 2\n"))]) == 2
        assert "lambda0" in capsys.readouterr().err
        assert cli.main(["validate-config", str(write(tmp_path / "x.toml", "rows = [\n"))]) == 2


class TestRun:
    def run(self, out, *extra):
        return cli.main(["run", "--output", str(out), *SMALL, *extra])

    def test_outputs_and_determinism(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert self.run(a) == 0 and self.run(b) == 0
        for name in ("records.csv", "summary.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        assert (a / "COMPLETE").exists()
        for algo in ("omdl-sd", "omdl-qn", "tmod"):
            assert (a / "plots" / f"{algo}_mse.dat").exists()
        assert (a / "plots" / "mse.png").stat().st_size > 0
        assert (a / "plots" / "recovery.png").stat().st_size > 0
        events = [json.loads(line)["event"] for line in (a / "run.log").read_text().splitlines()]
        assert events[0] == "start" and events[-1] == "complete" and "progress" in events

    def test_config_file_with_algo(self, tmp_path):
        cfg = write(tmp_path / "spec.toml", "rows = 4\natoms = 6\nsparsity = 2\ntrials = 1\n"
                    "steps = 5\n")
        out = tmp_path / "o"
        assert cli.main(["run", "--config", str(cfg), "--algo", "omdl-qn",
                         "--output", str(out)]) == 0
        assert {r.algo for r in read_records_csv(out / "records.csv")} == {"omdl-qn"}

    def test_sparsity_sweep_labels(self, tmp_path):
        out = tmp_path / "s"
        assert self.run(out, "--experiment", "sparsity-sweep", "--sweep", "1,3") == 0
        assert {r.algo for r in read_records_csv(out / "records.csv")} == \
            {"omdl-qn-k1", "omdl-qn-k3"}

    def test_export_plots(self, tmp_path):
        out = tmp_path / "e"
        self.run(out, "--algo", "omdl-sd")
        for p in (out / "plots").iterdir():
            p.unlink()
        assert cli.main(["export-plots", str(out)]) == 0
        assert (out / "plots" / "recovery.png").exists()
        assert (out / "plots" / "omdl-sd_recovery.dat").exists()

    def test_checkpoint_resume_matches_uninterrupted(self, tmp_path):
        common = ["--experiment", "custom", "--trials", "1", "--algo", "omdl-qn",
                  "--checkpoint-every", "4"]
        full, part = tmp_path / "full", tmp_path / "part"
        assert self.run(full, *common) == 0
        assert self.run(part, *common, "--steps", "8") == 0
        assert cli.main(["resume", str(part / "checkpoint.npz"), "--steps", "12"]) == 0
        assert (full / "records.csv").read_bytes() == (part / "records.csv").read_bytes()
        assert (part / "COMPLETE").exists()

    def test_missing_checkpoint(self, tmp_path):
        assert cli.main(["resume", str(tmp_path / "none.npz")]) == 1
