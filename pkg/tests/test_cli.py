import json
import os

import pytest

from kvsim import cli, probe
from kvsim import scenario as scn
from kvsim.engine import ConfigError

SMALL_SCENARIO = """\
name = "smoke"

[sim]
seed = 7
horizon_us = 2_000_000
max_model_len = 2048

[kv]
total_blocks = 300

[latency]
decode_floor_us = 800.0

[workload]
arrival = "poisson"
rate_per_s = 2.0
n_clients = 2
preset = "alpaca-like"

[attacker]
mode = "baseline"
baseline_period_us = 500_000
baseline_pool = "engorgio-like"
"""

EXPECTED_FILES = ["events.jsonl", "report.json", "kv_usage.csv",
                  "queue_waiting.csv", "queue_running.csv", "itl.csv",
                  "resolved_config.json"]


def write_scenario(tmp_path, text=SMALL_SCENARIO, name="s.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestSimulate:
    def test_valid_config_writes_outputs(self, tmp_path):
        config = write_scenario(tmp_path)
        out = tmp_path / "out"
        assert cli.main(["simulate", "--config", config,
                         "--out", str(out)]) == 0
        run_dir = out / "smoke" / "run"
        for fname in EXPECTED_FILES:
            assert (run_dir / fname).exists(), fname

    def test_malformed_config_names_key(self, tmp_path, capsys):
        bad = SMALL_SCENARIO + "\n[scheduler]\nbananas = 3\n"
        config = write_scenario(tmp_path, bad)
        assert cli.main(["simulate", "--config", config,
                         "--out", str(tmp_path / "o")]) == 2
        err = capsys.readouterr().err
        assert "scheduler.bananas" in err

    def test_sweep_fans_out(self, tmp_path):
        text = SMALL_SCENARIO + \
            '\n[sweep]\nparameter = "sim.seed"\nvalues = [1, 2, 3, 4]\n'
        config = write_scenario(tmp_path, text)
        out = tmp_path / "out"
        assert cli.main(["simulate", "--config", config,
                         "--out", str(out)]) == 0
        dirs = sorted(os.listdir(out / "smoke"))
        assert dirs == ["seed=1", "seed=2", "seed=3", "seed=4"]

    def test_seed_override(self, tmp_path):
        config = write_scenario(tmp_path)
        out = tmp_path / "out"
        cli.main(["simulate", "--config", config, "--seed", "99",
                  "--out", str(out)])
        resolved = json.loads(
            (out / "smoke" / "run" / "resolved_config.json").read_text())
        assert resolved["sim"]["seed"] == 99

    def test_determinism_byte_identical(self, tmp_path):
        config = write_scenario(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        cli.main(["simulate", "--config", config, "--out", str(out_a)])
        cli.main(["simulate", "--config", config, "--out", str(out_b)])
        for fname in EXPECTED_FILES:
            fa = (out_a / "smoke" / "run" / fname).read_bytes()
            fb = (out_b / "smoke" / "run" / fname).read_bytes()
            assert fa == fb, fname

    def test_resolved_config_round_trips(self, tmp_path):
        config = write_scenario(tmp_path)
        out_a = tmp_path / "a"
        cli.main(["simulate", "--config", config, "--out", str(out_a)])
        resolved = out_a / "smoke" / "run" / "resolved_config.json"
        out_b = tmp_path / "b"
        assert cli.main(["simulate", "--config", str(resolved),
                         "--out", str(out_b)]) == 0
        a = (out_a / "smoke" / "run" / "events.jsonl").read_bytes()
        b = (out_b / "run" / "run" / "events.jsonl").read_bytes()
        assert a == b


CALIBRATION_SCENARIO = """\
name = "cal"

[sim]
seed = 11
horizon_us = 24_000_000
max_model_len = 4096

[kv]
total_blocks = 600

[latency]
prefill_us_per_token = 10.0

[workload]
kind = "none"

[attacker]
mode = "staircase"
staircase_levels = 10
staircase_hold_us = 2_200_000
staircase_peak = 0.97
concurrency_quota = 256

[probe]
labeling = true
"""


class TestProbeTrain:
    @pytest.fixture()
    def trace_dir(self, tmp_path):
        config = write_scenario(tmp_path, CALIBRATION_SCENARIO, "cal.toml")
        out = tmp_path / "out"
        assert cli.main(["simulate", "--config", config,
                         "--out", str(out)]) == 0
        return str(out / "cal")

    def test_train_writes_model(self, trace_dir, tmp_path, capsys):
        model_path = tmp_path / "model.json"
        code = cli.main(["probe-train", "--traces", trace_dir,
                         "--out", str(model_path), "--n-trees", "10"])
        out = capsys.readouterr().out
        assert code == 0
        assert model_path.exists()
        assert "holdout accuracy" in out
        probe.ProbeModel.load(str(model_path))

    def test_train_deterministic_bytes(self, trace_dir, tmp_path):
        pa, pb = tmp_path / "a.json", tmp_path / "b.json"
        cli.main(["probe-train", "--traces", trace_dir, "--out", str(pa),
                  "--n-trees", "8"])
        cli.main(["probe-train", "--traces", trace_dir, "--out", str(pb),
                  "--n-trees", "8"])
        assert pa.read_bytes() == pb.read_bytes()

    def test_missing_bin_exits_3(self, tmp_path):
        samples = [probe.LabeledSample(
            features=__import__("numpy").arange(8.0) + i, true_bin=i % 9)
            for i in range(600)]
        trace = tmp_path / "probe_windows.csv"
        probe.write_samples_csv(samples, str(trace))
        code = cli.main(["probe-train", "--traces", str(tmp_path),
                         "--out", str(tmp_path / "m.json")])
        assert code == 3

    def test_no_traces_exits_2(self, tmp_path):
        code = cli.main(["probe-train", "--traces", str(tmp_path / "nope"),
                         "--out", str(tmp_path / "m.json")])
        assert code == 2


class TestReport:
    def run_dirs(self, tmp_path):
        config = write_scenario(tmp_path)
        out = tmp_path / "out"
        cli.main(["simulate", "--config", config, "--out", str(out)])
        return str(out / "smoke" / "run")

    def test_table_headers_match(self, tmp_path, capsys):
        run_dir = self.run_dirs(tmp_path)
        assert cli.main(["report", run_dir]) == 0
        out = capsys.readouterr().out
        for column in cli.TABLE_COLUMNS:
            assert column in out

    def test_baseline_self_gives_unity(self, tmp_path, capsys):
        run_dir = self.run_dirs(tmp_path)
        assert cli.main(["report", run_dir, "--baseline", run_dir]) == 0
        out = capsys.readouterr().out
        assert "1.0x" in out
        assert "ΔTTFT" in out and "ΔTPOT" in out

    def test_missing_report_exits_2(self, tmp_path):
        assert cli.main(["report", str(tmp_path / "missing")]) == 2


class TestScenarioParsing:
    def test_shipped_presets_parse(self):
        root = os.path.join(os.path.dirname(__file__), "..", "scenarios")
        names = [f for f in os.listdir(root) if f.endswith(".toml")]
        assert len(names) >= 8
        for fname in names:
            s = scn.load_scenario(os.path.join(root, fname))
            for _, tree in s.points():
                if s.name == "fns-black-box":
                    continue  # needs a trained model on disk
                scn.build_sim_config(tree)

    def test_missing_name_rejected(self, tmp_path):
        path = tmp_path / "x.toml"
        path.write_text("[sim]\nseed = 1\n")
        with pytest.raises(ConfigError):
            scn.load_scenario(str(path))

    def test_mix_block_translates(self, tmp_path):
        text = SMALL_SCENARIO + \
            "\n[mix]\ntotal_rate_per_s = 2.0\nmalicious_ratio = 0.5\n"
        path = tmp_path / "m.toml"
        path.write_text(text)
        s = scn.load_scenario(str(path))
        _, tree = s.points()[0]
        assert tree["workload"]["rate_per_s"] == pytest.approx(0.5)  # per client
        assert tree["attacker"]["baseline_period_us"] == 1_000_000
