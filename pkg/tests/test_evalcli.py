import json
import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jointcanvas import evalcli as ev
from jointcanvas.errors import ConfigError, UnknownCategory, UnknownFactor

from oracles import round_half_up_1


def table():
    return ev.ResultTable(
        (
            ev.Row("reach_target", "oracle", 50, 100.0, 21.84, 0.000138),
            ev.Row("press_button", "camera_pose@1", 50, 12.0, 233.25, float("nan"), -88.0),
        )
    )


class TestFormatting:
    @given(st.floats(0, 1000, allow_nan=False))
    def test_round_half_up_matches_oracle(self, x):
        assert ev.fmt1(x) == round_half_up_1(x)

    def test_known_values(self):
        assert ev.fmt1(89.95) == "90.0"
        assert ev.fmt1(89.999) == "90.0"
        assert ev.fmt1(0.05) == "0.1"
        assert ev.fmt1(-2.25) == "-2.3"
        assert ev.fmt1(None) == ""

    def test_csv_columns_fixed(self):
        text = ev.table_to_csv(table())
        assert text.splitlines()[0] == ",".join(ev.COLUMNS)
        assert text.splitlines()[1] == "reach_target,oracle,50,100.0,21.8,0.000138,"

    def test_csv_json_round_trip(self):
        t = table()
        a = ev.table_from_csv(ev.table_to_csv(t))
        b = ev.table_from_json(ev.table_to_json(t))
        assert ev.table_to_csv(a) == ev.table_to_csv(b) == ev.table_to_csv(t)
        assert ev.table_to_json(a) == ev.table_to_json(t)

    def test_emit_both(self, tmp_path):
        paths = ev.emit_report(table(), tmp_path / "r.csv", "both")
        assert sorted(p.name for p in paths) == ["r.csv", "r.json"]
        assert json.loads((tmp_path / "r.json").read_text())["columns"] == list(ev.COLUMNS)

    def test_emit_empty(self, tmp_path):
        with pytest.raises(ValueError):
            ev.emit_report(ev.ResultTable(()), tmp_path / "r.csv")

    def test_row_range(self):
        with pytest.raises(ValueError):
            ev.Row("t", "c", 1, 101.0, 1.0, 0.0)


class TestSeeds:
    def test_distinct(self):
        seeds = {ev.episode_seed(0, t, e) for t in range(5) for e in range(200)}
        assert len(seeds) == 1000

    def test_stable(self):
        assert ev.episode_seed(3, 1, 7) == ev.episode_seed(3, 1, 7)


class TestRunConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            ev.RunConfig(episodes=0)
        with pytest.raises(ConfigError):
            ev.RunConfig(tasks=("nope",))
        with pytest.raises(ConfigError):
            ev.RunConfig(K=5, H=6)
        with pytest.raises(ConfigError):
            ev.RunConfig(drawer="magic")
        with pytest.raises(ConfigError):
            ev.RunConfig(magnitude=1.5)

    def test_parse_file(self):
        kw = ev.parse_run_config("# comment\nepisodes = 5\ntasks = reach_target, turn_knob\nstripes = off\n")
        assert kw == {"episodes": 5, "tasks": ("reach_target", "turn_knob"), "stripes": False}

    def test_parse_errors_name_the_line(self):
        with pytest.raises(ConfigError, match=r"cfg:2: unknown key"):
            ev.parse_run_config("episodes = 5\ncolour = red\n", "cfg")
        with pytest.raises(ConfigError, match=r"cfg:1: bad value"):
            ev.parse_run_config("episodes = many\n", "cfg")
        with pytest.raises(ConfigError, match=r"cfg:1: expected key = value"):
            ev.parse_run_config("episodes\n", "cfg")


class TestSweeps:
    def test_benchmark_deterministic(self):
        cfg = ev.RunConfig(tasks=("reach_target",), episodes=2, seed=4)
        a, b = ev.run_benchmark(cfg), ev.run_benchmark(cfg)
        assert ev.table_to_csv(a) == ev.table_to_csv(b)
        assert a.rows[0].success_pct == 100.0

    def test_unknown_category(self):
        with pytest.raises(UnknownCategory):
            ev.run_perturbations(ev.RunConfig(tasks=("reach_target",), episodes=1, category="fog"))

    def test_neutral_lighting_has_zero_delta(self):
        cfg = ev.RunConfig(tasks=("reach_target",), episodes=2, category="lighting")
        t = ev.run_perturbations(cfg, gain=1.0, tint=(1.0, 1.0, 1.0))
        base, pert = t.rows
        assert pert.delta_pct == 0.0
        assert base.mean_steps == pert.mean_steps

    def test_unknown_factor(self):
        with pytest.raises(UnknownFactor):
            ev.run_ablation("learning_rate", ev.RunConfig(episodes=1))

    @pytest.mark.parametrize("factor", ev.FACTORS)
    def test_levels_are_valid(self, factor):
        cfg = ev.RunConfig(episodes=1)
        levels = ev.ablation_levels(factor, cfg)
        assert len(levels) >= 2
        from dataclasses import replace

        for _, over in levels:
            replace(cfg, **over)

    def test_ablation_rows_grouped_by_task(self):
        cfg = ev.RunConfig(tasks=("reach_target",), episodes=1)
        t = ev.run_ablation("stripes", cfg)
        assert [r.condition for r in t.rows] == ["stripes=on", "stripes=off"]


def cli(*args, env=None):
    import os

    e = dict(os.environ, **(env or {}))
    return subprocess.run([sys.executable, "-m", "jointcanvas.evalcli", *args], capture_output=True, text=True, env=e)


class TestCli:
    def test_eval_to_stdout(self):
        r = cli("eval", "--tasks", "reach_target", "--episodes", "1")
        assert r.returncode == 0
        assert r.stdout.splitlines()[0] == ",".join(ev.COLUMNS)

    def test_seed_env_override(self, tmp_path):
        a = cli("eval", "--tasks", "reach_target", "--episodes", "2", "--seed", "1", "--out", str(tmp_path / "a.csv"), env={ev.SEED_ENV: "9"})
        b = cli("eval", "--tasks", "reach_target", "--episodes", "2", "--seed", "5", "--out", str(tmp_path / "b.csv"), env={ev.SEED_ENV: "9"})
        assert a.returncode == b.returncode == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_config_errors_exit_2(self, tmp_path):
        assert cli("eval", "--tasks", "nope").returncode == 2
        assert cli("eval", "--chunk", "5", "--horizon", "9").returncode == 2
        assert cli("ablate", "--factor", "bogus", "--episodes", "1").returncode == 2
        assert cli("perturb", "--category", "fog", "--episodes", "1").returncode == 2
        assert cli("eval", "--episodes", "1", env={ev.SEED_ENV: "x"}).returncode == 2
        (tmp_path / "run.cfg").write_text("episodes = 2\nbad line\n")
        r = cli("eval", "--run-config", str(tmp_path / "run.cfg"))
        assert r.returncode == 2 and "run.cfg:2" in r.stderr
        assert cli("frobnicate").returncode == 2

    def test_runtime_error_exits_3(self, tmp_path):
        r = cli("decode-debug", str(tmp_path / "missing.png"))
        assert r.returncode == 3

    def test_demo_dataset_validate(self, tmp_path):
        assert cli("gen-demos", "--task", "reach_target", "--n", "1", "--out", str(tmp_path / "d"), "--no-views").returncode == 0
        assert cli("make-dataset", "--demos", str(tmp_path / "d"), "--out", str(tmp_path / "ds"), "--stride", "10").returncode == 0
        r = cli("validate", str(tmp_path / "ds"))
        assert r.returncode == 0 and "0 violation" in r.stderr
        (tmp_path / "ds" / "0000_000000_target.png").unlink()
        r = cli("validate", str(tmp_path / "ds"))
        assert r.returncode == 3 and "MissingFile" in r.stdout

    def test_decode_debug(self, tmp_path):
        assert cli("make-dataset", "--help").returncode == 0
        cli("gen-demos", "--task", "reach_target", "--n", "1", "--out", str(tmp_path / "d"), "--no-views")
        cli("make-dataset", "--demos", str(tmp_path / "d"), "--out", str(tmp_path / "ds"), "--stride", "50")
        r = cli("decode-debug", str(tmp_path / "ds" / "0000_000000_target.png"))
        assert r.returncode == 0
        out = json.loads(r.stdout)
        (rec,) = out.values()
        assert set(rec["centers"]) == {"base", "elbow", "wrist", "gripper"}
