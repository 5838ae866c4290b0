"""End-to-end CLI behavior on tiny scenarios."""

import csv
import json

import numpy as np
import pytest

from quadrace import cli
from quadrace.world import Esdf


def tiny_scenario(tmp_path, obstacles=(), train=None, name="sc.json"):
    doc = {
        "seed": 3,
        "world": {"bounds": [[-1, -2, -2], [6, 2, 2]], "resolution": 0.2,
                  "obstacles": list(obstacles)},
        "start": [0, 0, 0],
        "waypoints": [{"center": [4, 0, 0]}],
        "train": train or {"n_agents": 3, "max_episode_steps": 30,
                           "max_env_steps": 30, "eval_every": 100, "seed": 3},
        "ppo": {"steps_per_iter": 10, "epochs": 1, "minibatch": 30},
        "hidden": 16,
        "prm": {"n0": 64},
    }
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def run(argv):
    return cli.main([str(a) for a in argv])


class TestPlan:
    def test_writes_paths_and_summary(self, tmp_path):
        sc = tiny_scenario(tmp_path)
        out = tmp_path / "paths"
        assert run(["plan", "--scenario", sc, "--out", out]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["pairs"][0]["n_paths"] >= 1
        best = summary["combinations"][0]["length"]
        assert best == pytest.approx(4.0, rel=0.05)
        assert (out / "pair_00.txt").exists()
        assert (out / "combos.json").exists()

    def test_deterministic_outputs(self, tmp_path):
        sc = tiny_scenario(tmp_path)
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert run(["plan", "--scenario", sc, "--out", out]) == 0
            outs.append((out / "pair_00.txt").read_bytes())
        assert outs[0] == outs[1]

    def test_walled_off_exits_3_and_names_pair(self, tmp_path, capsys):
        wall = {"type": "box", "center": [2, 0, 0], "size": [0.4, 4.2, 4.2]}
        sc = tiny_scenario(tmp_path, obstacles=[wall])
        code = run(["plan", "--scenario", sc, "--out", tmp_path / "p"])
        assert code == 3
        assert "pair 0" in capsys.readouterr().err

    def test_bad_scenario_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"world": {}, "start": [0,0,0], "waypoints": [], "oops": 1}')
        assert run(["plan", "--scenario", bad, "--out", tmp_path / "p"]) == 2
        assert "configuration error" in capsys.readouterr().err

    def test_missing_file_exits_2(self, tmp_path):
        assert run(["plan", "--scenario", tmp_path / "nope.json",
                    "--out", tmp_path / "p"]) == 2


class TestTrainEval:
    @pytest.fixture()
    def planned(self, tmp_path):
        sc = tiny_scenario(tmp_path)
        out = tmp_path / "paths"
        assert run(["plan", "--scenario", sc, "--out", out]) == 0
        return sc, out

    def test_train_writes_artifacts(self, tmp_path, planned):
        sc, paths = planned
        out = tmp_path / "run"
        assert run(["train", "--scenario", sc, "--paths", paths,
                    "--out", out]) == 0
        assert (out / "checkpoint.bin").exists()
        assert (out / "manifest.json").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 3
        assert manifest["config"]["train"]["n_agents"] == 3
        with open(out / "training_log.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 1
        assert rows[0]["stage"] == "slow"

    def test_train_without_plan_exits_2(self, tmp_path):
        sc = tiny_scenario(tmp_path)
        code = run(["train", "--scenario", sc, "--paths", tmp_path / "missing",
                    "--out", tmp_path / "r"])
        assert code == 2

    def test_resume_from_checkpoint(self, tmp_path, planned):
        sc, paths = planned
        first = tmp_path / "run1"
        assert run(["train", "--scenario", sc, "--paths", paths,
                    "--out", first]) == 0
        second = tmp_path / "run2"
        assert run(["train", "--scenario", sc, "--paths", paths,
                    "--out", second, "--resume", first / "checkpoint.bin"]) == 0
        assert (second / "checkpoint.bin").exists()

    def test_eval_stats_schema_and_determinism(self, tmp_path, planned, capsys):
        sc, paths = planned
        run_dir = tmp_path / "run"
        assert run(["train", "--scenario", sc, "--paths", paths,
                    "--out", run_dir]) == 0
        capsys.readouterr()
        argv = ["eval", "--scenario", sc, "--paths", paths,
                "--checkpoint", run_dir / "checkpoint.bin", "--runs", 3]
        assert run(argv) == 0
        first = json.loads(capsys.readouterr().out)
        assert set(first) == {"n_runs", "success_rate", "T_a_mean", "T_a_std", "T_b"}
        assert first["success_rate"] == 0.0   # barely trained policy
        assert run(argv) == 0
        assert json.loads(capsys.readouterr().out) == first

    def test_eval_writes_trajectories(self, tmp_path, planned):
        sc, paths = planned
        run_dir = tmp_path / "run"
        assert run(["train", "--scenario", sc, "--paths", paths,
                    "--out", run_dir]) == 0
        out = tmp_path / "evalout"
        assert run(["eval", "--scenario", sc, "--paths", paths,
                    "--checkpoint", run_dir / "checkpoint.bin",
                    "--runs", 2, "--out", out]) == 0
        assert (out / "stats.json").exists()
        with open(out / "trajectory_000.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == cli.TRAJECTORY_COLUMNS
        assert len(rows[0]) == 28

    def test_eval_shape_mismatch_exits_2(self, tmp_path, planned, capsys):
        sc, paths = planned
        ck = tmp_path / "bad.bin"
        ck.write_bytes(b"AMTP1\ndims 30 8 8 4\nlogstd 4\n" + b"\x00" * 16)
        code = run(["eval", "--scenario", sc, "--paths", paths,
                    "--checkpoint", ck, "--runs", 1])
        assert code == 2
        assert "checkpoint error" in capsys.readouterr().err


class TestExport:
    def test_esdf_round_trip(self, tmp_path):
        sc = tiny_scenario(tmp_path)
        out = tmp_path / "grid.esdf"
        assert run(["export", "esdf", "--scenario", sc, "--out", out]) == 0
        from quadrace.scenario import load_scenario
        ref = load_scenario(sc).scenario.build_esdf()
        got = Esdf.import_raw(out)
        assert np.array_equal(got.values, ref.values)
        assert np.array_equal(got.origin, ref.origin)

    def test_paths_reexport_identical(self, tmp_path):
        sc = tiny_scenario(tmp_path)
        paths = tmp_path / "paths"
        assert run(["plan", "--scenario", sc, "--out", paths]) == 0
        out = tmp_path / "paths2.txt"
        assert run(["export", "paths", "--in", paths / "pair_00.txt",
                    "--out", out]) == 0
        assert out.read_bytes() == (paths / "pair_00.txt").read_bytes()

    def test_trajectory_export(self, tmp_path):
        sc = tiny_scenario(tmp_path)
        paths = tmp_path / "paths"
        assert run(["plan", "--scenario", sc, "--out", paths]) == 0
        run_dir = tmp_path / "run"
        assert run(["train", "--scenario", sc, "--paths", paths,
                    "--out", run_dir]) == 0
        out = tmp_path / "traj.csv"
        assert run(["export", "trajectory", "--scenario", sc, "--paths", paths,
                    "--checkpoint", run_dir / "checkpoint.bin", "--out", out]) == 0
        with open(out) as fh:
            rows = list(csv.reader(fh))
        assert len(rows[0]) == 1 + 3 + 4 + 3 + 3 + 4 + 4 + 5 + 1


class TestGenerate:
    def test_generate_parses_back(self, tmp_path, capsys):
        out = tmp_path / "forest.json"
        assert run(["generate-scenario", "--kind", "forest", "--seed", "5",
                    "--out", out]) == 0
        from quadrace.scenario import load_scenario
        sf = load_scenario(out)
        assert sf.seed == 5
        assert len(sf.scenario.obstacles) == 12

    def test_generate_deterministic(self, tmp_path):
        texts = []
        for name in ("a.json", "b.json"):
            out = tmp_path / name
            assert run(["generate-scenario", "--kind", "gates", "--seed", "9",
                        "--out", out]) == 0
            texts.append(out.read_text())
        assert texts[0] == texts[1]
