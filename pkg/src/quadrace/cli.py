"""Command-line interface: plan, train, eval, export, generate-scenario.

Every command takes a scenario JSON file and a master seed; with the
same inputs each command writes byte-identical primary outputs.  Exit
codes: 0 success, 2 configuration error, 3 planning failure, 4 training
aborted on non-finite values.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, policy as pol, trainer
from .planner import (GuidingPath, PlanningError, TrackCombination,
                      export_paths, import_paths, plan_guiding_paths)
from .policy import CheckpointError, TrainingDiverged
from .scenario import GENERATORS, ScenarioError, ScenarioFile, load_scenario
from .trainer import evaluate, train

EXIT_CONFIG = 2
EXIT_PLANNING = 3
EXIT_DIVERGED = 4

TRAJECTORY_COLUMNS = (
    ["t"] + [f"p_{a}" for a in "xyz"] + [f"q_{a}" for a in "wxyz"]
    + [f"v_{a}" for a in "xyz"] + [f"w_{a}" for a in "xyz"]
    + [f"Omega_{k}" for k in range(1, 5)] + [f"action_{k}" for k in range(4)]
    + ["r_p", "s_term", "r_wp", "r_T", "rate_penalty", "active_waypoint"]
)

LOG_COLUMNS = ["iteration", "env_steps", "mean_reward", "success",
               "mean_lap_time", "best_lap_time", "stage"]


def _limit_threads(n):
    if n is None:
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(n)
    except ImportError:
        pass


def _load(args):
    try:
        return load_scenario(args.scenario)
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {args.scenario}")


def _apply_overrides(sf: ScenarioFile, args):
    if getattr(args, "seed", None) is not None:
        sf.seed = args.seed
        sf.train.seed = args.seed
    else:
        sf.train.seed = sf.seed
    return sf


def write_trajectory_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for row in rows:
            w.writerow([f"{v:.9g}" for v in row])


def _write_combos(out_dir, combinations):
    meta = []
    for k, combo in enumerate(combinations):
        name = f"combo_{k:02d}.txt"
        export_paths([combo.path], out_dir / name)
        meta.append({"file": name, "choice": list(combo.choice),
                     "waypoint_arclengths": combo.waypoint_arclengths.tolist()})
    with open(out_dir / "combos.json", "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")


def _read_combos(paths_dir):
    paths_dir = Path(paths_dir)
    meta_file = paths_dir / "combos.json"
    if not meta_file.exists():
        raise ScenarioError(f"no planned paths at {paths_dir} (run `plan` first)")
    with open(meta_file) as fh:
        meta = json.load(fh)
    combos = []
    for entry in meta:
        path = import_paths(paths_dir / entry["file"])[0]
        combos.append(TrackCombination(path, np.array(entry["waypoint_arclengths"]),
                                       tuple(entry["choice"])))
    return combos


def _write_manifest(out_dir, sf: ScenarioFile, outputs):
    manifest = {
        "tool_version": __version__,
        "seed": sf.seed,
        "config": json.loads(sf.to_json()),
        "outputs": outputs,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_plan(args):
    sf = _apply_overrides(_load(args), args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    esdf = sf.scenario.build_esdf()
    per_pair, combos = plan_guiding_paths(sf.scenario, esdf, sf.prm, seed=sf.seed)
    summary = {"pairs": []}
    for k, paths in enumerate(per_pair):
        export_paths(paths, out_dir / f"pair_{k:02d}.txt")
        summary["pairs"].append({"index": k, "n_paths": len(paths),
                                 "lengths": [p.length for p in paths]})
    _write_combos(out_dir, combos)
    summary["combinations"] = [{"choice": list(c.choice), "length": c.path.length}
                               for c in combos]
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(f"planned {sum(p['n_paths'] for p in summary['pairs'])} paths over "
          f"{len(per_pair)} pair(s); best track {combos[0].path.length:.3f} m")
    return 0


def cmd_train(args):
    sf = _apply_overrides(_load(args), args)
    if args.stage is not None:
        sf.curriculum.stage = args.stage
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    combos = _read_combos(args.paths)
    outputs = {"checkpoint": "checkpoint.bin", "log": "training_log.csv",
               "periodic_checkpoint": "checkpoint_latest.bin"}
    _write_manifest(out_dir, sf, outputs)

    if args.resume is not None:
        params = pol.load_checkpoint(args.resume, hidden=sf.hidden)
    else:
        # same stream train() would use, so seeding is identical either way
        net_seed = np.random.SeedSequence(sf.train.seed).spawn(4)[2]
        params = trainer.initial_policy(sf.quad, hidden=sf.hidden,
                                        rng=np.random.default_rng(net_seed))

    esdf = sf.scenario.build_esdf()
    log_path = out_dir / outputs["log"]
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore")
        writer.writeheader()

        def on_row(row):
            writer.writerow(row)
            fh.flush()
            if row["iteration"] % 10 == 0:
                pol.save_checkpoint(params, out_dir / outputs["periodic_checkpoint"])

        params_out, rows, summary = train(
            sf.scenario, esdf, combos, sf.quad, sf.reward, sf.curriculum,
            sf.train, sf.ppo, params=params, log_callback=on_row)
    pol.save_checkpoint(params_out, out_dir / outputs["checkpoint"])
    with open(out_dir / "train_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(f"trained {summary['env_steps']} env steps, final stage "
          f"{summary['final_stage']}; checkpoint at {out_dir / outputs['checkpoint']}")
    return 0


def cmd_eval(args):
    sf = _apply_overrides(_load(args), args)
    params = pol.load_checkpoint(args.checkpoint, hidden=sf.hidden)
    combos = _read_combos(args.paths)
    esdf = sf.scenario.build_esdf()
    out = evaluate(params, sf.scenario, esdf, combos, sf.quad, sf.reward,
                   sf.curriculum, n_runs=args.runs,
                   drag_randomization=not args.no_drag_randomization,
                   seed=sf.seed, max_episode_steps=sf.train.max_episode_steps,
                   dt=sf.train.dt, record_trajectories=args.out is not None,
                   deterministic=args.deterministic)
    stats, trajs = out if args.out is not None else (out, None)
    print(json.dumps(stats, indent=2))
    if args.out is not None:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "stats.json", "w") as fh:
            json.dump(stats, fh, indent=2)
            fh.write("\n")
        for k, rows in enumerate(trajs):
            write_trajectory_csv(out_dir / f"trajectory_{k:03d}.csv", rows)
    return 0


def cmd_export(args):
    if args.what == "esdf":
        sf = _apply_overrides(_load(args), args)
        sf.scenario.build_esdf().export_raw(args.out)
        print(f"wrote ESDF grid to {args.out}")
    elif args.what == "paths":
        if args.infile is None:
            raise ScenarioError("export paths: --in file required")
        export_paths(import_paths(args.infile), args.out)
        print(f"rewrote paths to {args.out}")
    elif args.what == "trajectory":
        if args.checkpoint is None:
            raise ScenarioError("export trajectory: --checkpoint required")
        sf = _apply_overrides(_load(args), args)
        params = pol.load_checkpoint(args.checkpoint, hidden=sf.hidden)
        combos = _read_combos(args.paths)
        esdf = sf.scenario.build_esdf()
        _, trajs = evaluate(params, sf.scenario, esdf, combos, sf.quad,
                            sf.reward, sf.curriculum, n_runs=1,
                            drag_randomization=False, seed=sf.seed,
                            max_episode_steps=sf.train.max_episode_steps,
                            dt=sf.train.dt, record_trajectories=True)
        write_trajectory_csv(args.out, trajs[0])
        print(f"wrote trajectory to {args.out}")
    return 0


def cmd_generate(args):
    from .dynamics import QuadParams
    from .guidance import CurriculumConfig, RewardWeights
    from .planner import PlannerParams
    from .policy import PpoConfig
    from .trainer import TrainConfig

    seed = args.seed if args.seed is not None else 0
    sf = ScenarioFile(scenario=GENERATORS[args.kind](seed=seed),
                      quad=QuadParams(), reward=RewardWeights(),
                      curriculum=CurriculumConfig(), prm=PlannerParams(),
                      ppo=PpoConfig(), train=TrainConfig(seed=seed), seed=seed)
    text = sf.to_json()
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.kind} scenario to {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="quadrace",
                                description="minimum-time quadrotor racing pipeline")
    p.add_argument("--version", action="version", version=f"quadrace {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("--scenario", required=True, help="scenario JSON file")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the scenario master seed")
        sp.add_argument("--threads", type=int, default=None,
                        help="cap BLAS/OpenMP threads")

    sp = sub.add_parser("plan", help="plan topological guiding paths")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("train", help="run two-stage curriculum training")
    common(sp)
    sp.add_argument("--paths", required=True, help="directory written by `plan`")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--resume", default=None, help="checkpoint to continue from")
    sp.add_argument("--stage", choices=("slow", "fast"), default=None,
                    help="force the starting curriculum stage")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a trained checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--paths", required=True, help="directory written by `plan`")
    sp.add_argument("--runs", type=int, default=30)
    sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                    default=True, help="use the mean action (default on)")
    sp.add_argument("--no-drag-randomization", action="store_true")
    sp.add_argument("--out", default=None,
                    help="directory for stats.json and trajectory CSVs")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export", help="write an artifact in its documented format")
    sp.add_argument("what", choices=("esdf", "paths", "trajectory"))
    common(sp, scenario=False)
    sp.add_argument("--scenario", default=None)
    sp.add_argument("--in", dest="infile", default=None, help="input paths file")
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--paths", default=None, help="directory written by `plan`")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("generate-scenario", help="emit a built-in scenario file")
    sp.add_argument("--kind", choices=sorted(GENERATORS), required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True, help="output file, or - for stdout")
    sp.set_defaults(func=cmd_generate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    _limit_threads(getattr(args, "threads", None))
    try:
        return args.func(args)
    except ScenarioError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PlanningError as e:
        print(f"planning failed for waypoint pair {e.pair_index}: {e}",
              file=sys.stderr)
        return EXIT_PLANNING
    except TrainingDiverged as e:
        print(f"training aborted on non-finite values: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
