"""Scenario files: JSON schema, validation, and built-in generators.

A scenario file is a single JSON document describing the quadrotor, the
world (bounds, obstacles), the track (start, waypoints, optional end)
and every algorithm knob.  Unknown keys are rejected so a typo cannot
silently fall back to a default.
"""

import dataclasses
import json

import numpy as np

from .dynamics import QuadParams
from .guidance import CurriculumConfig, RewardWeights
from .planner import PlannerParams
from .policy import PpoConfig
from .trainer import TrainConfig
from .world import ObstaclePrimitive, Scenario, Waypoint


class ScenarioError(ValueError):
    """Schema violation; the message names the offending field."""


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ScenarioError(f"{where}: expected an object")
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ScenarioError(f"{where}: unknown key(s) {sorted(unknown)}")


def _vec(obj, where, n=3):
    if not isinstance(obj, (list, tuple)) or len(obj) != n \
            or not all(isinstance(v, (int, float)) for v in obj):
        raise ScenarioError(f"{where}: expected a list of {n} numbers")
    return np.asarray(obj, dtype=float)


def _num(obj, where):
    if not isinstance(obj, (int, float)) or isinstance(obj, bool):
        raise ScenarioError(f"{where}: expected a number")
    return obj


def _fill(cls, obj, where, vectors=()):
    """Instantiate a config dataclass from a JSON object, strictly."""
    names = [f.name for f in dataclasses.fields(cls)]
    _check_keys(obj, names, where)
    kwargs = {}
    for k, v in obj.items():
        kwargs[k] = _vec(v, f"{where}.{k}") if k in vectors else v
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ScenarioError(f"{where}: {e}") from e


def _parse_obstacle(obj, where):
    _check_keys(obj, ("type", "center", "size", "quat"), where)
    for key in ("type", "center", "size"):
        if key not in obj:
            raise ScenarioError(f"{where}: missing '{key}'")
    sizes = {"sphere": 1, "box": 3, "cylinder": 2}
    kind = obj["type"]
    if kind not in sizes:
        raise ScenarioError(f"{where}.type: unknown obstacle type {kind!r}")
    quat = _vec(obj.get("quat", [1, 0, 0, 0]), f"{where}.quat", 4)
    try:
        return ObstaclePrimitive(kind=kind, center=_vec(obj["center"], f"{where}.center"),
                                 size=_vec(obj["size"], f"{where}.size", sizes[kind]),
                                 quat=quat)
    except ValueError as e:
        raise ScenarioError(f"{where}: {e}") from e


def _parse_waypoint(obj, where):
    _check_keys(obj, ("center", "quat", "r_tol"), where)
    if "center" not in obj:
        raise ScenarioError(f"{where}: missing 'center'")
    kwargs = {"center": _vec(obj["center"], f"{where}.center")}
    if "quat" in obj:
        kwargs["quat"] = _vec(obj["quat"], f"{where}.quat", 4)
    if "r_tol" in obj:
        kwargs["r_tol"] = _num(obj["r_tol"], f"{where}.r_tol")
    try:
        return Waypoint(**kwargs)
    except ValueError as e:
        raise ScenarioError(f"{where}: {e}") from e


@dataclasses.dataclass
class ScenarioFile:
    """Everything needed to reproduce a run, resolved to typed configs."""

    scenario: Scenario
    quad: QuadParams
    reward: RewardWeights
    curriculum: CurriculumConfig
    prm: PlannerParams
    ppo: PpoConfig
    train: TrainConfig
    seed: int
    hidden: int = 128

    def to_json(self):
        """Resolved-config snapshot (every default made explicit)."""
        sc = self.scenario

        def plain(x):
            if isinstance(x, np.ndarray):
                return x.tolist()
            return x

        def asdict(obj):
            return {f.name: plain(getattr(obj, f.name))
                    for f in dataclasses.fields(obj)}

        doc = {
            "seed": self.seed,
            "quadrotor": asdict(self.quad),
            "world": {
                "bounds": [sc.bounds[0].tolist(), sc.bounds[1].tolist()],
                "resolution": sc.resolution,
                "obstacles": [
                    {"type": ob.kind, "center": ob.center.tolist(),
                     "size": ob.size.tolist(), "quat": ob.quat.tolist()}
                    for ob in sc.obstacles
                ],
            },
            "start": sc.start_position.tolist(),
            "end": None if sc.end_position is None else sc.end_position.tolist(),
            "waypoints": [
                {"center": wp.center.tolist(), "quat": wp.quat.tolist(),
                 "r_tol": wp.r_tol}
                for wp in sc.waypoints
            ],
            "d_c": sc.d_c,
            "reward": asdict(self.reward),
            "curriculum": asdict(self.curriculum),
            "prm": asdict(self.prm),
            "ppo": asdict(self.ppo),
            "train": asdict(self.train),
            "hidden": self.hidden,
        }
        return json.dumps(doc, indent=2) + "\n"


TOP_KEYS = ("seed", "quadrotor", "world", "start", "end", "waypoints", "d_c",
            "reward", "curriculum", "prm", "ppo", "train", "hidden")


def parse_scenario(text):
    """Parse and validate a scenario JSON document into a ScenarioFile."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"invalid JSON: {e}") from e
    _check_keys(doc, TOP_KEYS, "scenario")
    for key in ("world", "start", "waypoints"):
        if key not in doc:
            raise ScenarioError(f"scenario: missing '{key}'")

    world = doc["world"]
    _check_keys(world, ("bounds", "resolution", "obstacles"), "world")
    if "bounds" not in world:
        raise ScenarioError("world: missing 'bounds'")
    if not isinstance(world["bounds"], list) or len(world["bounds"]) != 2:
        raise ScenarioError("world.bounds: expected [lo, hi]")
    lo = _vec(world["bounds"][0], "world.bounds[0]")
    hi = _vec(world["bounds"][1], "world.bounds[1]")
    if np.any(hi <= lo):
        raise ScenarioError("world.bounds: upper corner must exceed lower corner")
    obstacles = [_parse_obstacle(ob, f"world.obstacles[{k}]")
                 for k, ob in enumerate(world.get("obstacles", []))]

    waypoints = [_parse_waypoint(wp, f"waypoints[{k}]")
                 for k, wp in enumerate(doc["waypoints"])]
    if not waypoints:
        raise ScenarioError("waypoints: need at least one")

    end = doc.get("end")
    d_c = _num(doc.get("d_c", 0.15), "d_c")
    if d_c <= 0:
        raise ScenarioError("d_c: must be positive")
    try:
        scenario = Scenario(
            bounds=(lo, hi), obstacles=obstacles,
            start_position=_vec(doc["start"], "start"),
            waypoints=waypoints, d_c=d_c,
            end_position=None if end is None else _vec(end, "end"),
            resolution=_num(world.get("resolution", 0.05), "world.resolution"),
        )
    except ValueError as e:
        raise ScenarioError(f"scenario: {e}") from e

    quad = _fill(QuadParams, doc.get("quadrotor", {}), "quadrotor",
                 vectors=("J", "k_v", "g", "K_w"))
    reward = _fill(RewardWeights, doc.get("reward", {}), "reward")
    curriculum = _fill(CurriculumConfig, doc.get("curriculum", {}), "curriculum")
    prm = _fill(PlannerParams, doc.get("prm", {}), "prm")
    ppo = _fill(PpoConfig, doc.get("ppo", {}), "ppo")
    train = _fill(TrainConfig, doc.get("train", {}), "train")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ScenarioError("seed: expected an integer")
    hidden = doc.get("hidden", 128)
    if not isinstance(hidden, int) or hidden < 1:
        raise ScenarioError("hidden: expected a positive integer")
    return ScenarioFile(scenario=scenario, quad=quad, reward=reward,
                        curriculum=curriculum, prm=prm, ppo=ppo, train=train,
                        seed=seed, hidden=hidden)


def load_scenario(path):
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


# ---------------------------------------------------------------------------
# built-in generators

def generate_forest(seed=0, n_trees=12, bounds=((-1.0, -6.0, 0.0), (17.0, 6.0, 5.0)),
                    resolution=0.1):
    """Random vertical cylinders between a start and a single far waypoint."""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
    start = np.array([lo[0] + 1.0, 0.0, 2.0])
    goal = np.array([hi[0] - 1.0, 0.0, 2.0])
    height = hi[2] - lo[2]
    obstacles = []
    while len(obstacles) < n_trees:
        c = rng.uniform(lo[:2] + 1.5, hi[:2] - 1.5)
        if min(np.linalg.norm(c - start[:2]), np.linalg.norm(c - goal[:2])) < 1.5:
            continue
        r = rng.uniform(0.25, 0.6)
        obstacles.append(ObstaclePrimitive(
            "cylinder", (c[0], c[1], lo[2] + height / 2), (r, height)))
    scenario = Scenario(bounds=bounds, obstacles=obstacles, start_position=start,
                        waypoints=[Waypoint(center=goal)], resolution=resolution)
    return scenario


def generate_slalom(seed=0, n_pillars=3, spacing=3.0,
                    bounds=((-1.0, -3.0, 0.0), (13.0, 3.0, 4.0)), resolution=0.1):
    """A row of pillars with waypoints forcing alternating sides."""
    lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
    z = (lo[2] + hi[2]) / 2.0
    height = hi[2] - lo[2]
    obstacles, waypoints = [], []
    for k in range(n_pillars):
        x = 2.0 + spacing * k
        obstacles.append(ObstaclePrimitive("cylinder", (x, 0.0, lo[2] + height / 2),
                                           (0.4, height)))
        side = 1.2 if k % 2 == 0 else -1.2
        waypoints.append(Waypoint(center=(x, side, z), r_tol=0.5))
    waypoints.append(Waypoint(center=(2.0 + spacing * n_pillars, 0.0, z),
                              r_tol=0.5))
    scenario = Scenario(bounds=bounds, obstacles=obstacles,
                        start_position=(0.0, 0.0, z), waypoints=waypoints,
                        resolution=resolution)
    return scenario


def generate_gates(seed=0, n_gates=4, bounds=((-1.0, -5.0, 0.0), (15.0, 5.0, 4.0)),
                   resolution=0.1):
    """Oriented gate waypoints on a weaving course, empty world."""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(bounds[0]), np.asarray(bounds[1])
    z = (lo[2] + hi[2]) / 2.0
    waypoints = []
    for k in range(n_gates):
        x = 2.0 + (hi[0] - 3.0 - 2.0) * (k + 1) / n_gates
        y = rng.uniform(-2.5, 2.5)
        yaw = rng.uniform(-0.5, 0.5)
        quat = np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])
        waypoints.append(Waypoint(center=(x, y, z), quat=quat))
    scenario = Scenario(bounds=bounds, obstacles=[], start_position=(0.0, 0.0, z),
                        waypoints=waypoints, resolution=resolution)
    return scenario


GENERATORS = {"forest": generate_forest, "slalom": generate_slalom,
              "gates": generate_gates}
