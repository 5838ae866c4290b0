"""Topological guiding-path planner.

For each consecutive waypoint pair, a probabilistic roadmap is grown by
uniform sampling inside the prolate spheroid spanned between the two
endpoints, enlarging the spheroid and the sample count until the pair
connects.  Dijkstra search plus clearance-guided node removal extracts
several distinct paths, which are then shortcut-shortened and deduped
into one representative per (approximate) homotopy class.
"""

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class PlanningError(RuntimeError):
    """No connection found between a waypoint pair."""

    def __init__(self, pair_index, message):
        super().__init__(message)
        self.pair_index = pair_index


@dataclass
class PlannerParams:
    n0: int = 256              # initial samples per pair
    max_rounds: int = 6        # growth rounds before giving up
    k_neighbors: int = 10      # kNN edge candidates
    k_paths: int = 4           # distinct paths to extract per pair
    resample_spacing: float = 0.5   # max vertex spacing after shortening [m]
    dedup_points: int = 64     # sweep resolution for homotopy dedup
    max_combinations: int = 4  # full-track combinations kept for training


@dataclass
class GuidingPath:
    """Collision-free polyline with a cumulative arclength table."""

    points: np.ndarray
    cumlen: np.ndarray = field(init=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        self.cumlen = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self):
        return float(self.cumlen[-1])

    def point_at(self, s):
        """Position at arclength s (clamped to [0, L])."""
        s = np.clip(s, 0.0, self.length)
        i = np.clip(np.searchsorted(self.cumlen, s, side="right") - 1,
                    0, len(self.points) - 2)
        seg_len = self.cumlen[i + 1] - self.cumlen[i]
        t = np.where(seg_len > 0, (s - self.cumlen[i]) / np.where(seg_len > 0, seg_len, 1.0), 0.0)
        return self.points[i] + np.asarray(t)[..., None] * (self.points[i + 1] - self.points[i])

    def resample_uniform(self, n):
        """n points at equal arclength spacing (endpoints included)."""
        return self.point_at(np.linspace(0.0, self.length, n))

    def densify(self, spacing):
        """Insert vertices so no segment exceeds `spacing`; geometry unchanged."""
        out = [self.points[0]]
        for a, b in zip(self.points[:-1], self.points[1:]):
            seg = np.linalg.norm(b - a)
            n = max(1, int(np.ceil(seg / spacing)))
            for k in range(1, n + 1):
                out.append(a + (b - a) * (k / n))
        return GuidingPath(np.array(out))


def _ellipsoid_basis(focus_a, focus_b):
    d = focus_b - focus_a
    f = np.linalg.norm(d) / 2.0
    x = d / (2 * f) if f > 0 else np.array([1.0, 0.0, 0.0])
    helper = np.array([0.0, 0.0, 1.0]) if abs(x[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    y = np.cross(x, helper)
    y /= np.linalg.norm(y)
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=1), f


def sample_ellipsoid(focus_a, focus_b, c_max, rng, bounds=None, n=1):
    """Uniform samples inside the prolate spheroid with the given foci.

    c_max is the full major-axis length and must be at least the focal
    distance.  Samples are clamped into `bounds` when given.
    """
    focus_a = np.asarray(focus_a, dtype=float)
    focus_b = np.asarray(focus_b, dtype=float)
    basis, f = _ellipsoid_basis(focus_a, focus_b)
    a = c_max / 2.0
    if a < f - 1e-12:
        raise ValueError("major axis shorter than focal distance")
    b = np.sqrt(max(a * a - f * f, 0.0))
    # uniform in the unit ball, then anisotropic scaling preserves uniformity
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    u *= rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
    pts = (focus_a + focus_b) / 2.0 + (u * np.array([a, b, b])) @ basis.T
    if bounds is not None:
        pts = np.clip(pts, bounds[0], bounds[1])
    return pts[0] if n == 1 else pts


@dataclass
class Roadmap:
    nodes: np.ndarray            # (M, 3); indices 0 and 1 are the endpoints
    clearance: np.ndarray        # ESDF distance per node
    adjacency: list              # adjacency[i] = list of (j, weight)

    def connected(self):
        return shortest_path(self) is not None


def _build_edges(nodes, esdf, d_c, k):
    tree = cKDTree(nodes)
    m = len(nodes)
    kk = min(k + 1, m)
    _, idx = tree.query(nodes, k=kk)
    adjacency = [[] for _ in range(m)]
    seen = set()
    for i in range(m):
        for j in np.atleast_1d(idx[i]):
            j = int(j)
            if j == i or (min(i, j), max(i, j)) in seen:
                continue
            seen.add((min(i, j), max(i, j)))
            if esdf.segment_free(nodes[i], nodes[j], d_c):
                w = float(np.linalg.norm(nodes[i] - nodes[j]))
                adjacency[i].append((j, w))
                adjacency[j].append((i, w))
    return adjacency


def build_roadmap(wp_a, wp_b, esdf, d_c, params: PlannerParams, rng,
                  bounds=None, pair_index=0):
    """Grow an ellipsoid-sampled roadmap until the endpoints connect."""
    wp_a = np.asarray(wp_a, dtype=float)
    wp_b = np.asarray(wp_b, dtype=float)
    focal = np.linalg.norm(wp_b - wp_a)
    n = params.n0
    c_max = max(1.2 * focal, focal + 1.0)
    if bounds is None:
        bounds = (esdf.origin, esdf.upper)
    for _ in range(params.max_rounds):
        samples = sample_ellipsoid(wp_a, wp_b, c_max, rng, bounds=bounds, n=n)
        samples = np.atleast_2d(samples)
        clear = esdf.distance(samples)
        keep = samples[clear > d_c]
        nodes = np.vstack([wp_a, wp_b, keep])
        clearance = esdf.distance(nodes)
        adjacency = _build_edges(nodes, esdf, d_c, params.k_neighbors)
        rm = Roadmap(nodes, clearance, adjacency)
        if rm.connected():
            return rm
        n *= 2
        c_max *= 1.5
    raise PlanningError(pair_index,
                        f"waypoint pair {pair_index}: no path after {params.max_rounds} rounds")


def shortest_path(roadmap: Roadmap, removed=None):
    """Dijkstra from endpoint 0 to endpoint 1; ties break lexicographically.

    Returns the node index sequence or None when disconnected.
    """
    removed = removed or set()
    m = len(roadmap.nodes)
    dist = np.full(m, np.inf)
    pred = np.full(m, -1, dtype=int)
    dist[0] = 0.0
    heap = [(0.0, 0, -1)]
    done = np.zeros(m, dtype=bool)
    while heap:
        d, i, par = heapq.heappop(heap)
        if done[i]:
            continue
        done[i] = True
        pred[i] = par
        if i == 1:
            break
        for j, w in roadmap.adjacency[i]:
            if j in removed or done[j]:
                continue
            nd = d + w
            if nd < dist[j] - 1e-15:
                dist[j] = nd
                heapq.heappush(heap, (nd, j, i))
    if not done[1]:
        return None
    path = [1]
    while path[-1] != 0:
        path.append(int(pred[path[-1]]))
    return path[::-1]


def path_cost(roadmap, path):
    return sum(float(np.linalg.norm(roadmap.nodes[a] - roadmap.nodes[b]))
               for a, b in zip(path[:-1], path[1:]))


def distinct_paths(roadmap: Roadmap, k_paths: int):
    """Extract up to k_paths by repeatedly removing the least-clear node.

    After each shortest path is recorded its interior node with minimal
    clearance is deleted and the search repeats, so successive paths are
    pushed into different corridors.
    """
    removed = set()
    paths = []
    while len(paths) < k_paths:
        path = shortest_path(roadmap, removed)
        if path is None:
            break
        paths.append(path)
        interior = path[1:-1]
        if not interior:
            break
        worst = min(interior, key=lambda i: (roadmap.clearance[i], i))
        removed.add(worst)
    return paths


def shorten(points, esdf, d_c, spacing=0.5):
    """Shortcut a polyline to a fixpoint, then densify for stable projections."""
    pts = [np.asarray(p, dtype=float) for p in points]
    changed = True
    while changed:
        changed = False
        i = 0
        out = [pts[0]]
        while i < len(pts) - 1:
            j = len(pts) - 1
            while j > i + 1 and not esdf.segment_free(pts[i], pts[j], d_c):
                j -= 1
            if j > i + 1:
                changed = True
            out.append(pts[j])
            i = j
        pts = out
    return GuidingPath(np.array(pts)).densify(spacing)


def dedup_homotopy(paths, esdf, d_c, n_points=64):
    """Keep the shortest representative per approximate homotopy class.

    Two paths are considered the same class when a straight-segment sweep
    between their equal-arclength reparameterizations is collision-free.
    """
    order = sorted(range(len(paths)), key=lambda i: paths[i].length)
    kept = []
    for i in order:
        pts_i = paths[i].resample_uniform(n_points)
        same = False
        for j in kept:
            pts_j = paths[j].resample_uniform(n_points)
            if all(esdf.segment_free(a, b, d_c) for a, b in zip(pts_i, pts_j)):
                same = True
                break
        if not same:
            kept.append(i)
    return [paths[i] for i in kept]


@dataclass
class TrackCombination:
    """One full-track polyline assembled from a per-pair path choice."""

    path: GuidingPath
    waypoint_arclengths: np.ndarray  # arclength of each track anchor after the start
    choice: tuple


def concatenate_paths(pair_paths):
    """Chain per-pair paths into a single polyline; junction vertices shared."""
    points = [pair_paths[0].points]
    offsets = []
    total = pair_paths[0].length
    offsets.append(total)
    for p in pair_paths[1:]:
        if not np.allclose(points[-1][-1], p.points[0], atol=1e-9):
            raise ValueError("consecutive paths do not share the junction vertex")
        points.append(p.points[1:])
        total += p.length
        offsets.append(total)
    return GuidingPath(np.vstack(points)), np.array(offsets)


def plan_guiding_paths(scenario, esdf, params: PlannerParams, seed=0):
    """Distinct guiding paths per consecutive waypoint pair, plus the
    shortest full-track combinations used for training.

    Returns (per_pair_paths, combinations); per-pair lists are sorted by
    length and each path runs anchor-center to anchor-center.
    """
    anchors = scenario.track_anchors()
    children = np.random.SeedSequence(seed).spawn(len(anchors) - 1)
    per_pair = []
    for k, (a, b) in enumerate(zip(anchors[:-1], anchors[1:])):
        rng = np.random.default_rng(children[k])
        rm = build_roadmap(a, b, esdf, scenario.d_c, params, rng,
                           bounds=scenario.bounds, pair_index=k)
        raw = distinct_paths(rm, params.k_paths)
        shortened = [shorten(rm.nodes[p], esdf, scenario.d_c, params.resample_spacing)
                     for p in raw]
        deduped = dedup_homotopy(shortened, esdf, scenario.d_c, params.dedup_points)
        per_pair.append(sorted(deduped, key=lambda p: p.length))

    combos = [((), 0.0)]
    for options in per_pair:
        combos = [(c + (i,), length + p.length)
                  for c, length in combos
                  for i, p in enumerate(options)]
    combos.sort(key=lambda x: x[1])
    combinations = []
    for choice, _ in combos[:params.max_combinations]:
        track, offsets = concatenate_paths([per_pair[k][i] for k, i in enumerate(choice)])
        combinations.append(TrackCombination(track, offsets, choice))
    return per_pair, combinations


def export_paths(paths, path):
    """One line per vertex `x y z`, blank line between paths."""
    with open(path, "w") as fh:
        for k, p in enumerate(paths):
            if k:
                fh.write("\n")
            for v in p.points:
                fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")


def import_paths(path):
    paths = []
    block = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                if block:
                    paths.append(GuidingPath(np.array(block)))
                    block = []
                continue
            block.append([float(x) for x in line.split()])
    if block:
        paths.append(GuidingPath(np.array(block)))
    return paths
