"""Environment model: obstacle primitives, ESDF grid, waypoint geometry.

The environment is a bounded axis-aligned arena with sphere/box/cylinder
obstacles.  Collision checking goes through a discretized Euclidean
signed distance field (negative inside obstacles); the arena boundary
itself counts as an obstacle.  The vehicle is abstracted as a ball of
radius d_c around its position.
"""

from dataclasses import dataclass, field

import numpy as np

from .dynamics import quat_normalize, quat_rotate_inv, quat_to_rot

DEFAULT_RESOLUTION = 0.05
DEFAULT_R_TOL = 0.3


@dataclass
class ObstaclePrimitive:
    """Sphere, axis-sized box, or capped cylinder with a rigid pose.

    size: sphere -> (radius,); box -> full edge lengths (sx, sy, sz);
    cylinder -> (radius, height), axis along local z.
    """

    kind: str
    center: np.ndarray
    size: np.ndarray
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.size = np.atleast_1d(np.asarray(self.size, dtype=float))
        self.quat = quat_normalize(np.asarray(self.quat, dtype=float))
        if self.kind not in ("sphere", "box", "cylinder"):
            raise ValueError(f"unknown obstacle kind {self.kind!r}")
        if np.any(self.size <= 0):
            raise ValueError("obstacle extents must be positive")

    def signed_distance(self, points):
        """Exact signed distance from points (..., 3) to the surface."""
        local = np.einsum("ji,...j->...i", quat_to_rot(self.quat), points - self.center)
        if self.kind == "sphere":
            return np.linalg.norm(local, axis=-1) - self.size[0]
        if self.kind == "box":
            half = self.size / 2.0 if self.size.shape[-1] == 3 else np.full(3, self.size[0] / 2)
            d = np.abs(local) - half
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            inside = np.minimum(np.max(d, axis=-1), 0.0)
            return outside + inside
        # capped cylinder, axis along local z
        r, h = self.size[0], self.size[1]
        dr = np.linalg.norm(local[..., :2], axis=-1) - r
        dz = np.abs(local[..., 2]) - h / 2.0
        d = np.stack([dr, dz], axis=-1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(np.max(d, axis=-1), 0.0)
        return outside + inside


def boundary_distance(points, lo, hi):
    """Distance to the nearest arena face (negative outside the arena)."""
    points = np.asarray(points, dtype=float)
    return np.min(np.concatenate([points - lo, hi - points], axis=-1), axis=-1)


def analytic_distance(points, obstacles, lo, hi):
    """Min over primitives and arena boundary of the exact signed distance."""
    d = boundary_distance(points, lo, hi)
    for ob in obstacles:
        d = np.minimum(d, ob.signed_distance(points))
    return d


class Esdf:
    """Euclidean signed distance field on a regular grid.

    Node (i, j, k) sits at origin + (i, j, k) * resolution; queries are
    trilinearly interpolated.  Immutable after construction.
    """

    def __init__(self, origin, resolution, values):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        self.origin = np.asarray(origin, dtype=float)
        self.resolution = float(resolution)
        self.values = np.asarray(values, dtype=np.float32)
        self.dims = np.array(self.values.shape)

    @property
    def upper(self):
        return self.origin + (self.dims - 1) * self.resolution

    def query(self, points):
        """Trilinear distance and in-bounds flag; out-of-bounds reads 0."""
        points = np.asarray(points, dtype=float)
        rel = (points - self.origin) / self.resolution
        in_bounds = np.all((rel >= -1e-9) & (rel <= self.dims - 1 + 1e-9), axis=-1)
        rel = np.clip(rel, 0.0, self.dims - 1.0)
        i0 = np.minimum(rel.astype(int), self.dims - 2)
        f = rel - i0
        ix, iy, iz = np.moveaxis(i0, -1, 0)
        fx, fy, fz = np.moveaxis(f, -1, 0)
        v = self.values
        c00 = v[ix, iy, iz] * (1 - fx) + v[ix + 1, iy, iz] * fx
        c01 = v[ix, iy, iz + 1] * (1 - fx) + v[ix + 1, iy, iz + 1] * fx
        c10 = v[ix, iy + 1, iz] * (1 - fx) + v[ix + 1, iy + 1, iz] * fx
        c11 = v[ix, iy + 1, iz + 1] * (1 - fx) + v[ix + 1, iy + 1, iz + 1] * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        d = c0 * (1 - fz) + c1 * fz
        return np.where(in_bounds, d, 0.0), in_bounds

    def distance(self, points):
        return self.query(points)[0]

    def is_collision(self, points, d_c):
        """Inclusive threshold test: in collision iff distance <= d_c.

        Compared at the grid's float32 precision so a voxel storing
        exactly d_c counts as a collision.
        """
        return self.distance(points).astype(np.float32) <= np.float32(d_c)

    def segment_free(self, a, b, d_c):
        """Sample a->b at arclength steps <= resolution/2; all must be clear."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        length = np.linalg.norm(b - a)
        n = max(2, int(np.ceil(length / (self.resolution / 2))) + 1)
        ts = np.linspace(0.0, 1.0, n)
        pts = a + ts[:, None] * (b - a)
        return not np.any(self.is_collision(pts, d_c))

    def export_raw(self, path):
        """Text header (origin, resolution, dims) + little-endian f32 grid.

        Grid values are row-major with x fastest, i.e. index order (z, y, x).
        """
        with open(path, "wb") as fh:
            header = (f"esdf\norigin {self.origin[0]} {self.origin[1]} {self.origin[2]}\n"
                      f"resolution {self.resolution}\n"
                      f"dims {self.dims[0]} {self.dims[1]} {self.dims[2]}\n")
            fh.write(header.encode())
            fh.write(np.ascontiguousarray(self.values.transpose(2, 1, 0), dtype="<f4").tobytes())

    @classmethod
    def import_raw(cls, path):
        with open(path, "rb") as fh:
            magic = fh.readline().strip()
            if magic != b"esdf":
                raise ValueError("not an ESDF export")
            origin = np.array(fh.readline().split()[1:], dtype=float)
            resolution = float(fh.readline().split()[1])
            dims = np.array(fh.readline().split()[1:], dtype=int)
            data = np.frombuffer(fh.read(), dtype="<f4")
            if data.size != int(np.prod(dims)):
                raise ValueError("truncated ESDF grid")
            values = data.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
        return cls(origin, resolution, values)


def build_esdf(obstacles, bounds, resolution=DEFAULT_RESOLUTION):
    """Evaluate the analytic signed distance on a regular grid over bounds."""
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if np.any(hi - lo <= 0):
        raise ValueError("bounds must be non-degenerate")
    dims = np.floor((hi - lo) / resolution + 1e-9).astype(int) + 1
    axes = [lo[k] + resolution * np.arange(dims[k]) for k in range(3)]
    values = np.empty(dims, dtype=np.float32)
    # one yz-slab at a time keeps peak memory flat on large arenas
    yy, zz = np.meshgrid(axes[1], axes[2], indexing="ij")
    pts = np.empty(yy.shape + (3,))
    pts[..., 1] = yy
    pts[..., 2] = zz
    for i, x in enumerate(axes[0]):
        pts[..., 0] = x
        values[i] = analytic_distance(pts, obstacles, lo, hi)
    return Esdf(lo, resolution, values)


@dataclass
class Waypoint:
    """Gate to pass: center, orientation (plane normal = local x), tolerance."""

    center: np.ndarray
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    r_tol: float = DEFAULT_R_TOL

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.quat = quat_normalize(np.asarray(self.quat, dtype=float))
        if self.r_tol <= 0:
            raise ValueError("r_tol must be positive")

    @property
    def normal(self):
        return quat_to_rot(self.quat)[:, 0]

    def corners(self):
        """4x3 corners of the 2*r_tol square in the gate plane, order ++,+-,--,-+."""
        r = self.r_tol
        local = np.array([[0, r, r], [0, r, -r], [0, -r, -r], [0, -r, r]], dtype=float)
        return self.center + local @ quat_to_rot(self.quat).T


def waypoint_passed(p_prev, p, wp: Waypoint):
    """Miss distance if the step p_prev->p passes the gate, else None.

    A pass is either the segment crossing the gate plane within r_tol of
    the center, or the new position entering the r_tol ball (so slow
    near-plane flight still registers).  Both tests are inclusive.
    """
    p_prev = np.asarray(p_prev, dtype=float)
    p = np.asarray(p, dtype=float)
    n = wp.normal
    s0 = np.dot(p_prev - wp.center, n)
    s1 = np.dot(p - wp.center, n)
    if s0 * s1 <= 0.0 and s0 != s1:
        t = s0 / (s0 - s1)
        cross = p_prev + t * (p - p_prev)
        d = np.linalg.norm(cross - wp.center)
        if d <= wp.r_tol:
            return d
    d = np.linalg.norm(p - wp.center)
    if d <= wp.r_tol:
        return d
    return None


@dataclass
class Scenario:
    """A planning/training problem instance."""

    bounds: tuple
    obstacles: list
    start_position: np.ndarray
    waypoints: list
    d_c: float = 0.15
    end_position: np.ndarray | None = None
    resolution: float = DEFAULT_RESOLUTION

    def __post_init__(self):
        self.start_position = np.asarray(self.start_position, dtype=float)
        lo, hi = (np.asarray(b, dtype=float) for b in self.bounds)
        self.bounds = (lo, hi)
        if self.end_position is not None:
            self.end_position = np.asarray(self.end_position, dtype=float)
        for wp in self.waypoints:
            if np.any(wp.center < lo) or np.any(wp.center > hi):
                raise ValueError(f"waypoint at {wp.center} outside world bounds")

    def track_anchors(self):
        """The sequence of points the guiding paths must chain through."""
        pts = [self.start_position] + [wp.center for wp in self.waypoints]
        if self.end_position is not None:
            pts.append(self.end_position)
        return pts

    def build_esdf(self):
        return build_esdf(self.obstacles, self.bounds, self.resolution)
