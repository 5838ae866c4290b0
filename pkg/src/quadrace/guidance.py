"""Progress along a guiding path and the reward built on it.

Covers closest-point projection onto the polyline, reached distance,
per-step progress, the farthest collision-free point used as the flight
direction cue, and the two-stage curriculum scaling of the reward.
"""

from dataclasses import dataclass

import numpy as np

VISIBILITY_STEP = 0.1  # arclength spacing of the farthest-visible scan [m]


@dataclass
class PathProjection:
    """Closest point on a guiding path from a query position."""

    l: int        # segment index, 1-based
    t: float      # parameter within the segment, in [0, 1]
    psi: np.ndarray
    dist: float
    s: float      # reached distance (arclength up to psi)


@dataclass
class RewardWeights:
    k_p: float = 5.0
    k_s: float = 0.0       # initialize via k_s_init for a given track
    k_wp: float = 5.0
    k_omega: float = 0.01
    r_T: float = -10.0


@dataclass
class CurriculumConfig:
    stage: str = "slow"    # "slow" or "fast"
    v_min: float = 1.0
    v_max: float = 2.0
    d_max: float = 0.3

    def __post_init__(self):
        if self.stage not in ("slow", "fast"):
            raise ValueError("stage must be 'slow' or 'fast'")
        if not 0 <= self.v_min < self.v_max:
            raise ValueError("need 0 <= v_min < v_max")
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")


def project(path, p, window=None):
    """Global (or windowed) closest-point projection onto the polyline.

    `window` restricts the search to segments [lo, hi] (1-based,
    inclusive) around a previous projection so that reached distance
    cannot jump across self-approaching track sections.  Distance ties
    within 1e-9 break toward larger reached distance, which suppresses
    spurious negative progress at sharp corners.
    """
    p = np.asarray(p, dtype=float)
    pts = path.points
    starts = pts[:-1]
    dirs = pts[1:] - starts
    seg_len2 = np.einsum("ij,ij->i", dirs, dirs)
    if window is not None:
        lo = max(window[0] - 1, 0)
        hi = min(window[1], len(starts))
    else:
        lo, hi = 0, len(starts)
    sl = slice(lo, hi)
    valid = seg_len2[sl] > 0
    t = np.einsum("ij,ij->i", p - starts[sl], dirs[sl]) / np.where(valid, seg_len2[sl], 1.0)
    t = np.clip(t, 0.0, 1.0)
    psi = starts[sl] + t[:, None] * dirs[sl]
    dist = np.linalg.norm(p - psi, axis=1)
    dist = np.where(valid, dist, np.inf)
    s = path.cumlen[lo:hi] + t * np.sqrt(np.where(valid, seg_len2[sl], 0.0))
    best = np.argmin(dist)
    ties = np.flatnonzero(dist <= dist[best] + 1e-9)
    k = ties[np.argmax(s[ties])]
    return PathProjection(l=lo + k + 1, t=float(t[k]), psi=psi[k],
                          dist=float(dist[k]), s=float(s[k]))


def reached_distance(path, proj: PathProjection):
    """Arclength of the path up to the projection point."""
    return float(path.cumlen[proj.l - 1]
                 + np.linalg.norm(proj.psi - path.points[proj.l - 1]))


def progress_reward(s_t, s_prev):
    """Per-step increase of reached distance (negative when moving back)."""
    return s_t - s_prev


def visibility_samples(path, step=VISIBILITY_STEP):
    """Arclengths and positions of the fixed visibility scan grid."""
    n = max(2, int(np.ceil(path.length / step)) + 1)
    svals = np.linspace(0.0, path.length, n)
    return svals, path.point_at(svals)


def farthest_visible(path, p, esdf, d_c, proj=None, samples=None):
    """Farthest point on the path reachable by a straight free segment.

    The path is sampled every 0.1 m of arclength; scanning forward from
    the projection of `p`, visibility must be contiguous: the scan stops
    at the first occluded sample.  Falls back to the projection point
    itself when even that is occluded.
    """
    p = np.asarray(p, dtype=float)
    if proj is None:
        proj = project(path, p)
    if samples is None:
        samples = visibility_samples(path)
    svals, pts = samples
    if not esdf.segment_free(p, proj.psi, d_c):
        return proj.psi
    i = int(np.searchsorted(svals, proj.s))
    gamma = proj.psi
    while i < len(svals):
        if not esdf.segment_free(p, pts[i], d_c):
            break
        gamma = pts[i]
        i += 1
    return gamma


def curriculum_scale(speed, dist, cfg: CurriculumConfig):
    """Slow-stage damping of the progress terms outside the speed window
    and away from the guiding path; identity in the fast stage."""
    if cfg.stage == "fast":
        return 1.0
    s_vmax = 10.0 ** (cfg.v_max - speed) if speed > cfg.v_max else 1.0
    s_vmin = 10.0 ** (speed - cfg.v_min) if speed < cfg.v_min else 1.0
    s_gd = np.exp(-dist + cfg.d_max) if dist > cfg.d_max else 1.0
    return float(s_vmax * s_vmin * s_gd)


def k_s_init(v_max, dt, path_length):
    """Reached-distance gain making k_s * L = 2 * v_max * dt."""
    if path_length <= 0:
        raise ValueError("path length must be positive")
    return 2.0 * v_max * dt / path_length


def total_reward(proj_t: PathProjection, proj_prev: PathProjection,
                 weights: RewardWeights, cfg: CurriculumConfig, *,
                 speed, w, r_tol, wp_distance=None, collided=False):
    """Per-step reward and its term breakdown.

    Curriculum scaling applies to the progress and reached-distance
    terms only; waypoint, terminal, and body-rate terms are unscaled.
    """
    r_p = progress_reward(proj_t.s, proj_prev.s)
    scale = curriculum_scale(speed, proj_t.dist, cfg)
    terms = {
        "r_p": scale * weights.k_p * r_p,
        "s": scale * weights.k_s * proj_t.s,
        "wp": weights.k_wp * np.exp(-wp_distance / r_tol) if wp_distance is not None else 0.0,
        "terminal": weights.r_T if collided else 0.0,
        "rate": -weights.k_omega * float(np.linalg.norm(w)),
    }
    return sum(terms.values()), terms
