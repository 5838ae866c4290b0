"""Curriculum training of the racing policy with parallel agents.

A vectorized environment steps all agents at once (dynamics, ESDF
queries, path projection, reward).  Agents restart from their per-agent
vector of valid states binned by 1 m of track arclength, with drag
coefficients resampled per episode.  Training runs in two stages: a
slow stage with speed/proximity reward scaling, switched to the fast
stage once deterministic evaluations complete the track consistently.
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import policy as pol
from .dynamics import QuadState, low_level_control, motor_speed_for_thrust, quat_to_rot, step
from .guidance import CurriculumConfig, RewardWeights, k_s_init
from .policy import PolicyParams, PpoConfig
from .world import Waypoint

BIN_SIZE = 1.0          # valid-state arclength bin [m]
PROJ_WINDOW = 20        # projection search half-window, segments
VIS_STEP = 0.1          # visibility-scan arclength spacing [m]


@dataclass
class TrainConfig:
    n_agents: int = 100
    max_episode_steps: int = 1500
    dt: float = 0.02
    eval_every: int = 4                 # iterations between deterministic evals
    switch_after: int = 3               # consecutive clean evals to enter fast stage
    max_env_steps: int = 2_000_000
    seed: int = 0
    target_success: float | None = None  # early stop on drag-randomized eval
    target_eval_runs: int = 30
    require_lap_improvement: bool = False  # only stop once the fast-stage lap beats the slow one
    fast_stage_steps: int | None = None  # extra budget after the switch

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("need at least one agent")


def stage_switch_check(recent_completions, k=3):
    """True when the last k deterministic evaluations all completed."""
    if len(recent_completions) < k:
        return False
    return all(recent_completions[-k:])


def _project_batch(path, P, seg_prev=None, half_window=PROJ_WINDOW):
    """Windowed closest-point projection for a batch of positions.

    seg_prev gives each agent's previous 0-based segment index; None
    searches globally.  Ties within 1e-9 break toward larger arclength.
    Returns (seg, s, dist, psi).
    """
    pts = path.points
    n_seg = len(pts) - 1
    if seg_prev is None:
        idx = np.broadcast_to(np.arange(n_seg), (len(P), n_seg))
    else:
        offs = np.arange(-half_window, half_window + 1)
        idx = np.clip(seg_prev[:, None] + offs, 0, n_seg - 1)
    starts = pts[idx]
    dirs = pts[idx + 1] - starts
    seg_len2 = np.einsum("nkj,nkj->nk", dirs, dirs)
    t = np.einsum("nkj,nkj->nk", P[:, None] - starts, dirs) / np.maximum(seg_len2, 1e-300)
    t = np.clip(t, 0.0, 1.0)
    psi = starts + t[..., None] * dirs
    dist = np.linalg.norm(P[:, None] - psi, axis=-1)
    s = path.cumlen[idx] + t * np.sqrt(seg_len2)
    best = np.min(dist, axis=1, keepdims=True)
    s_masked = np.where(dist <= best + 1e-9, s, -np.inf)
    k = np.argmax(s_masked, axis=1)
    rows = np.arange(len(P))
    return idx[rows, k], s[rows, k], dist[rows, k], psi[rows, k]


class RaceEnv:
    """All agents of one scenario stepped in lockstep."""

    def __init__(self, scenario, esdf, combinations, quad_params, weights,
                 curriculum, cfg: TrainConfig, rng, eval_mode=False,
                 drag_randomization=True):
        self.sc = scenario
        self.esdf = esdf
        self.combos = combinations
        self.qp = quad_params
        self.weights = weights
        self.cur = curriculum
        self.cfg = cfg
        self.rng = rng
        self.eval_mode = eval_mode
        self.drag_randomization = drag_randomization

        n = cfg.n_agents
        self.n = n
        self.n_wp = len(scenario.waypoints)
        self.wp_centers = np.array([w.center for w in scenario.waypoints])
        self.wp_normals = np.array([w.normal for w in scenario.waypoints])
        self.wp_r_tol = np.array([w.r_tol for w in scenario.waypoints])
        self.wp_corners = np.array([w.corners() for w in scenario.waypoints])

        # per-combination caches
        self.tracks = [c.path for c in combinations]
        self.wp_arclens = [c.waypoint_arclengths[:self.n_wp] for c in combinations]
        self.vis = []
        for track in self.tracks:
            m = max(2, int(np.ceil(track.length / VIS_STEP)) + 1)
            svals = np.linspace(0.0, track.length, m)
            self.vis.append((svals, track.point_at(svals)))

        hover_omega = motor_speed_for_thrust(quad_params.hover_thrust, quad_params)
        self.state = QuadState(
            p=np.tile(scenario.start_position, (n, 1)),
            q=np.tile([1.0, 0, 0, 0], (n, 1)),
            v=np.zeros((n, 3)),
            w=np.zeros((n, 3)),
            omega=np.full((n, 4), hover_omega),
        )
        self.k_v_agents = np.tile(quad_params.k_v, (n, 1))
        self.qp_batch = dataclasses.replace(quad_params, k_v=self.k_v_agents)

        self.combo = np.zeros(n, dtype=int)
        self.active_wp = np.zeros(n, dtype=int)
        self.steps = np.zeros(n, dtype=int)
        self.s = np.zeros(n)
        self.seg = np.zeros(n, dtype=int)
        self.dist = np.zeros(n)
        self.gamma = np.zeros((n, 3))
        self.vis_idx = np.zeros(n, dtype=int)

        # valid-state vector, one slot per 1 m arclength bin
        max_len = max(t.length for t in self.tracks)
        self.n_bins = int(np.ceil(max_len / BIN_SIZE)) + 1
        self.vs_filled = np.zeros((n, self.n_bins), dtype=bool)
        self.vs_p = np.zeros((n, self.n_bins, 3))
        self.vs_q = np.zeros((n, self.n_bins, 4))
        self.vs_v = np.zeros((n, self.n_bins, 3))
        self.vs_w = np.zeros((n, self.n_bins, 3))
        self.vs_omega = np.zeros((n, self.n_bins, 4))

        self.reset_agents(np.arange(n))

    # -- episode management ------------------------------------------------

    def _start_state(self, i):
        hover_omega = motor_speed_for_thrust(self.qp.hover_thrust, self.qp)
        self.state.p[i] = self.sc.start_position
        self.state.q[i] = (1.0, 0.0, 0.0, 0.0)
        self.state.v[i] = 0.0
        self.state.w[i] = 0.0
        self.state.omega[i] = hover_omega

    def reset_agent(self, i):
        """Restore a random valid state (or the start state) and resample
        the guiding-path combination and drag coefficients."""
        if self.eval_mode:
            self.combo[i] = 0
            self._start_state(i)
        else:
            self.combo[i] = self.rng.integers(len(self.combos))
            bins = np.flatnonzero(self.vs_filled[i])
            if bins.size == 0:
                self._start_state(i)
            else:
                b = bins[self.rng.integers(bins.size)]
                self.state.p[i] = self.vs_p[i, b]
                self.state.q[i] = self.vs_q[i, b]
                self.state.v[i] = self.vs_v[i, b]
                self.state.w[i] = self.vs_w[i, b]
                self.state.omega[i] = self.vs_omega[i, b]
        if self.drag_randomization:
            self.k_v_agents[i] = np.maximum(self.rng.normal(0.0, self.qp.k_v), 0.0)
        else:
            self.k_v_agents[i] = self.qp.k_v
        self.steps[i] = 0
        track = self.tracks[self.combo[i]]
        seg, s, dist, _ = _project_batch(track, self.state.p[i][None], None)
        self.seg[i], self.s[i], self.dist[i] = seg[0], s[0], dist[0]
        self.active_wp[i] = min(
            int(np.searchsorted(self.wp_arclens[self.combo[i]], self.s[i], side="right")),
            self.n_wp - 1)
        self._rescan_gamma(i)

    def reset_agents(self, indices):
        for i in np.atleast_1d(indices):
            self.reset_agent(int(i))

    # -- farthest visible point ---------------------------------------------

    def _visible_mask(self, p, targets):
        """Line-of-sight test from p to each target with one grid query.

        Segments are sampled at half the grid resolution or finer (the
        shared sample count comes from the longest segment, so shorter
        ones are sampled denser, which only makes the test stricter).
        """
        d = targets - p
        lens = np.linalg.norm(d, axis=1)
        n = max(2, int(np.ceil(lens.max() / (self.esdf.resolution / 2.0))) + 1)
        t = np.linspace(0.0, 1.0, n)
        pts = p + t[None, :, None] * d[:, None, :]
        hit = self.esdf.is_collision(pts.reshape(-1, 3), self.sc.d_c)
        return ~hit.reshape(len(targets), n).any(axis=1)

    def _gamma_limit(self, i):
        """Sample-index bound of the scan: just past the active waypoint.

        The lookahead target never points beyond a gate the agent has not
        passed yet. Without the bound, open worlds let gamma jump across
        the zigzag to later path sections and the policy learns to chase
        it straight past the gates.
        """
        svals = self.vis[self.combo[i]][0]
        if self.active_wp[i] >= self.n_wp:
            return len(svals)
        s_gate = self.wp_arclens[self.combo[i]][self.active_wp[i]]
        return max(1, int(np.searchsorted(svals, s_gate, side="right")))

    def _scan_gamma(self, i, j, gamma, chunk=16):
        """Walk the visibility samples forward from index j in chunks."""
        svals, pts = self.vis[self.combo[i]]
        limit = self._gamma_limit(i)
        p = self.state.p[i]
        while j < limit:
            vis = self._visible_mask(p, pts[j:min(j + chunk, limit)])
            k = int(np.argmin(vis)) if not vis.all() else len(vis)
            if k > 0:
                gamma = pts[j + k - 1]
            j += k
            if k < len(vis):
                break
        self.gamma[i] = gamma
        self.vis_idx[i] = j - 1

    def _rescan_gamma(self, i):
        """Fresh forward visibility scan from the current projection."""
        track = self.tracks[self.combo[i]]
        svals = self.vis[self.combo[i]][0]
        limit = self._gamma_limit(i)
        s0 = min(self.s[i], svals[limit - 1])
        psi = track.point_at(s0)
        if not self._visible_mask(self.state.p[i], psi[None])[0]:
            self.gamma[i] = psi
            self.vis_idx[i] = -1
            return
        j = int(np.searchsorted(svals, s0))
        self._scan_gamma(i, j, psi)

    def _advance_gamma(self, i):
        """Extend the cached visibility frontier; rescan when it breaks."""
        svals, pts = self.vis[self.combo[i]]
        j = self.vis_idx[i]
        limit = self._gamma_limit(i)
        i0 = min(int(np.searchsorted(svals, self.s[i])), limit - 1)
        if j < i0 or j < 0 or j >= limit or \
                not self._visible_mask(self.state.p[i], pts[j][None])[0]:
            self._rescan_gamma(i)
            return
        self._scan_gamma(i, j + 1, pts[j], chunk=8)

    # -- observation and stepping -------------------------------------------

    def observe(self, indices=None):
        idx = np.arange(self.n) if indices is None else np.atleast_1d(indices)
        sub = QuadState(self.state.p[idx], self.state.q[idx],
                        self.state.v[idx], self.state.w[idx], self.state.omega[idx])
        corners = self.wp_corners[np.clip(self.active_wp[idx], 0, self.n_wp - 1)]
        obs = np.concatenate([
            sub.p / pol.POS_SCALE,
            quat_to_rot(sub.q).reshape(len(idx), 9),
            sub.v / pol.VEL_SCALE,
            corners.reshape(len(idx), 12) / pol.POS_SCALE,
            (self.gamma[idx] - sub.p) / pol.POS_SCALE,
        ], axis=1)
        return obs

    def step_agents(self, actions):
        """Advance every agent one control step.

        actions: (n, 4) normalized commands (already clamped).  Returns
        (rewards, ended, info); ended agents are NOT auto-reset so the
        caller can bootstrap values first.
        """
        n = self.n
        cmd = pol.action_decode(actions, self.qp)
        motor = low_level_control(self.state, cmd, self.qp)
        p_prev = self.state.p.copy()
        self.state = step(self.state, motor, self.cfg.dt, self.qp_batch)
        self.steps += 1

        finite = np.isfinite(self.state.p).all(axis=1) & np.isfinite(self.state.v).all(axis=1) \
            & np.isfinite(self.state.q).all(axis=1) & np.isfinite(self.state.w).all(axis=1)
        p_now = np.where(finite[:, None], self.state.p, p_prev)
        collided = self.esdf.is_collision(p_now, self.sc.d_c) | ~finite

        # waypoint pass: plane crossing within r_tol, or entering the ball
        wp_idx = np.clip(self.active_wp, 0, self.n_wp - 1)
        centers = self.wp_centers[wp_idx]
        normals = self.wp_normals[wp_idx]
        r_tols = self.wp_r_tol[wp_idx]
        s0 = np.einsum("ij,ij->i", p_prev - centers, normals)
        s1 = np.einsum("ij,ij->i", p_now - centers, normals)
        crossing = (s0 * s1 <= 0) & (s0 != s1)
        tpar = np.where(crossing, s0 / np.where(s0 != s1, s0 - s1, 1.0), 0.0)
        cross_pt = p_prev + tpar[:, None] * (p_now - p_prev)
        d_cross = np.linalg.norm(cross_pt - centers, axis=1)
        d_ball = np.linalg.norm(p_now - centers, axis=1)
        pass_cross = crossing & (d_cross <= r_tols)
        pass_ball = d_ball <= r_tols
        passed = (pass_cross | pass_ball) & (self.active_wp < self.n_wp) & finite
        d_wp = np.where(pass_cross, d_cross, d_ball)

        # re-anchor the projection window at the passed waypoint
        for i in np.flatnonzero(passed):
            track = self.tracks[self.combo[i]]
            s_wp = self.wp_arclens[self.combo[i]][self.active_wp[i]]
            self.seg[i] = min(int(np.searchsorted(track.cumlen, s_wp, side="right")) - 1,
                              len(track.points) - 2)

        # projection per combination group
        s_prev = self.s.copy()
        s_new = np.empty(n)
        dist_new = np.empty(n)
        for c in range(len(self.combos)):
            grp = np.flatnonzero(self.combo == c)
            if grp.size == 0:
                continue
            seg, s, dist, _ = _project_batch(self.tracks[c], p_now[grp], self.seg[grp])
            self.seg[grp] = seg
            s_new[grp] = s
            dist_new[grp] = dist
        self.s = s_new
        self.dist = dist_new

        speed = np.linalg.norm(self.state.v, axis=1)
        if self.cur.stage == "slow":
            s_vmax = np.where(speed > self.cur.v_max, 10.0 ** (self.cur.v_max - speed), 1.0)
            s_vmin = np.where(speed < self.cur.v_min, 10.0 ** (speed - self.cur.v_min), 1.0)
            s_gd = np.where(dist_new > self.cur.d_max, np.exp(-dist_new + self.cur.d_max), 1.0)
            scale = s_vmax * s_vmin * s_gd
        else:
            scale = np.ones(n)

        self.active_wp = self.active_wp + passed

        # Arclength is only worth reward up to the active waypoint; path
        # beyond an unpassed gate is unlocked by passing it.  Otherwise
        # projection keeps paying agents that sweep past the gates.
        arclens = np.array([self.wp_arclens[c] for c in self.combo])
        gate_idx = np.clip(self.active_wp, 0, self.n_wp - 1)
        s_cap = np.where(self.active_wp >= self.n_wp, np.inf,
                         arclens[np.arange(n), gate_idx])
        s_r_new = np.minimum(s_new, s_cap)
        s_r_prev = np.minimum(s_prev, s_cap)

        rate_pen = self.weights.k_omega * np.linalg.norm(self.state.w, axis=1)
        terms = {
            "r_p": scale * self.weights.k_p * (s_r_new - s_r_prev),
            "s": scale * self.weights.k_s * s_r_new,
            "wp": np.where(passed, self.weights.k_wp * np.exp(-d_wp / r_tols), 0.0),
            "terminal": np.where(collided, self.weights.r_T, 0.0),
            "rate": -rate_pen,
        }
        rewards = sum(terms.values())

        finished = passed & (self.active_wp == self.n_wp)
        truncated = (self.steps >= self.cfg.max_episode_steps) & ~collided & ~finished
        ended = collided | finished | truncated

        self.record_valid_states(~ended)

        for i in np.flatnonzero(~ended):
            self._advance_gamma(i)

        info = {
            "collided": collided,
            "finished": finished,
            "truncated": truncated,
            "lap_time": self.steps * self.cfg.dt,
            "terms": terms,
            "saturated": motor.saturated,
        }
        return rewards, ended, info

    def record_valid_states(self, mask):
        """Store qualifying states into their 1 m arclength bins.

        Slow stage requires the speed window and path proximity; fast
        stage only collision freedom (the caller passes non-ended agents).
        States past the final waypoint are not useful for restarts.

        A state is only stored when every waypoint before its arclength
        was actually passed this episode.  Restored states re-derive the
        active waypoint from arclength, so an inconsistent entry would
        spawn episodes where skipped gates count as cleared, and the
        policy learns to sweep past gates instead of through them.
        """
        if self.eval_mode:
            return
        speed = np.linalg.norm(self.state.v, axis=1)
        ok = mask.copy()
        if self.cur.stage == "slow":
            ok &= (speed > self.cur.v_min) & (speed < self.cur.v_max)
            ok &= self.dist < self.cur.d_max
        arclens = np.array([self.wp_arclens[c] for c in self.combo])
        gates_behind = (arclens < self.s[:, None] - 1e-9).sum(axis=1)
        ok &= self.active_wp >= gates_behind
        last_wp_s = arclens[:, -1]
        ok &= self.s < last_wp_s
        idx = np.flatnonzero(ok)
        if idx.size == 0:
            return
        bins = (self.s[idx] / BIN_SIZE).astype(int)
        self.vs_filled[idx, bins] = True
        self.vs_p[idx, bins] = self.state.p[idx]
        self.vs_q[idx, bins] = self.state.q[idx]
        self.vs_v[idx, bins] = self.state.v[idx]
        self.vs_w[idx, bins] = self.state.w[idx]
        self.vs_omega[idx, bins] = self.state.omega[idx]


# ---------------------------------------------------------------------------
# rollout collection and training

def initial_policy(quad_params, hidden=128, rng=None, dtype=np.float32):
    """Fresh policy whose mean thrust starts at hover instead of mid-range.

    A zero-initialized head commands the middle of the thrust box, which
    for a racing quad is well above 1 g; biasing the thrust output to
    hover removes the initial climb-and-crash phase.
    """
    params = PolicyParams(hidden=hidden, rng=rng, dtype=dtype)
    a_hover = 2.0 * 4 * quad_params.hover_thrust / (4 * quad_params.f_max) - 1.0
    params.policy["b3"][0] = np.arctanh(np.clip(a_hover, -0.99, 0.99)).astype(dtype)
    return params


def collect_rollout(env: RaceEnv, params: PolicyParams, T, rng):
    """T vectorized steps; returns the flattened PPO batch and counters."""
    n = env.n
    obs_buf = np.empty((T, n, pol.OBS_DIM), dtype=np.float32)
    act_buf = np.empty((T, n, pol.ACT_DIM))
    logp_buf = np.empty((T, n))
    val_buf = np.empty((T, n))
    rew_buf = np.empty((T, n))
    ended_buf = np.zeros((T, n))
    boot_buf = np.zeros((T, n))   # V(s_{t+1}) where the episode was truncated
    stats = {"finished": 0, "collided": 0, "truncated": 0, "lap_times": []}

    for t in range(T):
        obs = env.observe()
        a_clamped, raw, logp, value = pol.sample_action(params, obs, rng)
        rewards, ended, info = env.step_agents(a_clamped)
        obs_buf[t] = obs
        act_buf[t] = raw
        logp_buf[t] = logp
        val_buf[t] = value
        rew_buf[t] = rewards
        ended_buf[t] = ended
        trunc = np.flatnonzero(info["truncated"])
        if trunc.size:
            _, _, v_next = params.forward(env.observe(trunc))
            boot_buf[t, trunc] = v_next
        stats["finished"] += int(info["finished"].sum())
        stats["collided"] += int(info["collided"].sum())
        stats["truncated"] += int(info["truncated"].sum())
        stats["lap_times"].extend(info["lap_time"][info["finished"]].tolist())
        env.reset_agents(np.flatnonzero(ended))

    _, _, v_final = params.forward(env.observe())
    next_values = np.vstack([val_buf[1:], v_final[None]])
    next_values = np.where(ended_buf > 0, boot_buf, next_values)
    return {
        "obs": obs_buf, "actions": act_buf, "logp": logp_buf, "values": val_buf,
        "rewards": rew_buf, "ended": ended_buf, "next_values": next_values,
    }, stats


def make_batch(roll, cfg: PpoConfig):
    adv, ret = pol.gae_advantages(roll["rewards"], roll["values"],
                                  roll["next_values"], roll["ended"],
                                  cfg.gamma, cfg.lam)
    T, n = roll["rewards"].shape
    return {
        "obs": roll["obs"].reshape(T * n, -1),
        "actions": roll["actions"].reshape(T * n, -1),
        "logp": roll["logp"].reshape(-1),
        "adv": adv.reshape(-1),
        "returns": ret.reshape(-1),
    }


def evaluate(params, scenario, esdf, combinations, quad_params, weights,
             curriculum, n_runs=30, drag_randomization=False, seed=0,
             max_episode_steps=1500, dt=0.02, record_trajectories=False,
             deterministic=True):
    """Mean-action rollouts from the start state.

    Success means passing every waypoint within its tolerance before the
    step cap without collision.  Returns aggregate stats and, when
    requested, per-run trajectory records in the CSV column layout.
    """
    cfg = TrainConfig(n_agents=n_runs, max_episode_steps=max_episode_steps,
                      dt=dt, seed=seed)
    cur = dataclasses.replace(curriculum, stage="fast")  # no reward scaling in eval
    env = RaceEnv(scenario, esdf, combinations, quad_params, weights, cur, cfg,
                  np.random.default_rng(seed), eval_mode=True,
                  drag_randomization=drag_randomization)
    act_rng = np.random.default_rng(seed + 1)
    done = np.zeros(n_runs, dtype=bool)
    success = np.zeros(n_runs, dtype=bool)
    lap = np.full(n_runs, np.nan)
    traj = [[] for _ in range(n_runs)] if record_trajectories else None
    for t in range(max_episode_steps):
        obs = env.observe()
        if deterministic:
            mean, _, _ = params.forward(obs)
            actions = np.clip(mean.astype(float), -1.0, 1.0)
        else:
            actions, _, _, _ = pol.sample_action(params, obs, act_rng)
        active_before = ~done
        _, ended, info = env.step_agents(actions)
        if record_trajectories:
            for i in np.flatnonzero(active_before):
                terms = info["terms"]
                traj[i].append(np.concatenate([
                    [env.steps[i] * dt], env.state.p[i], env.state.q[i],
                    env.state.v[i], env.state.w[i], env.state.omega[i], actions[i],
                    [terms["r_p"][i], terms["s"][i], terms["wp"][i],
                     terms["terminal"][i], terms["rate"][i]],
                    [env.active_wp[i]],
                ]))
        newly = ended & ~done
        success |= info["finished"] & newly
        lap = np.where(info["finished"] & newly, info["lap_time"], lap)
        done |= ended
        if done.all():
            break
        # freeze finished/crashed runs in place instead of resetting
        env.steps[done] = 0
        env.state.v[done] = 0.0
        env.state.w[done] = 0.0

    times = lap[success]
    stats = {
        "n_runs": n_runs,
        "success_rate": float(success.mean()),
        "T_a_mean": float(times.mean()) if times.size else None,
        "T_a_std": float(times.std()) if times.size else None,
        "T_b": float(times.min()) if times.size else None,
    }
    if record_trajectories:
        return stats, [np.array(rows) for rows in traj]
    return stats


def train(scenario, esdf, combinations, quad_params, weights, curriculum,
          train_cfg: TrainConfig, ppo_cfg: PpoConfig, params=None,
          log_callback=None):
    """Two-stage curriculum PPO training.

    Returns (params, log_rows, summary).  `weights.k_s` is initialized
    from the shortest combination when left at zero.
    """
    seeds = np.random.SeedSequence(train_cfg.seed).spawn(4)
    rng_env = np.random.default_rng(seeds[0])
    rng_ppo = np.random.default_rng(seeds[1])
    rng_net = np.random.default_rng(seeds[2])

    if weights.k_s == 0.0:
        weights = dataclasses.replace(
            weights, k_s=k_s_init(curriculum.v_max, train_cfg.dt,
                                  combinations[0].path.length))
    curriculum = dataclasses.replace(curriculum)

    if params is None:
        params = initial_policy(quad_params, rng=rng_net)
    adam = pol.Adam(params, ppo_cfg.lr)
    env = RaceEnv(scenario, esdf, combinations, quad_params, weights,
                  curriculum, train_cfg, rng_env)

    log_rows = []
    eval_history = []
    env_steps = 0
    iteration = 0
    switch_step = None
    slow_lap_time = None
    summary = {"stage_switch_iteration": None, "slow_lap_time": None,
               "fast_lap_time": None, "final_stage": curriculum.stage,
               "env_steps": 0, "target_reached": False}

    while env_steps < train_cfg.max_env_steps:
        if train_cfg.fast_stage_steps is not None and switch_step is not None \
                and env_steps - switch_step >= train_cfg.fast_stage_steps:
            break
        roll, rstats = collect_rollout(env, params, ppo_cfg.steps_per_iter, rng_ppo)
        env_steps += ppo_cfg.steps_per_iter * train_cfg.n_agents
        batch = make_batch(roll, ppo_cfg)
        upd = pol.ppo_update(params, batch, ppo_cfg, adam=adam, rng=rng_ppo)
        iteration += 1

        ep_total = rstats["finished"] + rstats["collided"] + rstats["truncated"]
        row = {
            "iteration": iteration,
            "env_steps": env_steps,
            "mean_reward": float(roll["rewards"].mean()),
            "success": rstats["finished"] / ep_total if ep_total else 0.0,
            "mean_lap_time": float(np.mean(rstats["lap_times"])) if rstats["lap_times"] else None,
            "best_lap_time": float(np.min(rstats["lap_times"])) if rstats["lap_times"] else None,
            "stage": curriculum.stage,
            "approx_kl": upd["approx_kl"],
        }

        if iteration % train_cfg.eval_every == 0:
            estats = evaluate(params, scenario, esdf, combinations, quad_params,
                              weights, curriculum, n_runs=1,
                              drag_randomization=False, seed=train_cfg.seed,
                              max_episode_steps=train_cfg.max_episode_steps,
                              dt=train_cfg.dt)
            completed = estats["success_rate"] == 1.0
            row["eval_success"] = estats["success_rate"]
            row["eval_lap_time"] = estats["T_a_mean"]
            if curriculum.stage == "slow":
                eval_history.append(completed)
                if stage_switch_check(eval_history, train_cfg.switch_after):
                    curriculum.stage = "fast"
                    switch_step = env_steps
                    slow_lap_time = estats["T_a_mean"]
                    summary["stage_switch_iteration"] = iteration
                    summary["slow_lap_time"] = slow_lap_time
            elif completed:
                summary["fast_lap_time"] = estats["T_a_mean"]
                improved = (not train_cfg.require_lap_improvement
                            or slow_lap_time is None
                            or estats["T_a_mean"] < slow_lap_time)
                if train_cfg.target_success is not None and improved:
                    tstats = evaluate(params, scenario, esdf, combinations,
                                      quad_params, weights, curriculum,
                                      n_runs=train_cfg.target_eval_runs,
                                      drag_randomization=True,
                                      seed=train_cfg.seed + 1,
                                      max_episode_steps=train_cfg.max_episode_steps,
                                      dt=train_cfg.dt)
                    row["target_eval_success"] = tstats["success_rate"]
                    if tstats["success_rate"] >= train_cfg.target_success:
                        summary["target_reached"] = True

        log_rows.append(row)
        if log_callback:
            log_callback(row)
        if summary["target_reached"]:
            break

    summary["final_stage"] = curriculum.stage
    summary["env_steps"] = env_steps
    return params, log_rows, summary
