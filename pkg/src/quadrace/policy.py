"""Policy/value networks and the PPO-clip update, numpy only.

Both networks are small two-hidden-layer tanh MLPs (default width 128):
the policy head is tanh-bounded with a state-independent log-std, the
value head is linear.  Gradients are exact backpropagation; training
uses Adam.  Keeping this dependency-free makes the update analytically
checkable against finite differences.
"""

import io
from dataclasses import dataclass

import numpy as np

OBS_DIM = 30
ACT_DIM = 4
POS_SCALE = 10.0   # observation normalization for positions [m]
VEL_SCALE = 20.0   # and velocities [m/s]
LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
CHECKPOINT_MAGIC = b"AMTP1"

LOG_2PI = np.log(2.0 * np.pi)


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered during an update."""


@dataclass
class PpoConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    lr: float = 3e-4
    epochs: int = 10
    minibatch: int = 2048
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    steps_per_iter: int = 250  # env steps per agent per iteration

    def __post_init__(self):
        if not 0 < self.clip_eps:
            raise ValueError("clip_eps must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must be in [0, 1]")


# ---------------------------------------------------------------------------
# observation / action encoding

def build_observation(state, waypoint, gamma):
    """30-dim observation: p, R(q) row-major, v, gate corners, gamma - p.

    Positions are divided by 10 m, velocities by 20 m/s; the rotation
    block is raw.  Accepts batched states (leading axes broadcast).
    """
    from .dynamics import quat_to_rot

    corners = waypoint.corners() if hasattr(waypoint, "corners") else np.asarray(waypoint)
    rot = quat_to_rot(state.q)
    batch = state.p.shape[:-1]
    parts = [
        state.p / POS_SCALE,
        rot.reshape(batch + (9,)),
        state.v / VEL_SCALE,
        np.broadcast_to(corners.reshape(-1), batch + (12,)) / POS_SCALE,
        (np.asarray(gamma) - state.p) / POS_SCALE,
    ]
    obs = np.concatenate(parts, axis=-1)
    if not np.all(np.isfinite(obs)):
        raise ValueError("non-finite observation")
    return obs


def action_decode(a, params):
    """Map a normalized action in [-1, 1]^4 to a thrust/body-rate command.

    a[0] spans the collective-thrust box [4 f_min, 4 f_max] affinely;
    a[1:4] scale to +-w_max.
    """
    from .dynamics import BodyRateCommand

    a = np.clip(np.asarray(a, dtype=float), -1.0, 1.0)
    f_T = 4 * params.f_min + (a[..., 0] + 1.0) / 2.0 * 4 * (params.f_max - params.f_min)
    return BodyRateCommand(f_T=f_T, w_cmd=a[..., 1:4] * params.w_max)


# ---------------------------------------------------------------------------
# network parameters

def _glorot(rng, fan_in, fan_out, scale=1.0, dtype=np.float32):
    lim = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, (fan_in, fan_out)).astype(dtype)


class PolicyParams:
    """Weights of the policy and value MLPs plus the action log-std."""

    MLP_KEYS = ("W1", "b1", "W2", "b2", "W3", "b3")

    def __init__(self, hidden=128, obs_dim=OBS_DIM, act_dim=ACT_DIM,
                 rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.hidden = hidden
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.dtype = dtype
        h = hidden

        def mlp(out_dim, head_scale):
            return {
                "W1": _glorot(rng, obs_dim, h, dtype=dtype),
                "b1": np.zeros(h, dtype=dtype),
                "W2": _glorot(rng, h, h, dtype=dtype),
                "b2": np.zeros(h, dtype=dtype),
                "W3": _glorot(rng, h, out_dim, scale=head_scale, dtype=dtype),
                "b3": np.zeros(out_dim, dtype=dtype),
            }

        self.policy = mlp(act_dim, head_scale=0.01)
        self.value = mlp(1, head_scale=1.0)
        self.log_std = np.full(act_dim, -0.7, dtype=dtype)

    # -- bookkeeping ---------------------------------------------------

    def items(self):
        for k in self.MLP_KEYS:
            yield "policy." + k, self.policy[k]
        yield "log_std", self.log_std
        for k in self.MLP_KEYS:
            yield "value." + k, self.value[k]

    def get(self, name):
        if name == "log_std":
            return self.log_std
        scope, key = name.split(".")
        return getattr(self, scope)[key]

    def set(self, name, value):
        if name == "log_std":
            self.log_std = value
        else:
            scope, key = name.split(".")
            getattr(self, scope)[key] = value

    def copy(self):
        out = PolicyParams.__new__(PolicyParams)
        out.hidden, out.obs_dim, out.act_dim, out.dtype = \
            self.hidden, self.obs_dim, self.act_dim, self.dtype
        out.policy = {k: v.copy() for k, v in self.policy.items()}
        out.value = {k: v.copy() for k, v in self.value.items()}
        out.log_std = self.log_std.copy()
        return out

    def equal(self, other):
        return all(np.array_equal(a, other.get(n)) for n, a in self.items())

    # -- forward passes -------------------------------------------------

    def _trunk(self, net, x):
        z1 = x @ net["W1"] + net["b1"]
        a1 = np.tanh(z1)
        z2 = a1 @ net["W2"] + net["b2"]
        a2 = np.tanh(z2)
        out = a2 @ net["W3"] + net["b3"]
        return out, (x, a1, a2)

    def forward(self, obs):
        """(action mean in (-1,1), std, value) for a batch of observations."""
        obs = np.asarray(obs, dtype=self.dtype)
        raw, _ = self._trunk(self.policy, obs)
        mean = np.tanh(raw)
        std = np.exp(np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX))
        v, _ = self._trunk(self.value, obs)
        return mean, np.broadcast_to(std, mean.shape), v[..., 0]


def policy_forward(params: PolicyParams, obs):
    return params.forward(obs)


def gaussian_log_prob(actions, mean, std):
    z = (actions - mean) / std
    return np.sum(-0.5 * z * z - np.log(std) - 0.5 * LOG_2PI, axis=-1)


def sample_action(params: PolicyParams, obs, rng):
    """Stochastic action (clamped to [-1,1]) and its pre-clamp log-prob."""
    mean, std, value = params.forward(obs)
    raw = mean + std * rng.standard_normal(mean.shape)
    logp = gaussian_log_prob(raw, mean, std)
    return np.clip(raw, -1.0, 1.0), raw, logp, value


# ---------------------------------------------------------------------------
# GAE

def gae_advantages(rewards, values, next_values, ended, gamma, lam):
    """Backward GAE recursion over (T, ...) arrays.

    next_values holds V(s_{t+1}): zero where the episode terminated
    (collision), the bootstrap estimate where it was truncated, and the
    next step's value otherwise.  `ended` marks both cases and cuts the
    recursion.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    deltas = rewards + gamma * next_values - values
    adv = np.zeros_like(deltas)
    carry = np.zeros_like(deltas[0])
    not_ended = 1.0 - np.asarray(ended, dtype=np.float64)
    for t in range(len(deltas) - 1, -1, -1):
        carry = deltas[t] + gamma * lam * not_ended[t] * carry
        adv[t] = carry
    return adv, adv + values


# ---------------------------------------------------------------------------
# loss and exact gradients

def _trunk_backward(net, cache, d_out):
    x, a1, a2 = cache
    grads = {}
    grads["W3"] = a2.T @ d_out
    grads["b3"] = d_out.sum(axis=0)
    d_a2 = d_out @ net["W3"].T
    d_z2 = d_a2 * (1 - a2 * a2)
    grads["W2"] = a1.T @ d_z2
    grads["b2"] = d_z2.sum(axis=0)
    d_a1 = d_z2 @ net["W2"].T
    d_z1 = d_a1 * (1 - a1 * a1)
    grads["W1"] = x.T @ d_z1
    grads["b1"] = d_z1.sum(axis=0)
    return grads


def ppo_loss_and_grads(params: PolicyParams, obs, actions, logp_old, adv, returns,
                       cfg: PpoConfig, want_grads=True):
    """Clipped-surrogate + value + entropy loss with exact gradients."""
    obs = np.asarray(obs, dtype=params.dtype)
    B = len(obs)
    raw_mu, p_cache = params._trunk(params.policy, obs)
    mean = np.tanh(raw_mu)
    log_std = np.clip(params.log_std, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    v_raw, v_cache = params._trunk(params.value, obs)
    v = v_raw[:, 0]

    z = (actions - mean) / std
    logp = np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)
    ratio = np.exp(logp - logp_old)
    clipped = np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps)
    surr_unclipped = ratio * adv
    surr = np.minimum(surr_unclipped, clipped * adv)
    policy_loss = -np.mean(surr)
    value_err = v - returns
    value_loss = 0.5 * np.mean(value_err ** 2)
    entropy = np.sum(log_std + 0.5 * (LOG_2PI + 1.0))
    loss = policy_loss + cfg.vf_coef * value_loss - cfg.ent_coef * entropy

    stats = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
        "approx_kl": float(np.mean(logp_old - logp)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1) > cfg.clip_eps)),
    }
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite PPO loss: {stats}")
    if not want_grads:
        return loss, None, stats

    # d loss / d logp: gradient flows only where the unclipped branch is active
    active = surr_unclipped <= clipped * adv + 1e-12
    d_logp = -(active * ratio * adv) / B
    d_mean = d_logp[:, None] * z / std
    d_raw_mu = d_mean * (1 - mean * mean)
    d_log_std = np.sum(d_logp[:, None] * (z * z - 1.0), axis=0)
    d_log_std -= cfg.ent_coef  # entropy bonus, per action dim
    d_log_std *= (params.log_std > LOG_STD_MIN) & (params.log_std < LOG_STD_MAX)
    d_v = (cfg.vf_coef * value_err / B)[:, None]

    grads = {"policy." + k: g for k, g in
             _trunk_backward(params.policy, p_cache, d_raw_mu).items()}
    grads["log_std"] = d_log_std
    grads.update({"value." + k: g for k, g in
                  _trunk_backward(params.value, v_cache, d_v).items()})
    return loss, grads, stats


class Adam:
    """Standard Adam over the named parameter dict."""

    def __init__(self, params: PolicyParams, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(a, dtype=np.float64) for n, a in params.items()}
        self.v = {n: np.zeros_like(a, dtype=np.float64) for n, a in params.items()}
        self.t = 0

    def step(self, params: PolicyParams, grads):
        self.t += 1
        b1c = 1 - self.beta1 ** self.t
        b2c = 1 - self.beta2 ** self.t
        for name, _ in params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = self.lr * (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)
            arr = params.get(name)
            params.set(name, (arr - update).astype(arr.dtype))


def ppo_update(params: PolicyParams, batch, cfg: PpoConfig, adam: Adam | None = None,
               rng: np.random.Generator | None = None):
    """Run cfg.epochs of minibatch PPO over a flattened batch.

    batch: dict with obs (B, obs_dim), actions, logp, adv, returns.
    Mutates `params` in place and returns per-update mean stats.
    """
    rng = rng or np.random.default_rng(0)
    adam = adam or Adam(params, cfg.lr)
    B = len(batch["obs"])
    adv = batch["adv"]
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    all_stats = []
    for _ in range(cfg.epochs):
        order = rng.permutation(B)
        for lo in range(0, B, cfg.minibatch):
            idx = order[lo:lo + cfg.minibatch]
            _, grads, stats = ppo_loss_and_grads(
                params, batch["obs"][idx], batch["actions"][idx],
                batch["logp"][idx], adv[idx], batch["returns"][idx], cfg)
            adam.step(params, grads)
            all_stats.append(stats)
    return {k: float(np.mean([s[k] for s in all_stats])) for k in all_stats[0]}


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: PolicyParams, path):
    """Magic "AMTP1", text header, then little-endian f32 tensors.

    Tensor order: policy W1,b1,W2,b2,W3,b3, log_std, value W1..b3; row
    major within each tensor.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC + b"\n")
    buf.write(f"dims {params.obs_dim} {params.hidden} {params.hidden} {params.act_dim}\n".encode())
    buf.write(f"logstd {params.act_dim}\n".encode())
    for _, arr in params.items():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, hidden=None, dtype=np.float32):
    with open(path, "rb") as fh:
        if fh.readline().strip() != CHECKPOINT_MAGIC:
            raise CheckpointError("bad magic string")
        dims_line = fh.readline().split()
        std_line = fh.readline().split()
        if dims_line[:1] != [b"dims"] or std_line[:1] != [b"logstd"]:
            raise CheckpointError("malformed header")
        obs_dim, h1, h2, act_dim = (int(x) for x in dims_line[1:])
        if h1 != h2:
            raise CheckpointError("hidden layers of unequal width unsupported")
        if hidden is not None and hidden != h1:
            raise CheckpointError(f"checkpoint hidden width {h1}, expected {hidden}")
        params = PolicyParams(hidden=h1, obs_dim=obs_dim, act_dim=act_dim, dtype=dtype)
        data = fh.read()
    need = sum(arr.size for _, arr in params.items()) * 4
    if len(data) != need:
        raise CheckpointError(f"expected {need} bytes of weights, got {len(data)}")
    off = 0
    for name, arr in params.items():
        n = arr.size * 4
        params.set(name, np.frombuffer(data[off:off + n], dtype="<f4")
                   .reshape(arr.shape).astype(dtype))
        off += n
    return params
