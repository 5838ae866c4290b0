import numpy as np
import pytest

from quadrace.dynamics import QuadParams, QuadState
from quadrace.policy import (
    Adam,
    CheckpointError,
    PolicyParams,
    PpoConfig,
    action_decode,
    build_observation,
    gae_advantages,
    gaussian_log_prob,
    load_checkpoint,
    policy_forward,
    ppo_loss_and_grads,
    ppo_update,
    sample_action,
    save_checkpoint,
)
from quadrace.world import Waypoint


def small_params(seed=0, hidden=8, dtype=np.float64):
    return PolicyParams(hidden=hidden, rng=np.random.default_rng(seed), dtype=dtype)


def random_batch(rng, n=32):
    return {
        "obs": rng.normal(size=(n, 30)),
        "actions": rng.uniform(-1, 1, (n, 4)),
        "logp": rng.normal(size=n),
        "adv": rng.normal(size=n),
        "returns": rng.normal(size=n),
    }


class TestObservation:
    def state(self, p=(0, 0, 0)):
        return QuadState.hover(p)

    def test_identity_rotation_block(self):
        wp = Waypoint(np.array([3.0, 0, 0]))
        obs = build_observation(self.state(), wp, np.array([2.0, 0, 0]))
        np.testing.assert_allclose(obs[3:12], np.eye(3).reshape(-1), atol=1e-12)

    def test_length_and_layout(self):
        wp = Waypoint(np.array([3.0, 0, 0]))
        obs = build_observation(self.state((1.0, 2.0, 3.0)), wp, np.array([2.0, 0, 0]))
        assert obs.shape == (30,)
        np.testing.assert_allclose(obs[:3], [0.1, 0.2, 0.3])

    def test_translation_relative_blocks(self):
        delta = np.array([1.0, -2.0, 0.5])
        wp0 = Waypoint(np.array([3.0, 0, 0]))
        wp1 = Waypoint(np.array([3.0, 0, 0]) + delta)
        g = np.array([2.0, 0.5, 0])
        o0 = build_observation(self.state(), wp0, g)
        o1 = build_observation(self.state(tuple(delta)), wp1, g + delta)
        np.testing.assert_allclose(o1[:3] - o0[:3], delta / 10.0, atol=1e-12)
        np.testing.assert_allclose(o1[27:30], o0[27:30], atol=1e-12)  # gamma - p unchanged
        np.testing.assert_allclose(o1[3:12], o0[3:12])

    def test_nonfinite_rejected(self):
        s = self.state()
        s.v = np.array([np.nan, 0, 0])
        with pytest.raises(ValueError):
            build_observation(s, Waypoint(np.array([1.0, 0, 0])), np.zeros(3))


class TestActionDecode:
    def test_bounds(self):
        qp = QuadParams()
        lo = action_decode(np.array([-1.0, 0, 0, 0]), qp)
        hi = action_decode(np.array([1.0, 0, 0, 0]), qp)
        assert lo.f_T == pytest.approx(0.0)
        assert hi.f_T == pytest.approx(28.0)
        np.testing.assert_allclose(lo.w_cmd, 0.0)

    def test_rate_scaling(self):
        qp = QuadParams()
        cmd = action_decode(np.array([0.0, 1.0, 0, 0]), qp)
        np.testing.assert_allclose(cmd.w_cmd, [15.0, 0, 0])

    def test_monotone_and_onto(self):
        qp = QuadParams()
        a_vals = np.linspace(-1, 1, 11)
        f = [action_decode(np.array([a, 0, 0, 0]), qp).f_T for a in a_vals]
        assert np.all(np.diff(f) > 0)
        assert f[0] == pytest.approx(4 * qp.f_min)
        assert f[-1] == pytest.approx(4 * qp.f_max)

    def test_out_of_range_clamped(self):
        qp = QuadParams()
        cmd = action_decode(np.array([5.0, -3.0, 0, 0]), qp)
        assert cmd.f_T == pytest.approx(28.0)
        assert cmd.w_cmd[0] == pytest.approx(-15.0)


class TestForward:
    def test_zero_weights(self):
        p = small_params()
        for name, arr in p.items():
            if name != "log_std":
                p.set(name, np.zeros_like(arr))
        mean, std, value = policy_forward(p, np.ones((3, 30)))
        np.testing.assert_array_equal(mean, 0.0)
        np.testing.assert_array_equal(value, 0.0)

    def test_value_head_linearity(self):
        p = small_params(1)
        obs = np.random.default_rng(2).normal(size=(5, 30))
        _, _, v1 = policy_forward(p, obs)
        p.value["W3"] = p.value["W3"] * 3.0
        p.value["b3"] = p.value["b3"] * 3.0
        _, _, v3 = policy_forward(p, obs)
        np.testing.assert_allclose(v3, 3 * v1, atol=1e-12)

    def test_against_matrix_oracle(self):
        p = small_params(3)
        rng = np.random.default_rng(4)
        obs = rng.normal(size=(7, 30))
        mean, std, value = policy_forward(p, obs)
        # independent re-implementation with explicit loops
        for i in range(7):
            x = obs[i]
            h1 = np.tanh(x @ p.policy["W1"] + p.policy["b1"])
            h2 = np.tanh(h1 @ p.policy["W2"] + p.policy["b2"])
            mu = np.tanh(h2 @ p.policy["W3"] + p.policy["b3"])
            np.testing.assert_allclose(mean[i], mu, atol=1e-6)
            g1 = np.tanh(x @ p.value["W1"] + p.value["b1"])
            g2 = np.tanh(g1 @ p.value["W2"] + p.value["b2"])
            np.testing.assert_allclose(value[i], (g2 @ p.value["W3"] + p.value["b3"])[0],
                                       atol=1e-6)
        np.testing.assert_allclose(std[0], np.exp(p.log_std))

    def test_mean_bounded(self):
        p = small_params(5)
        obs = np.random.default_rng(6).normal(scale=50, size=(100, 30))
        mean, _, _ = policy_forward(p, obs)
        assert np.all(np.abs(mean) < 1.0)


class TestGae:
    def test_lambda_zero_is_td_error(self):
        rng = np.random.default_rng(7)
        T = 20
        r = rng.normal(size=(T, 1))
        v = rng.normal(size=(T, 1))
        nv = rng.normal(size=(T, 1))
        ended = np.zeros((T, 1))
        adv, ret = gae_advantages(r, v, nv, ended, 0.99, 0.0)
        np.testing.assert_allclose(adv, r + 0.99 * nv - v, atol=1e-12)

    def test_lambda_one_suffix_sum(self):
        T = 10
        r = np.arange(1.0, T + 1).reshape(T, 1)
        v = np.zeros((T, 1))
        nv = np.zeros((T, 1))
        ended = np.zeros((T, 1))
        adv, _ = gae_advantages(r, v, nv, ended, 1.0, 1.0)
        np.testing.assert_allclose(adv[:, 0], np.cumsum(r[::-1, 0])[::-1])

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(8)
        T = 100
        gamma, lam = 0.97, 0.9
        r = rng.normal(size=T)
        v = rng.normal(size=T)
        ended = rng.uniform(size=T) < 0.1
        ended[-1] = True
        nv = np.where(ended, rng.normal(size=T) * ~ended, np.roll(v, -1))
        adv, ret = gae_advantages(r[:, None], v[:, None], nv[:, None],
                                  ended[:, None].astype(float), gamma, lam)
        deltas = r + gamma * nv - v
        expected = np.zeros(T)
        for t in range(T):
            acc, w = 0.0, 1.0
            for k in range(t, T):
                acc += w * deltas[k]
                if ended[k]:
                    break
                w *= gamma * lam
            expected[t] = acc
        np.testing.assert_allclose(adv[:, 0], expected, atol=1e-9)
        np.testing.assert_allclose(ret[:, 0], expected + v, atol=1e-9)


class TestPpoGradients:
    def test_finite_difference_check(self):
        p = small_params(9)
        rng = np.random.default_rng(10)
        batch = random_batch(rng)
        cfg = PpoConfig(ent_coef=0.01, minibatch=32, epochs=1)
        _, grads, _ = ppo_loss_and_grads(p, batch["obs"], batch["actions"],
                                         batch["logp"], batch["adv"], batch["returns"], cfg)

        def loss_at(params):
            l, _, _ = ppo_loss_and_grads(params, batch["obs"], batch["actions"],
                                         batch["logp"], batch["adv"], batch["returns"],
                                         cfg, want_grads=False)
            return l

        h = 1e-5
        rel_errs = []
        for name, arr in p.items():
            flat = arr.reshape(-1)
            pick = rng.choice(flat.size, size=min(10, flat.size), replace=False)
            for k in pick:
                orig = flat[k]
                flat[k] = orig + h
                lp = loss_at(p)
                flat[k] = orig - h
                lm = loss_at(p)
                flat[k] = orig
                fd = (lp - lm) / (2 * h)
                g = grads[name].reshape(-1)[k]
                denom = max(abs(fd), abs(g), 1e-8)
                rel_errs.append(abs(fd - g) / denom)
        assert max(rel_errs) < 1e-4

    def test_zero_advantage_no_policy_gradient(self):
        p = small_params(11)
        rng = np.random.default_rng(12)
        batch = random_batch(rng)
        batch["adv"] = np.zeros_like(batch["adv"])
        batch["logp"] = gaussian_log_prob(
            batch["actions"], *policy_forward(p, batch["obs"])[:2])
        cfg = PpoConfig(ent_coef=0.0, minibatch=32, epochs=1)
        _, grads, _ = ppo_loss_and_grads(p, batch["obs"], batch["actions"],
                                         batch["logp"], batch["adv"], batch["returns"], cfg)
        for k in PolicyParams.MLP_KEYS:
            np.testing.assert_allclose(grads["policy." + k], 0.0, atol=1e-12)
        for k in PolicyParams.MLP_KEYS:
            assert np.any(grads["value." + k] != 0.0)

    def test_huge_clip_reduces_to_vanilla_pg(self):
        p = small_params(13)
        rng = np.random.default_rng(14)
        batch = random_batch(rng)
        cfg_clip = PpoConfig(clip_eps=1e9, epochs=1, minibatch=32)
        l1, _, _ = ppo_loss_and_grads(p, batch["obs"], batch["actions"], batch["logp"],
                                      batch["adv"], batch["returns"], cfg_clip)
        mean, std, v = policy_forward(p, batch["obs"])
        ratio = np.exp(gaussian_log_prob(batch["actions"], mean, std) - batch["logp"])
        vanilla = -np.mean(ratio * batch["adv"]) \
            + cfg_clip.vf_coef * 0.5 * np.mean((v - batch["returns"]) ** 2)
        assert l1 == pytest.approx(vanilla, abs=1e-9)

    def test_positive_advantage_increases_logp(self):
        p = small_params(15)
        rng = np.random.default_rng(16)
        obs = rng.normal(size=(32, 30))
        mean, std, _ = policy_forward(p, obs)
        sign = np.where(np.arange(32) < 16, 1.0, -1.0)
        actions = mean + sign[:, None] * 0.3 * std
        logp_before = gaussian_log_prob(actions, mean, std)
        batch = {"obs": obs, "actions": actions, "logp": logp_before,
                 "adv": sign.copy(), "returns": np.zeros(32)}
        ppo_update(p, batch, PpoConfig(epochs=1, minibatch=32, lr=1e-3),
                   rng=np.random.default_rng(0))
        mean2, std2, _ = policy_forward(p, obs)
        logp_after = gaussian_log_prob(actions, mean2, std2)
        assert logp_after[:16].mean() > logp_before[:16].mean()


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        p = PolicyParams(hidden=16, rng=np.random.default_rng(17))
        f = tmp_path / "p.ckpt"
        save_checkpoint(p, f)
        q = load_checkpoint(f)
        assert q.equal(p)

    def test_truncated_file(self, tmp_path):
        p = PolicyParams(hidden=16, rng=np.random.default_rng(18))
        f = tmp_path / "p.ckpt"
        save_checkpoint(p, f)
        f.write_bytes(f.read_bytes()[:-40])
        with pytest.raises(CheckpointError):
            load_checkpoint(f)

    def test_shape_mismatch(self, tmp_path):
        p = PolicyParams(hidden=128, rng=np.random.default_rng(19))
        f = tmp_path / "p.ckpt"
        save_checkpoint(p, f)
        with pytest.raises(CheckpointError):
            load_checkpoint(f, hidden=64)

    def test_bad_magic(self, tmp_path):
        f = tmp_path / "junk.ckpt"
        f.write_bytes(b"NOTAMAGIC\n")
        with pytest.raises(CheckpointError):
            load_checkpoint(f)


class TestSampling:
    def test_deterministic_under_seed(self):
        p = small_params(20)
        obs = np.random.default_rng(21).normal(size=(4, 30))
        a1, _, lp1, _ = sample_action(p, obs, np.random.default_rng(5))
        a2, _, lp2, _ = sample_action(p, obs, np.random.default_rng(5))
        np.testing.assert_array_equal(a1, a2)
        np.testing.assert_array_equal(lp1, lp2)

    def test_clamped(self):
        p = small_params(22)
        p.log_std = np.full(4, 1.0)
        obs = np.random.default_rng(23).normal(size=(500, 30))
        a, raw, _, _ = sample_action(p, obs, np.random.default_rng(6))
        assert np.all(np.abs(a) <= 1.0)
        assert np.any(np.abs(raw) > 1.0)  # clamping actually engaged
