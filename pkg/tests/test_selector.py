import numpy as np
import pytest

from gradcheck import check_gradients
from viewacq.diagnostics import DiagnosticModel, EncoderConfig
from viewacq.env import AcquisitionEnv, BatchEnv, SubsetOutcomes, run_episode
from viewacq.errors import ConfigError
from viewacq.numerics.autodiff import Tape, Tensor
from viewacq.numerics.nn import Adam
from viewacq.selector import (
    PolicyNets,
    PPOConfig,
    RolloutBuffer,
    clipped_surrogate,
    collect_rollout,
    compute_advantages,
    gae,
    greedy_scores,
    ppo_loss,
    ppo_update,
    train_selector,
)
from viewacq.synthstudy import GeneratorConfig, generate_dataset


def scalar_gae(rewards, values, gamma, lam):
    """Reference: A_t = sum_l (gamma lam)^l delta_{t+l} for one episode, written out directly."""
    n = len(rewards)
    deltas = [rewards[t] + gamma * (values[t + 1] if t + 1 < n else 0.0) - values[t] for t in range(n)]
    return [sum((gamma * lam) ** l * deltas[t + l] for l in range(n - t)) for t in range(n)]


@pytest.fixture(scope="module")
def tables():
    st = generate_dataset(GeneratorConfig(n_patients=120, seed=31))
    model = DiagnosticModel(EncoderConfig(layers=1, seed=2)).freeze()
    table = SubsetOutcomes.build(model, st)
    return model, table.take(np.arange(80)), table.take(np.arange(80, 120))


class TestConfig:
    def test_defaults(self):
        c = PPOConfig()
        assert (c.clip_eps, c.epochs_per_update, c.minibatch_size, c.lr) == (0.2, 4, 256, 3e-4)
        assert (c.entropy_coef, c.value_coef, c.gae_lambda, c.gamma, c.epochs) == (0.01, 0.5, 0.95, 1.0, 50)

    @pytest.mark.parametrize("kw", [{"clip_eps": 1.0}, {"lr": 0.0}, {"minibatch_size": 0}, {"gae_lambda": 1.5}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            PPOConfig(**kw)


class TestAct:
    def test_only_stop_legal(self):
        nets = PolicyNets(5, 4, seed=1)
        obs = np.random.default_rng(0).normal(size=(3, nets.obs_dim))
        legal = np.zeros((3, 6), dtype=bool)
        legal[:, 5] = True
        a, lp, _ = nets.act_batch(obs, legal, np.random.default_rng(1))
        np.testing.assert_array_equal(a, 5)
        np.testing.assert_allclose(lp, 0.0, atol=1e-15)

    def test_fresh_policy_positive(self):
        nets = PolicyNets(5, 4, seed=1)
        with np.errstate(divide="ignore"):
            p = np.exp(nets.log_probs(np.zeros((1, nets.obs_dim)), np.ones((1, 6), dtype=bool)).values)
        assert (p > 0).all()
        np.testing.assert_allclose(p.sum(), 1.0)

    def test_greedy_is_deterministic(self):
        nets = PolicyNets(5, 4, seed=1)
        obs = np.random.default_rng(0).normal(size=(1, nets.obs_dim))
        legal = np.ones((1, 6), dtype=bool)
        acts = {int(nets.act_batch(obs, legal, greedy=True)[0][0]) for _ in range(20)}
        assert len(acts) == 1

    def test_never_emits_illegal(self):
        nets = PolicyNets(5, 4, seed=3)
        rng = np.random.default_rng(4)
        n = 100_000
        obs = rng.normal(size=(n, nets.obs_dim))
        legal = rng.random((n, 6)) < 0.5
        legal[:, 5] = True
        a, _, _ = nets.act_batch(obs, legal, rng)
        assert legal[np.arange(n), a].all()

    def test_logits_mask(self):
        nets = PolicyNets(5, 4, seed=3)
        z = nets.logits(np.zeros(nets.obs_dim), np.array([True, False, True, True, True, True]))
        assert z[0, 1] == -np.inf and np.isfinite(z[0, [0, 2, 3, 4, 5]]).all()

    def test_single_state_adapter(self, tables):
        model, train, _ = tables
        nets = PolicyNets(5, 32, seed=0)
        env = AcquisitionEnv(model, cost_lambda=0.01)
        tr = run_episode(train.studies[0], env, nets.as_policy(greedy=True))
        assert 1 <= len(tr.actions) <= 6


class TestAdvantages:
    def test_constant_rewards_perfect_critic(self):
        # reward 1 per step for 3 steps: true values 3, 2, 1
        adv, ret = gae([1, 1, 1], [3, 2, 1], [False, False, True], 1.0, 0.95)
        np.testing.assert_allclose(adv, 0.0, atol=1e-15)
        np.testing.assert_allclose(ret, [3, 2, 1])

    def test_lambda_one_is_return_minus_value(self):
        rng = np.random.default_rng(0)
        r, v = rng.normal(size=6), rng.normal(size=6)
        adv, _ = gae(r, v, [False] * 5 + [True], 1.0, 1.0)
        np.testing.assert_allclose(adv, np.cumsum(r[::-1])[::-1] - v, atol=1e-12)

    def test_hand_episode_against_scalar_reference(self):
        r, v = [0.1, 0.2, 1.0], [0.5, 0.4, 0.3]
        adv, _ = gae(r, v, [False, False, True], 1.0, 0.95)
        np.testing.assert_allclose(adv, scalar_gae(r, v, 1.0, 0.95), atol=1e-14)
        # deltas (-0.0, 0.1, 0.7) by hand
        np.testing.assert_allclose(adv, [0.0 + 0.95 * (0.1 + 0.95 * 0.7), 0.1 + 0.95 * 0.7, 0.7], atol=1e-14)

    def test_episode_boundaries(self):
        rng = np.random.default_rng(1)
        lens = [3, 1, 4]
        dones = np.concatenate([[False] * (n - 1) + [True] for n in lens])
        r, v = rng.normal(size=8), rng.normal(size=8)
        adv, _ = gae(r, v, dones, 1.0, 0.95)
        ref = np.concatenate([scalar_gae(r[a:a + n], v[a:a + n], 1.0, 0.95)
                              for a, n in zip(np.cumsum([0] + lens[:-1]), lens)])
        np.testing.assert_allclose(adv, ref, atol=1e-12)

    def test_incomplete_episode(self):
        with pytest.raises(ValueError):
            gae([1.0], [0.0], [False])

    def test_normalisation(self):
        buf = RolloutBuffer()
        rng = np.random.default_rng(2)
        for i in range(50):
            buf.add(np.zeros(3), np.ones(2, bool), 0, 0.0, rng.normal(), rng.normal(), i % 3 == 2 or i == 49)
        compute_advantages(buf)
        assert abs(buf.advantages.mean()) < 1e-12 and abs(buf.advantages.std() - 1) < 1e-12

    def test_single_step_skips_normalisation(self):
        buf = RolloutBuffer()
        buf.add(np.zeros(3), np.ones(2, bool), 0, 0.0, 0.25, 1.0, True)
        compute_advantages(buf)
        assert buf.advantages[0] == pytest.approx(0.75)


class TestSurrogate:
    def test_bounded_by_clip(self):
        rng = np.random.default_rng(0)
        ratio = np.exp(rng.normal(scale=2.0, size=10_000))
        adv = rng.normal(size=10_000)
        s = clipped_surrogate(Tensor(ratio), adv, 0.2).values
        assert (np.abs(s) <= 1.2 * np.abs(adv) + 1e-12).all()

    def test_ratio_one(self):
        adv = np.array([0.5, -1.0, 2.0])
        s = clipped_surrogate(Tensor(np.ones(3)), adv, 0.2).values
        np.testing.assert_array_equal(s, adv)
        assert s.mean() == pytest.approx(adv.mean())

    def test_zero_advantage_gives_no_policy_gradient(self):
        nets = PolicyNets(3, 2, seed=0)
        rng = np.random.default_rng(1)
        obs = rng.normal(size=(16, nets.obs_dim))
        legal = np.ones((16, 4), dtype=bool)
        acts, lp, _ = nets.act_batch(obs, legal, rng)
        cfg = PPOConfig(entropy_coef=0.0, value_coef=0.0)
        with Tape() as tape:
            loss, _ = ppo_loss(nets, obs, legal, acts, lp, np.zeros(16), np.zeros(16), cfg)
        tape.backward(loss)
        for t in nets.params.tensors():
            if t.grad is not None:
                assert np.abs(t.grad).max() < 1e-15

    def test_loss_gradients(self):
        rng = np.random.default_rng(2)
        nets = PolicyNets(3, 2, hidden=8, seed=1)
        obs = rng.normal(size=(10, nets.obs_dim))
        legal = rng.random((10, 4)) < 0.7
        legal[:, 3] = True
        acts, lp, _ = nets.act_batch(obs, legal, rng)
        lp = lp + rng.normal(scale=0.05, size=10)  # move ratios off 1 but inside the clip band
        adv, ret = rng.normal(size=10), rng.normal(size=10)
        worst = check_gradients(lambda: ppo_loss(nets, obs, legal, acts, lp, adv, ret, PPOConfig())[0],
                                nets.params.tensors(), rng)
        assert worst < 1e-4


class TestTraining:
    def test_two_armed_bandit(self):
        # one state, arm A = action 0, arm B = action 1 (the stop slot of a 1-view net)
        nets = PolicyNets(1, 1, seed=0)
        cfg = PPOConfig()
        opt = Adam(nets.params.tensors(), lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
        rng = np.random.default_rng(0)
        obs = np.zeros((64, nets.obs_dim))
        legal = np.ones((64, 2), dtype=bool)
        for _ in range(200):
            a, lp, v = nets.act_batch(obs, legal, rng)
            buf = RolloutBuffer()
            buf.extend(list(obs), list(legal), a, lp, v, (a == 0).astype(float), np.ones(64, bool))
            ppo_update(compute_advantages(buf), nets, opt, cfg, rng)
        p = np.exp(nets.log_probs(obs[:1], legal[:1]).values[0])
        assert p[0] > 0.95

    def test_rollout_shapes(self, tables):
        _, train, _ = tables
        nets = PolicyNets(5, 32, seed=0)
        ro = collect_rollout(nets, BatchEnv(train, 0.01), np.arange(len(train)), np.random.default_rng(0))
        buf = ro.to_buffer()
        assert len(buf) == ro.alive.sum()
        assert sum(buf.dones) == len(train)
        assert (ro.n_acquired <= 5).all()

    def test_best_checkpoint_and_determinism(self, tables):
        _, train, val = tables
        cfg = PPOConfig(epochs=4, minibatch_size=64, seed=5)
        h1, h2 = [], []
        a = train_selector(train, val, 0.01, cfg, history=h1)
        b = train_selector(train, val, 0.01, cfg, history=h2)
        np.testing.assert_array_equal(a.params.flat(), b.params.flat())
        assert h1 == h2
        best = greedy_scores(a, BatchEnv(val, 0.01, max_acquisitions=cfg.max_acquisitions))["mean_bacc"]
        assert best == pytest.approx(max(h["val_mean_bacc"] for h in h1))
        assert best >= h1[-1]["val_mean_bacc"]

    def test_checkpoint_round_trip(self, tmp_path):
        nets = PolicyNets(5, 4, seed=9)
        nets.save(tmp_path / "p.psel", extra={"lambda": 0.1})
        back = PolicyNets.load(tmp_path / "p.psel")
        np.testing.assert_array_equal(back.params.flat(), nets.params.flat())
        obs = np.ones((2, nets.obs_dim))
        legal = np.ones((2, 6), dtype=bool)
        np.testing.assert_array_equal(nets.logits(obs, legal), back.logits(obs, legal))


def test_actor_logits_ignore_masked_rows(tables):
    _, train, _ = tables
    nets = PolicyNets(5, 32, seed=2)
    env = BatchEnv(train)
    rng = np.random.default_rng(3)
    rows = np.arange(len(train))
    codes = rng.integers(0, 32, size=len(train))
    obs = env.observe(rows, codes)
    masks = (codes[:, None] >> np.arange(5)) & 1 == 0
    perturbed = train.take(rows)
    perturbed.studies.embeddings = perturbed.studies.embeddings + 50.0 * masks[:, :, None]
    obs2 = BatchEnv(perturbed).observe(rows, codes)
    legal = env.legal(codes, np.zeros(len(rows), dtype=np.int64))
    np.testing.assert_array_equal(nets.logits(obs, legal), nets.logits(obs2, legal))
