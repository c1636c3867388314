import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import constant_reward_model, random_model

from ctpomdp import nn
from ctpomdp.au import (
    EXACT,
    SAMPLED,
    AU_TASK_DEFAULTS,
    AuConfig,
    ExplorationPolicy,
    ReplayBuffer,
    TransitionBatch,
    TransitionSample,
    au_config_for,
    exploration_policy,
    initial_belief_sampler,
    subsample_episode,
    td_loss_and_grads,
    td_residual,
    td_residual_batch,
    train_advantage_updating,
)
from ctpomdp.envs import build_tiger
from ctpomdp.filtering import IntegratorConfig, bayes_reset, posterior_ensemble
from ctpomdp.hjb import TrainingDiverged
from ctpomdp.model import ConstantPolicy
from ctpomdp.sim import OuState, simulate_episode


def constant_net(in_dim, out_dim, c):
    params = nn.init_mlp(in_dim, out_dim, np.random.default_rng(0)).map(np.zeros_like)
    params.biases[-1][...] = c
    return params


def random_net(in_dim, out_dim, rng, scale=0.5):
    params = nn.init_mlp(in_dim, out_dim, rng)
    for arr in params.arrays():
        arr += scale * rng.normal(size=arr.shape)
    return params


def sample(t=0.0, belief=(0.5, 0.5), u=0, r=0.0, observed=False, post=None, episode=0):
    return TransitionSample(t, np.array(belief, dtype=float), u, r, observed,
                            None if post is None else np.array(post, dtype=float), episode)


def random_batch(model, rng, n=8):
    X = model.num_states
    beliefs = rng.dirichlet(np.ones(X), size=n)
    observed = rng.random(n) < 0.5
    post = np.where(observed[:, None], rng.dirichlet(np.ones(X), size=n), beliefs)
    return TransitionBatch(beliefs, rng.integers(model.num_actions, size=n), rng.normal(size=n), observed, post)


# -- transition samples and replay buffer ------------------------------------------------


def test_transition_sample_invariants():
    with pytest.raises(ValueError):
        sample(observed=False, post=(1.0, 0.0))
    with pytest.raises(ValueError):
        sample(observed=True, post=None)


def test_buffer_is_fifo_and_bounded():
    buf = ReplayBuffer(capacity=5, num_states=2)
    for i in range(12):
        buf.add(sample(t=float(i)))
        assert len(buf) == min(i + 1, 5)
    assert [s.t for s in buf.items()] == [7.0, 8.0, 9.0, 10.0, 11.0]


@given(st.integers(1, 20), st.integers(0, 60))
def test_buffer_keeps_the_newest(capacity, n):
    buf = ReplayBuffer(capacity, 2)
    buf.extend(sample(t=float(i)) for i in range(n))
    assert len(buf) == min(n, capacity)
    assert [s.t for s in buf.items()] == [float(i) for i in range(max(0, n - capacity), n)]


def test_buffer_round_trips_observed_samples():
    buf = ReplayBuffer(4, 2)
    buf.add(sample(t=1.0, u=2, r=0.3, observed=True, post=(0.85, 0.15), episode=3))
    buf.add(sample(t=2.0))
    a, b = buf.items()
    assert a.observed and a.action == 2 and a.reward == 0.3 and a.episode == 3
    np.testing.assert_array_equal(a.post_belief, [0.85, 0.15])
    assert not b.observed and b.post_belief is None


def test_buffer_sample_without_replacement():
    buf = ReplayBuffer(100, 2)
    buf.extend(sample(t=float(i), belief=(i / 100, 1 - i / 100)) for i in range(50))
    batch = buf.sample(40, np.random.default_rng(0))
    firsts = batch.beliefs[:, 0]
    assert len(np.unique(firsts)) == 40
    assert len(buf.sample(500, np.random.default_rng(0)).actions) == 50


def test_buffer_sampling_is_seeded():
    buf = ReplayBuffer(100, 2)
    buf.extend(sample(t=float(i), belief=(i / 100, 1 - i / 100)) for i in range(80))
    a = buf.sample(16, np.random.default_rng(4)).beliefs
    b = buf.sample(16, np.random.default_rng(4)).beliefs
    np.testing.assert_array_equal(a, b)


def test_buffer_rejects_bad_use():
    with pytest.raises(ValueError):
        ReplayBuffer(0, 2)
    with pytest.raises(ValueError):
        ReplayBuffer(3, 2).sample(1, np.random.default_rng(0))


# -- td residual -----------------------------------------------------------------------


@pytest.mark.parametrize("jump", [EXACT, SAMPLED])
def test_constant_reward_fixed_point_has_zero_residual(jump, rng):
    c = 0.7
    model = constant_reward_model(c=c)
    V, A = constant_net(3, 1, c), constant_net(3, 2, 0.0)
    batch = random_batch(model, rng)
    batch.rewards[:] = c
    np.testing.assert_allclose(td_residual_batch(model, V, A, batch, jump=jump).E, 0.0, atol=1e-12)


def test_zero_value_network_leaves_only_reward_in_delta():
    # with V = 0 every value term vanishes, so delta = r and E = A - r;
    # an advantage of 0.2 with r = 0.5 therefore gives E = -0.3
    model = build_tiger()
    V = constant_net(2, 1, 0.0)
    adv = constant_net(2, 3, 0.0)
    batch = TransitionBatch.from_samples([sample(u=u, r=0.5) for u in range(3)])
    res = td_residual_batch(model, V, adv, batch)
    delta = res.A - res.E
    np.testing.assert_allclose(delta, 0.5, atol=1e-14)
    assert 0.2 - delta[0] == pytest.approx(-0.3, abs=1e-14)
    assert td_residual(model, V, adv, sample(u=1, r=0.5)) == pytest.approx(-0.5, abs=1e-14)


def test_exact_jump_equals_posterior_ensemble_sum(rng):
    model = random_model(rng, X=3, U=2, Y=3)
    V = random_net(3, 1, rng)
    A = random_net(3, 2, rng)
    batch = random_batch(model, rng, n=10)
    res = td_residual_batch(model, V, A, batch)
    for b in range(10):
        ens = posterior_ensemble(model, batch.beliefs[b], batch.actions[b])
        v = float(nn.forward(V, batch.beliefs[b])[0][0])
        ref = sum(w * (float(nn.forward(V, p)[0][0]) - v) for w, p in zip(ens.weights, ens.posteriors))
        assert res.jump[b] == pytest.approx(ref, abs=1e-12)


def test_sampled_jump_uses_post_belief_only_when_flagged(rng):
    model = random_model(rng)
    V = random_net(3, 1, rng)
    A = random_net(3, 2, rng)
    batch = random_batch(model, rng, n=10)
    res = td_residual_batch(model, V, A, batch, jump=SAMPLED)
    for b in range(10):
        v = float(nn.forward(V, batch.beliefs[b])[0][0])
        vp = float(nn.forward(V, batch.post_beliefs[b])[0][0])
        assert res.jump[b] == pytest.approx((vp - v) if batch.observed[b] else 0.0, abs=1e-12)


def test_residual_hand_formula(rng):
    model = random_model(rng)
    V = random_net(3, 1, rng)
    A = random_net(3, 2, rng)
    batch = random_batch(model, rng, n=5)
    res = td_residual_batch(model, V, A, batch)
    tau = model.discount
    for b in range(5):
        pi, u = batch.beliefs[b], batch.actions[b]
        v = float(nn.forward(V, pi)[0][0])
        grad = nn.input_gradient(V, nn.forward(V, pi)[1])[0]
        raw = nn.forward(A, pi)[0]
        delta = batch.rewards[b] - v + tau * grad @ (pi @ model.rates[u]) + tau * model.obs_rate[u] * res.jump[b]
        assert res.E[b] == pytest.approx(raw[u] - raw.max() - delta, abs=1e-12)


def test_unknown_jump_estimator(rng):
    model = random_model(rng)
    with pytest.raises(ValueError, match="jump"):
        td_residual_batch(model, random_net(3, 1, rng), random_net(3, 2, rng), random_batch(model, rng), jump="magic")


@pytest.mark.parametrize("jump", [EXACT, SAMPLED])
def test_objective_is_mean_squared_residual(jump, rng):
    model = random_model(rng)
    V, A = random_net(3, 1, rng), random_net(3, 2, rng)
    batch = random_batch(model, rng, n=32)
    loss, _, _ = td_loss_and_grads(model, V, A, batch, jump=jump)
    E = td_residual_batch(model, V, A, batch, jump=jump).E
    assert loss == pytest.approx(float(np.mean(E**2)), abs=1e-12)


@pytest.mark.parametrize("jump", [EXACT, SAMPLED])
def test_td_gradients_match_finite_differences(jump, rng):
    model = random_model(rng, X=3, U=3, Y=2)
    V, A = random_net(3, 1, rng), random_net(3, 3, rng)
    batch = random_batch(model, rng, n=6)
    _, gv, ga = td_loss_and_grads(model, V, A, batch, jump=jump)
    h = 1e-6
    for params, grads in ((V, gv), (A, ga)):
        for arr, g in zip(params.arrays(), grads.arrays()):
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                up = td_loss_and_grads(model, V, A, batch, jump=jump)[0]
                arr[idx] = orig - h
                down = td_loss_and_grads(model, V, A, batch, jump=jump)[0]
                arr[idx] = orig
                assert g[idx] == pytest.approx((up - down) / (2 * h), abs=1e-6)


# -- exploration -----------------------------------------------------------------------


def test_zero_noise_is_greedy(rng):
    adv = random_net(3, 4, rng)
    ou = OuState(np.zeros(4), 7.5, 1.0)
    for b in rng.dirichlet(np.ones(3), size=20):
        assert exploration_policy(adv, ou, b) == int(np.argmax(nn.forward(adv, b)[0]))


def test_dominating_noise_wins(rng):
    adv = random_net(3, 4, rng)
    for u0 in range(4):
        eps = np.zeros(4)
        eps[u0] = 1e6
        assert exploration_policy(adv, OuState(eps, 7.5, 1.0), np.array([0.2, 0.3, 0.5])) == u0


def test_exploration_ties_break_low():
    adv = constant_net(2, 3, 1.0)
    assert exploration_policy(adv, OuState(np.zeros(3), 7.5, 1.0), np.array([0.5, 0.5])) == 0
    assert exploration_policy(adv, OuState(np.array([0.0, 2.0, 2.0]), 7.5, 1.0), np.array([0.5, 0.5])) == 1


def test_exploration_policy_follows_the_noise_path():
    adv = constant_net(2, 2, 0.0)
    path = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    policy = ExplorationPolicy(adv, path, dt=0.1)
    b = np.array([0.5, 0.5])
    assert [policy(b, t) for t in (0.0, 0.1, 0.2, 0.25, 5.0)] == [0, 1, 0, 0, 0]


# -- subsampling -----------------------------------------------------------------------


def tiger_episode(seed=0, horizon=5.0):
    model = build_tiger()
    return model, simulate_episode(model, ConstantPolicy(0), horizon, np.array([0.5, 0.5]),
                                   np.random.default_rng(seed), IntegratorConfig(dt=1e-2))


def test_subsample_count_and_flags():
    model, ep = tiger_episode()
    samples = subsample_episode(ep, 100, np.random.default_rng(0), episode_id=4)
    n_obs = len(ep.observations)
    assert n_obs > 0
    assert len(samples) == 100 + n_obs
    assert sum(s.observed for s in samples) == n_obs
    assert all(s.episode == 4 for s in samples)


def test_flagged_samples_carry_the_bayes_reset():
    model, ep = tiger_episode(seed=3)
    for s in subsample_episode(ep, 50, np.random.default_rng(1)):
        if s.observed:
            e = next(e for e in ep.observations if e.t == s.t)
            np.testing.assert_allclose(s.post_belief, bayes_reset(model, s.belief, s.action, e.y), atol=1e-12)


def test_subsample_is_deterministic():
    _, ep = tiger_episode()
    a = subsample_episode(ep, 80, np.random.default_rng(9))
    b = subsample_episode(ep, 80, np.random.default_rng(9))
    assert [s.t for s in a] == [s.t for s in b]


def test_subsample_reward_signal():
    _, ep = tiger_episode(seed=2)
    latent = subsample_episode(ep, 30, np.random.default_rng(0), reward_signal="latent")
    expected = subsample_episode(ep, 30, np.random.default_rng(0), reward_signal="expected")
    # listening costs the same in every state, so both signals agree
    assert [s.reward for s in latent] == pytest.approx([s.reward for s in expected])
    assert all(s.reward == pytest.approx(-0.01) for s in latent)


def test_subsample_clamps_with_warning():
    _, ep = tiger_episode(horizon=0.5)
    with pytest.warns(UserWarning, match="clamping"):
        samples = subsample_episode(ep, 10**6, np.random.default_rng(0))
    assert len(samples) == len(ep.grid_indices()) + len(ep.observations)


# -- config and training -----------------------------------------------------------------


def test_task_defaults():
    assert au_config_for("tiger").subsamples == 1000
    assert au_config_for("aloha").episode_length == 20.0
    assert au_config_for("gridworld").subsamples == 100
    assert au_config_for("gridworld").episode_length == 5.0
    assert au_config_for("tiger").initial_belief == "uniform"
    cfg = AuConfig()
    assert (cfg.episodes, cfg.steps_per_episode, cfg.batch_size) == (1000, 20, 256)
    assert (cfg.kappa, cfg.sigma_start, cfg.sigma_end) == (7.5, 1.5, 0.5)
    assert set(AU_TASK_DEFAULTS) == {"tiger", "aloha", "gridworld"}


def test_sigma_decays_monotonically():
    cfg = AuConfig(episodes=50)
    sig = [cfg.sigma(i) for i in range(50)]
    assert sig[0] == 1.5 and sig[-1] == pytest.approx(0.5)
    assert all(a >= b for a, b in zip(sig, sig[1:]))


def test_config_rejects_nonpositive():
    with pytest.raises(ValueError):
        AuConfig(batch_size=0)


def test_initial_belief_samplers(rng):
    uni = initial_belief_sampler(au_config_for("tiger"), 2)
    firsts = np.array([uni(rng)[0] for _ in range(2000)])
    assert 0.45 < firsts.mean() < 0.55 and firsts.min() < 0.05 and firsts.max() > 0.95
    dirich = initial_belief_sampler(au_config_for("aloha"), 30)
    b = dirich(rng)
    assert b.shape == (30,) and b.sum() == pytest.approx(1.0)


def test_training_is_deterministic_and_reparameterized():
    model = build_tiger()
    cfg = au_config_for("tiger", episodes=3, subsamples=100, episode_length=2.0, steps_per_episode=5)
    a = train_advantage_updating(model, cfg, np.random.default_rng(11))
    b = train_advantage_updating(model, cfg, np.random.default_rng(11))
    assert a.loss == b.loss and a.metrics == b.metrics
    assert len(a.loss) == 15 and len(a.metrics) == 3
    assert set(a.metrics[0]) == {"episode", "mean_loss", "return", "sigma"}
    raw = nn.forward(a.advantage, np.random.default_rng(0).dirichlet([1, 1], size=20))[0]
    assert np.all((raw - raw.max(axis=1, keepdims=True)).max(axis=1) == 0.0)


def test_training_aborts_on_divergence(monkeypatch):
    import ctpomdp.au as au

    monkeypatch.setattr(au, "td_loss_and_grads", lambda *a, **k: (float("nan"), None, None))
    cfg = au_config_for("tiger", episodes=1, subsamples=10, episode_length=0.5, steps_per_episode=1)
    with pytest.raises(TrainingDiverged):
        train_advantage_updating(build_tiger(), cfg, np.random.default_rng(0))


def test_keep_visited_records_subsampled_beliefs():
    cfg = au_config_for("tiger", episodes=2, subsamples=20, episode_length=1.0, steps_per_episode=1)
    res = train_advantage_updating(build_tiger(), cfg, np.random.default_rng(0), keep_visited=True)
    assert len(res.visited) >= 40
    assert all(abs(b.sum() - 1) < 1e-9 for b in res.visited)
