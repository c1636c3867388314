import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ctpomdp.model import PomdpModel

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_model(rng, X=3, U=2, Y=2, rate_scale=1.0, obs_rate=1.0, discount=0.9):
    """Dense random model: positive off-diagonal rates, Dirichlet likelihood rows."""
    rates = rng.uniform(0.1, 1.0, size=(U, X, X)) * rate_scale
    for u in range(U):
        np.fill_diagonal(rates[u], 0.0)
        rates[u] -= np.diag(rates[u].sum(axis=1))
    like = rng.dirichlet(np.ones(Y), size=(U, X))
    reward = rng.normal(size=(U, X))
    return PomdpModel(rates, like, np.full(U, obs_rate), reward, discount)


def two_state_chain(a=1.0, b=None, U=1):
    """Chain 0 <-> 1 with rates a (0 -> 1) and b (1 -> 0); uninformative observations."""
    b = a if b is None else b
    gen = np.array([[-a, a], [b, -b]])
    return PomdpModel(
        np.broadcast_to(gen, (U, 2, 2)).copy(),
        np.full((U, 2, 2), 0.5),
        np.zeros(U),
        np.zeros((U, 2)),
        0.9,
    )


def switching_model(q1, q2, b=1.0):
    """State 0 leaves at q1 under action 0 and q2 under action 1; state 1 returns at rate b."""
    rates = np.array([[[-q1, q1], [b, -b]], [[-q2, q2], [b, -b]]])
    return PomdpModel(rates, np.full((2, 2, 2), 0.5), np.zeros(2), np.zeros((2, 2)), 0.9)


def constant_reward_model(c=0.7, X=3, U=2, Y=2, seed=0):
    rng = np.random.default_rng(seed)
    base = random_model(rng, X, U, Y)
    return PomdpModel(base.rates, base.obs_likelihood, base.obs_rate, np.full((U, X), c), 0.9)


# -- acceptance report -------------------------------------------------------------------

ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- trained policies shared by the CLI and acceptance suites ----------------------------

TIGER_COLLOCATION_EPISODES = 2000


@pytest.fixture(scope="session")
def tiger_collocation_run():
    """Tiger collocation networks and the training time in seconds (trained once per session)."""
    import time

    from ctpomdp.envs import build_tiger
    from ctpomdp.hjb import Checkpoint, CollocationConfig, collocation_train

    model = build_tiger()
    cfg = CollocationConfig(episodes=TIGER_COLLOCATION_EPISODES)
    t0 = time.perf_counter()
    res = collocation_train(model, cfg, np.random.default_rng(0))
    elapsed = time.perf_counter() - t0
    ckpt = Checkpoint(model, res.value, res.advantage, "collocation", "tiger", 0, cfg.to_dict(),
                      res.value_loss)
    return ckpt, elapsed


@pytest.fixture(scope="session")
def tiger_collocation(tiger_collocation_run):
    return tiger_collocation_run[0]
