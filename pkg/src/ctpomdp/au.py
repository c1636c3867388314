"""Online advantage updating in belief space.

Episodes are simulated under an exploration policy that perturbs the learned
advantages with Ornstein-Uhlenbeck noise; subsampled transitions go to a replay
buffer, and value and advantage networks are fit jointly by minimizing the
squared residual E = A(pi, u) - delta, with the continuous-time TD error

    delta = r - V(pi) + tau dV/dpi . f(pi, u) + tau lam(u) (jump term).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .filtering import IntegratorConfig, batch_posteriors, drifts
from .hjb import TrainingDiverged, discount_schedule, sample_beliefs
from .model import PomdpModel
from .sim import Episode, OuState, ou_path, ou_stationary, simulate_episode

log = logging.getLogger(__name__)


@dataclass
class TransitionSample:
    t: float
    belief: np.ndarray
    action: int
    reward: float
    observed: bool = False
    post_belief: np.ndarray | None = None
    episode: int = -1
    seed: int | None = None

    def __post_init__(self):
        if not self.observed and self.post_belief is not None:
            raise ValueError("post-observation belief given for an unobserved sample")
        if self.observed and self.post_belief is None:
            raise ValueError("observed sample needs its post-observation belief")


@dataclass
class TransitionBatch:
    beliefs: np.ndarray  # (B, X)
    actions: np.ndarray  # (B,)
    rewards: np.ndarray  # (B,)
    observed: np.ndarray  # (B,) bool
    post_beliefs: np.ndarray  # (B, X); equals beliefs where not observed

    @classmethod
    def from_samples(cls, samples: list) -> "TransitionBatch":
        beliefs = np.array([s.belief for s in samples], dtype=float)
        post = np.array(
            [s.post_belief if s.observed else s.belief for s in samples], dtype=float
        )
        return cls(
            beliefs,
            np.array([s.action for s in samples], dtype=int),
            np.array([s.reward for s in samples], dtype=float),
            np.array([s.observed for s in samples], dtype=bool),
            post,
        )


class ReplayBuffer:
    """Bounded FIFO store of transition samples backed by preallocated arrays."""

    def __init__(self, capacity: int, num_states: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.beliefs = np.zeros((capacity, num_states))
        self.post = np.zeros((capacity, num_states))
        self.actions = np.zeros(capacity, dtype=int)
        self.rewards = np.zeros(capacity)
        self.observed = np.zeros(capacity, dtype=bool)
        self.times = np.zeros(capacity)
        self.episodes = np.zeros(capacity, dtype=int)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, s: TransitionSample) -> None:
        i = self._next
        self.beliefs[i] = s.belief
        self.post[i] = s.post_belief if s.observed else s.belief
        self.actions[i] = s.action
        self.rewards[i] = s.reward
        self.observed[i] = s.observed
        self.times[i] = s.t
        self.episodes[i] = s.episode
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def extend(self, samples) -> None:
        for s in samples:
            self.add(s)

    def _order(self) -> np.ndarray:
        """Storage indices from oldest to newest."""
        start = (self._next - self._size) % self.capacity
        return (start + np.arange(self._size)) % self.capacity

    def items(self) -> list:
        return [
            TransitionSample(
                float(self.times[i]), self.beliefs[i].copy(), int(self.actions[i]),
                float(self.rewards[i]), bool(self.observed[i]),
                self.post[i].copy() if self.observed[i] else None, int(self.episodes[i]),
            )
            for i in self._order()
        ]

    def sample(self, n: int, rng: np.random.Generator) -> TransitionBatch:
        """Uniform batch without replacement (clamped to the buffer size)."""
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        n = min(n, self._size)
        idx = self._order()[rng.choice(self._size, size=n, replace=False)]
        return TransitionBatch(
            self.beliefs[idx], self.actions[idx], self.rewards[idx],
            self.observed[idx], self.post[idx],
        )


# -- residual ---------------------------------------------------------------------

EXACT, SAMPLED = "exact", "sampled"


@dataclass
class TdResidual:
    E: np.ndarray
    V: np.ndarray
    A: np.ndarray  # reparameterized advantage of the taken action
    jump: np.ndarray
    raw: np.ndarray
    adv_cache: nn.ForwardCache
    val_cache: nn.ForwardCache
    post_cache: nn.ForwardCache
    post_weights: np.ndarray  # (B, Y) exact, or (B, 1) sampled indicator


def td_residual_batch(
    model: PomdpModel,
    value_params: nn.MlpParams,
    adv_params: nn.MlpParams,
    batch: TransitionBatch,
    tau: float | None = None,
    jump: str = EXACT,
) -> TdResidual:
    tau = model.discount if tau is None else tau
    B, X = batch.beliefs.shape
    rows = np.arange(B)
    u = batch.actions
    f = drifts(model, batch.beliefs)[rows, u]  # (B, X)
    out, dout, val_cache = nn.forward_tangent(value_params, batch.beliefs, f[:, None, :])
    V = out[:, 0]
    dVf = dout[:, 0, 0]
    if jump == EXACT:
        weights, post = batch_posteriors(model, batch.beliefs, u)  # (B, Y), (B, Y, X)
        Y = weights.shape[1]
        V_post, post_cache = nn.forward(value_params, post.reshape(-1, X))
        V_post = V_post[:, 0].reshape(B, Y)
        J = np.einsum("by,by->b", weights, V_post) - V
    elif jump == SAMPLED:
        weights = batch.observed.astype(float)[:, None]
        V_post, post_cache = nn.forward(value_params, batch.post_beliefs)
        J = weights[:, 0] * (V_post[:, 0] - V)
    else:
        raise ValueError(f"unknown jump estimator {jump!r}")
    lam = model.obs_rate[u]
    delta = batch.rewards - V + tau * dVf + tau * lam * J
    raw, adv_cache = nn.forward(adv_params, batch.beliefs)
    A = raw[rows, u] - raw.max(axis=1)
    return TdResidual(A - delta, V, A, J, raw, adv_cache, val_cache, post_cache, weights)


def td_residual(
    model: PomdpModel,
    value_params: nn.MlpParams,
    adv_params: nn.MlpParams,
    sample: TransitionSample,
    tau: float | None = None,
    jump: str = EXACT,
) -> float:
    batch = TransitionBatch.from_samples([sample])
    return float(td_residual_batch(model, value_params, adv_params, batch, tau, jump).E[0])


def td_loss_and_grads(
    model: PomdpModel,
    value_params: nn.MlpParams,
    adv_params: nn.MlpParams,
    batch: TransitionBatch,
    tau: float | None = None,
    jump: str = EXACT,
):
    """Mean squared residual and its gradients for the value and advantage networks."""
    tau = model.discount if tau is None else tau
    res = td_residual_batch(model, value_params, adv_params, batch, tau, jump)
    B = len(res.E)
    rows = np.arange(B)
    u = batch.actions
    loss = float(np.mean(res.E**2))
    g = 2.0 * res.E / B

    g_raw = np.zeros_like(res.raw)
    g_raw[rows, u] += g
    g_raw[rows, np.argmax(res.raw, axis=1)] -= g
    adv_grads = nn.param_gradients(adv_params, res.adv_cache, g_raw)

    lam = model.obs_rate[u]
    if jump == EXACT:
        g_V = g * (1.0 + tau * lam)
    else:
        g_V = g * (1.0 + tau * lam * res.post_weights[:, 0])
    g_dout = (-tau * g)[:, None, None]
    g_post = -tau * (lam * g)[:, None] * res.post_weights
    val_grads = nn.param_gradients(value_params, res.val_cache, g_V[:, None], g_dout)
    post_grads = nn.param_gradients(value_params, res.post_cache, g_post.reshape(-1, 1))
    return loss, val_grads.map(np.add, post_grads), adv_grads


# -- exploration ---------------------------------------------------------------------


def exploration_policy(adv_params: nn.MlpParams, ou: OuState, belief) -> int:
    """argmax_u A(pi, u) + eps(u); lowest index on ties."""
    raw, _ = nn.forward(adv_params, belief)
    adv = raw - raw.max()
    return int(np.argmax(adv + ou.eps))


class ExplorationPolicy:
    """Greedy-plus-OU policy with the perturbation precomputed on the simulation grid."""

    def __init__(self, adv_params: nn.MlpParams, eps_path: np.ndarray, dt: float):
        self.adv_params = adv_params
        self.eps_path = eps_path
        self.dt = dt

    def __call__(self, belief, t):
        k = min(int(t / self.dt + 1e-9), len(self.eps_path) - 1)
        raw, _ = nn.forward(self.adv_params, belief)
        return int(np.argmax(raw - raw.max() + self.eps_path[k]))


# -- subsampling -----------------------------------------------------------------------


def subsample_episode(
    episode: Episode,
    n_samples: int,
    rng: np.random.Generator,
    episode_id: int = -1,
    reward_signal: str = "latent",
) -> list:
    """``n_samples`` uniform grid samples plus one flagged sample per observation event."""
    grid = episode.grid_indices()
    if n_samples > len(grid):
        warnings.warn(
            f"requested {n_samples} subsamples from a grid of {len(grid)}; clamping",
            stacklevel=2,
        )
        n_samples = len(grid)
    rewards = episode.rewards if reward_signal == "latent" else episode.expected_rewards
    chosen = np.sort(rng.choice(grid, size=n_samples, replace=False))
    out = [
        TransitionSample(
            float(episode.times[i]), episode.beliefs[i], int(episode.actions[i]),
            float(rewards[i]), episode=episode_id, seed=episode.seed,
        )
        for i in chosen
    ]
    for e in episode.observations:
        before = e.sample_index - 1
        out.append(
            TransitionSample(
                e.t, e.belief_before, e.u, float(rewards[before]), True, e.belief_after,
                episode=episode_id, seed=episode.seed,
            )
        )
    return out


# -- training loop -----------------------------------------------------------------------


@dataclass
class AuConfig:
    episodes: int = 1000
    steps_per_episode: int = 20
    batch_size: int = 256
    episode_length: float = 10.0
    subsamples: int = 1000
    kappa: float = 7.5
    sigma_start: float = 1.5
    sigma_end: float = 0.5
    capacity: int = 200_000
    learning_rate: float = 1e-3
    dt: float = 1e-2
    jump_estimator: str = EXACT
    reward_signal: str = "latent"
    initial_belief: str = "dirichlet"  # or "uniform" (first coordinate uniform, two states)
    concentration: float = 0.1
    decay_steps: int = 0  # discount ramp as in collocation; 0 disables it
    tau_min_fraction: float = 0.1

    def __post_init__(self):
        for name in ("episodes", "steps_per_episode", "batch_size", "episode_length",
                     "subsamples", "kappa", "capacity", "learning_rate", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def sigma(self, episode: int) -> float:
        """Linearly decaying exploration noise scale."""
        if self.episodes <= 1:
            return self.sigma_start
        frac = episode / (self.episodes - 1)
        return self.sigma_start + (self.sigma_end - self.sigma_start) * frac


AU_TASK_DEFAULTS = {
    "tiger": dict(episode_length=10.0, subsamples=1000, initial_belief="uniform"),
    "aloha": dict(episode_length=20.0, subsamples=1000, initial_belief="dirichlet"),
    "gridworld": dict(episode_length=5.0, subsamples=100, initial_belief="dirichlet"),
}


def au_config_for(env: str, **overrides) -> AuConfig:
    return AuConfig(**{**AU_TASK_DEFAULTS.get(env, {}), **overrides})


def initial_belief_sampler(cfg: AuConfig, num_states: int):
    def sample(rng):
        if cfg.initial_belief == "uniform":
            return sample_beliefs(2, 1, rng)[0] if num_states == 2 else np.full(num_states, 1 / num_states)
        return sample_beliefs(num_states, 1, rng, cfg.concentration)[0]
    return sample


@dataclass
class AuResult:
    value: nn.MlpParams
    advantage: nn.MlpParams
    loss: list = field(default_factory=list)  # per optimization step
    metrics: list = field(default_factory=list)  # per episode: episode, mean_loss, return, sigma
    visited: list = field(default_factory=list)


def train_advantage_updating(
    model: PomdpModel, cfg: AuConfig, rng: np.random.Generator, keep_visited: bool = False
) -> AuResult:
    X, U = model.num_states, model.num_actions
    value = nn.init_mlp(X, 1, rng)
    adv = nn.init_mlp(X, U, rng)
    v_opt = nn.adam_init(value, lr=cfg.learning_rate)
    a_opt = nn.adam_init(adv, lr=cfg.learning_rate)
    buffer = ReplayBuffer(cfg.capacity, X)
    sampler = initial_belief_sampler(cfg, X)
    integ = IntegratorConfig(dt=cfg.dt)
    n_grid = int(math.ceil(cfg.episode_length / cfg.dt - 1e-9))
    result = AuResult(value, adv)
    step = 0
    for i in range(cfg.episodes):
        sigma = cfg.sigma(i)
        ou = ou_stationary(U, cfg.kappa, sigma, rng)
        policy = ExplorationPolicy(adv, ou_path(ou, n_grid, cfg.dt, rng), cfg.dt)
        ep = simulate_episode(model, policy, cfg.episode_length, sampler, rng, integ)
        samples = subsample_episode(ep, cfg.subsamples, rng, i, cfg.reward_signal)
        buffer.extend(samples)
        if keep_visited:
            result.visited.extend(s.belief for s in samples)
        losses = []
        for _ in range(cfg.steps_per_episode):
            batch = buffer.sample(cfg.batch_size, rng)
            tau = discount_schedule(
                step, model.discount, cfg.decay_steps, cfg.tau_min_fraction * model.discount
            )
            loss, vg, ag = td_loss_and_grads(model, value, adv, batch, tau, cfg.jump_estimator)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"advantage updating diverged at episode {i}, step {step}")
            value, v_opt = nn.adam_step(v_opt, value, vg)
            adv, a_opt = nn.adam_step(a_opt, adv, ag)
            losses.append(loss)
            step += 1
        result.loss.extend(losses)
        result.metrics.append(
            {"episode": i, "mean_loss": float(np.mean(losses)),
             "return": ep.discounted_return, "sigma": sigma}
        )
        if i % 100 == 0:
            log.debug("au episode %d loss %.3e return %.3f", i, np.mean(losses), ep.discounted_return)
    result.value, result.advantage = value, adv
    return result
