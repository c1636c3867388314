"""Belief-space HJB residual and the offline collocation solver.

For a value network V and the continuous-discrete filter the advantage residual is

    A(pi, u) = E[R | pi, u] - V(pi) + tau * dV/dpi . f(pi, u)
               + tau * lam(u) * (sum_y p(y | pi, u) V(pi_y^+) - V(pi))

and the HJB equation is max_u A(pi, u) = 0. Collocation fits V by driving the
best-action residual to zero at sampled beliefs; a second network is then fit
to the residuals of the trained value network, reparameterized so that its
maximum over actions is exactly zero.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .filtering import batch_posteriors, drift, drifts, posterior_ensemble
from .model import PomdpModel

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss or parameters became non-finite."""


# -- residual -----------------------------------------------------------------


def advantage_residual(
    model: PomdpModel,
    value_params: nn.MlpParams,
    belief,
    u: int,
    tau: float | None = None,
    dispersion=None,
    printed_sign: bool = False,
) -> float:
    """Advantage residual of one (belief, action) pair.

    ``dispersion(belief, u)`` may return a dispersion matrix G for filters with a
    diffusion part; the continuous-discrete filter has none, so it defaults to
    no second-order term. ``printed_sign`` adds V instead of subtracting it.
    """
    tau = model.discount if tau is None else tau
    pi = np.asarray(belief, dtype=float)
    value, cache = nn.forward(value_params, pi)
    v = float(value[0])
    grad, messages = nn.input_gradient(value_params, cache)
    ens = posterior_ensemble(model, pi, u)
    jump = 0.0
    for w, post, ok in zip(ens.weights, ens.posteriors, ens.valid):
        if ok:
            jump += w * float(nn.forward(value_params, post)[0][0])
    lam = model.obs_rate[u]
    sign = 1.0 if printed_sign else -1.0
    res = (
        float(model.reward_rate[u] @ pi)
        + sign * v
        + tau * float(grad @ drift(model, pi, u))
        + tau * lam * (jump - v)
    )
    if dispersion is not None:
        G = np.asarray(dispersion(pi, u), dtype=float)
        hess = nn.input_hessian(value_params, cache, messages)
        res += 0.5 * tau * float(np.trace(hess @ G @ G.T))
    return res


@dataclass
class ResidualBatch:
    A: np.ndarray  # (B, U)
    V: np.ndarray  # (B,)
    drift_term: np.ndarray  # (B, U): dV/dpi . f
    weights: np.ndarray  # (B, U, Y)
    V_post: np.ndarray  # (B, U, Y)
    cache: nn.ForwardCache
    post_cache: nn.ForwardCache
    tau: float
    printed_sign: bool
    shared_posteriors: bool = False  # post_cache holds one ensemble for all actions


def residual_batch(
    model: PomdpModel,
    value_params: nn.MlpParams,
    beliefs: np.ndarray,
    tau: float | None = None,
    printed_sign: bool = False,
    rewards: np.ndarray | None = None,
) -> ResidualBatch:
    """Residuals of a batch of beliefs (B, X) under every action.

    ``rewards`` (B, U) replaces the expected reward term when given (used for
    sampled reward signals).
    """
    tau = model.discount if tau is None else tau
    B, X = beliefs.shape
    f = drifts(model, beliefs)
    out, dout, cache = nn.forward_tangent(value_params, beliefs, f)
    V = out[:, 0]
    dVf = dout[:, :, 0]
    U, Y = model.num_actions, model.num_observations
    shared = model.action_independent_observations
    if shared:
        # one posterior ensemble serves every action
        w0, post = batch_posteriors(model, beliefs, 0)
        V_post, post_cache = nn.forward(value_params, post.reshape(-1, X))
        V_post = np.broadcast_to(V_post[:, 0].reshape(B, 1, Y), (B, U, Y))
        weights = np.broadcast_to(w0[:, None, :], (B, U, Y))
    else:
        weights, post = batch_posteriors(model, beliefs)
        V_post, post_cache = nn.forward(value_params, post.reshape(-1, X))
        V_post = V_post[:, 0].reshape(B, U, Y)
    er = beliefs @ model.reward_rate.T if rewards is None else rewards
    lam = model.obs_rate[None, :]
    sign = 1.0 if printed_sign else -1.0
    jump = np.einsum("buy,buy->bu", weights, V_post) - V[:, None]
    A = er + sign * V[:, None] + tau * dVf + tau * lam * jump
    return ResidualBatch(A, V, dVf, weights, V_post, cache, post_cache, tau, printed_sign, shared)


def residual_param_gradients(
    model: PomdpModel, value_params: nn.MlpParams, batch: ResidualBatch, g_A: np.ndarray
) -> nn.MlpParams:
    """Gradient of sum(g_A * A) w.r.t. the value-network parameters."""
    lam = model.obs_rate[None, :]
    sign = 1.0 if batch.printed_sign else -1.0
    tau = batch.tau
    g_V = (g_A * (sign - tau * lam)).sum(axis=1)
    g_dout = (tau * g_A)[:, :, None]
    g_post = tau * lam[:, :, None] * batch.weights * g_A[:, :, None]
    if batch.shared_posteriors:
        g_post = g_post.sum(axis=1)
    grads = nn.param_gradients(value_params, batch.cache, g_V[:, None], g_dout)
    grads_post = nn.param_gradients(value_params, batch.post_cache, g_post.reshape(-1, 1))
    return grads.map(np.add, grads_post)


# -- schedules and sampling ---------------------------------------------------


def discount_schedule(step: int, target: float, horizon: int = 500, tau_min: float | None = None) -> float:
    """Linear ramp of the discount time constant from tau_min to target over ``horizon`` steps."""
    if step < 0:
        raise ValueError("step must be non-negative")
    tau_min = 0.1 * target if tau_min is None else tau_min
    if horizon <= 0 or step >= horizon:
        return target
    return tau_min + (target - tau_min) * step / horizon


def sample_beliefs(
    num_states: int, n: int, rng: np.random.Generator, concentration: float = 0.1
) -> np.ndarray:
    """Base distribution: uniform first coordinate for two states, symmetric Dirichlet otherwise."""
    if num_states == 2:
        p = rng.random(n)
        return np.stack([p, 1.0 - p], axis=1)
    beliefs = rng.dirichlet(np.full(num_states, concentration), size=n)
    bad = ~np.isfinite(beliefs).all(axis=1) | (beliefs.sum(axis=1) <= 0)
    if bad.any():
        beliefs[bad] = np.eye(num_states)[rng.integers(num_states, size=bad.sum())]
    return beliefs / beliefs.sum(axis=1, keepdims=True)


# -- advantage network ----------------------------------------------------------


def reparameterized_advantage(adv_params: nn.MlpParams, beliefs) -> np.ndarray:
    """A(pi, u) = Abar(pi, u) - max_u' Abar(pi, u'); the max over actions is exactly 0."""
    raw, _ = nn.forward(adv_params, beliefs)
    return raw - raw.max(axis=-1, keepdims=True)


def greedy_action(adv_params: nn.MlpParams, belief) -> int:
    raw, _ = nn.forward(adv_params, belief)
    return int(np.argmax(raw))


@dataclass
class GreedyPolicy:
    """argmax of the learned advantage, lowest index on ties."""

    adv_params: nn.MlpParams

    def __call__(self, belief, t):
        return greedy_action(self.adv_params, belief)


def advantage_fit_step(adv_params: nn.MlpParams, beliefs: np.ndarray, targets: np.ndarray):
    """Loss mean_b sum_u (A_psi(b, u) - target(b, u))^2 and its parameter gradient."""
    raw, cache = nn.forward(adv_params, beliefs)
    B = raw.shape[0]
    k = np.argmax(raw, axis=1)
    err = raw - raw[np.arange(B), k][:, None] - targets
    loss = float(np.mean(np.sum(err**2, axis=1)))
    g = 2.0 * err / B
    g_raw = g.copy()
    g_raw[np.arange(B), k] -= g.sum(axis=1)
    return loss, nn.param_gradients(adv_params, cache, g_raw)


# -- collocation trainer -------------------------------------------------------------


@dataclass
class CollocationConfig:
    """Each episode draws ``samples`` fresh collocation beliefs and sweeps them in
    mini-batches of ``batch_size``, taking ``steps_per_batch`` Adam steps per batch."""

    episodes: int = 10000
    samples: int = 2560
    batch_size: int = 256
    steps_per_batch: int = 1
    decay_steps: int = 500
    tau_min_fraction: float = 0.1
    learning_rate: float = 1e-3
    concentration: float = 0.1
    advantage_episodes: int | None = None
    printed_sign: bool = False

    def __post_init__(self):
        for name in ("episodes", "samples", "batch_size", "steps_per_batch", "learning_rate", "concentration"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CollocationResult:
    value: nn.MlpParams
    advantage: nn.MlpParams | None
    value_loss: list = field(default_factory=list)
    advantage_loss: list = field(default_factory=list)


def _check_finite(loss: float, params: nn.MlpParams, step: int, what: str) -> None:
    if not np.isfinite(loss) or not all(np.isfinite(a).all() for a in params.arrays()):
        raise TrainingDiverged(f"{what} diverged at step {step}: loss={loss!r}")


def collocation_train_value(
    model: PomdpModel, cfg: CollocationConfig, rng: np.random.Generator
) -> tuple[nn.MlpParams, list]:
    """Fit the value network by minimizing the squared best-action residual."""
    X = model.num_states
    params = nn.init_mlp(X, 1, rng)
    opt = nn.adam_init(params, lr=cfg.learning_rate)
    trace = []
    target = model.discount
    step = 0
    for episode in range(cfg.episodes):
        samples = sample_beliefs(X, cfg.samples, rng, cfg.concentration)
        losses = []
        for start in range(0, cfg.samples, cfg.batch_size):
            beliefs = samples[start:start + cfg.batch_size]
            rows = np.arange(len(beliefs))
            for _ in range(cfg.steps_per_batch):
                tau = discount_schedule(step, target, cfg.decay_steps, cfg.tau_min_fraction * target)
                batch = residual_batch(model, params, beliefs, tau, cfg.printed_sign)
                best = np.argmax(batch.A, axis=1)
                a_best = batch.A[rows, best]
                loss = float(np.mean(a_best**2))
                _check_finite(loss, params, step, "value collocation")
                g_A = np.zeros_like(batch.A)
                g_A[rows, best] = 2.0 * a_best / len(beliefs)
                grads = residual_param_gradients(model, params, batch, g_A)
                params, opt = nn.adam_step(opt, params, grads)
                losses.append(loss)
                step += 1
        trace.append(float(np.mean(losses)))
        if episode % 1000 == 0:
            log.debug("collocation episode %d loss %.3e tau %.3f", episode, trace[-1], tau)
    return params, trace


def fit_advantage(
    model: PomdpModel,
    value_params: nn.MlpParams,
    cfg: CollocationConfig,
    rng: np.random.Generator,
) -> tuple[nn.MlpParams, list]:
    """Fit the reparameterized advantage network to the residuals of a trained value net."""
    X, U = model.num_states, model.num_actions
    params = nn.init_mlp(X, U, rng)
    opt = nn.adam_init(params, lr=cfg.learning_rate)
    trace = []
    episodes = cfg.advantage_episodes or cfg.episodes
    step = 0
    for _ in range(episodes):
        samples = sample_beliefs(X, cfg.samples, rng, cfg.concentration)
        targets_all = residual_batch(model, value_params, samples, printed_sign=cfg.printed_sign).A
        losses = []
        for start in range(0, cfg.samples, cfg.batch_size):
            beliefs = samples[start:start + cfg.batch_size]
            targets = targets_all[start:start + cfg.batch_size]
            for _ in range(cfg.steps_per_batch):
                loss, grads = advantage_fit_step(params, beliefs, targets)
                _check_finite(loss, params, step, "advantage fit")
                params, opt = nn.adam_step(opt, params, grads)
                losses.append(loss)
                step += 1
        trace.append(float(np.mean(losses)))
    return params, trace


def collocation_train(
    model: PomdpModel, cfg: CollocationConfig, rng: np.random.Generator
) -> CollocationResult:
    value, value_loss = collocation_train_value(model, cfg, rng)
    adv, adv_loss = fit_advantage(model, value, cfg, rng)
    return CollocationResult(value, adv, value_loss, adv_loss)


# -- checkpoints -------------------------------------------------------------------------

CHECKPOINT_FORMAT = "ctpomdp-checkpoint/1"


@dataclass
class Checkpoint:
    """Trained networks plus everything needed to reuse them.

    The model itself is stored, so a checkpoint of a custom model is usable
    without the original model file.
    """

    model: PomdpModel
    value: nn.MlpParams
    advantage: nn.MlpParams | None
    method: str
    env: str
    seed: int | None
    config: dict
    loss: list = field(default_factory=list)

    def __post_init__(self):
        X, U = self.model.num_states, self.model.num_actions
        if self.value.in_dim != X or self.value.out_dim != 1:
            raise ValueError(
                f"value network shape {self.value.in_dim}->{self.value.out_dim} does not match |X|={X}"
            )
        if self.advantage is not None and (
            self.advantage.in_dim != X or self.advantage.out_dim != U
        ):
            raise ValueError(
                f"advantage network shape {self.advantage.in_dim}->{self.advantage.out_dim} "
                f"does not match |X|={X}, |U|={U}"
            )

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "method": self.method,
            "env": self.env,
            "seed": self.seed,
            "config": self.config,
            "model": self.model.to_dict(),
            "value": self.value.to_dict(),
            "advantage": None if self.advantage is None else self.advantage.to_dict(),
            "loss": list(self.loss),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {d.get('format')!r}")
        return cls(
            model=PomdpModel.from_dict(d["model"]),
            value=nn.MlpParams.from_dict(d["value"]),
            advantage=None if d["advantage"] is None else nn.MlpParams.from_dict(d["advantage"]),
            method=d["method"],
            env=d["env"],
            seed=d["seed"],
            config=d["config"],
            loss=d.get("loss", []),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_dict(json.loads(Path(path).read_text()))
