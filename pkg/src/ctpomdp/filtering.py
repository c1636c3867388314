"""Exact continuous-discrete Bayes filter for a latent controlled CTMC.

Between observations the belief follows the forward equation
``d pi / dt = pi @ rates[u]``; at an observation ``y`` it is reset to the
posterior ``p(y|x,u) pi(x) / p(y)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .model import PomdpModel, normalize_belief

ActionSource = Union[int, Callable[[float, np.ndarray], int]]


class ZeroProbabilityObservation(ValueError):
    """Observation has zero marginal probability under the current belief."""


class IntegrationError(FloatingPointError):
    """Non-finite belief during propagation, usually a step size that is too large."""


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-3
    method: str = "rk4"
    renormalize: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.method != "rk4":
            raise ValueError(f"unsupported integrator {self.method!r}")


def drift(model: PomdpModel, belief: np.ndarray, u: int) -> np.ndarray:
    """Forward-equation drift f(pi, u)_x = sum_x' rate[u, x', x] pi(x')."""
    return np.asarray(belief, dtype=float) @ model.rates[u]


def drifts(model: PomdpModel, beliefs: np.ndarray) -> np.ndarray:
    """Drift for a batch of beliefs (B, X) under every action -> (B, U, X)."""
    return np.einsum("bi,uij->buj", beliefs, model.rates)


def rk4_step_matrix(model: PomdpModel, u: int, h: float) -> np.ndarray:
    """Right-multiplying matrix of one classical RK4 step of size h.

    For the linear forward equation the four RK4 stages collapse to
    ``pi @ (I + hQ + (hQ)^2/2 + (hQ)^3/6 + (hQ)^4/24)``.
    """
    key = ("rk4", u, h)
    mat = model._cache.get(key)
    if mat is None:
        hq = h * model.rates[u]
        term = np.eye(model.num_states)
        mat = term.copy()
        for k in range(1, 5):
            term = term @ hq / k
            mat = mat + term
        mat.setflags(write=False)
        if len(model._cache) < 4096:
            model._cache[key] = mat
    return mat


def rk4_step(model: PomdpModel, belief: np.ndarray, u: int, h: float) -> np.ndarray:
    """One explicit RK4 stage evaluation (kept for reference and testing)."""
    k1 = drift(model, belief, u)
    k2 = drift(model, belief + 0.5 * h * k1, u)
    k3 = drift(model, belief + 0.5 * h * k2, u)
    k4 = drift(model, belief + h * k3, u)
    return belief + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _finish_step(belief: np.ndarray, cfg: IntegratorConfig) -> np.ndarray:
    if not np.isfinite(belief).all():
        raise IntegrationError(f"non-finite belief {belief}; reduce dt (currently {cfg.dt})")
    if cfg.renormalize:
        belief = np.clip(belief, 0.0, None)
        belief = belief / belief.sum()
    return belief


def step_sizes(t0: float, t1: float, dt: float) -> list[float]:
    """Full steps of size dt followed by one remainder step, covering [t0, t1]."""
    span = t1 - t0
    if span <= 0:
        return []
    n_full = int(np.floor(span / dt * (1 + 1e-12)))
    steps = [dt] * n_full
    rem = span - n_full * dt
    if rem > 1e-14 * max(1.0, abs(t1)):
        steps.append(rem)
    return steps


def propagate(
    model: PomdpModel,
    belief: np.ndarray,
    u_of_t: ActionSource,
    t0: float,
    t1: float,
    cfg: IntegratorConfig = IntegratorConfig(),
) -> np.ndarray:
    """Integrate the belief from t0 to t1 between observations.

    ``u_of_t`` is either a fixed action or a callable ``(t, belief) -> action``
    evaluated at the start of every sub-step.
    """
    if t1 < t0:
        raise ValueError(f"t1={t1} precedes t0={t0}")
    pi = np.asarray(belief, dtype=float)
    t = t0
    for h in step_sizes(t0, t1, cfg.dt):
        u = u_of_t if isinstance(u_of_t, (int, np.integer)) else u_of_t(t, pi)
        pi = _finish_step(pi @ rk4_step_matrix(model, int(u), h), cfg)
        t += h
    return pi


def bayes_reset(model: PomdpModel, belief: np.ndarray, u: int, y: int) -> np.ndarray:
    joint = model.obs_likelihood[u, :, y] * np.asarray(belief, dtype=float)
    evidence = joint.sum()
    if not evidence > 0:
        raise ZeroProbabilityObservation(
            f"observation {y} has zero probability under action {u} and the current belief"
        )
    return normalize_belief(joint / evidence)


@dataclass(frozen=True)
class PosteriorEnsemble:
    """Posterior beliefs for every observation with their marginal probabilities.

    ``valid[y]`` is False where ``weight[y] == 0``; those rows hold the prior as a
    placeholder posterior.
    """

    weights: np.ndarray  # (Y,)
    posteriors: np.ndarray  # (Y, X)
    valid: np.ndarray  # (Y,) bool


def posterior_ensemble(model: PomdpModel, belief: np.ndarray, u: int) -> PosteriorEnsemble:
    pi = np.asarray(belief, dtype=float)
    joint = model.obs_likelihood[u].T * pi  # (Y, X)
    weights = joint.sum(axis=1)
    valid = weights > 0
    posteriors = np.where(valid[:, None], joint / np.where(valid, weights, 1.0)[:, None], pi)
    return PosteriorEnsemble(weights=weights, posteriors=posteriors, valid=valid)


def batch_posteriors(
    model: PomdpModel, beliefs: np.ndarray, actions=None
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior ensembles for a batch (B, X).

    Without ``actions`` every action is evaluated: ``weights`` (B, U, Y) and
    ``posteriors`` (B, U, Y, X). With ``actions`` (an int or one per belief)
    the action axis is dropped. Zero-weight entries carry the prior belief.
    """
    if actions is None:
        joint = np.einsum("uxy,bx->buyx", model.obs_likelihood, beliefs)
        prior = beliefs[:, None, None, :]
    else:
        like = model.obs_likelihood[np.broadcast_to(actions, beliefs.shape[:1])]  # (B, X, Y)
        joint = np.einsum("bxy,bx->byx", like, beliefs)
        prior = beliefs[:, None, :]
    weights = joint.sum(axis=-1)
    safe = np.where(weights > 0, weights, 1.0)
    post = joint / safe[..., None]
    zero = weights <= 0
    if zero.any():
        post = np.where(zero[..., None], prior, post)
    return weights, post
