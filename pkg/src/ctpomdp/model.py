"""Continuous-time POMDP model: controlled generator, observation model, rewards.

Beliefs are plain numpy probability vectors throughout the package; a policy is
any callable ``policy(belief, t) -> action index``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

GENERATOR_TOL = 1e-12
LIKELIHOOD_TOL = 1e-12
BELIEF_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PomdpModel:
    """The tuple <X, U, Y, rates, p(y|x,u), R, tau> with per-action observation rate.

    Array layouts:
        rates:          (U, X, X)  rate[u, x, x'] of jumping x -> x'; diagonal = -exit rate
        obs_likelihood: (U, X, Y)  p(y | x, u)
        obs_rate:       (U,)       Poisson intensity of observation times under u
        reward_rate:    (U, X)     R(x, u)
    """

    rates: np.ndarray
    obs_likelihood: np.ndarray
    obs_rate: np.ndarray
    reward_rate: np.ndarray
    discount: float
    labels: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("rates", "obs_likelihood", "obs_rate", "reward_rate"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "discount", float(self.discount))
        if self.rates.ndim != 3 or self.rates.shape[1] != self.rates.shape[2]:
            raise ValueError(f"rates must have shape (U, X, X), got {self.rates.shape}")
        U, X, _ = self.rates.shape
        if self.obs_likelihood.ndim != 3 or self.obs_likelihood.shape[:2] != (U, X):
            raise ValueError(
                f"obs_likelihood must have shape ({U}, {X}, Y), got {self.obs_likelihood.shape}"
            )
        if self.obs_rate.shape != (U,):
            raise ValueError(f"obs_rate must have shape ({U},), got {self.obs_rate.shape}")
        if self.reward_rate.shape != (U, X):
            raise ValueError(f"reward_rate must have shape ({U}, {X}), got {self.reward_rate.shape}")

    @property
    def num_states(self) -> int:
        return self.rates.shape[1]

    @property
    def num_actions(self) -> int:
        return self.rates.shape[0]

    @property
    def num_observations(self) -> int:
        return self.obs_likelihood.shape[2]

    @property
    def exit_rates(self) -> np.ndarray:
        """(U, X) table of exit rates."""
        if "exit" not in self._cache:
            off = self.rates.copy()
            for u in range(self.num_actions):
                np.fill_diagonal(off[u], 0.0)
            exit_ = off.sum(axis=2)
            exit_.setflags(write=False)
            self._cache["exit"] = exit_
        return self._cache["exit"]

    @property
    def action_independent_observations(self) -> bool:
        """True when p(y | x, u) does not depend on u (posteriors are shared by all actions)."""
        if "shared_obs" not in self._cache:
            like = self.obs_likelihood
            self._cache["shared_obs"] = bool(np.all(like == like[:1]))
        return self._cache["shared_obs"]

    def max_exit_rate(self, x: int) -> float:
        """Thinning bound q_max = max_u exit rate of ``x``."""
        return float(self.exit_rates[:, x].max())

    def label(self, kind: str, index: int) -> str:
        names = self.labels.get(kind)
        if names is None:
            return str(index)
        return str(names[index])

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "num_observations": self.num_observations,
            "rates": self.rates.tolist(),
            "obs_likelihood": self.obs_likelihood.tolist(),
            "obs_rate": self.obs_rate.tolist(),
            "reward_rate": self.reward_rate.tolist(),
            "discount": self.discount,
            "labels": {k: list(v) for k, v in self.labels.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PomdpModel":
        model = cls(
            rates=np.asarray(data["rates"], dtype=float),
            obs_likelihood=np.asarray(data["obs_likelihood"], dtype=float),
            obs_rate=np.asarray(data["obs_rate"], dtype=float),
            reward_rate=np.asarray(data["reward_rate"], dtype=float),
            discount=data["discount"],
            labels={k: list(v) for k, v in data.get("labels", {}).items()},
        )
        if "num_states" in data and data["num_states"] != model.num_states:
            raise ValueError(
                f"num_states={data['num_states']} disagrees with rates of size {model.num_states}"
            )
        return model

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_json(cls, path: str | Path) -> "PomdpModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def validate(model: PomdpModel) -> list[str]:
    """Return every violated model invariant; an empty list means the model is valid."""
    problems = []
    U, X = model.num_actions, model.num_states
    for u in range(U):
        for x in range(X):
            row = model.rates[u, x]
            for x2 in range(X):
                if x2 != x and row[x2] < 0:
                    problems.append(
                        f"negative off-diagonal rate: rate[{u}][{x}][{x2}] = {row[x2]!r}"
                    )
            total = row.sum()
            if abs(total) > GENERATOR_TOL * max(1.0, np.abs(row).max()):
                problems.append(f"generator row does not sum to zero: rate[{u}][{x}] sums to {total!r}")
            like = model.obs_likelihood[u, x]
            if (like < 0).any():
                problems.append(f"negative likelihood entry in like[{u}][{x}]")
            if abs(like.sum() - 1.0) > LIKELIHOOD_TOL:
                problems.append(
                    f"likelihood row not normalized: like[{u}][{x}] sums to {like.sum()!r}"
                )
    for u in range(U):
        if not model.obs_rate[u] >= 0:
            problems.append(f"negative observation rate: obs_rate[{u}] = {model.obs_rate[u]!r}")
    if not model.discount > 0:
        problems.append(f"discount must be positive, got {model.discount!r}")
    for name in ("rates", "obs_likelihood", "obs_rate", "reward_rate"):
        if not np.isfinite(getattr(model, name)).all():
            problems.append(f"non-finite entries in {name}")
    return problems


def _check_index(value: int, size: int, what: str) -> None:
    if not 0 <= value < size:
        raise IndexError(f"{what} index {value} out of range [0, {size})")


def exit_rate(model: PomdpModel, x: int, u: int) -> float:
    _check_index(x, model.num_states, "state")
    _check_index(u, model.num_actions, "action")
    return float(model.exit_rates[u, x])


def jump_distribution(model: PomdpModel, x: int, u: int) -> np.ndarray:
    """Categorical distribution of the destination of a jump out of ``x`` under ``u``."""
    q = exit_rate(model, x, u)
    if q <= 0:
        raise ValueError(f"state {x} has zero exit rate under action {u}; no jump distribution")
    probs = model.rates[u, x].copy()
    probs[x] = 0.0
    return probs / probs.sum()


def expected_reward(model: PomdpModel, belief: np.ndarray, u: int) -> float:
    _check_index(u, model.num_actions, "action")
    return float(model.reward_rate[u] @ np.asarray(belief, dtype=float))


def normalize_belief(probs) -> np.ndarray:
    """Clip round-off negatives and renormalize onto the simplex."""
    p = np.clip(np.asarray(probs, dtype=float), 0.0, None)
    s = p.sum()
    if not np.isfinite(s) or s <= 0:
        raise ValueError(f"cannot normalize belief {probs!r}")
    return p / s


def is_belief(probs, tol: float = BELIEF_TOL) -> bool:
    p = np.asarray(probs, dtype=float)
    return bool(p.ndim == 1 and (p >= 0).all() and abs(p.sum() - 1.0) <= tol)


class Policy(Protocol):
    def __call__(self, belief: np.ndarray, t: float) -> int: ...


@dataclass(frozen=True)
class ConstantPolicy:
    action: int

    def __call__(self, belief, t):
        return self.action


class RandomPolicy:
    """Uniformly random action, redrawn every time the policy is queried."""

    def __init__(self, num_actions: int, rng: np.random.Generator):
        self.num_actions = num_actions
        self.rng = rng

    def __call__(self, belief, t):
        return int(self.rng.integers(self.num_actions))


@dataclass(frozen=True)
class FunctionPolicy:
    fn: Callable[[np.ndarray, float], int]

    def __call__(self, belief, t):
        return int(self.fn(belief, t))
