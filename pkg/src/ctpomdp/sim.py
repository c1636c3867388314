"""Stochastic simulation of the latent chain together with its filter.

Latent jumps and observation times are both sampled by thinning: candidate
times come from a homogeneous Poisson process at the bounding rate and are
accepted with probability (current rate / bound), the current rate being
evaluated at the action the policy picks for the belief at the candidate time.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .filtering import IntegratorConfig, bayes_reset, propagate, rk4_step_matrix
from .model import PomdpModel, jump_distribution, normalize_belief

# -- elementary samplers -----------------------------------------------------


def _exp_candidate(t: float, rate: float, rng: np.random.Generator) -> float:
    if rate <= 0:
        return math.inf
    return t - math.log(1.0 - rng.random()) / rate


def sample_next_state(model: PomdpModel, x: int, u: int, rng: np.random.Generator) -> int:
    probs = jump_distribution(model, x, u)
    return int(rng.choice(model.num_states, p=probs))


def sample_observation(model: PomdpModel, x: int, u: int, rng: np.random.Generator) -> int:
    return int(rng.choice(model.num_observations, p=model.obs_likelihood[u, x]))


@dataclass
class WaitingTime:
    xi: float
    jumped: bool
    times: np.ndarray  # candidate times visited, starting at t
    beliefs: np.ndarray  # belief at each of those times


def sample_waiting_time(
    model: PomdpModel,
    x: int,
    belief: np.ndarray,
    policy,
    t: float,
    horizon: float,
    rng: np.random.Generator,
    cfg: IntegratorConfig = IntegratorConfig(),
) -> WaitingTime:
    """Waiting time until the latent chain leaves ``x`` while the filter runs without observations.

    Returns ``jumped=False`` and ``xi = horizon - t`` when no candidate is accepted
    before the horizon.
    """
    q_max = model.max_exit_rate(x)
    pi = np.asarray(belief, dtype=float)
    times, beliefs = [t], [pi]
    T = t

    def action(s, b):
        return policy(b, s)

    while True:
        T_next = _exp_candidate(T, q_max, rng)
        if T_next >= horizon:
            pi = propagate(model, pi, action, T, horizon, cfg)
            times.append(horizon)
            beliefs.append(pi)
            return WaitingTime(horizon - t, False, np.array(times), np.array(beliefs))
        pi = propagate(model, pi, action, T, T_next, cfg)
        T = T_next
        times.append(T)
        beliefs.append(pi)
        u = policy(pi, T)
        if rng.random() * q_max < model.exit_rates[u, x]:
            return WaitingTime(T - t, True, np.array(times), np.array(beliefs))


def sample_observation_times(
    model: PomdpModel, actions, horizon: float, rng: np.random.Generator
) -> list[float]:
    """Observation times on [0, horizon) for an action trajectory.

    ``actions`` is a fixed action or a callable ``t -> action``; its intensity
    ``obs_rate[u(t)]`` is thinned against the largest observation rate.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    lam_max = float(model.obs_rate.max())
    times = []
    t = 0.0
    while True:
        t = _exp_candidate(t, lam_max, rng)
        if t >= horizon:
            return times
        u = actions if isinstance(actions, (int, np.integer)) else actions(t)
        if rng.random() * lam_max < model.obs_rate[u]:
            times.append(t)


# -- Ornstein-Uhlenbeck exploration noise ------------------------------------


@dataclass(frozen=True)
class OuState:
    eps: np.ndarray
    kappa: float
    sigma: float

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")

    @property
    def stationary_variance(self) -> float:
        return self.sigma**2 / (2 * self.kappa)


def ou_stationary(num_actions: int, kappa: float, sigma: float, rng: np.random.Generator) -> OuState:
    """OU state with the initial perturbation drawn from the stationary law."""
    std = sigma / math.sqrt(2 * kappa)
    return OuState(rng.normal(0.0, std, size=num_actions), kappa, sigma)


def ou_step(state: OuState, dt: float, rng: np.random.Generator) -> OuState:
    """Euler-Maruyama step of d eps = -kappa eps dt + sigma dW, independently per action."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    z = rng.standard_normal(state.eps.shape)
    eps = state.eps * (1 - state.kappa * dt) + state.sigma * math.sqrt(dt) * z
    return OuState(eps, state.kappa, state.sigma)


def ou_path(state: OuState, n_steps: int, dt: float, rng: np.random.Generator) -> np.ndarray:
    """Perturbations on a grid of ``n_steps`` steps, shape (n_steps + 1, U)."""
    z = rng.standard_normal((n_steps, state.eps.size))
    decay = 1 - state.kappa * dt
    scale = state.sigma * math.sqrt(dt)
    out = np.empty((n_steps + 1, state.eps.size))
    out[0] = state.eps
    for k in range(n_steps):
        out[k + 1] = out[k] * decay + scale * z[k]
    return out


# -- episodes -----------------------------------------------------------------

JUMP, OBSERVATION, ACTION = "jump", "observation", "action"


@dataclass
class Event:
    t: float
    kind: str
    u: int
    x_from: int | None = None
    x_to: int | None = None
    y: int | None = None
    belief_before: np.ndarray | None = None
    belief_after: np.ndarray | None = None
    sample_index: int = -1  # index of the sample recorded right after the event

    def to_dict(self) -> dict:
        d = {"t": self.t, "kind": self.kind, "u": self.u, "sample_index": self.sample_index}
        for key in ("x_from", "x_to", "y"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key)
        for key in ("belief_before", "belief_after"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Event":
        d = dict(d)
        for key in ("belief_before", "belief_after"):
            if key in d:
                d[key] = np.asarray(d[key], dtype=float)
        return cls(**d)


@dataclass
class Episode:
    """Trace of one simulation run.

    The dense samples lie on the integrator grid plus, at every event time, one
    sample just before and one just after the event (same time stamp), so the
    recorded signals are exact step functions between samples.
    """

    times: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray  # latent reward rate R(X(t), u(t))
    expected_rewards: np.ndarray  # E[R(x, u(t)) | pi(t)]
    beliefs: np.ndarray
    events: list
    discounted_return: float
    horizon: float
    discount: float
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def observations(self) -> list:
        return [e for e in self.events if e.kind == OBSERVATION]

    @property
    def jumps(self) -> list:
        return [e for e in self.events if e.kind == JUMP]

    def grid_indices(self) -> np.ndarray:
        """Indices of samples that are not before/after copies around an event."""
        around = set()
        for e in self.events:
            around.add(e.sample_index)
            around.add(e.sample_index - 1)
        return np.array([i for i in range(len(self.times)) if i not in around], dtype=int)

    # serialization

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "discount": self.discount,
            "seed": self.seed,
            "discounted_return": self.discounted_return,
            "meta": self.meta,
            "times": self.times.tolist(),
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "expected_rewards": self.expected_rewards.tolist(),
            "beliefs": self.beliefs.tolist(),
            "events": [e.to_dict() for e in self.events],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        return cls(
            times=np.asarray(d["times"], dtype=float),
            states=np.asarray(d["states"], dtype=int),
            actions=np.asarray(d["actions"], dtype=int),
            rewards=np.asarray(d["rewards"], dtype=float),
            expected_rewards=np.asarray(d["expected_rewards"], dtype=float),
            beliefs=np.asarray(d["beliefs"], dtype=float),
            events=[Event.from_dict(e) for e in d["events"]],
            discounted_return=d["discounted_return"],
            horizon=d["horizon"],
            discount=d["discount"],
            seed=d.get("seed"),
            meta=d.get("meta", {}),
        )

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def from_json(cls, path: str | Path) -> "Episode":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_csv(self, path: str | Path) -> None:
        Path(path).write_text(episode_to_csv(self))

    @classmethod
    def from_csv(cls, path: str | Path, model: PomdpModel | None = None) -> "Episode":
        return episode_from_csv(Path(path).read_text(), model)


def discounted_return(times: np.ndarray, rewards: np.ndarray, discount: float) -> float:
    """Trapezoidal estimate of the integral of (1/tau) exp(-t/tau) r(t)."""
    if len(times) < 2:
        return 0.0
    f = np.exp(-times / discount) * rewards / discount
    return float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(times)))


class _Recorder:
    def __init__(self, model: PomdpModel):
        self.model = model
        self.t, self.x, self.u, self.r, self.er, self.pi = [], [], [], [], [], []

    def sample(self, t, x, u, pi):
        self.t.append(t)
        self.x.append(x)
        self.u.append(u)
        self.r.append(self.model.reward_rate[u, x])
        self.er.append(float(self.model.reward_rate[u] @ pi))
        self.pi.append(pi)

    def __len__(self):
        return len(self.t)


def simulate_episode(
    model: PomdpModel,
    policy,
    horizon: float,
    initial_belief,
    rng: np.random.Generator,
    cfg: IntegratorConfig = IntegratorConfig(),
    seed: int | None = None,
    initial_state: int | None = None,
) -> Episode:
    """Simulate latent chain, observations and filter under ``policy`` on [0, horizon].

    ``initial_belief`` is a belief vector or a callable ``rng -> belief``; the
    latent initial state is drawn from it unless ``initial_state`` is given.
    The policy is re-evaluated on every grid point and at every candidate event.
    """
    pi = normalize_belief(initial_belief(rng) if callable(initial_belief) else initial_belief)
    x = int(rng.choice(model.num_states, p=pi)) if initial_state is None else int(initial_state)
    dt = cfg.dt
    lam_max = float(model.obs_rate.max())
    rec = _Recorder(model)
    events: list[Event] = []

    t = 0.0
    u = int(policy(pi, t))
    rec.sample(t, x, u, pi)
    next_jump = _exp_candidate(t, model.max_exit_rate(x), rng)
    next_obs = _exp_candidate(t, lam_max, rng)
    k = 0

    def advance(pi, u, h):
        if h <= 0:
            return pi
        out = pi @ rk4_step_matrix(model, u, h)
        if not np.isfinite(out).all():
            raise FloatingPointError(f"non-finite belief at t={t}; reduce dt")
        out = np.clip(out, 0.0, None)
        return out / out.sum()

    def switch(T, u_new):
        nonlocal u
        if u_new != u:
            rec.sample(T, x, u, pi)
            events.append(Event(T, ACTION, u_new, sample_index=len(rec)))
            u = u_new
            rec.sample(T, x, u, pi)

    while True:
        t_grid = min((k + 1) * dt, horizon)
        t_evt = min(next_jump, next_obs)
        if t_evt < t_grid:
            pi = advance(pi, u, t_evt - t)
            t = t_evt
            switch(t, int(policy(pi, t)))
            if next_jump <= next_obs:
                q_max = model.max_exit_rate(x)
                if rng.random() * q_max < model.exit_rates[u, x]:
                    x_new = sample_next_state(model, x, u, rng)
                    rec.sample(t, x, u, pi)
                    events.append(Event(t, JUMP, u, x_from=x, x_to=x_new, sample_index=len(rec)))
                    x = x_new
                    rec.sample(t, x, u, pi)
                next_jump = _exp_candidate(t, model.max_exit_rate(x), rng)
            else:
                if rng.random() * lam_max < model.obs_rate[u]:
                    y = sample_observation(model, x, u, rng)
                    post = bayes_reset(model, pi, u, y)
                    rec.sample(t, x, u, pi)
                    events.append(
                        Event(t, OBSERVATION, u, y=y, belief_before=pi, belief_after=post,
                              sample_index=len(rec))
                    )
                    pi = post
                    rec.sample(t, x, u, pi)
                    switch(t, int(policy(pi, t)))
                next_obs = _exp_candidate(t, lam_max, rng)
            continue
        pi = advance(pi, u, t_grid - t)
        t = t_grid
        k += 1
        if t >= horizon:
            rec.sample(t, x, u, pi)
            break
        switch(t, int(policy(pi, t)))
        rec.sample(t, x, u, pi)

    times = np.array(rec.t)
    rewards = np.array(rec.r, dtype=float)
    return Episode(
        times=times,
        states=np.array(rec.x, dtype=int),
        actions=np.array(rec.u, dtype=int),
        rewards=rewards,
        expected_rewards=np.array(rec.er, dtype=float),
        beliefs=np.array(rec.pi),
        events=events,
        discounted_return=discounted_return(times, rewards, model.discount),
        horizon=float(horizon),
        discount=model.discount,
        seed=seed,
    )


# -- CSV trace format ---------------------------------------------------------
#
# First line: "# " + JSON header {horizon, discount, seed, discounted_return, meta}.
# Then a header row ``t,event_type,x,u,y,reward,belief_0..belief_{X-1}`` and one
# row per dense sample (event_type "sample", reward = latent reward rate) or
# event. Event rows sit between the before- and after-samples of the event:
#   jump:        x = destination state (source = x of the previous sample row)
#   observation: y = observed symbol, belief = posterior (prior = previous sample row)
#   action:      u = newly selected action
# Floats are written with repr(), so a trace round-trips exactly.

SAMPLE = "sample"


def episode_to_csv(ep: Episode) -> str:
    buf = io.StringIO()
    buf.write("# " + json.dumps({
        "horizon": ep.horizon,
        "discount": ep.discount,
        "seed": ep.seed,
        "discounted_return": ep.discounted_return,
        "meta": ep.meta,
    }) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    X = ep.beliefs.shape[1]
    writer.writerow(["t", "event_type", "x", "u", "y", "reward", *(f"belief_{i}" for i in range(X))])
    by_index: dict[int, list[Event]] = {}
    for e in ep.events:
        by_index.setdefault(e.sample_index, []).append(e)
    for i in range(len(ep.times)):
        for e in by_index.get(i, []):
            if e.kind == JUMP:
                row = [repr(e.t), JUMP, e.x_to, e.u, "", "", *map(repr, ep.beliefs[i].tolist())]
            elif e.kind == OBSERVATION:
                row = [repr(e.t), OBSERVATION, "", e.u, e.y, "", *map(repr, e.belief_after.tolist())]
            else:
                row = [repr(e.t), ACTION, "", e.u, "", "", *map(repr, ep.beliefs[i].tolist())]
            writer.writerow(row)
        writer.writerow([
            repr(float(ep.times[i])), SAMPLE, int(ep.states[i]), int(ep.actions[i]), "",
            repr(float(ep.rewards[i])), *map(repr, ep.beliefs[i].tolist()),
        ])
    return buf.getvalue()


def episode_from_csv(text: str, model: PomdpModel | None = None) -> Episode:
    """Parse a CSV trace; expected rewards are recomputed only when ``model`` is given."""
    first, rest = text.split("\n", 1)
    header = json.loads(first[2:])
    reader = csv.reader(io.StringIO(rest))
    columns = next(reader)
    nb = len(columns) - 6
    times, states, actions, rewards, beliefs = [], [], [], [], []
    events = []
    pending: list[tuple] = []
    for row in reader:
        t, kind = float(row[0]), row[1]
        belief = np.array([float(v) for v in row[6:6 + nb]])
        if kind == SAMPLE:
            idx = len(times)
            for p_kind, p_row, p_belief in pending:
                u = int(p_row[3])
                pt = float(p_row[0])
                if p_kind == JUMP:
                    events.append(Event(pt, JUMP, u, x_from=states[-1], x_to=int(p_row[2]),
                                        sample_index=idx))
                elif p_kind == OBSERVATION:
                    events.append(Event(pt, OBSERVATION, u, y=int(p_row[4]),
                                        belief_before=beliefs[-1], belief_after=p_belief,
                                        sample_index=idx))
                else:
                    events.append(Event(pt, ACTION, u, sample_index=idx))
            pending = []
            times.append(t)
            states.append(int(row[2]))
            actions.append(int(row[3]))
            rewards.append(float(row[5]))
            beliefs.append(belief)
        else:
            pending.append((kind, row, belief))
    return Episode(
        times=np.array(times),
        states=np.array(states, dtype=int),
        actions=np.array(actions, dtype=int),
        rewards=np.array(rewards),
        expected_rewards=(
            np.einsum("nx,nx->n", model.reward_rate[actions], np.array(beliefs))
            if model is not None else np.full(len(times), np.nan)
        ),
        beliefs=np.array(beliefs),
        events=events,
        discounted_return=header["discounted_return"],
        horizon=header["horizon"],
        discount=header["discount"],
        seed=header["seed"],
        meta=header.get("meta", {}),
    )
