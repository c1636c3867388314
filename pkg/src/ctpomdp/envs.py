"""Benchmark environments: continuous-time tiger, slotted Aloha and gridworld."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .model import PomdpModel

DEFAULT_DISCOUNT = 0.9

# tiger
TIGER_LEFT, TIGER_RIGHT = 0, 1
LISTEN, OPEN_LEFT, OPEN_RIGHT = 0, 1, 2
HEAR_LEFT, HEAR_RIGHT = 0, 1


def build_tiger(discount: float = DEFAULT_DISCOUNT) -> PomdpModel:
    rates = np.zeros((3, 2, 2))
    like = np.full((3, 2, 2), 0.5)
    like[LISTEN] = [[0.85, 0.15], [0.15, 0.85]]
    obs_rate = np.array([2.0, 0.0, 0.0])
    reward = np.array(
        [
            [-0.01, -0.01],
            [-1.0, 0.1],  # open left: tiger left hurts
            [0.1, -1.0],
        ]
    )
    return PomdpModel(
        rates=rates,
        obs_likelihood=like,
        obs_rate=obs_rate,
        reward_rate=reward,
        discount=discount,
        labels={
            "states": ["tiger-left", "tiger-right"],
            "actions": ["listen", "open-left", "open-right"],
            "observations": ["hear-left", "hear-right"],
        },
    )


# slotted Aloha

CHANNEL = ("idle", "transmission", "collision")
IDLE, TRANSMISSION, COLLISION = 0, 1, 2


@dataclass(frozen=True)
class AlohaConfig:
    max_packages: int = 9
    arrival_rate: float = 0.5
    send_rate: float = 5.0
    obs_rate: float = 0.5
    num_actions: int = 9

    @property
    def num_states(self) -> int:
        return (self.max_packages + 1) * len(CHANNEL)

    @property
    def rhos(self) -> np.ndarray:
        return 1.0 / np.arange(1, self.num_actions + 1)


def aloha_state(n: int, c: int) -> int:
    return 3 * n + c


def aloha_unpack(x: int) -> tuple[int, int]:
    return divmod(x, 3)


def aloha_channel_probs(n: int, rho: float) -> tuple[float, float, float]:
    """Channel outcome probabilities (idle, transmission, collision) of a send event."""
    if n < 1:
        raise ValueError("send event needs at least one package (n >= 1)")
    if not 0 < rho <= 1:
        raise ValueError(f"send probability must lie in (0, 1], got {rho}")
    p_idle = (1.0 - rho) ** n
    p_trans = rho * (1.0 - rho) ** (n - 1)
    return p_idle, p_trans, max(0.0, 1.0 - p_idle - p_trans)


def aloha_optimal_rho(n: int) -> float:
    if n < 1:
        raise ValueError("optimal send probability undefined for n = 0")
    return 1.0 / n


def aloha_reward(n: int, rho: float, send_rate: float = 5.0) -> float:
    """Expected throughput: send-event rate times success probability."""
    if n == 0:
        return 0.0
    return send_rate * aloha_channel_probs(n, rho)[1]


def build_slotted_aloha(
    config: AlohaConfig = AlohaConfig(), discount: float = DEFAULT_DISCOUNT
) -> PomdpModel:
    X, U = config.num_states, config.num_actions
    rates = np.zeros((U, X, X))
    reward = np.zeros((U, X))
    for u, rho in enumerate(config.rhos):
        for n in range(config.max_packages + 1):
            for c in range(3):
                x = aloha_state(n, c)
                if n < config.max_packages:
                    rates[u, x, aloha_state(n + 1, c)] += config.arrival_rate
                if n >= 1:
                    p_idle, p_trans, p_coll = aloha_channel_probs(n, rho)
                    # idle outcome from an idle channel is a self-loop, not a jump
                    for dest, p in (
                        (aloha_state(n, IDLE), p_idle),
                        (aloha_state(n - 1, TRANSMISSION), p_trans),
                        (aloha_state(n, COLLISION), p_coll),
                    ):
                        if dest != x:
                            rates[u, x, dest] += config.send_rate * p
                    reward[u, x] = aloha_reward(n, rho, config.send_rate)
                rates[u, x, x] = -(rates[u, x].sum() - rates[u, x, x])
    like = np.zeros((U, X, 3))
    for x in range(X):
        like[:, x, aloha_unpack(x)[1]] = 1.0
    return PomdpModel(
        rates=rates,
        obs_likelihood=like,
        obs_rate=np.full(U, config.obs_rate),
        reward_rate=reward,
        discount=discount,
        labels={
            "states": [f"({n},{c})" for n in range(config.max_packages + 1) for c in CHANNEL],
            "actions": [f"rho=1/{k}" for k in range(1, U + 1)],
            "observations": list(CHANNEL),
        },
    )


def aloha_marginals(belief: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Marginal beliefs over package count and channel memory."""
    table = np.asarray(belief).reshape(-1, 3)
    return table.sum(axis=1), table.sum(axis=0)


# gridworld

MOVES = {"up": (0, 1), "down": (0, -1), "left": (-1, 0), "right": (1, 0)}
DIRECTIONS = ("up", "down", "left", "right")


@dataclass(frozen=True)
class GridworldLayout:
    """Cells are (column, row) with origin (0, 0) at the bottom-left."""

    width: int = 6
    height: int = 6
    goal: tuple[int, int] = (3, 2)
    walls: frozenset = field(default_factory=lambda: frozenset((c, 3) for c in range(5)))
    move_rate: float = 10.0
    intended_prob: float = 0.7
    slip_prob: float = 0.1
    obs_rate: float = 2.0
    obs_std: float = 0.1
    goal_reward: float = 1.0

    def cells(self) -> list[tuple[int, int]]:
        """Non-wall cells in row-major order (row 0 first); index = state index."""
        return [
            (c, r)
            for r in range(self.height)
            for c in range(self.width)
            if (c, r) not in self.walls
        ]

    def in_bounds(self, cell) -> bool:
        c, r = cell
        return 0 <= c < self.width and 0 <= r < self.height

    def is_free(self, cell) -> bool:
        return self.in_bounds(cell) and cell not in self.walls

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "goal": list(self.goal),
            "walls": sorted(list(w) for w in self.walls),
            "move_rate": self.move_rate,
            "intended_prob": self.intended_prob,
            "slip_prob": self.slip_prob,
            "obs_rate": self.obs_rate,
            "obs_std": self.obs_std,
            "goal_reward": self.goal_reward,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GridworldLayout":
        data = dict(data)
        if "goal" in data:
            data["goal"] = tuple(data["goal"])
        if "walls" in data:
            data["walls"] = frozenset(tuple(w) for w in data["walls"])
        return cls(**data)


def _check_layout(layout: GridworldLayout) -> None:
    if layout.goal in layout.walls or not layout.in_bounds(layout.goal):
        raise ValueError(f"goal {layout.goal} must be a free cell")
    cells = layout.cells()
    seen = {cells[0]}
    queue = deque([cells[0]])
    while queue:
        c, r = queue.popleft()
        for dc, dr in MOVES.values():
            nxt = (c + dc, r + dr)
            if layout.is_free(nxt) and nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    if len(seen) != len(cells):
        missing = sorted(set(cells) - seen)
        raise ValueError(f"gridworld layout is disconnected; unreachable cells: {missing}")


def gridworld_move_probs(layout: GridworldLayout, cell, direction: str) -> dict:
    """Destination-cell probabilities of one move event, invalid moves renormalized away."""
    raw = {}
    for d in DIRECTIONS:
        dc, dr = MOVES[d]
        dest = (cell[0] + dc, cell[1] + dr)
        if layout.is_free(dest):
            raw[dest] = raw.get(dest, 0.0) + (
                layout.intended_prob if d == direction else layout.slip_prob
            )
    total = sum(raw.values())
    return {dest: p / total for dest, p in raw.items()}


def build_gridworld(
    layout: GridworldLayout = GridworldLayout(), discount: float = DEFAULT_DISCOUNT
) -> PomdpModel:
    _check_layout(layout)
    cells = layout.cells()
    index = {cell: i for i, cell in enumerate(cells)}
    X, U = len(cells), len(DIRECTIONS)
    rates = np.zeros((U, X, X))
    for u, d in enumerate(DIRECTIONS):
        for i, cell in enumerate(cells):
            for dest, p in gridworld_move_probs(layout, cell, d).items():
                rates[u, i, index[dest]] = layout.move_rate * p
            rates[u, i, i] = -rates[u, i].sum()
    centers = np.array(cells, dtype=float)
    sq = ((centers[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    # shift by the row minimum (the true cell, distance 0) before exponentiating
    like = np.exp(-(sq - sq.min(axis=1, keepdims=True)) / (2 * layout.obs_std**2))
    like /= like.sum(axis=1, keepdims=True)
    reward = np.zeros((U, X))
    reward[:, index[layout.goal]] = layout.goal_reward
    return PomdpModel(
        rates=rates,
        obs_likelihood=np.broadcast_to(like, (U, X, X)),
        obs_rate=np.full(U, layout.obs_rate),
        reward_rate=reward,
        discount=discount,
        labels={
            "states": [f"({c},{r})" for c, r in cells],
            "actions": list(DIRECTIONS),
            "observations": [f"({c},{r})" for c, r in cells],
            "layout": [layout.to_dict()],
        },
    )


def gridworld_layout_of(model: PomdpModel) -> GridworldLayout:
    return GridworldLayout.from_dict(model.labels["layout"][0])


ENV_NAMES = ("tiger", "aloha", "gridworld")


def build_env(name: str, discount: float = DEFAULT_DISCOUNT) -> PomdpModel:
    if name == "tiger":
        return build_tiger(discount)
    if name == "aloha":
        return build_slotted_aloha(discount=discount)
    if name == "gridworld":
        return build_gridworld(discount=discount)
    raise KeyError(f"unknown environment {name!r}; choose from {', '.join(ENV_NAMES)}")
