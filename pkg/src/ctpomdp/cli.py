"""Command-line front end.

Every command resolves its configuration from built-in defaults, an optional
JSON file (``--config``; a ``manifest.json`` of an earlier run also works) and
flat ``--key value`` overrides, in that order. A run directory receives
``config.json`` with the resolved configuration, the command's outputs and a
``manifest.json`` listing seed, version and the SHA-256 of every output file.
Nothing time-dependent is written, so reruns with the same seed are
byte-identical.

Failures print one JSON line ``{"error": kind, "message": ...}`` to stderr and
exit nonzero (2 configuration, 3 divergence, 4 I/O).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, nn
from .au import AU_TASK_DEFAULTS, AuConfig, initial_belief_sampler, train_advantage_updating
from .envs import ENV_NAMES, aloha_marginals, build_env, gridworld_layout_of
from .filtering import IntegratorConfig
from .hjb import (
    Checkpoint,
    CollocationConfig,
    GreedyPolicy,
    TrainingDiverged,
    collocation_train,
    reparameterized_advantage,
)
from .model import ConstantPolicy, PomdpModel, RandomPolicy, validate
from .sim import episode_to_csv, simulate_episode

COMMANDS = (
    "simulate",
    "train-collocation",
    "train-au",
    "evaluate",
    "export-value-grid",
    "validate-model",
)

EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 2, 3, 4


class ConfigError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------


def _defaults(command: str, env: str) -> dict:
    base = {"env": env, "seed": None, "out": None}
    if command == "simulate":
        return {**base, "horizon": 10.0, "dt": 1e-3, "policy": "random", "initial_state": None}
    if command == "train-collocation":
        return {**base, **CollocationConfig().to_dict()}
    if command == "train-au":
        return {**base, **AuConfig(**AU_TASK_DEFAULTS.get(env, {})).to_dict()}
    if command == "evaluate":
        horizon = AU_TASK_DEFAULTS.get(env, {}).get("episode_length", 10.0)
        return {**base, "checkpoint": None, "episodes": 100, "horizon": horizon, "dt": 1e-2,
                "policy": "greedy", "traces": 5}
    if command == "export-value-grid":
        return {**base, "checkpoint": None, "resolution": 100}
    if command == "validate-model":
        return dict(base)
    raise ConfigError(f"unknown command {command!r}")


def _coerce(key: str, text: str, default):
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"--{key} expects a boolean, got {text!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if default is None:
            try:
                return json.loads(text)
            except json.JSONDecodeError:
                return text
    except ValueError:
        raise ConfigError(f"--{key} expects {type(default).__name__}, got {text!r}") from None
    return text


def _parse_overrides(tokens: list) -> dict:
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for {tok}")
            value = tokens[i + 1]
            i += 2
        out[key] = value
    return out


def resolve_config(command: str, config_file: str | None, overrides: dict) -> dict:
    """Defaults, then the JSON file, then command-line overrides."""
    from_file = {}
    if config_file:
        try:
            from_file = json.loads(Path(config_file).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {config_file}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_file} is not valid JSON: {exc}") from None
        if "config" in from_file and "command" in from_file:  # a manifest
            from_file = from_file["config"]
    env = overrides.get("env", from_file.get("env", "tiger"))
    cfg = _defaults(command, env)
    for key, value in from_file.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r} for {command}")
        cfg[key] = value
    for key, text in overrides.items():
        if key not in cfg:
            raise ConfigError(f"unknown option --{key} for {command}")
        cfg[key] = _coerce(key, text, _defaults(command, env)[key])
    if cfg["seed"] is None:
        raw = os.environ.get("CTPOMDP_SEED")
        try:
            cfg["seed"] = int(raw) if raw not in (None, "") else 0
        except ValueError:
            raise ConfigError(f"CTPOMDP_SEED must be an integer, got {raw!r}") from None
    if cfg["out"] is None:
        cfg["out"] = str(Path("runs") / f"{command}-{Path(str(cfg['env'])).stem}-seed{cfg['seed']}")
    return cfg


def load_env(name: str) -> PomdpModel:
    """Built-in environment by name, or a model JSON file by path."""
    if name in ENV_NAMES:
        return build_env(name)
    path = Path(name)
    if path.suffix == ".json" and path.exists():
        try:
            return PomdpModel.from_json(path)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid model file {name}: {exc}") from None
    raise ConfigError(
        f"unknown environment {name!r}; choose from {', '.join(ENV_NAMES)} or a model .json file"
    )


# -- outputs ------------------------------------------------------------------------------


@dataclass
class RunDir:
    path: Path

    def __post_init__(self):
        try:
            self.path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {self.path}: {exc}") from exc
        self.files: list[str] = []

    def write_text(self, name: str, text: str) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        self.files.append(name)
        return p

    def write_json(self, name: str, data) -> Path:
        return self.write_text(name, json.dumps(data, indent=2, sort_keys=True) + "\n")

    def write_csv(self, name: str, header: list, rows) -> Path:
        lines = [",".join(header)]
        for row in rows:
            lines.append(",".join(_fmt(v) for v in row))
        return self.write_text(name, "\n".join(lines) + "\n")

    def manifest(self, command: str, cfg: dict, summary: dict | None = None) -> None:
        digests = {
            name: hashlib.sha256((self.path / name).read_bytes()).hexdigest()
            for name in sorted(set(self.files))
        }
        data = {"command": command, "version": __version__, "seed": cfg["seed"],
                "config": cfg, "files": digests}
        if summary is not None:
            data["summary"] = summary
        self.write_json("manifest.json", data)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    return str(v)


# -- library entry points used by the commands ---------------------------------------------


def _load_checkpoint(cfg: dict) -> Checkpoint:
    if not cfg.get("checkpoint"):
        raise ConfigError("--checkpoint is required")
    try:
        ckpt = Checkpoint.load(cfg["checkpoint"])
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {cfg['checkpoint']}: {exc}") from exc
    except (KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"malformed checkpoint {cfg['checkpoint']}: {exc}") from None
    return ckpt


def check_compatible(ckpt: Checkpoint, model: PomdpModel) -> None:
    if ckpt.model.num_states != model.num_states or ckpt.model.num_actions != model.num_actions:
        raise ConfigError(
            f"checkpoint shape mismatch: networks for |X|={ckpt.model.num_states}, "
            f"|U|={ckpt.model.num_actions} but environment has |X|={model.num_states}, "
            f"|U|={model.num_actions}"
        )


def value_grid(ckpt: Checkpoint, model: PomdpModel, resolution: int = 100):
    """Tiger-style table over pi(state 0) in {0, 1/resolution, ..., 1}, or per-cell values
    at certain beliefs for other models. Returns (header, rows)."""
    check_compatible(ckpt, model)
    if ckpt.advantage is None:
        raise ConfigError("checkpoint has no advantage network")
    names = [str(model.label("actions", u)) for u in range(model.num_actions)]
    if model.num_states == 2:
        if resolution < 1:
            raise ConfigError("resolution must be at least 1")
        p = np.arange(resolution + 1) / resolution
        beliefs = np.stack([p, 1.0 - p], axis=1)
        keys = [[repr(float(v))] for v in p]
        header = ["pi_0"]
    else:
        beliefs = np.eye(model.num_states)
        if "layout" in model.labels:
            cells = gridworld_layout_of(model).cells()
            keys = [[c, r] for c, r in cells]
            header = ["col", "row"]
        else:
            keys = [[x] for x in range(model.num_states)]
            header = ["state"]
    V = nn.forward(ckpt.value, beliefs)[0][:, 0]
    A = reparameterized_advantage(ckpt.advantage, beliefs)
    greedy = np.argmax(A, axis=1)
    header = [*header, "V", *(f"A_{n}" for n in names), "greedy"]
    rows = [[*k, V[i], *A[i], int(greedy[i])] for i, k in enumerate(keys)]
    return header, rows


def evaluate_policy(
    model: PomdpModel,
    advantage: nn.MlpParams | None,
    episodes: int,
    seed: int,
    horizon: float,
    dt: float = 1e-2,
    policy: str = "greedy",
    initial_belief: str = "dirichlet",
):
    """Greedy (or uniform-random) policy episodes with per-episode seeds.

    Episode ``i`` uses ``np.random.default_rng(SeedSequence(seed).spawn(episodes)[i])``,
    so any subset of episodes can be reproduced independently. Returns
    (summary, episodes).
    """
    if episodes < 1:
        raise ConfigError("episodes must be positive")
    sampler = initial_belief_sampler(
        AuConfig(initial_belief=initial_belief), model.num_states
    )
    children = np.random.SeedSequence(seed).spawn(episodes)
    cfg = IntegratorConfig(dt=dt)
    runs = []
    occupancy = np.zeros(model.num_actions)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        if policy == "greedy":
            if advantage is None:
                raise ConfigError("greedy evaluation needs an advantage network")
            pol = GreedyPolicy(advantage)
        elif policy == "random":
            pol = RandomPolicy(model.num_actions, rng)
        elif policy.startswith("constant:"):
            pol = ConstantPolicy(int(policy.split(":", 1)[1]))
        else:
            raise ConfigError(f"unknown policy {policy!r}")
        ep = simulate_episode(model, pol, horizon, sampler, rng, cfg, seed=i)
        widths = np.diff(ep.times)
        np.add.at(occupancy, ep.actions[:-1], widths)
        runs.append(ep)
    returns = np.array([ep.discounted_return for ep in runs])
    summary = {
        "episodes": episodes,
        "mean_return": float(returns.mean()),
        "std_return": float(returns.std(ddof=1)) if episodes > 1 else 0.0,
        "occupancy": (occupancy / occupancy.sum()).tolist(),
        "policy": policy,
    }
    return summary, runs


def _initial_belief_kind(env: str, model: PomdpModel) -> str:
    return AU_TASK_DEFAULTS.get(env, {}).get(
        "initial_belief", "uniform" if model.num_states == 2 else "dirichlet"
    )


# -- commands ------------------------------------------------------------------------------------


def cmd_simulate(cfg: dict, run: RunDir) -> dict:
    model = load_env(cfg["env"])
    rng = np.random.default_rng(cfg["seed"])
    pol = cfg["policy"]
    if pol == "random":
        policy = RandomPolicy(model.num_actions, rng)
    elif str(pol).startswith("constant:"):
        policy = ConstantPolicy(int(str(pol).split(":", 1)[1]))
    else:
        raise ConfigError(f"unknown policy {pol!r}; use random or constant:<u>")
    belief = np.full(model.num_states, 1.0 / model.num_states)
    ep = simulate_episode(
        model, policy, float(cfg["horizon"]), belief, rng, IntegratorConfig(dt=float(cfg["dt"])),
        seed=cfg["seed"], initial_state=cfg["initial_state"],
    )
    run.write_text("trace.csv", episode_to_csv(ep))
    run.write_text("trace.json", json.dumps(ep.to_dict()) + "\n")
    return {"discounted_return": ep.discounted_return, "events": len(ep.events)}


def cmd_train_collocation(cfg: dict, run: RunDir) -> dict:
    model = load_env(cfg["env"])
    keys = CollocationConfig().to_dict().keys()
    try:
        ccfg = CollocationConfig(**{k: cfg[k] for k in keys})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    res = collocation_train(model, ccfg, np.random.default_rng(cfg["seed"]))
    ckpt = Checkpoint(model, res.value, res.advantage, "collocation", str(cfg["env"]),
                      cfg["seed"], ccfg.to_dict(), res.value_loss)
    run.write_text("checkpoint.json", json.dumps(ckpt.to_dict()) + "\n")
    run.write_csv("metrics.csv", ["episode", "value_loss"], enumerate(res.value_loss))
    run.write_csv("advantage_metrics.csv", ["episode", "advantage_loss"],
                  enumerate(res.advantage_loss))
    return {"final_value_loss": res.value_loss[-1], "final_advantage_loss": res.advantage_loss[-1]}


def cmd_train_au(cfg: dict, run: RunDir) -> dict:
    model = load_env(cfg["env"])
    keys = AuConfig().to_dict().keys()
    try:
        acfg = AuConfig(**{k: cfg[k] for k in keys})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    res = train_advantage_updating(model, acfg, np.random.default_rng(cfg["seed"]))
    ckpt = Checkpoint(model, res.value, res.advantage, "au", str(cfg["env"]),
                      cfg["seed"], acfg.to_dict(), res.loss)
    run.write_text("checkpoint.json", json.dumps(ckpt.to_dict()) + "\n")
    run.write_csv(
        "metrics.csv", ["episode", "mean_loss", "return", "sigma"],
        ([m["episode"], m["mean_loss"], m["return"], m["sigma"]] for m in res.metrics),
    )
    run.write_csv("loss_trace.csv", ["step", "loss"], enumerate(res.loss))
    return {"final_mean_loss": res.metrics[-1]["mean_loss"]}


def cmd_evaluate(cfg: dict, run: RunDir) -> dict:
    model = load_env(cfg["env"])
    advantage = None
    if cfg["policy"] == "greedy":
        ckpt = _load_checkpoint(cfg)
        check_compatible(ckpt, model)
        advantage = ckpt.advantage
    summary, runs = evaluate_policy(
        model, advantage, int(cfg["episodes"]), cfg["seed"], float(cfg["horizon"]),
        float(cfg["dt"]), cfg["policy"], _initial_belief_kind(str(cfg["env"]), model),
    )
    run.write_json("summary.json", summary)
    run.write_csv("returns.csv", ["episode", "return"],
                  ((i, ep.discounted_return) for i, ep in enumerate(runs)))
    is_aloha = model.num_states == 30 and cfg["env"] == "aloha"
    for i, ep in enumerate(runs[: int(cfg["traces"])]):
        run.write_text(f"traces/episode_{i:03d}.csv", episode_to_csv(ep))
        if is_aloha:
            rows = []
            for t, x, u, b in zip(ep.times, ep.states, ep.actions, ep.beliefs):
                n_marg, c_marg = aloha_marginals(b)
                rows.append([t, x // 3, x % 3, u, float(n_marg @ np.arange(len(n_marg))),
                             *n_marg, *c_marg])
            header = ["t", "n", "c", "u", "expected_n",
                      *(f"p_n{k}" for k in range(10)), "p_idle", "p_transmission", "p_collision"]
            run.write_csv(f"traces/aloha_marginals_{i:03d}.csv", header, rows)
    return summary


def cmd_export_value_grid(cfg: dict, run: RunDir) -> dict:
    ckpt = _load_checkpoint(cfg)
    model = load_env(cfg["env"])
    header, rows = value_grid(ckpt, model, int(cfg["resolution"]))
    run.write_csv("value_grid.csv", header, rows)
    return {"rows": len(rows), "columns": len(header)}


def cmd_validate_model(cfg: dict, run: RunDir) -> dict:
    model = load_env(cfg["env"])
    problems = validate(model)
    if problems:
        raise ConfigError("invalid model: " + "; ".join(problems))
    return {"num_states": model.num_states, "num_actions": model.num_actions,
            "num_observations": model.num_observations, "valid": True}


HANDLERS = {
    "simulate": cmd_simulate,
    "train-collocation": cmd_train_collocation,
    "train-au": cmd_train_au,
    "evaluate": cmd_evaluate,
    "export-value-grid": cmd_export_value_grid,
    "validate-model": cmd_validate_model,
}


def run(command: str, cfg: dict) -> tuple[int, Path]:
    out = RunDir(Path(cfg["out"]))
    out.write_json("config.json", cfg)
    summary = HANDLERS[command](cfg, out)
    out.manifest(command, cfg, _jsonable(summary))
    return 0, out.path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _error(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv: list | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="ctpomdp",
        description="Continuous-time POMDP filtering, simulation and training.",
        epilog="Any config key may be overridden with --key value.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file or manifest.json of a previous run")
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args.command, args.config, _parse_overrides(rest))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            code, path = run(args.command, cfg)
    except (ConfigError, KeyError) as exc:
        return _error("config", str(exc).strip("'\""), EXIT_CONFIG)
    except (TrainingDiverged, FloatingPointError) as exc:
        return _error("diverged", str(exc), EXIT_DIVERGED)
    except OSError as exc:
        return _error("io", str(exc), EXIT_IO)
    print(str(path))
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
