"""Experiment configuration: plain-text key=value files with section headers.

Example::

    [experiment]
    scale = desk
    seed = 0
    output = runs/desk
    environments = 1, 2

    [session]
    collect_episodes = 200

    [train]
    max_epochs = 40

    [ppo]
    total_timesteps = 150000

Sections ``session``, ``train``, ``vae``, ``ppo`` and ``world`` override the
fields of the matching dataclass; anything left out keeps the scale preset.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .. import flatland as fl
from .. import replay
from .. import rlpolicy as rl

SCALES = ("desk", "paper")


@dataclass(frozen=True)
class ExperimentConfig:
    scale: str = "desk"
    environments: tuple[int, ...] = (1, 2)
    output: Path = Path("runs/desk")
    seed: int = 0
    detection_trials: int = 200
    rl_seeds: int = 3
    session: replay.SessionConfig = field(default_factory=replay.SessionConfig)
    ppo: rl.PpoConfig = field(default_factory=rl.PpoConfig)
    world: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValueError(f"scale must be one of {SCALES}, got {self.scale!r}")
        if not self.environments:
            raise ValueError("need at least one environment")

    def world_config(self, variant_id: int) -> fl.WorldConfig:
        return fl.variant(variant_id, **self.world)

    def env_sequence(self) -> list[fl.WorldConfig]:
        return [self.world_config(v) for v in self.environments]

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp["experiment"] = {"scale": self.scale, "seed": str(self.seed), "output": str(self.output),
                            "environments": ", ".join(map(str, self.environments)),
                            "detection_trials": str(self.detection_trials), "rl_seeds": str(self.rl_seeds)}
        s = self.session
        cp["session"] = {f.name: _text(getattr(s, f.name)) for f in fields(s)
                         if f.name not in ("train", "vae", "seed")}
        cp["train"] = {f.name: _text(getattr(s.train, f.name)) for f in fields(s.train) if f.name != "rng_seed"}
        cp["vae"] = {f.name: _text(getattr(s.vae, f.name)) for f in fields(s.vae)}
        cp["ppo"] = {f.name: _text(getattr(self.ppo, f.name)) for f in fields(self.ppo)}
        if self.world:
            cp["world"] = {k: _world_text(k, v) for k, v in self.world.items()}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in cp[sec].items()]
            lines.append("")
        return "\n".join(lines)


def preset(scale: str = "desk") -> ExperimentConfig:
    """Defaults for a scale. Desk shrinks data and timesteps only; thresholds,
    formats and architectures stay the same."""
    if scale == "desk":
        return ExperimentConfig()
    if scale == "paper":
        session = replay.SessionConfig(collect_episodes=1000, eval_episodes=2, states_per_episode=None,
                                       train=replay.TrainRunConfig(max_epochs=200))
        return ExperimentConfig(scale="paper", output=Path("runs/paper"), detection_trials=5000, rl_seeds=5,
                                session=session, ppo=rl.PpoConfig(total_timesteps=1_000_000))
    raise ValueError(f"scale must be one of {SCALES}, got {scale!r}")


def load(path) -> ExperimentConfig:
    return parse(Path(path).read_text())


def parse(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    known = {"experiment", "session", "train", "vae", "ppo", "world"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ValueError(f"unknown config section(s): {sorted(unknown)}")
    exp = dict(cp["experiment"]) if cp.has_section("experiment") else {}
    cfg = preset(exp.pop("scale", "desk").strip())
    top = {}
    for key, raw in exp.items():
        if key == "environments":
            top[key] = tuple(int(v) for v in raw.replace(",", " ").split())
        elif key == "output":
            top[key] = Path(raw)
        elif key in ("seed", "detection_trials", "rl_seeds"):
            top[key] = int(raw)
        else:
            raise ValueError(f"unknown key {key!r} in [experiment]")
    session = cfg.session
    if cp.has_section("train"):
        session = replace(session, train=_override(session.train, cp["train"], "train"))
    if cp.has_section("vae"):
        session = replace(session, vae=_override(session.vae, cp["vae"], "vae"))
    if cp.has_section("session"):
        session = _override(session, cp["session"], "session")
    ppo = _override(cfg.ppo, cp["ppo"], "ppo") if cp.has_section("ppo") else cfg.ppo
    world = {}
    if cp.has_section("world"):
        types = {f.name: f for f in fields(fl.WorldConfig)}
        for key, raw in cp["world"].items():
            if key not in types or key == "variant_id":
                raise ValueError(f"unknown key {key!r} in [world]")
            world[key] = fl._parse_value(key, raw)
    cfg = replace(cfg, **top, session=session, ppo=ppo, world=world)
    return replace(cfg, session=replace(cfg.session, seed=cfg.seed))


def _override(obj, section, name):
    kw = {}
    valid = {f.name for f in fields(obj)}
    for key, raw in section.items():
        if key not in valid or key in ("train", "vae"):
            raise ValueError(f"unknown key {key!r} in [{name}]")
        kw[key] = _coerce(raw, getattr(obj, key))
    return replace(obj, **kw)


def _coerce(raw: str, current):
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if current is None:
        # optional numeric fields default to None
        return int(raw) if raw.lstrip("-").isdigit() else float(raw)
    return raw


def _text(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(map(str, v))
    return str(v)


def _world_text(key: str, v) -> str:
    # same layout WorldConfig.to_text uses, so fl._parse_value reads it back
    if key == "fixed_obstacles":
        return "; ".join(",".join(repr(float(c)) for c in r) for r in v)
    if isinstance(v, tuple):
        return ",".join(repr(float(c)) for c in v)
    return _text(v)
