"""Run configuration: flat ``dotted.key = value`` files plus scenario presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .codec import CodecConfig
from .model import ConfigError, DataConfig, ModelConfig
from .peers import PeerConfig, format_strategy, parse_roster, validate_roster
from .simnet import GlobalClock
from .validator import EvaluationConfig, LinearWarmup


@dataclass
class RunConfig:
    seed: int = 0
    rounds: int = 300
    roster: list = field(default_factory=lambda: parse_roster("honest*8"))
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    eval: EvaluationConfig = field(default_factory=EvaluationConfig)
    lr: LinearWarmup = field(default_factory=lambda: LinearWarmup(0.002, 10))
    clock: GlobalClock = field(default_factory=GlobalClock)
    peer: PeerConfig = field(default_factory=PeerConfig)
    scenario: str = "custom"

    def validate(self) -> None:
        if self.rounds < 0:
            raise ConfigError("run.rounds must be >= 0")
        if len(self.roster) < 2:
            raise ConfigError("peers.roster needs at least two peers")
        validate_roster(self.roster)
        if self.eval.top_g > len(self.roster):
            raise ConfigError("eval.top_g exceeds the number of peers")
        if self.peer.local_lr <= 0 or self.peer.local_steps < 1:
            raise ConfigError("peer.local_lr must be positive and peer.local_steps >= 1")


# section name -> attribute on RunConfig holding a dataclass
_SECTIONS = {"model": "model", "data": "data", "codec": "codec", "eval": "eval",
             "lr": "lr", "clock": "clock", "peer": "peer"}
_CLOCK_KEYS = ("round_length", "window_start", "window_end")
_PRESET_KEY = "scenario"
_CUSTOM = "custom"  # written by dump_config when no preset was used

PRESETS: dict[str, dict[str, str]] = {
    "figure2": {
        "peers.roster": "honest; honest(data_multiplier=2); desync(pause_at_round=20,pause_rounds=3); honest*5",
        "run.rounds": "300",
    },
    "copier": {
        "peers.roster": "honest*4; copier(victim=0); ignore_assigned",
        "run.rounds": "200",
        "eval.eval_set_size": "6",
        "eval.filter_set_size": "6",
        "eval.ema_decay": "0.98",
    },
    "duplicate": {
        "peers.roster": "honest*6; duplicate(sibling=0); ignore_assigned",
        "run.rounds": "200",
    },
    "byzantine_norm": {
        "peers.roster": "honest*7; norm_scaler(factor=1000000.0)",
        "run.rounds": "200",
    },
    "late_putters": {
        "peers.roster": "honest*5; late_putter(offset=0.05); silent; malformed",
        "run.rounds": "200",
    },
    "all_honest": {
        "peers.roster": "honest*8",
        "run.rounds": "300",
    },
    # the live-run evaluation sizes (G=15, 5 evaluated per round)
    "live": {
        "peers.roster": "honest*20",
        "run.rounds": "300",
        "eval.top_g": "15",
        "eval.eval_set_size": "5",
        "eval.filter_set_size": "20",
    },
}


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def _coerce(value: str, typ, key: str):
    try:
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r}") from exc
    return value


def build_config(overrides: dict[str, str]) -> RunConfig:
    """Resolve preset + overrides into a validated :class:`RunConfig`."""
    values: dict[str, str] = {}
    preset = overrides.get(_PRESET_KEY)
    if preset == _CUSTOM:
        preset = None
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"scenario: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[preset])
    values.update({k: v for k, v in overrides.items() if k != _PRESET_KEY})

    cfg = RunConfig(scenario=preset or _CUSTOM)
    section_kwargs: dict[str, dict] = {s: {} for s in _SECTIONS}
    for key, value in values.items():
        if key == "run.seed":
            cfg.seed = _coerce(value, int, key)
        elif key == "run.rounds":
            cfg.rounds = _coerce(value, int, key)
        elif key == "peers.roster":
            cfg.roster = parse_roster(value)
        else:
            section, _, name = key.partition(".")
            if section not in _SECTIONS:
                raise ConfigError(f"{key}: unknown configuration key")
            target = getattr(cfg, _SECTIONS[section])
            known = {f.name: f.type for f in dataclasses.fields(target)}
            if section == "clock":
                known = {k: "float" for k in _CLOCK_KEYS}
            if name not in known:
                raise ConfigError(f"{key}: unknown configuration key")
            section_kwargs[section][name] = _coerce(value, known[name], key)
    try:
        for section, kwargs in section_kwargs.items():
            if kwargs:
                attr = _SECTIONS[section]
                setattr(cfg, attr, dataclasses.replace(getattr(cfg, attr), **kwargs))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def load_config(path: Path | str | None, sets: list[str] = ()) -> RunConfig:
    values = parse_kv_text(Path(path).read_text(), str(path)) if path else {}
    for item in sets:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = value.strip()
    return build_config(values)


def dump_config(cfg: RunConfig) -> str:
    lines = [f"scenario = {cfg.scenario}", f"run.seed = {cfg.seed}", f"run.rounds = {cfg.rounds}",
             "peers.roster = " + "; ".join(format_strategy(s) for s in cfg.roster)]
    for section, attr in _SECTIONS.items():
        obj = getattr(cfg, attr)
        names = _CLOCK_KEYS if section == "clock" else [f.name for f in dataclasses.fields(obj)]
        lines.extend(f"{section}.{n} = {getattr(obj, n)!r}" for n in names)
    return "\n".join(lines) + "\n"
