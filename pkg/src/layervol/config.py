"""INI run configuration with environment and command-line overrides.

Sections and keys::

    [run]       preset (desk | full), seed, threads, deterministic
    [scene]     any SceneSpec field (kind, body_shape, bound, camera_radius, ...)
    [guidance]  backend, prompt_body, prompt_clothing, prompt_composite,
                cfg_scale, bias
    [body] [clothing] [matching]
                any StageConfig field except ``stage``
    [transfer]  target_scale

Precedence, lowest first: built-in defaults, the INI file, environment
variables ``LAYERVOL_<SECTION>_<KEY>`` and ``--set section.key=value``.
Tuples are written comma separated, e.g. ``body_shape = 1.0, 1.2, 1.0``.
"""

import configparser
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .scene import SceneSpec
from .train import STAGES, StageConfig

ENV_PREFIX = "LAYERVOL_"
RUN_DEFAULTS = {"preset": "desk", "seed": 0, "threads": 1, "deterministic": True}
GUIDANCE_DEFAULTS = {
    "backend": "photometric",
    "prompt_body": "a person",
    "prompt_clothing": "a shirt",
    "prompt_composite": "a person wearing a shirt",
    "cfg_scale": 7.5,
    "bias": 0.0,
}
TRANSFER_DEFAULTS = {"target_scale": (1.3, 1.0, 1.3), "one_sided": True}


def _coerce(text, like, key):
    if isinstance(like, bool):
        lowered = text.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, (tuple, list)):
            item = like[0] if len(like) else 0.0
            return tuple(_coerce(p, item, key) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc
    return text.strip()


@dataclass
class RunConfig:
    run: dict
    scene: SceneSpec
    guidance: dict
    stages: dict
    transfer: dict
    sources: dict = field(default_factory=dict)

    def resolved(self):
        """Plain nested dict of every effective setting, suitable for JSON."""
        def plain(d):
            return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

        scene = {f.name: getattr(self.scene, f.name) for f in fields(SceneSpec)}
        out = {"run": plain(self.run), "scene": plain(scene), "guidance": plain(self.guidance),
               "transfer": plain(self.transfer)}
        for name, cfg in self.stages.items():
            out[name] = {k: v for k, v in cfg.to_dict().items() if k != "stage"}
        return out


def _stage_defaults(preset, stage):
    if preset == "desk":
        return StageConfig.desk(stage)
    if preset == "full":
        return StageConfig.full(stage)
    raise ConfigError(f"unknown preset {preset!r}")


def load_config(path=None, overrides=(), env=None):
    """Resolve the run configuration; ``overrides`` are ``"section.key=value"`` strings."""
    env = os.environ if env is None else env
    raw = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        raw = {s: dict(parser[s]) for s in parser.sections()}
    known = {"run", "scene", "guidance", "transfer", *STAGES}
    for section in raw:
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
    for key, value in env.items():
        if key.startswith(ENV_PREFIX):
            rest = key[len(ENV_PREFIX):].lower()
            section, _, name = rest.partition("_")
            if section in known and name:
                raw.setdefault(section, {})[name] = value
    for item in overrides:
        target, sep, value = item.partition("=")
        section, dot, name = target.partition(".")
        if not sep or not dot or section not in known:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        raw.setdefault(section, {})[name] = value

    def merge(section, defaults):
        values = dict(defaults)
        for key, text in raw.get(section, {}).items():
            if key not in defaults:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _coerce(text, defaults[key], f"{section}.{key}")
        return values

    run = merge("run", RUN_DEFAULTS)
    scene_defaults = {f.name: getattr(SceneSpec(), f.name) for f in fields(SceneSpec)}
    scene = SceneSpec.from_dict(merge("scene", scene_defaults))
    guidance = merge("guidance", GUIDANCE_DEFAULTS)
    transfer = merge("transfer", TRANSFER_DEFAULTS)
    stages = {}
    for stage in STAGES:
        base = _stage_defaults(run["preset"], stage)
        defaults = {k: v for k, v in base.to_dict().items() if k != "stage"}
        defaults = {k: tuple(v) if isinstance(v, list) else v for k, v in defaults.items()}
        defaults.update(seed=run["seed"], deterministic=run["deterministic"], threads=run["threads"])
        values = merge(stage, defaults)
        stages[stage] = StageConfig(stage=stage, **values)
    return RunConfig(run, scene, guidance, stages, transfer, raw)


def write_config(path, config):
    """Write ``config.resolved()`` back out as INI."""
    write_resolved(path, config.resolved())


def write_resolved(path, resolved):
    """Write a nested ``{section: {key: value}}`` dict as INI that ``load_config`` reads back."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, values in resolved.items():
        parser[section] = {k: ", ".join(str(x) for x in v) if isinstance(v, list) else str(v)
                           for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)
