"""Run configuration: a YAML file parsed into dataclasses with strict key checking."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .elbo import TrainConfig
from .tasks import ClusterTaskSpec, SineTaskSpec, Task, episode_seed, sample_cluster_task, sample_sine_task


class ConfigError(ValueError):
    pass


@dataclass
class TaskConfig:
    kind: str
    shots: int
    n_query: int = 15
    # sine
    amplitude: tuple[float, float] = (0.1, 5.0)
    phase: tuple[float, float] = (0.0, 3.141592653589793)
    x_range: tuple[float, float] = (-5.0, 5.0)
    noise: float = 0.0
    # cluster
    dim: int = 8
    ways: int = 2
    center_scale: float = 3.0
    spread: float = 0.5

    @property
    def d_in(self) -> int:
        return 1 if self.kind == "sine" else self.dim

    def spec(self):
        if self.kind == "sine":
            return SineTaskSpec(tuple(self.amplitude), tuple(self.phase), tuple(self.x_range), self.noise)
        return ClusterTaskSpec(self.dim, self.center_scale, self.spread, self.ways, self.shots)

    def generator(self):
        spec = self.spec()
        spec.validate()
        if self.kind == "sine":
            return lambda seed: sample_sine_task(spec, self.shots, self.n_query, seed)
        return lambda seed: sample_cluster_task(spec, self.n_query, seed)

    def eval_tasks(self, seed: int, count: int) -> list[Task]:
        gen = self.generator()
        return [gen(episode_seed(seed, 1, i)) for i in range(count)]


@dataclass
class ModelConfig:
    feature_dim: int = 40
    hidden: int = 40


@dataclass
class Seeds:
    tasks: int
    init: int
    sampling: int


@dataclass
class RunConfig:
    task: TaskConfig
    train: TrainConfig
    seeds: Seeds
    output_dir: str
    model: ModelConfig = field(default_factory=ModelConfig)
    eval_episodes: int = 200
    eval_mode: str = "sampled"
    log_every: int = 1
    log_eval_episodes: int = 0
    checkpoint_every: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        # seeds live in their own section
        d["train"].pop("init_seed")
        d["train"].pop("sampling_seed")
        return json.loads(json.dumps(d))

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


_SECTIONS = {
    "task": TaskConfig,
    "train": TrainConfig,
    "seeds": Seeds,
    "model": ModelConfig,
}
_HIDDEN_TRAIN = {"init_seed", "sampling_seed"}


def _fields(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


def _required(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING]


def _line_map(node, prefix="", out=None):
    """Map dotted key paths to 1-based source lines."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}{k.value}"
            out[path] = k.start_mark.line + 1
            _line_map(v, path + ".", out)
    return out


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a dot (1e-4) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list) or len(value) != 2:
            raise ConfigError(f"{where}: expected a two-element list, got {value!r}")
        return tuple(float(_coerce(v, 0.0, where)) for v in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    return value


_TYPE_HINT_DEFAULTS = {"kind": "", "shots": 0, "tasks": 0, "init": 0, "sampling": 0, "output_dir": ""}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        root = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    lines = _line_map(root)

    def where(path):
        line = lines.get(path)
        return f"{source}:{line}: field '{path}'" if line else f"{source}: field '{path}'"

    def build(cls, data, prefix, hidden=()):
        if not isinstance(data, dict):
            raise ConfigError(f"{where(prefix.rstrip('.'))}: expected a mapping")
        fields = _fields(cls)
        for key in data:
            if key not in fields or key in hidden:
                raise ConfigError(f"{where(prefix + str(key))}: unknown key")
        for name in _required(cls):
            if name not in data:
                raise ConfigError(f"{where(prefix.rstrip('.')) if prefix else source}: missing required field '{prefix}{name}'")
        kwargs = {}
        for key, value in data.items():
            f = fields[key]
            default = f.default if f.default is not dataclasses.MISSING else _TYPE_HINT_DEFAULTS.get(key)
            kwargs[key] = _coerce(value, default, where(prefix + key))
        return cls(**kwargs)

    top = {f.name for f in dataclasses.fields(RunConfig)}
    for key in raw:
        if key not in top:
            raise ConfigError(f"{where(str(key))}: unknown key")
    for name in ("task", "train", "seeds", "output_dir"):
        if name not in raw:
            raise ConfigError(f"{source}: missing required field '{name}'")

    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = build(_SECTIONS[key], value, key + ".",
                                _HIDDEN_TRAIN if key == "train" else ())
        else:
            default = _fields(RunConfig)[key].default
            if default is dataclasses.MISSING:
                default = _TYPE_HINT_DEFAULTS.get(key)
            kwargs[key] = _coerce(value, default, where(key))
    cfg = RunConfig(**kwargs)
    cfg.train.init_seed = cfg.seeds.init
    cfg.train.sampling_seed = cfg.seeds.sampling
    validate(cfg, where)
    return cfg


def validate(cfg: RunConfig, where=lambda p: f"field '{p}'"):
    t = cfg.task
    if t.kind not in ("sine", "cluster"):
        raise ConfigError(f"{where('task.kind')}: must be 'sine' or 'cluster', got {t.kind!r}")
    if t.shots < 1 or t.n_query < 1:
        raise ConfigError(f"{where('task.shots')}: shots and n_query must be >= 1")
    try:
        t.spec().validate()
        cfg.train.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.eval_mode not in ("sampled", "mean"):
        raise ConfigError(f"{where('eval_mode')}: must be 'sampled' or 'mean'")
    for name in ("eval_episodes", "log_every"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{where(name)}: must be >= 1")
    for name in ("log_eval_episodes", "checkpoint_every"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{where(name)}: must be >= 0")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def config_from_dict(d: dict) -> RunConfig:
    return parse_config(yaml.safe_dump(d), "<checkpoint config>")


def apply_seed_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep or key not in ("tasks", "init", "sampling"):
            raise ConfigError(f"bad --seed-override {item!r}; expected tasks=N, init=N or sampling=N")
        try:
            setattr(cfg.seeds, key, int(value))
        except ValueError:
            raise ConfigError(f"bad --seed-override {item!r}: {value!r} is not an integer") from None
    cfg.train.init_seed = cfg.seeds.init
    cfg.train.sampling_seed = cfg.seeds.sampling
    return cfg
