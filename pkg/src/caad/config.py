"""Run configuration and its plain-text ``key = value`` file format.

One setting per line, ``#`` starts a comment, keys are ``section.name`` (or a
bare top-level name), values are numbers, ``true``/``false``, ``none``, bare
strings, or comma-separated lists::

    seed = 7
    data_kind = tabular
    synth.n_anomaly = 250
    train.stage1_epochs = 5
    model.t_conf = 0.9
    experiment.fractions = 1.0, 0.5, 0.1

Unknown keys are rejected. Every value is coerced to the type of the
setting's default.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import ImageSynthConfig, SynthConfig
from .exceptions import ConfigError
from .pipeline import TrainConfig


@dataclass
class ModelConfig:
    extractor: str = "identity"
    feature_dim: int = 32
    cnn_channels: tuple = (8, 16)
    stages: str = "123"
    t_ano: float | None = None
    t_conf: float = 0.9


@dataclass
class ExperimentSettings:
    seeds: tuple = (0, 1, 2, 3, 4)
    fractions: tuple = (1.0, 0.5, 0.1)
    tconf_grid: tuple = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95)
    n_jobs: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    data_kind: str = "tabular"
    synth: SynthConfig = field(default_factory=SynthConfig)
    images: ImageSynthConfig = field(default_factory=lambda: ImageSynthConfig(crop=28))
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    SECTIONS = ("synth", "images", "train", "model", "experiment")

    def resolved(self) -> RunConfig:
        """Copy with the root seed pushed into every consumer."""
        out = from_dict(to_dict(self))
        out.synth.seed = out.seed
        out.images.seed = out.seed
        out.train.seed = out.seed
        if out.data_kind not in ("tabular", "image"):
            raise ConfigError(f"data_kind must be 'tabular' or 'image', got {out.data_kind!r}")
        if out.data_kind == "image" and out.model.extractor == "identity":
            out.model.extractor = "tiny_cnn"
        out.synth.validate()
        out.images.validate()
        out.train.validate()
        return out

    def detector_params(self) -> dict:
        t, m = self.train, self.model
        skip = {"seed"}
        params = {k: v for k, v in asdict(t).items() if k not in skip}
        params.update(extractor=m.extractor, feature_dim=m.feature_dim, cnn_channels=tuple(m.cnn_channels),
                      stages=m.stages, t_ano=m.t_ano, t_conf=m.t_conf, random_state=self.seed)
        return params


def _coerce(raw: str, default, key):
    s = raw.strip()
    low = s.lower()
    try:
        if isinstance(default, bool):
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(s)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float) or (default is None and key.endswith("t_ano")):
            return None if low in ("none", "") else float(s)
        if isinstance(default, tuple):
            items = [p.strip() for p in s.split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in items)
        if default is None:
            return None if low == "none" else s
        return s
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_dict(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed, "data_kind": cfg.data_kind}
    for sec in RunConfig.SECTIONS:
        out[sec] = asdict(getattr(cfg, sec))
    return out


def from_dict(d: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in d.items():
        if key in RunConfig.SECTIONS:
            target = getattr(cfg, key)
            for k, v in value.items():
                if not hasattr(target, k):
                    raise ConfigError(f"unknown setting {key}.{k}")
                setattr(target, k, tuple(v) if isinstance(v, list) else v)
        elif key in ("seed", "data_kind"):
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"unknown setting {key}")
    return cfg


def set_value(cfg: RunConfig, key: str, raw: str):
    """Assign ``raw`` (text) to the dotted ``key``."""
    if "." in key:
        sec, name = key.split(".", 1)
        if sec not in RunConfig.SECTIONS:
            raise ConfigError(f"unknown section {sec!r} in key {key!r}")
        target = getattr(cfg, sec)
        names = {f.name for f in fields(target)}
        if name == "seed":
            raise ConfigError(f"{key}: per-section seeds come from the top-level 'seed'")
        if name not in names:
            raise ConfigError(f"unknown setting {key}")
        setattr(target, name, _coerce(raw, getattr(type(target)(), name), key))
    elif key in ("seed", "data_kind"):
        setattr(cfg, key, _coerce(raw, getattr(RunConfig(), key), key))
    else:
        raise ConfigError(f"unknown setting {key}")


def parse_config(text: str, source="<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        try:
            set_value(cfg, key.strip(), raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    d = to_dict(cfg)
    lines = [f"seed = {_format(d['seed'])}", f"data_kind = {_format(d['data_kind'])}"]
    for sec in RunConfig.SECTIONS:
        lines.append("")
        lines += [f"{sec}.{k} = {_format(v)}" for k, v in d[sec].items() if k != "seed"]
    return "\n".join(lines) + "\n"
