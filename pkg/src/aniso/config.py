"""Experiment configuration: sectioned ``key = value`` files with a fixed schema.

Every key is typed and has a default; unknown sections or keys are rejected.
The canonical text form lists every key (defaults included) in schema order,
so parse -> serialize -> parse is a fixed point and its sha256 is the config
digest recorded in run manifests.

Schema (section.key: type = default)::

    [experiment]  kind: str = train-linear-linear
                  seeds: int = 3           number of seeds averaged per grid point
                  master_seed: int = 0
                  paper_scale: bool = false
    [model]       family: str = mlp        linear | mlp | lenet | miniresnet
                  hidden: ints = 100, 20   mlp hidden widths
                  height: int = 16
                  width: int = 16
    [data]        nad_file: str =          path to a basis file (relative to the config file)
                  nad_idx_1: ints = 1
                  nad_idx_2: ints = 1
                  epsilon_1: float = 1.0
                  epsilon_2: float = 0.5
                  sigma: float = 1.0
                  n_train: int = 4000
                  n_test: int = 4000
                  cifar_dir: str =
                  cifar_train: int = 10000  size of the balanced CIFAR-10 train subset
                  normalize: str = standardize   applied to the CIFAR block only
    [train]       preset: str = s3-mlp
                  epochs, batch_size, lr_max, weight_decay: override the preset when set
    [nads]        n_inits: int = 512
                  n_inputs_per_init: int = 4
                  input_law: str = normal
                  seed: int = 0
    [cross_section] resolution: int = 201
                    half_range: float =   empty means 2.5 * max(epsilon_1, epsilon_2)
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from . import models, training
from .nad import INPUT_LAWS, NadEstimationConfig

KINDS = ("nads", "synth", "train-linear-linear", "train-cifar-synth", "cross-section")


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    return tuple(int(p) for p in parts)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(parse):
    return lambda text: None if text.strip() == "" else parse(text)


def _show(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {
        "kind": (str, "train-linear-linear"),
        "seeds": (int, 3),
        "master_seed": (int, 0),
        "paper_scale": (_bool, False),
    },
    "model": {
        "family": (str, "mlp"),
        "hidden": (_ints, models.MLP_S3),
        "height": (int, 16),
        "width": (int, 16),
    },
    "data": {
        "nad_file": (str, ""),
        "nad_idx_1": (_ints, (1,)),
        "nad_idx_2": (_ints, (1,)),
        "epsilon_1": (float, 1.0),
        "epsilon_2": (float, 0.5),
        "sigma": (float, 1.0),
        "n_train": (int, 4000),
        "n_test": (int, 4000),
        "cifar_dir": (str, ""),
        "cifar_train": (int, 10000),
        "normalize": (str, "standardize"),
    },
    "train": {
        "preset": (str, "s3-mlp"),
        "epochs": (_opt(int), None),
        "batch_size": (_opt(int), None),
        "lr_max": (_opt(float), None),
        "weight_decay": (_opt(float), None),
    },
    "nads": {
        "n_inits": (int, 512),
        "n_inputs_per_init": (int, 4),
        "input_law": (str, "normal"),
        "seed": (int, 0),
    },
    "cross_section": {
        "resolution": (int, 201),
        "half_range": (_opt(float), None),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict[str, dict[str, object]]
    base_dir: Path = field(default=Path("."), compare=False)

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @property
    def kind(self) -> str:
        return self.values["experiment"]["kind"]

    def canonical(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            lines.extend(f"{key} = {_show(self.values[section][key])}" for key in keys)
            lines.append("")
        return "\n".join(lines)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_values(self, **sections: dict) -> ExperimentConfig:
        merged = {s: dict(v) for s, v in self.values.items()}
        for s, kv in sections.items():
            merged[s].update(kv)
        cfg = ExperimentConfig(merged, self.base_dir)
        validate(cfg)
        return cfg

    # -- derived objects --------------------------------------------------

    def model_spec(self, channels: int = 1) -> models.ModelSpec:
        m = self.values["model"]
        shape = (channels, m["height"], m["width"])
        family = m["family"]
        if family == "mlp":
            return models.ModelSpec.mlp(shape, hidden=tuple(m["hidden"]))
        return getattr(models.ModelSpec, family)(shape)

    def train_config(self, shuffle_seed: int = 0) -> training.TrainConfig:
        t = self.values["train"]
        overrides = {k: t[k] for k in ("epochs", "batch_size", "lr_max", "weight_decay") if t[k] is not None}
        return training.preset(t["preset"], shuffle_seed=shuffle_seed, **overrides)

    def nad_config(self) -> NadEstimationConfig:
        n = self.values["nads"]
        return NadEstimationConfig(n_inits=n["n_inits"], n_inputs_per_init=n["n_inputs_per_init"],
                                   input_law=n["input_law"], seed=n["seed"])

    def resolve(self, path: str) -> Path:
        p = Path(path).expanduser()
        return p if p.is_absolute() else self.base_dir / p


def parse_text(text: str, base_dir: Path | str = ".") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="\0none")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {s: {k: default for k, (_, default) in keys.items()} for s, keys in SCHEMA.items()}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]; expected one of {list(SCHEMA)}")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}; expected one of {list(SCHEMA[section])}")
            parse = SCHEMA[section][key][0]
            try:
                values[section][key] = parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{section}.{key}: cannot parse {raw!r} ({exc})") from None
    cfg = ExperimentConfig(values, Path(base_dir))
    validate(cfg)
    return cfg


def load(path) -> ExperimentConfig:
    path = Path(path)
    return parse_text(path.read_text(), base_dir=path.parent)


def validate(cfg: ExperimentConfig) -> None:
    e, m, d, n = cfg["experiment"], cfg["model"], cfg["data"], cfg["nads"]
    if e["kind"] not in KINDS:
        raise ConfigError(f"experiment.kind must be one of {KINDS}, got {e['kind']!r}")
    if e["seeds"] < 1:
        raise ConfigError("experiment.seeds must be at least 1")
    if m["family"] not in models.FAMILIES:
        raise ConfigError(f"model.family must be one of {models.FAMILIES}, got {m['family']!r}")
    if m["height"] < 1 or m["width"] < 1:
        raise ConfigError("model.height and model.width must be positive")
    if m["family"] == "mlp" and (not m["hidden"] or min(m["hidden"]) < 1):
        raise ConfigError("model.hidden needs at least one positive width")
    dim = m["height"] * m["width"]
    for key in ("nad_idx_1", "nad_idx_2"):
        if not d[key]:
            raise ConfigError(f"data.{key} is empty")
        bad = [i for i in d[key] if not 1 <= i <= dim]
        if bad:
            raise ConfigError(f"data.{key} has indices {bad} outside 1..{dim}")
    if not (d["epsilon_1"] > 0 and d["epsilon_2"] > 0) or d["sigma"] < 0:
        raise ConfigError("need epsilon_1, epsilon_2 > 0 and sigma >= 0")
    if d["n_train"] < 1 or d["n_test"] < 1 or d["cifar_train"] < 2:
        raise ConfigError("sample counts must be positive")
    if d["normalize"] not in ("none", "standardize"):
        raise ConfigError(f"data.normalize must be none or standardize, got {d['normalize']!r}")
    if cfg["train"]["preset"] not in training.PRESETS:
        raise ConfigError(f"train.preset must be one of {sorted(training.PRESETS)}")
    if n["input_law"] not in INPUT_LAWS:
        raise ConfigError(f"nads.input_law must be one of {INPUT_LAWS}")
    if n["n_inits"] < 1 or n["n_inputs_per_init"] < 1:
        raise ConfigError("nads.n_inits and nads.n_inputs_per_init must be positive")
    if cfg["cross_section"]["resolution"] < 2:
        raise ConfigError("cross_section.resolution must be at least 2")
    try:
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None
