"""Flat ``key = value`` run configuration with dotted namespaces.

Example file::

    # comment
    train.steps = 500
    train.variant = ckd
    elim.layers = 2
    data.synthetic = true

Every key has a default; unknown keys raise :class:`ConfigError`.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Iterable, Optional

from .backbone import ModelConfig
from .data import CropConfig
from .distill import DistillConfig
from .elimination import EliminationConfig
from .errors import ConfigError
from .train import TrainConfig

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out_dir": "runs/default",
    "model.depth": 4,
    "model.dim": 64,
    "model.heads": 4,
    "model.patch": 8,
    "model.mlp_ratio": 2.0,
    "model.head_dim": 64,
    "crop.template_size": 32,
    "crop.search_size": 64,
    "crop.template_factor": 2.0,
    "crop.search_factor": 4.0,
    "train.steps": 2000,
    "train.batch_size": 8,
    "train.mask_ratio": 0.25,
    "train.lr_backbone": 2e-4,
    "train.lr_head": 2e-3,
    "train.weight_decay": 1e-4,
    "train.grad_clip": 1.0,
    "train.variant": "ckd",
    "distill.lambda_sd": 2.0,
    "distill.lambda_cd": 1.0,
    "distill.epsilon": 1e-5,
    "elim.mode": "mce",
    "elim.layers": (2,),
    "elim.keep_ratio": 0.7,
    "data.synthetic": True,
    "data.root": "",
    "data.test_root": "",
    "data.n_train": 20,
    "data.n_test": 5,
    "data.length": 50,
    "data.canvas": 128,
    "data.seed": 0,
    "data.style": "default",
    "eval.tau": 20.0,
}


def _parse(key: str, raw: Any) -> Any:
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        if isinstance(default, tuple):
            return tuple(int(v) for v in (raw if isinstance(raw, Iterable) else [raw]))
        return type(default)(raw)
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved configuration: defaults, then file, then overrides."""

    def __init__(self, values: Optional[dict] = None):
        self.values = dict(DEFAULTS)
        if values:
            self.update(values)

    def update(self, values: dict) -> "RunConfig":
        for key, raw in values.items():
            key = key.replace("-", "_") if key.replace("-", "_") in DEFAULTS else key
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            self.values[key] = _parse(key, raw)
        return self

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key} ({path}:{lineno})")
            values[key] = val
        return cls(values)

    def dump(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    # typed views

    def crop(self) -> CropConfig:
        return CropConfig(**self.section("crop"))

    def model(self) -> ModelConfig:
        c = self.crop()
        flags = self.train().flags
        return ModelConfig(template_size=c.template_size, search_size=c.search_size,
                           student_in=flags.student_in, **self.section("model"))

    def distill(self) -> DistillConfig:
        return DistillConfig(**self.section("distill"))

    def train(self) -> TrainConfig:
        d = self.distill()
        return TrainConfig(seed=self["seed"], lambda_sd=d.lambda_sd, lambda_cd=d.lambda_cd,
                           epsilon=d.epsilon, **self.section("train"))

    def elim(self) -> Optional[EliminationConfig]:
        e = self.section("elim")
        if e["mode"] == "none":
            return None
        return EliminationConfig(layers=e["layers"], keep_ratio=e["keep_ratio"], mode=e["mode"])

    def validate(self) -> "RunConfig":
        self.model(), self.train(), self.elim(), self.crop()
        return self

    def with_values(self, **values) -> "RunConfig":
        out = RunConfig()
        out.values = dict(self.values)
        return out.update({k.replace("__", "."): v for k, v in values.items()})
