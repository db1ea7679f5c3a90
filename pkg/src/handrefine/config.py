"""Pipeline configuration: defaults, validation, JSON loading and ablation presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .losses import MANO_TERMS, LossWeights
from .numeric import PRECISIONS
from .semgcn import ENCODER_KINDS


class ConfigError(ValueError):
    pass


# name -> (pose encoder kind, intra-graph GCN layers, mutual attention)
ABLATIONS = {
    "B": ("mlp", False, False),
    "B+OG": ("gcn", False, False),
    "B+SG": ("semgcn", False, False),
    "B+SG+G": ("semgcn", True, False),
    "B+SG+G+MA": ("semgcn", True, True),
}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    precision: str = "f64"
    model: str = "toy"
    toy_vertices: int = 64
    toy_joints: int = 8
    n_shape: int = 10
    global_dim: int = 2048

    encoder_kind: str = "semgcn"
    encoder_width: int = 128
    encoder_blocks: int = 2
    semgconv_variant: str = "shared"
    decoder_hidden: int = 64
    shape_hidden: int = 128

    refiner_width: int = 128
    refiner_blocks: int = 2
    head_hidden: int = 64
    use_gcn_layer: bool = True
    use_mutual_attention: bool = True
    zero_init_heads: bool = True

    lambdas: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 0.1)
    skip_terms: tuple[str, ...] = ("heatmaps", "joints2d")
    learning_rate: float = 1e-4
    batch_size: int = 24
    steps: int = 500
    n_samples: int = 8

    heatmap_size: int = 32
    heatmap_sigma: float = 1.5
    softargmax_beta: float = 14.0
    use_heatmap_input: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        object.__setattr__(self, "skip_terms", tuple(self.skip_terms))
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            want = f.type if isinstance(f.type, str) else f.type.__name__
            if want == "int" and (not isinstance(value, int) or isinstance(value, bool)):
                raise ConfigError(f"{f.name} must be an integer, got {value!r}")
            if want == "bool" and not isinstance(value, bool):
                raise ConfigError(f"{f.name} must be a boolean, got {value!r}")
            if want == "float" and (not isinstance(value, (int, float)) or isinstance(value, bool)):
                raise ConfigError(f"{f.name} must be a number, got {value!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.encoder_kind not in ENCODER_KINDS:
            raise ConfigError(f"encoder_kind must be one of {ENCODER_KINDS}")
        if self.semgconv_variant not in ("shared", "split"):
            raise ConfigError("semgconv_variant must be 'shared' or 'split'")
        if not self.toy_vertices >= self.toy_joints >= 2:
            raise ConfigError("toy model needs toy_vertices >= toy_joints >= 2")
        if not 1 <= self.refiner_blocks <= 4:
            raise ConfigError("refiner_blocks must be between 1 and 4")
        for name in ("n_shape", "global_dim", "encoder_width", "decoder_hidden", "shape_hidden",
                     "refiner_width", "head_hidden", "batch_size", "n_samples", "heatmap_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.encoder_blocks < 0 or self.steps < 0:
            raise ConfigError("encoder_blocks and steps must be non-negative")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.heatmap_sigma <= 0 or self.softargmax_beta <= 0:
            raise ConfigError("heatmap_sigma and softargmax_beta must be positive")
        if len(self.lambdas) != 4:
            raise ConfigError("lambdas must have four entries")
        try:
            LossWeights(*self.lambdas)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        unknown = set(self.skip_terms) - set(MANO_TERMS)
        if unknown:
            raise ConfigError(f"unknown skip_terms {sorted(unknown)}")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(*self.lambdas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        d["skip_terms"] = list(self.skip_terms)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> PipelineConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def with_ablation(self, name: str) -> PipelineConfig:
        try:
            kind, gcn, attn = ABLATIONS[name]
        except KeyError:
            raise ConfigError(f"unknown ablation {name!r}; expected one of {list(ABLATIONS)}") from None
        return replace(self, encoder_kind=kind, use_gcn_layer=gcn, use_mutual_attention=attn)

    def updated(self, **changes) -> PipelineConfig:
        return replace(self, **changes)


def toy_config(**overrides) -> PipelineConfig:
    """Desk-scale settings used by the overfitting and ablation runs."""
    base = dict(toy_vertices=64, toy_joints=8, n_samples=8, steps=500, learning_rate=2e-3)
    base.update(overrides)
    return PipelineConfig(**base)

