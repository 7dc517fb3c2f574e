"""Run configuration: a YAML document validated against a strict schema.

Unknown keys are rejected so a misspelt tolerance cannot be silently ignored.
Every random draw needs a seed; a section without its own ``seed`` falls back
to the top-level ``seed``.
"""
from __future__ import annotations

from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, model_validator

from .geometry import AnchorSet, grid_anchors, random_anchors

Seed = Annotated[int, Field(ge=0, lt=2**64)]
Matrix = list[list[float]]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class AnchorConfig(Strict):
    points: Matrix | None = None
    generator: Literal["grid", "uniform"] | None = None
    n: int | None = Field(default=None, ge=1)
    d: int | None = Field(default=None, ge=1)
    spacing: float = Field(default=1.0, gt=0)
    box: float = Field(default=1.0, gt=0)
    seed: Seed | None = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.points is None) == (self.generator is None):
            raise ValueError("give exactly one of 'points' or 'generator'")
        if self.generator is not None and (self.n is None or self.d is None):
            raise ValueError("a generator needs 'n' and 'd'")
        return self


class RandomPoints(Strict):
    box: float = Field(default=1.0, gt=0)
    seed: Seed | None = None


PointsConfig = Union[Matrix, RandomPoints]


class Common(Strict):
    seed: Seed | None = None
    out: str | None = None
    figures: bool = True
    anchors: AnchorConfig


class MagConfig(Common):
    kind: Literal["mag"]
    position: PointsConfig
    velocity: PointsConfig | None = None  # at rest when omitted
    scheme: Literal["verlet", "piecewise_exact"] = "verlet"
    h: float = Field(default=1e-3, gt=0)
    steps: int = Field(default=1000, ge=1)
    theta_end: float | None = Field(default=None, gt=0)
    switch_tol: float = Field(default=1e-10, gt=0)
    solver: Literal["general", "sort"] = "general"


class FlowConfig(Common):
    kind: Literal["zeldovich"]
    position: PointsConfig
    scheme: Literal["exact_segment_gradient_flow", "euler_gradient_flow"] = "exact_segment_gradient_flow"
    h: float = Field(default=1e-3, gt=0)
    steps: int = Field(default=1000, ge=1)


class Gf0Config(Common):
    kind: Literal["gf0"]
    position: PointsConfig
    scheme: Literal["exact_segment_gradient_flow", "euler_gradient_flow"] = "exact_segment_gradient_flow"
    t0: float = Field(gt=0)
    t1: float = Field(gt=0)
    h: float = Field(default=1e-3, gt=0)

    @model_validator(mode="after")
    def _ordered(self):
        if self.t1 <= self.t0:
            raise ValueError("need t1 > t0")
        return self


class RateConfig(Common):
    kind: Literal["ldp-rate"]
    sigma0: list[int] | None = None
    target: PointsConfig
    t_star: float = Field(gt=0)
    eps_grid: list[float] = Field(default_factory=lambda: [10.0**-k for k in range(1, 7)], min_length=3)


class BridgeConfig(Common):
    kind: Literal["ldp-bridge"]
    sigma0: list[int] | None = None
    target: PointsConfig
    t_star: float = Field(gt=0)
    epsilon: float = Field(gt=0)
    n_bridges: int = Field(default=10_000, ge=1)
    n_steps: int = Field(default=100, ge=1)


class ActionConfig(Common):
    kind: Literal["action"]
    y0: PointsConfig
    y1: PointsConfig | None = None
    # when y1 is omitted it is the end point of a Verlet shot from y0 with this velocity
    velocity: PointsConfig | None = None
    theta0: float = 0.0
    theta1: float
    M: int = Field(default=256, ge=8)
    max_iters: int = Field(default=200, ge=0)
    tol: float = Field(default=1e-6, gt=0)

    @model_validator(mode="after")
    def _endpoint(self):
        if (self.y1 is None) == (self.velocity is None):
            raise ValueError("give exactly one of 'y1' or 'velocity'")
        if self.theta1 <= self.theta0:
            raise ValueError("need theta1 > theta0")
        return self


class VerifyConfig(Strict):
    kind: Literal["verify"]
    seed: Seed | None = None
    out: str | None = None
    figures: bool = False
    quick: bool = False
    only: list[str] | None = None


RunConfig = Annotated[
    Union[MagConfig, FlowConfig, Gf0Config, RateConfig, BridgeConfig, ActionConfig, VerifyConfig],
    Field(discriminator="kind"),
]
_adapter = TypeAdapter(RunConfig)


def _describe(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        # drop the discriminator tag pydantic inserts into the location
        loc = [str(p) for p in e["loc"][1:]] if len(e["loc"]) > 1 else [str(p) for p in e["loc"]]
        where = ".".join(loc) or "<root>"
        lines.append(f"{where}: {e['msg']}")
    return "; ".join(lines)


def parse(data) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>: configuration must be a mapping")
    if "kind" not in data:
        raise ConfigError("kind: field required")
    try:
        return _adapter.validate_python(data)
    except ValidationError as err:
        raise ConfigError(_describe(err)) from None


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"<root>: not valid YAML: {err}") from None
    return parse(data)


def _seed(own: int | None, fallback: int | None, where: str) -> int:
    seed = own if own is not None else fallback
    if seed is None:
        raise ConfigError(f"{where}.seed: required for random generation (or set a top-level seed)")
    return seed


def build_anchors(cfg: AnchorConfig, top_seed: int | None) -> AnchorSet:
    try:
        if cfg.points is not None:
            anchors = AnchorSet(np.array(cfg.points, dtype=np.float64))
        elif cfg.generator == "grid":
            anchors = grid_anchors(cfg.n, cfg.d, cfg.spacing)
        else:
            rng = np.random.default_rng(_seed(cfg.seed, top_seed, "anchors"))
            anchors = random_anchors(cfg.n, cfg.d, rng, cfg.box)
    except ValueError as err:  # includes GeometryError and ragged rows
        raise ConfigError(f"anchors: {err}") from None
    for name, value in (("n", cfg.n), ("d", cfg.d)):
        if cfg.points is not None and value is not None and value != getattr(anchors, name):
            raise ConfigError(f"anchors.{name}: {value} does not match the {getattr(anchors, name)} given points")
    return anchors


def build_points(cfg: PointsConfig, anchors: AnchorSet, top_seed: int | None, where: str,
                 stream: int) -> np.ndarray:
    """Explicit points, or uniform in ``[-box, box]`` from the section seed (``stream`` separates sections)."""
    if isinstance(cfg, RandomPoints):
        seed = _seed(cfg.seed, top_seed, where)
        rng = np.random.default_rng([seed, stream])
        return rng.uniform(-cfg.box, cfg.box, (anchors.n, anchors.d))
    try:
        x = np.array(cfg, dtype=np.float64)
    except ValueError:
        raise ConfigError(f"{where}: rows must all have the same length") from None
    if x.shape != (anchors.n, anchors.d):
        raise ConfigError(f"{where}: expected shape ({anchors.n}, {anchors.d}), got {x.shape}")
    return x


def build_permutation(sigma: list[int] | None, anchors: AnchorSet, where: str = "sigma0") -> np.ndarray:
    if sigma is None:
        return np.arange(anchors.n)
    if sorted(sigma) != list(range(anchors.n)):
        raise ConfigError(f"{where}: not a permutation of 0..{anchors.n - 1}")
    return np.array(sigma, dtype=np.intp)
