"""
Run configuration: YAML files validated by pydantic models, one section per module.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

Interval = tuple[float, float]


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _check_box(box: list[Interval], name: str) -> list[Interval]:
    for lo, hi in box:
        if not hi > lo:
            raise ValueError(f"{name}: empty interval ({lo}, {hi})")
    return box


class ForwardConfig(Section):
    space_nodes: list[int] = Field(min_length=3)
    space_Nt: int = Field(gt=0)
    space_T: float = Field(gt=0)
    time_nodes: int = Field(ge=8)
    time_Nt: list[int] = Field(min_length=3)
    T: float = Field(gt=0)
    spectral_nodes: list[int] = Field(min_length=2)
    spectral_modes: list[int] = Field(min_length=1)
    symmetry_shape: list[int] = Field(min_length=1, max_length=2)
    symmetry_pairs: int = Field(ge=1)
    space_order: Interval = (1.7, 2.3)
    time_order: Interval = (0.8, 1.2)
    symmetry_tol: float = 1e-10
    solver: Literal["direct", "cg"] = "direct"


class EnergyConfig(Section):
    nodes: list[int] = Field(min_length=2)
    Nt: list[int] = Field(min_length=2)
    s_values: list[float] = Field(min_length=1)
    identity_tol: float = 0.01
    stability_tol: float = 0.25

    @model_validator(mode="after")
    def _pairs(self):
        if len(self.nodes) != len(self.Nt):
            raise ValueError("nodes and Nt must have the same length")
        return self


class CarlemanConfig(Section):
    extents: list[Interval]
    nodes: list[int]
    T: float = Field(gt=0)
    Nt: int = Field(gt=0)
    omega: list[Interval]
    lam: float = Field(gt=0)
    tau: float = Field(gt=0)
    t0: Optional[float] = None
    s_min: float = Field(gt=0)
    per_decade: int = Field(default=4, ge=1)
    c_res: float = Field(default=2.0, gt=0)
    rise: float = Field(default=1.2, gt=1)
    min_above: int = Field(default=5, ge=1)
    suite_size: int = Field(default=10, ge=3)
    margin: int = Field(default=1, ge=1)
    weight_s_values: list[float] = Field(default=[1.0, 10.0, 100.0, 1000.0], min_length=2)
    collapse_s_values: list[float] = Field(min_length=2)
    collapse_ratio: float = 0.01
    energy: EnergyConfig

    @field_validator("extents", "omega")
    @classmethod
    def _box(cls, v, info):
        return _check_box(v, info.field_name)

    @model_validator(mode="after")
    def _window(self):
        if len(self.extents) != len(self.nodes) or len(self.omega) != len(self.nodes):
            raise ValueError("extents, nodes and omega must share the dimension")
        t0 = self.window_centre
        if not (t0 - self.tau > 0 and t0 + self.tau < self.T):
            raise ValueError(f"window (t0 - tau, t0 + tau) = ({t0 - self.tau}, {t0 + self.tau}) must lie inside (0, T)")
        return self

    @property
    def window_centre(self) -> float:
        return 0.5 * self.T if self.t0 is None else self.t0


class InverseConfig(Section):
    extents: list[Interval]
    nodes: list[int]
    coarse_nodes: list[int]
    T: float = Field(gt=0)
    Nt: int = Field(gt=0)
    omega: list[Interval]
    theta: Optional[float] = None
    t1: Optional[float] = None
    regs: list[float] = Field(min_length=2)
    ensemble: int = Field(default=20, ge=20)
    modes: int = Field(default=8, ge=1)
    direct_tol: float = 0.05
    tikhonov_tol: float = 0.10
    adjoint_tol: float = 1e-8
    grid_tol: float = 0.25
    # ρ(c·f) = ρ(f) up to round-off amplified by the 1/h⁴ fourth-difference stencil in the H⁴ term
    homogeneity_tol: float = 1e-8

    @field_validator("extents", "omega")
    @classmethod
    def _box(cls, v, info):
        return _check_box(v, info.field_name)

    @model_validator(mode="after")
    def _window(self):
        theta = 0.5 * self.T if self.theta is None else self.theta
        t1 = 0.25 * self.T if self.t1 is None else self.t1
        if not (0 < theta - t1 and theta + t1 < self.T):
            raise ValueError(f"need 0 < theta - t1 < theta + t1 < T (theta={theta}, t1={t1}, T={self.T})")
        if any(r <= 0 for r in self.regs):
            raise ValueError("regs must be positive")
        return self


class GammaConfig(Section):
    axis: int = Field(ge=0, le=1)
    side: Literal["low", "high"]


class ContinuationConfig(Section):
    extents: list[Interval]
    nodes: list[int]
    T: float = Field(gt=0)
    Nt: int = Field(gt=0)
    gamma: GammaConfig
    pad: float = Field(gt=0)
    omega0: list[Interval]
    eps: float = Field(gt=0)
    tau: Optional[float] = Field(default=None, gt=0)
    s: float = Field(gt=0)
    lam_min: float = Field(gt=0)
    lam_cap: float = Field(gt=0)
    reg: float = Field(ge=0)
    reg_per_noise: float = Field(gt=0)
    noise_levels: list[float] = Field(min_length=5)
    s_table: list[float] = Field(min_length=2)
    kappa_max: float = 1.05
    r2_min: float = 0.9
    knee_factor: float = 2.0
    accuracy_tol: float = 0.10
    uniqueness_factor: float = 10.0

    @field_validator("extents", "omega0")
    @classmethod
    def _box(cls, v, info):
        return _check_box(v, info.field_name)

    @model_validator(mode="after")
    def _window(self):
        tau = self.window_tau
        if not self.eps > tau:
            raise ValueError(f"window violates eps > tau (eps={self.eps}, tau={tau})")
        if not 2 * self.eps < self.T:
            raise ValueError(f"eps={self.eps} leaves no interval (eps, T - eps) for T={self.T}")
        if self.lam_cap < self.lam_min:
            raise ValueError("lam_cap must be at least lam_min")
        if any(not 0 < x < 1 for x in self.noise_levels):
            raise ValueError("noise_levels are relative to the clean data size and must lie in (0, 1)")
        return self

    @property
    def window_tau(self) -> float:
        return 0.5 * self.eps if self.tau is None else self.tau


class RunConfig(Section):
    seed: int = Field(default=0, ge=0)
    forward: ForwardConfig
    carleman: CarlemanConfig
    inverse_source: InverseConfig
    continuation: ContinuationConfig

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        return self if seed is None else self.model_copy(update={"seed": int(seed)})


class ConfigError(ValueError):
    """Schema violation; the message lists the dotted path of every offending field."""


def format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "\n".join(lines)


def parse_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>: config must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(format_validation_error(exc)) from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return parse_config(data)


def default_config_path(name: str = "default_1d.yaml") -> Path:
    return Path(str(resources.files("fourthlab") / "configs" / name))


def default_config() -> RunConfig:
    return load_config(default_config_path())
