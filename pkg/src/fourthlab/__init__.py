"""Numerical lab for ∂ₜy + Δ²y + Σ p_β ∂^β y: forward solves, weighted estimates, inverse source and continuation."""

from .config import RunConfig, default_config, load_config
from .geometry import Face, Grid, build_grid

__all__ = ["Face", "Grid", "RunConfig", "build_grid", "default_config", "load_config"]
__version__ = "0.1.0"
