"""The frozen density network the occupancy head attaches to.

Architecture: Fourier encoding -> 8 fully connected 128-unit ReLU layers
-> 1-unit linear readout, rectified by softplus into a non-negative
density. It stands in for a scene representation trained elsewhere:
here it is pretrained by direct regression of an indicator-style target
(a constant inside geometry, zero outside), after which its weights are
never touched again.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import DivergenceError, DomainError, StructureError
from .scenes import AnalyticScene, DensityGrid, sample_surface_points, scene_contains

TRUNK_DEPTH = 8
TRUNK_WIDTH = 128


@dataclass
class DensityBackbone:
    encoding: nn.PositionalEncoding
    net: nn.MlpNetwork  # 8 hidden relu layers + 1-unit identity readout

    def __post_init__(self):
        hidden = self.net.layers[:-1]
        if len(hidden) != TRUNK_DEPTH:
            raise StructureError(f"trunk depth must be {TRUNK_DEPTH}, got {len(hidden)}")
        if any(l.rows != TRUNK_WIDTH or l.activation != "relu" for l in hidden):
            raise StructureError(f"hidden layers must be {TRUNK_WIDTH}-unit relu")
        readout = self.net.layers[-1]
        if readout.rows != 1 or readout.activation != "identity":
            raise StructureError("density readout must be a 1-unit identity layer")

    def trunk(self, depth: int) -> nn.MlpNetwork:
        """First ``depth`` hidden layers as a shared-parameter subnetwork."""
        if not 1 <= depth <= TRUNK_DEPTH:
            raise DomainError(f"attachment depth {depth} outside 1..{TRUNK_DEPTH}")
        return nn.subnetwork(self.net, depth)


def build_backbone(encoding: nn.PositionalEncoding, rng: np.random.Generator) -> DensityBackbone:
    specs = [(TRUNK_WIDTH, "relu")] * TRUNK_DEPTH + [(1, "identity")]
    net = nn.build_network(encoding.output_dim(3), specs, rng)
    return DensityBackbone(encoding=encoding, net=net)


def _check_cube(q: np.ndarray) -> None:
    if np.any(np.abs(q) > 1.0) or not np.all(np.isfinite(q)):
        raise DomainError("density queries must lie in [-1, 1]^3")


def density(backbone: DensityBackbone, q) -> np.ndarray:
    """Non-negative density at a point or (n, 3) batch inside the cube."""
    arr = np.asarray(q, dtype=float)
    _check_cube(arr)
    out, _ = nn.forward(backbone.net, nn.encode(arr, backbone.encoding))
    return nn.softplus(out[..., 0])


def truncated_features(backbone: DensityBackbone, depth: int, q) -> np.ndarray:
    """Layer-``depth`` activations for a point or batch (no tape kept)."""
    trunk = backbone.trunk(depth)
    out, _ = nn.forward(trunk, nn.encode(np.asarray(q, dtype=float), backbone.encoding))
    return out


def truncate(backbone: DensityBackbone, depth: int):
    """Feature function q -> 128-vector of layer-``depth`` activations."""
    trunk = backbone.trunk(depth)

    def features(q):
        out, _ = nn.forward(trunk, nn.encode(np.asarray(q, dtype=float), backbone.encoding))
        return out

    return features


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    target_scene: AnalyticScene | None = None
    target_grid: DensityGrid | None = None
    occupied_density: float = 10.0   # regression target inside geometry
    target_falloff: float = 0.12     # e-folding of the target outside; 0 = hard indicator
    steps: int = 8000                # one fresh batch per step
    batch_size: int = 512
    learning_rate: float = 3e-3
    boundary_fraction: float = 0.0   # share of each batch drawn near surfaces
    boundary_sigma: float = 0.1      # normal jitter applied to surface points
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise DomainError("pretrain steps and batch size must be >= 1")
        if not 0.0 <= self.boundary_fraction < 1.0:
            raise DomainError("boundary fraction must lie in [0, 1)")
        if self.target_falloff < 0:
            raise DomainError("target falloff must be non-negative")
        if (self.target_scene is None) == (self.target_grid is None):
            raise DomainError("exactly one of target_scene / target_grid is required")


@dataclass
class PretrainReport:
    losses: np.ndarray
    config: PretrainConfig = field(repr=False, default=None)


def _pretrain_batch(cfg: PretrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform cube points, partly replaced by jittered surface points so the
    supervision concentrates where the density transitions."""
    pts = rng.uniform(-1.0, 1.0, size=(cfg.batch_size, 3))
    n_boundary = int(cfg.batch_size * cfg.boundary_fraction)
    if cfg.target_scene is not None and n_boundary:
        surface = sample_surface_points(cfg.target_scene, n_boundary, rng)
        surface += rng.normal(scale=cfg.boundary_sigma, size=surface.shape)
        pts[:n_boundary] = np.clip(surface, -1.0, 1.0)
    return pts


def pretrain(backbone: DensityBackbone, cfg: PretrainConfig) -> PretrainReport:
    """MSE-regress the density onto the indicator target. Mutates the backbone."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    params = backbone.net.parameters()
    state = nn.init_adam(params, learning_rate=cfg.learning_rate)
    losses = np.empty(cfg.steps)
    for step in range(cfg.steps):
        pts = _pretrain_batch(cfg, rng)
        if cfg.target_scene is not None:
            if cfg.target_falloff > 0:
                # exp falloff keeps the field thresholdable but distance-aware
                target = cfg.occupied_density * np.exp(
                    -scene_distance(cfg.target_scene, pts) / cfg.target_falloff)
            else:
                target = np.where(scene_contains(cfg.target_scene, pts),
                                  cfg.occupied_density, 0.0)
        else:
            target = cfg.target_grid.value_at(pts)
        out, tape = nn.forward(backbone.net, nn.encode(pts, backbone.encoding))
        pre = out[:, 0]
        sigma = nn.softplus(pre)
        resid = sigma - target
        loss = float(np.mean(resid * resid))
        if not np.isfinite(loss):
            raise DivergenceError(f"pretraining diverged at step {step}")
        losses[step] = loss
        # d(mean resid^2)/d(pre) = 2/n * resid * softplus'(pre)
        seed_grad = (2.0 / cfg.batch_size) * resid * nn.sigmoid(pre)
        _, grads = nn.backward(tape, seed_grad[:, None])
        nn.adam_step(params, grads, state)
    return PretrainReport(losses=losses, config=cfg)
