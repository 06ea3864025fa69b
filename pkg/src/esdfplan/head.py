"""Radius-conditioned occupancy head on a frozen, truncated backbone.

The head reads the activations of trunk layer ``depth``, embeds the query
radius through a small ReLU layer, concatenates, and produces a single
logit z whose sigmoid is

    lambda(q, r) = P(obstacle within r of q).

Only the radius embedding and the output layer train (binary cross
entropy against kd-tree occupancy labels); the backbone never changes.
Beyond classification the logit doubles as geometry: -z at a fixed
radius behaves like a distance field up to an affine transform, and one
reverse pass through the whole stack yields its spatial gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .backbone import TRUNK_WIDTH, DensityBackbone, truncated_features
from .errors import DivergenceError, DomainError
from .scenes import (
    AnalyticScene,
    OccupancyOracle,
    SliceSpec,
    generate_samples,
    ground_truth_esdf_slice,
    scene_distance,
)

QUERY_RADIUS_MAX = 0.5
DEFAULT_R_FIXED = 0.05
DEFAULT_EMBED_DIM = 16


@dataclass
class HeadModel:
    backbone: DensityBackbone
    depth: int
    radius_embed: nn.Layer   # (embed_dim, 1), relu
    output: nn.Layer         # (1, trunk_width + embed_dim), identity
    r_fixed: float = DEFAULT_R_FIXED
    feature_scale: float = 1.0  # fixed conditioning constant, folded away on save

    @property
    def embed_dim(self) -> int:
        return self.radius_embed.rows

    def trainable_parameters(self) -> list[np.ndarray]:
        return [self.radius_embed.weights, self.radius_embed.bias,
                self.output.weights, self.output.bias]

    def folded_output(self) -> nn.Layer:
        """Output layer with the feature scale absorbed into its weights.

        Checkpoints store this folded form, so a reloaded head computes the
        same function with feature_scale 1.
        """
        w = self.output.weights.copy()
        w[:, :TRUNK_WIDTH] *= self.feature_scale
        return nn.Layer(weights=w, bias=self.output.bias.copy(), activation="identity")


def build_head(backbone: DensityBackbone, depth: int, rng: np.random.Generator,
               embed_dim: int = DEFAULT_EMBED_DIM,
               r_fixed: float = DEFAULT_R_FIXED) -> HeadModel:
    """Fresh head; deeper trunk activations grow in magnitude, so the feature
    block is normalized by its RMS over a seeded pilot batch (an optimizer
    conditioning constant, not a trained parameter)."""
    backbone.trunk(depth)  # validates the depth range
    radius_embed = nn.glorot_layer(embed_dim, 1, "relu", rng)
    output = nn.glorot_layer(1, TRUNK_WIDTH + embed_dim, "identity", rng)
    pilot = np.random.default_rng(np.random.SeedSequence(0x70696c6f)).uniform(
        -1.0, 1.0, size=(512, 3))
    rms = float(np.sqrt(np.mean(truncated_features(backbone, depth, pilot) ** 2)))
    scale = 1.0 / rms if rms > 0 else 1.0
    return HeadModel(backbone=backbone, depth=depth, radius_embed=radius_embed,
                     output=output, r_fixed=r_fixed, feature_scale=scale)


def _check_query(q: np.ndarray, r: np.ndarray) -> None:
    if np.any(np.abs(q) > 1.0) or not np.all(np.isfinite(q)):
        raise DomainError("query position must lie in [-1, 1]^3")
    if np.any(r <= 0.0) or np.any(r > QUERY_RADIUS_MAX):
        raise DomainError(f"query radius must lie in (0, {QUERY_RADIUS_MAX}]")


def _head_logits(head: HeadModel, feats: np.ndarray, radii: np.ndarray) -> np.ndarray:
    z_ir = radii[:, None] @ head.radius_embed.weights.T + head.radius_embed.bias
    embed = np.maximum(z_ir, 0.0)
    stacked = np.concatenate([head.feature_scale * feats, embed], axis=-1)
    return (stacked @ head.output.weights.T + head.output.bias)[:, 0]


def logits(head: HeadModel, positions, radii) -> np.ndarray:
    """Pre-sigmoid outputs for an (n, 3) batch and (n,) radii."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (positions.shape[0],))
    _check_query(positions, radii)
    feats = truncated_features(head.backbone, head.depth, positions)
    return _head_logits(head, feats, radii)


def predict_lambda(head: HeadModel, q, r: float) -> float:
    """P(obstacle within r of q) for a single query."""
    return float(nn.sigmoid(logits(head, q, r))[0])


def esdf_logit(head: HeadModel, q, r: float | None = None) -> np.ndarray:
    """Pseudo-distance: -1 x the raw logit at a fixed radius.

    Larger values are farther from geometry. Accepts a point or a batch.
    """
    rr = head.r_fixed if r is None else r
    out = -logits(head, q, rr)
    return float(out[0]) if np.asarray(q).ndim == 1 else out


def logit_with_tape(head: HeadModel, q, r: float | None = None):
    """Single-query forward that keeps the trunk tape for one backward pass."""
    rr = head.r_fixed if r is None else r
    q = np.asarray(q, dtype=float)
    _check_query(q[None, :], np.asarray([rr]))
    enc = nn.encode(q, head.backbone.encoding)
    feats, tape = nn.forward(head.backbone.trunk(head.depth), enc)
    z_ir = head.radius_embed.weights[:, 0] * rr + head.radius_embed.bias
    embed = np.maximum(z_ir, 0.0)
    z = float(head.output.weights[0, :TRUNK_WIDTH] @ (head.feature_scale * feats)
              + head.output.weights[0, TRUNK_WIDTH:] @ embed
              + head.output.bias[0])
    return z, tape


def gradient_from_tape(head: HeadModel, q, tape: nn.Tape, z: float,
                       wrt: str = "logit") -> np.ndarray:
    """Finish the reverse pass started by :func:`logit_with_tape`.

    Returns grad of d = -logit w.r.t. q (or the post-sigmoid variant,
    which shares direction and is scaled by lambda(1-lambda)).
    """
    grad_feats = head.feature_scale * head.output.weights[0, :TRUNK_WIDTH]
    grad_enc, _ = nn.backward(tape, grad_feats)
    grad_q = nn.encode_vjp(np.asarray(q, dtype=float), grad_enc, head.backbone.encoding)
    if wrt == "lambda":
        lam = float(nn.sigmoid(np.asarray(z)))
        grad_q = grad_q * (lam * (1.0 - lam))
    elif wrt != "logit":
        raise DomainError(f"wrt must be 'logit' or 'lambda', got {wrt!r}")
    return -grad_q


def obstacle_gradient(head: HeadModel, q, r: float | None = None,
                      wrt: str = "logit") -> np.ndarray:
    """Gradient of the pseudo-distance via one forward and one backward pass."""
    z, tape = logit_with_tape(head, q, r)
    return gradient_from_tape(head, q, tape, z, wrt=wrt)


# ---------------------------------------------------------------------------
# Binary cross entropy
# ---------------------------------------------------------------------------

def bce_loss_logits(z, labels) -> float:
    """Sum BCE straight from logits: max(z,0) - y*z + log1p(exp(-|z|))."""
    z = np.asarray(z, dtype=float)
    y = np.asarray(labels, dtype=float)
    if z.size == 0:
        raise DomainError("empty batch")
    return float(np.sum(np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))))


def bce_loss(lambdas, labels) -> float:
    """Sum of -[y log(lam) + (1-y) log(1-lam)], evaluated in logit form."""
    lam = np.asarray(lambdas, dtype=float)
    if lam.size == 0:
        raise DomainError("empty batch")
    if np.any(lam <= 0.0) or np.any(lam >= 1.0):
        raise DomainError("predictions must lie strictly inside (0, 1)")
    z = np.log(lam) - np.log1p(-lam)
    return bce_loss_logits(z, labels)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class HeadTrainConfig:
    epochs: int = 300          # desk-scale default; the full schedule is 2500
    batch_size: int = 1000
    learning_rate: float = 1e-3
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch size must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise DomainError("validation fraction must lie in (0, 1)")


@dataclass
class TrainReport:
    train_loss: np.ndarray
    val_loss: np.ndarray
    val_accuracy: np.ndarray
    epochs: int
    batch_size: int
    seed: int

    @property
    def final_accuracy(self) -> float:
        """Mean validation accuracy over the last (up to) 100 epochs."""
        tail = min(100, len(self.val_accuracy))
        return float(np.mean(self.val_accuracy[-tail:]))


def train_head(head: HeadModel, oracle: OccupancyOracle,
               cfg: HeadTrainConfig) -> TrainReport:
    """BCE-train the radius embedding and output layer; backbone untouched.

    Every epoch draws one fresh batch of samples plus a disjoint validation
    draw; nothing is reused between epochs.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x68656164]))
    val_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x76616c69]))
    n_val = max(1, int(round(cfg.batch_size * cfg.validation_fraction)))
    params = head.trainable_parameters()
    state = nn.init_adam(params, learning_rate=cfg.learning_rate)
    track = np.empty((3, cfg.epochs))
    for epoch in range(cfg.epochs):
        batch = generate_samples(oracle, cfg.batch_size, rng)
        feats = truncated_features(head.backbone, head.depth, batch.positions)
        z_ir = batch.radii[:, None] @ head.radius_embed.weights.T + head.radius_embed.bias
        embed = np.maximum(z_ir, 0.0)
        stacked = np.concatenate([head.feature_scale * feats, embed], axis=-1)
        z = (stacked @ head.output.weights.T + head.output.bias)[:, 0]
        loss = bce_loss_logits(z, batch.labels)
        if not np.isfinite(loss):
            raise DivergenceError(f"head training diverged at epoch {epoch}")
        dz = (nn.sigmoid(z) - batch.labels)[:, None]
        d_out_w = dz.T @ stacked
        d_out_b = dz.sum(axis=0)
        d_embed = (dz @ head.output.weights)[:, TRUNK_WIDTH:]
        dz_ir = d_embed * (z_ir > 0.0)
        d_ir_w = dz_ir.T @ batch.radii[:, None]
        d_ir_b = dz_ir.sum(axis=0)
        nn.adam_step(params, [d_ir_w, d_ir_b, d_out_w, d_out_b], state)

        val = generate_samples(oracle, n_val, val_rng)
        vz = _head_logits(head, truncated_features(head.backbone, head.depth, val.positions),
                          val.radii)
        track[0, epoch] = loss
        track[1, epoch] = bce_loss_logits(vz, val.labels)
        track[2, epoch] = float(np.mean((vz > 0.0) == (val.labels == 1)))
    return TrainReport(train_loss=track[0].copy(), val_loss=track[1].copy(),
                       val_accuracy=track[2].copy(), epochs=cfg.epochs,
                       batch_size=cfg.batch_size, seed=cfg.seed)


def evaluate_accuracy(head: HeadModel, oracle: OccupancyOracle, count: int,
                      seed: int) -> float:
    """Accuracy of lambda > 0.5 against oracle labels on a fresh sample set."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6576616c]))
    batch = generate_samples(oracle, count, rng)
    z = logits(head, batch.positions, batch.radii)
    return float(np.mean((z > 0.0) == (batch.labels == 1)))


def depth_sweep(backbone: DensityBackbone, oracle: OccupancyOracle,
                cfg: HeadTrainConfig, depths=range(1, 9),
                eval_count: int = 10_000) -> dict[int, tuple[HeadModel, TrainReport, float]]:
    """Train one head per attachment depth with identical budget and seed.

    Returns depth -> (head, report, held-out accuracy).
    """
    out = {}
    for depth in depths:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, depth]))
        head = build_head(backbone, depth, rng)
        report = train_head(head, oracle, cfg)
        acc = evaluate_accuracy(head, oracle, eval_count, cfg.seed)
        out[depth] = (head, report, acc)
    return out


# ---------------------------------------------------------------------------
# Distance-field evaluation and calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EsdfCalibration:
    scale: float   # must be positive for a usable field
    offset: float

    def apply(self, raw):
        return self.scale * np.asarray(raw, dtype=float) + self.offset


def fit_calibration(raw, reference) -> EsdfCalibration:
    """Least-squares affine map from raw pseudo-distances to metric distances."""
    raw = np.asarray(raw, dtype=float).ravel()
    ref = np.asarray(reference, dtype=float).ravel()
    design = np.column_stack([raw, np.ones_like(raw)])
    (a, b), *_ = np.linalg.lstsq(design, ref, rcond=None)
    return EsdfCalibration(scale=float(a), offset=float(b))


def normalized_mae(raw, reference) -> tuple[float, EsdfCalibration]:
    """Affine-calibrate ``raw`` onto ``reference``, map both onto [0, 1] by the
    reference min/max, and return the mean absolute error.

    Normalizing both fields by the same (reference) range keeps a degenerate
    predictor exactly equivalent to the constant-mean predictor.
    """
    ref = np.asarray(reference, dtype=float).ravel()
    span = float(ref.max() - ref.min())
    if span <= 0:
        raise DomainError("reference field is constant; nothing to normalize")
    calib = fit_calibration(raw, ref)
    err = np.abs(calib.apply(np.asarray(raw).ravel()) - ref)
    return float(np.mean(err) / span), calib


@dataclass
class SliceEvaluation:
    mae: float
    calibration: EsdfCalibration
    predicted: np.ndarray      # calibrated, (n, n)
    ground_truth: np.ndarray   # (n, n)
    free_mask: np.ndarray      # (n, n) boolean, ground truth > 0


def evaluate_esdf_slice(head: HeadModel, scene: AnalyticScene, spec: SliceSpec,
                        r: float | None = None) -> SliceEvaluation:
    """Fig-style slice comparison: free-space MAE after calibration, both
    fields normalized by the ground-truth range."""
    gt = ground_truth_esdf_slice(scene, spec)
    pts = spec.lattice()
    raw = esdf_logit(head, pts, r).reshape(gt.shape)
    mask = gt > 0.0
    mae, calib = normalized_mae(raw[mask], gt[mask])
    return SliceEvaluation(mae=mae, calibration=calib, predicted=calib.apply(raw),
                           ground_truth=gt, free_mask=mask)


def calibrate_head(head: HeadModel, scene: AnalyticScene, probe_count: int = 4096,
                   seed: int = 0, r: float | None = None) -> EsdfCalibration:
    """Fit the affine map on random free-space probes."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x63616c69]))
    pts = rng.uniform(-1.0, 1.0, size=(probe_count, 3))
    gt = scene_distance(scene, pts)
    free = gt > 0.0
    raw = esdf_logit(head, pts[free], r)
    return fit_calibration(raw, gt[free])


# ---------------------------------------------------------------------------
# Naive MSE baseline
# ---------------------------------------------------------------------------

@dataclass
class NaiveEsdfRegressor:
    backbone: DensityBackbone
    depth: int
    output: nn.Layer  # (1, trunk_width), identity

    def predict(self, positions) -> np.ndarray:
        feats = truncated_features(self.backbone, self.depth,
                                   np.atleast_2d(np.asarray(positions, dtype=float)))
        return (feats @ self.output.weights.T + self.output.bias)[:, 0]


def naive_esdf_baseline(backbone: DensityBackbone, scene: AnalyticScene,
                        cfg: HeadTrainConfig, depth: int,
                        spec: SliceSpec | None = None) -> tuple[NaiveEsdfRegressor, float]:
    """Same truncated features, but a plain linear readout regressed with MSE
    onto the true distance. Evaluated with the identical slice protocol."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x6e616976]))
    reg = NaiveEsdfRegressor(backbone=backbone, depth=depth,
                             output=nn.glorot_layer(1, TRUNK_WIDTH, "identity", rng))
    params = [reg.output.weights, reg.output.bias]
    state = nn.init_adam(params, learning_rate=cfg.learning_rate)
    for epoch in range(cfg.epochs):
        pts = rng.uniform(-1.0, 1.0, size=(cfg.batch_size, 3))
        target = scene_distance(scene, pts)
        feats = truncated_features(backbone, depth, pts)
        pred = (feats @ reg.output.weights.T + reg.output.bias)[:, 0]
        resid = pred - target
        loss = float(np.mean(resid * resid))
        if not np.isfinite(loss):
            raise DivergenceError(f"naive baseline diverged at epoch {epoch}")
        dz = (2.0 / cfg.batch_size) * resid[:, None]
        nn.adam_step(params, [dz.T @ feats, dz.sum(axis=0)], state)
    mae = naive_slice_mae(reg, scene, spec or SliceSpec())
    return reg, mae


def naive_slice_mae(reg: NaiveEsdfRegressor, scene: AnalyticScene,
                    spec: SliceSpec) -> float:
    gt = ground_truth_esdf_slice(scene, spec)
    pred = reg.predict(spec.lattice()).reshape(gt.shape)
    mask = gt > 0.0
    mae, _ = normalized_mae(pred[mask], gt[mask])
    return mae
