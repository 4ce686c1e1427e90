"""Five counterfactual generators over a calibrated competency estimator.

Three are iterative: gradient descent on a competency-plus-similarity loss
over image pixels (perceptual penalty), over image pixels with a frozen
feature-space penalty, and over the autoencoder latent. Two are one-shot:
the plain reconstruction, and the nearest calibration latent. All five are
deterministic given models, calibration, config, and input.

The descent loop stops at the first iterate whose competency clears the
threshold and returns it; if the threshold is never reached it returns the
lowest-loss iterate seen with valid=False, which keeps the output usable
downstream.
"""

from __future__ import annotations

import dataclasses
import time
import warnings

import numpy as np
import torch

from .competency import CompetencyEstimator, competency
from .errors import ConfigError, NumericalError, OptimizationError
from .metrics import perceptual_loss_t
from .models import image_to_tensor, tensor_to_image

METHODS = ("IGD", "FGD", "Reco", "LGD", "LNN")


@dataclasses.dataclass
class GeneratorConfig:
    """Knobs for the iterative generators; defaults tuned on the toy models."""

    gamma_image: float = 1.0  # pixel-space similarity weight
    gamma_feature: float = 0.1  # feature-space similarity weight
    gamma_latent: float = 0.1  # latent-space similarity weight
    step_size_image: float = 0.3
    step_size_latent: float = 0.3
    max_iters: int = 500
    competency_threshold: float | None = None  # None inherits the estimator's
    image_distance: str = "perceptual"
    feature_distance: str = "cosine"
    latent_distance: str = "cosine"
    neighbor_norm: str = "l1"
    seed: int = 0

    def validate(self) -> None:
        if min(self.gamma_image, self.gamma_feature, self.gamma_latent) < 0:
            raise ConfigError("gamma weights must be non-negative")
        if self.step_size_image <= 0 or self.step_size_latent <= 0:
            raise ConfigError("step sizes must be positive")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be at least 1")
        if self.competency_threshold is not None and not 0 < self.competency_threshold < 1:
            raise ConfigError("competency_threshold must lie in (0,1)")
        if self.image_distance != "perceptual":
            raise ConfigError(f"unsupported image distance: {self.image_distance!r}")
        if self.feature_distance != "cosine" or self.latent_distance != "cosine":
            raise ConfigError("only cosine feature/latent distances are supported")
        if self.neighbor_norm not in ("l1", "l2"):
            raise ConfigError(f"unsupported neighbor norm: {self.neighbor_norm!r}")

    def snapshot(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class CounterfactualResult:
    counterfactual: np.ndarray
    competency: float
    valid: bool
    iterations_used: int
    wall_time_seconds: float
    method: str
    loss_trace: list[float]
    config: dict

    def to_record(self) -> dict:
        return {"method": self.method, "competency": self.competency,
                "valid": self.valid, "iterations": self.iterations_used,
                "wall_time_seconds": self.wall_time_seconds,
                "config": self.config, "loss_trace": self.loss_trace}


def _threshold(est: CompetencyEstimator, cfg: GeneratorConfig | None) -> float:
    if cfg is not None and cfg.competency_threshold is not None:
        return cfg.competency_threshold
    return est.threshold


def _cosine_gap_t(ref: torch.Tensor, cur: torch.Tensor) -> torch.Tensor:
    """1 - cosine similarity; zero at identical vectors, gradient-safe."""
    ref = ref.reshape(-1)
    cur = cur.reshape(-1)
    denom = (ref.norm() * cur.norm()).clamp_min(1e-12)
    return 1.0 - (ref @ cur) / denom


def _finalize(est, x_np, method, iters, trace, cfg_snap, t0) -> CounterfactualResult:
    score = competency(est, x_np)
    thr = est.threshold if cfg_snap.get("competency_threshold") is None \
        else cfg_snap["competency_threshold"]
    return CounterfactualResult(
        counterfactual=x_np, competency=score, valid=bool(score >= thr),
        iterations_used=iters, wall_time_seconds=time.perf_counter() - t0,
        method=method, loss_trace=trace, config=cfg_snap)


def _descend(est, var0: torch.Tensor, loss_fn, score_fn, to_image, step: float,
             cfg: GeneratorConfig, thr: float, method: str, t0: float,
             clamp: bool) -> CounterfactualResult:
    """Shared fixed-step descent with first-crossing stop and best-iterate fallback."""
    var = var0.clone()
    best_loss = np.inf
    best_var = var.detach().clone()
    trace: list[float] = []
    for it in range(cfg.max_iters + 1):
        var = var.detach().requires_grad_(True)
        score_t = score_fn(var)
        loss_t = -score_t + loss_fn(var)
        loss = float(loss_t.detach())
        if not np.isfinite(loss):
            raise OptimizationError(f"{method}: non-finite loss at iteration {it}",
                                    loss_trace=trace + [loss])
        trace.append(loss)
        if float(score_t.detach()) >= thr:
            return _finalize(est, to_image(var), method, it, trace, cfg.snapshot(), t0)
        if loss < best_loss:
            best_loss = loss
            best_var = var.detach().clone()
        if it == cfg.max_iters:
            break
        (grad,) = torch.autograd.grad(loss_t.sum(), var)
        if not torch.isfinite(grad).all():
            raise OptimizationError(f"{method}: non-finite gradient at iteration {it}",
                                    loss_trace=trace)
        with torch.no_grad():
            var = var - step * grad
            if clamp:
                var = var.clamp(0.0, 1.0)
    return _finalize(est, to_image(best_var), method, cfg.max_iters, trace,
                     cfg.snapshot(), t0)


def _pixel_method(x, est, cfg, method: str, penalty_builder) -> CounterfactualResult:
    cfg = cfg or GeneratorConfig()
    cfg.validate()
    est.require_calibrated()
    t0 = time.perf_counter()
    thr = _threshold(est, cfg)
    x0 = image_to_tensor(np.asarray(x, dtype=np.float32))
    score0 = competency(est, x)
    if score0 >= thr:
        warnings.warn(f"{method}: input already scores {score0:.3f} >= threshold; "
                      "returning it unchanged")
        return CounterfactualResult(
            counterfactual=np.asarray(x, dtype=np.float32).copy(), competency=score0,
            valid=True, iterations_used=0,
            wall_time_seconds=time.perf_counter() - t0, method=method,
            loss_trace=[], config=cfg.snapshot())
    penalty = penalty_builder(x0)
    return _descend(
        est, x0, penalty, lambda v: est.competency_t(v)[0],
        lambda v: tensor_to_image(v.detach()[0]), cfg.step_size_image, cfg, thr,
        method, t0, clamp=True)


def igd(x: np.ndarray, est: CompetencyEstimator,
        cfg: GeneratorConfig | None = None) -> CounterfactualResult:
    """Pixel-space descent with a perceptual-distance similarity penalty."""
    def build(x0):
        gamma = (cfg or GeneratorConfig()).gamma_image
        return lambda v: gamma * perceptual_loss_t(x0, v)[0]
    return _pixel_method(x, est, cfg, "IGD", build)


def fgd(x: np.ndarray, est: CompetencyEstimator,
        cfg: GeneratorConfig | None = None) -> CounterfactualResult:
    """Pixel-space descent penalized by feature-space cosine gap; features frozen."""
    def build(x0):
        gamma = (cfg or GeneratorConfig()).gamma_feature
        with torch.no_grad():
            f0 = est.classifier.features_t(x0)
        return lambda v: gamma * _cosine_gap_t(f0, est.classifier.features_t(v))
    return _pixel_method(x, est, cfg, "FGD", build)


def reco(x: np.ndarray, est: CompetencyEstimator,
         cfg: GeneratorConfig | None = None) -> CounterfactualResult:
    """The autoencoder reconstruction itself, scored once."""
    est.require_calibrated()
    t0 = time.perf_counter()
    with torch.no_grad():
        out = est.autoencoder.decode_t(est.autoencoder.encode_t(image_to_tensor(x)))
    snap = cfg.snapshot() if cfg is not None else GeneratorConfig().snapshot()
    return _finalize(est, tensor_to_image(out[0]), "Reco", 0, [], snap, t0)


def lgd(x: np.ndarray, est: CompetencyEstimator,
        cfg: GeneratorConfig | None = None) -> CounterfactualResult:
    """Latent-space descent; the counterfactual is the decoded latent."""
    cfg = cfg or GeneratorConfig()
    cfg.validate()
    est.require_calibrated()
    t0 = time.perf_counter()
    thr = _threshold(est, cfg)
    with torch.no_grad():
        z0 = est.autoencoder.encode_t(image_to_tensor(x))
    return _descend(
        est, z0, lambda v: cfg.gamma_latent * _cosine_gap_t(z0, v),
        lambda v: est.competency_of_latent_t(v)[0],
        lambda v: tensor_to_image(est.autoencoder.decode_t(v.detach())[0]),
        cfg.step_size_latent, cfg, thr, "LGD", t0, clamp=False)


def lnn(x: np.ndarray, est: CompetencyEstimator,
        cfg: GeneratorConfig | None = None) -> CounterfactualResult:
    """Decode the nearest calibration latent; exact scan, ties to lowest index."""
    cfg = cfg or GeneratorConfig()
    cfg.validate()
    est.require_calibrated()
    t0 = time.perf_counter()
    pool = est.calibration_set
    if pool is None or len(pool) == 0:
        raise NumericalError("nearest-neighbor generation needs a non-empty calibration set")
    with torch.no_grad():
        z = est.autoencoder.encode_t(image_to_tensor(x)).numpy()[0]
    diffs = pool.latents.astype(np.float64) - z.astype(np.float64)
    if cfg.neighbor_norm == "l1":
        dists = np.abs(diffs).sum(axis=1)
    else:
        dists = (diffs ** 2).sum(axis=1)
    idx = int(np.argmin(dists))  # argmin takes the lowest index on ties
    with torch.no_grad():
        out = est.autoencoder.decode_t(torch.from_numpy(pool.latents[idx]))
    result = _finalize(est, tensor_to_image(out), "LNN", 0, [], cfg.snapshot(), t0)
    result.config["neighbor_index"] = idx
    return result


_DISPATCH = {"IGD": igd, "FGD": fgd, "Reco": reco, "LGD": lgd, "LNN": lnn}


def generate(method: str, x: np.ndarray, est: CompetencyEstimator,
             cfg: GeneratorConfig | None = None) -> CounterfactualResult:
    """Uniform dispatch; wall time measured around the whole delegate call."""
    if method not in _DISPATCH:
        raise ConfigError(f"unknown counterfactual method {method!r}; "
                          f"expected one of {list(_DISPATCH)}")
    t0 = time.perf_counter()
    result = _DISPATCH[method](x, est, cfg)
    result.wall_time_seconds = time.perf_counter() - t0
    return result
