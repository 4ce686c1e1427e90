"""Competency scoring: max softmax probability times calibrated P(in-distribution).

The estimator combines the classifier's confidence with an autoencoder
reconstruction-error signal. P(ID) is a logistic function of log
reconstruction error fit against decile-binned holdout accuracy, with a
synthetic zero-accuracy anchor just beyond the observed in-distribution
error range (an all-correct holdout otherwise leaves the slope
unidentified). Working in log error keeps gradients alive far outside the
calibration range, which the gradient-descent counterfactual generators
need; a logistic in raw error saturates exponentially and stalls them.

Scores are differentiable with respect to the image and, through the
decoder, with respect to a latent vector.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import least_squares

from .datasets import LabeledImageSet
from .errors import CalibrationError, DataError, ShapeMismatchError
from .models import Autoencoder, Classifier, image_to_tensor

_LOG_EPS = 1e-12  # keeps log(err) finite at exact reconstructions

CALIBRATION_MIN_HOLDOUT = 100


@dataclasses.dataclass
class CalibrationMap:
    """Smooth monotone map from reconstruction error to P(ID).

    p(err) = sigmoid(offset - slope * log(err)); slope >= 0 makes the map
    monotonically non-increasing in the error.
    """

    offset: float
    slope: float
    fit_info: dict = dataclasses.field(default_factory=dict)

    def p_id(self, err):
        log_err = np.log(np.asarray(err, dtype=np.float64) + _LOG_EPS)
        return 1.0 / (1.0 + np.exp(-(self.offset - self.slope * log_err)))

    def p_id_t(self, err: torch.Tensor) -> torch.Tensor:
        log_err = torch.log(err + _LOG_EPS)
        return torch.sigmoid(self.offset - self.slope * log_err)

    def to_json(self) -> str:
        payload = {"family": "logistic-log-error",
                   "offset": float(self.offset),
                   "slope": float(self.slope),
                   "fit_info": self.fit_info}
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CalibrationMap":
        payload = json.loads(text)
        if payload.get("family") != "logistic-log-error":
            raise DataError(f"unknown calibration family: {payload.get('family')!r}")
        return cls(offset=payload["offset"], slope=payload["slope"],
                   fit_info=payload.get("fit_info", {}))


@dataclasses.dataclass
class CalibrationSet:
    """Cached holdout images with their latents, errors, and correctness flags.

    Doubles as the neighbor pool for latent nearest-neighbor generation and
    as the real-image reference set for FID/KID.
    """

    images: np.ndarray  # N x H x W x C
    latents: np.ndarray  # N x latent_dim
    errors: np.ndarray  # N
    correct: np.ndarray  # N bool
    ids: list[str]

    def __len__(self) -> int:
        return len(self.latents)

    def save(self, path: Path) -> None:
        np.savez(
            Path(path),
            latents=self.latents.astype(np.float32),
            errors=self.errors.astype(np.float64),
            correct=self.correct.astype(bool),
            ids=np.asarray(self.ids),
        )

    @classmethod
    def load(cls, path: Path, image_source: LabeledImageSet) -> "CalibrationSet":
        data = np.load(Path(path), allow_pickle=False)
        ids = [str(s) for s in data["ids"]]
        by_id = {img_id: i for i, img_id in enumerate(image_source.ids)}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DataError(f"calibration ids missing from image source: {missing[:5]}")
        images = image_source.images[[by_id[i] for i in ids]]
        return cls(images=images, latents=data["latents"], errors=data["errors"],
                   correct=data["correct"], ids=ids)


class CompetencyEstimator:
    """Scores images with MSP times calibrated P(ID); thresholded for validity."""

    def __init__(self, classifier: Classifier, autoencoder: Autoencoder,
                 threshold: float = 0.9):
        if not 0.0 < threshold < 1.0:
            raise DataError(f"threshold must lie in (0,1), got {threshold}")
        if tuple(classifier.input_shape) != tuple(autoencoder.input_shape):
            raise ShapeMismatchError("classifier and autoencoder input shapes differ")
        self.classifier = classifier
        self.autoencoder = autoencoder
        self.threshold = float(threshold)
        self.calibration: CalibrationMap | None = None
        self.calibration_set: CalibrationSet | None = None

    @property
    def input_shape(self):
        return self.classifier.input_shape

    def require_calibrated(self) -> None:
        if self.calibration is None:
            raise CalibrationError("estimator is not calibrated; run calibrate() first")

    # torch-graph paths (used by the gradient-descent generators)

    def reconstruction_error_t(self, x: torch.Tensor) -> torch.Tensor:
        recon = self.autoencoder.decode_t(self.autoencoder.encode_t(x))
        return ((x - recon) ** 2).mean(dim=(1, 2, 3))

    def competency_t(self, x: torch.Tensor) -> torch.Tensor:
        self.require_calibrated()
        msp = self.classifier.probs_t(x).max(dim=-1).values
        return msp * self.calibration.p_id_t(self.reconstruction_error_t(x))

    def competency_of_latent_t(self, z: torch.Tensor) -> torch.Tensor:
        self.require_calibrated()
        if z.ndim == 1:
            z = z[None]
        return self.competency_t(self.autoencoder.decode_t(z))


def reconstruction_error(est: CompetencyEstimator, x: np.ndarray):
    """Mean squared pixel error between x and its reconstruction."""
    if np.asarray(x).shape[-3:] != tuple(est.input_shape):
        raise ShapeMismatchError(
            f"expected image shape {tuple(est.input_shape)}, got {np.asarray(x).shape}")
    with torch.no_grad():
        err = est.reconstruction_error_t(image_to_tensor(x)).numpy()
    return float(err[0]) if np.asarray(x).ndim == 3 else err.astype(np.float64)


def competency(est: CompetencyEstimator, x: np.ndarray):
    """Competency score in [0,1]; batched input gives an array of scores."""
    est.require_calibrated()
    with torch.no_grad():
        score = est.competency_t(image_to_tensor(x)).numpy()
    return float(score[0]) if np.asarray(x).ndim == 3 else score.astype(np.float64)


def competency_of_latent(est: CompetencyEstimator, z: np.ndarray):
    """Competency of the decoded latent; identical to scoring decode(z)."""
    est.require_calibrated()
    z_arr = np.asarray(z, dtype=np.float32)
    with torch.no_grad():
        score = est.competency_of_latent_t(torch.from_numpy(z_arr)).numpy()
    return float(score[0]) if z_arr.ndim == 1 else score.astype(np.float64)


def _decile_bins(values: np.ndarray, flags: np.ndarray, n_bins: int = 10):
    """Quantile-bin values; per bin return (mean value, mean flag, count)."""
    order = np.argsort(values, kind="stable")
    splits = np.array_split(order, n_bins)
    rows = []
    for idx in splits:
        if len(idx) == 0:
            continue
        rows.append((float(values[idx].mean()), float(flags[idx].mean()), len(idx)))
    return rows


def fit_calibration_map(errors: np.ndarray, correct: np.ndarray) -> CalibrationMap:
    """Least-squares logistic fit of P(ID) against decile-binned accuracy.

    The synthetic anchor (zero accuracy one transition-window beyond the
    max observed error) pins the tail; the slope is capped so the map
    stays smooth enough to backpropagate through.
    """
    log_err = np.log(np.asarray(errors, dtype=np.float64) + _LOG_EPS)
    bins = _decile_bins(log_err, np.asarray(correct, dtype=np.float64))
    window = max(float(log_err.max() - np.median(log_err)), 0.5)
    anchor = float(log_err.max()) + window
    xs = np.array([b[0] for b in bins] + [anchor])
    ys = np.array([b[1] for b in bins] + [0.0])
    weights = np.sqrt(np.array([b[2] for b in bins] + [float(np.mean([b[2] for b in bins]))]))

    slope_lo, slope_hi = 1.0 / window, 8.0 / window
    slope0 = 4.0 / window
    offset0 = slope0 * (log_err.max() + window / 2.0)

    def residuals(params):
        offset, slope = params
        pred = 1.0 / (1.0 + np.exp(-(offset - slope * xs)))
        return weights * (pred - ys)

    result = least_squares(
        residuals, x0=[offset0, slope0],
        bounds=([-np.inf, slope_lo], [np.inf, slope_hi]))
    if not result.success:
        raise CalibrationError("logistic calibration fit did not converge",
                               diagnostics={"bins": bins, "anchor": anchor})
    offset, slope = result.x
    return CalibrationMap(
        offset=float(offset), slope=float(slope),
        fit_info={"bins": [list(b) for b in bins], "anchor_log_error": anchor,
                  "slope_bounds": [slope_lo, slope_hi], "n_holdout": int(len(errors))})


def calibration_deviation(est: CompetencyEstimator, images: np.ndarray,
                          correct: np.ndarray) -> dict:
    """Bin images into competency deciles; report |mean competency - accuracy| per bin.

    Deciles are equal-count quantile bins of the predicted scores, so every
    bin is nonempty and no bin is dominated by one outlier.
    """
    scores = competency(est, images)
    order = np.argsort(scores, kind="stable")
    rows = []
    for idx in np.array_split(order, 10):
        if len(idx) == 0:
            continue
        rows.append({"count": int(len(idx)),
                     "mean_competency": float(scores[idx].mean()),
                     "accuracy": float(np.asarray(correct)[idx].mean())})
    deviations = [abs(r["mean_competency"] - r["accuracy"]) for r in rows]
    return {"bins": rows, "mean_abs_deviation": float(np.mean(deviations))}


def calibrate(est: CompetencyEstimator, holdout: LabeledImageSet,
              max_bin_deviation: float = 0.15):
    """Fit the P(ID) map on an in-distribution holdout set and cache its latents.

    The holdout must be disjoint from the training set (caller-enforced)
    and contain at least 100 images. Returns (CalibrationMap, CalibrationSet)
    and attaches both to the estimator.
    """
    if len(holdout) == 0:
        raise DataError("holdout set is empty")
    if len(holdout) < CALIBRATION_MIN_HOLDOUT:
        raise DataError(
            f"holdout set too small: {len(holdout)} < {CALIBRATION_MIN_HOLDOUT}")

    X = image_to_tensor(holdout.images)
    with torch.no_grad():
        # encoded one image at a time so each cached latent matches any
        # later single-image encode of the same picture bitwise; the
        # neighbor generator treats these as exact anchor points
        latents = torch.cat([est.autoencoder.encode_t(X[i:i + 1])
                             for i in range(X.shape[0])]).numpy()
        errors = est.reconstruction_error_t(X).numpy().astype(np.float64)
        probs = est.classifier.probs_t(X).numpy()
    label_index = {lab: i for i, lab in enumerate(est.classifier.class_labels)}
    unknown = [lab for lab in holdout.labels if lab not in label_index]
    if unknown:
        raise DataError(f"holdout contains labels unknown to the classifier: {sorted(set(unknown))[:5]}")
    truth = np.array([label_index[lab] for lab in holdout.labels])
    correct = probs.argmax(axis=1) == truth

    est.calibration = fit_calibration_map(errors, correct)
    est.calibration_set = CalibrationSet(
        images=holdout.images, latents=latents, errors=errors,
        correct=correct, ids=list(holdout.ids))

    check = calibration_deviation(est, holdout.images, correct)
    est.calibration.fit_info["decile_check"] = check
    if check["mean_abs_deviation"] > max_bin_deviation:
        diag = dict(check, max_allowed=max_bin_deviation)
        est.calibration = None
        est.calibration_set = None
        raise CalibrationError(
            f"calibration quality check failed: mean decile deviation "
            f"{check['mean_abs_deviation']:.3f} > {max_bin_deviation}", diagnostics=diag)
    return est.calibration, est.calibration_set


def save_calibration(est: CompetencyEstimator, out_dir: Path) -> None:
    est.require_calibrated()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "calibration.json").write_text(est.calibration.to_json())
    est.calibration_set.save(out_dir / "calibration_set.npz")


def load_calibration(est: CompetencyEstimator, out_dir: Path,
                     image_source: LabeledImageSet) -> None:
    out_dir = Path(out_dir)
    est.calibration = CalibrationMap.from_json((out_dir / "calibration.json").read_text())
    est.calibration_set = CalibrationSet.load(out_dir / "calibration_set.npz", image_source)
