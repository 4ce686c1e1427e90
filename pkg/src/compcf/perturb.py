"""Low-competency corpus synthesis: six degradation causes, swept to threshold.

Each non-spatial cause sweeps its parameter outward from the identity and
keeps the first setting whose competency drops below the estimator
threshold, so degradations stay minimal. Spatial anomalies come from the
held-out class. Candidates are snapped to the 8-bit pixel grid before
scoring; the PNG files written out then reproduce the recorded scores
exactly.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from pathlib import Path

import numpy as np

from .competency import CompetencyEstimator, competency
from .datasets import LabeledImageSet, load_image, quantize, save_image
from .errors import CorpusSynthesisError, DataError

CAUSES = ("spatial", "brightness", "contrast", "saturation", "noise", "pixelation")

# BT.601 luma weights, used to hold luma fixed while scaling chroma
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)

FACTOR_STEP = 1.25
FACTOR_BOUNDS = (0.05, 8.0)
NOISE_STEP = 0.05
NOISE_MAX = 0.6
PIXELATION_BLOCKS = (2, 4, 8, 16)


def _check_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise DataError(f"expected a single HxWxC image, got shape {x.shape}")
    return x


def adjust_brightness(x: np.ndarray, factor: float) -> np.ndarray:
    """Scale all channels by factor; factor 1 returns the input bitwise."""
    x = _check_image(x)
    if factor <= 0:
        raise DataError(f"brightness factor must be positive, got {factor}")
    if factor == 1.0:
        return x.copy()
    return np.clip(x * np.float32(factor), 0.0, 1.0)


def adjust_contrast(x: np.ndarray, factor: float) -> np.ndarray:
    """Scale deviation from the per-image mean; factor 0 would flatten to the mean."""
    x = _check_image(x)
    if factor <= 0:
        raise DataError(f"contrast factor must be positive, got {factor}")
    if factor == 1.0:
        return x.copy()
    mean = x.mean(dtype=np.float32)
    return np.clip(mean + np.float32(factor) * (x - mean), 0.0, 1.0)


def adjust_saturation(x: np.ndarray, factor: float) -> np.ndarray:
    """Scale chroma about the per-pixel luma; factor 0 gives grayscale."""
    x = _check_image(x)
    if factor <= 0:
        raise DataError(f"saturation factor must be positive, got {factor}")
    if x.shape[-1] != 3:
        raise DataError("saturation adjustment needs a 3-channel image")
    if factor == 1.0:
        return x.copy()
    luma = (x @ _LUMA)[..., None]
    return np.clip(luma + np.float32(factor) * (x - luma), 0.0, 1.0)


def add_uniform_noise(x: np.ndarray, magnitude: float, seed: int) -> np.ndarray:
    """Add per-pixel U(-magnitude, magnitude); same seed gives the same image."""
    x = _check_image(x)
    if not 0.0 < magnitude <= 1.0:
        raise DataError(f"noise magnitude must lie in (0,1], got {magnitude}")
    rng = np.random.default_rng(seed)
    noise = rng.uniform(-magnitude, magnitude, size=x.shape).astype(np.float32)
    return np.clip(x + noise, 0.0, 1.0)


def pixelate(x: np.ndarray, block_size: int) -> np.ndarray:
    """Block-average then nearest-upsample; output constant within blocks.

    Sizes that don't divide the image are handled by edge-padding up to a
    multiple, then cropping back.
    """
    x = _check_image(x)
    if int(block_size) != block_size or block_size < 2:
        raise DataError(f"block_size must be an integer >= 2, got {block_size}")
    b = int(block_size)
    H, W, C = x.shape
    pad_h = (-H) % b
    pad_w = (-W) % b
    padded = np.pad(x, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    ph, pw = padded.shape[:2]
    blocks = padded.reshape(ph // b, b, pw // b, b, C).mean(axis=(1, 3), dtype=np.float32)
    up = np.repeat(np.repeat(blocks, b, axis=0), b, axis=1)
    return up[:H, :W].astype(np.float32)


def is_grayscale(images: np.ndarray) -> bool:
    """True when every pixel has identical channels (chroma-free dataset)."""
    arr = np.asarray(images)
    if arr.shape[-1] == 1:
        return True
    return bool(np.all(arr == arr[..., :1]))


@dataclasses.dataclass
class CorpusEntry:
    image: np.ndarray
    cause: str
    source_id: str
    params: dict
    score: float


@dataclasses.dataclass
class LowCompetencyCorpus:
    entries: list[CorpusEntry]
    threshold: float
    seed: int
    skipped: dict[str, list[str]]  # cause -> source ids that never crossed

    def per_cause_counts(self) -> dict[str, int]:
        counts = {}
        for e in self.entries:
            counts[e.cause] = counts.get(e.cause, 0) + 1
        return counts

    def images_for(self, cause: str) -> np.ndarray:
        return np.stack([e.image for e in self.entries if e.cause == cause])

    def manifest(self) -> str:
        records = [
            {"cause": e.cause, "source_id": e.source_id, "params": e.params,
             "competency": round(float(e.score), 10),
             "file": _entry_filename(e)}
            for e in self.entries
        ]
        payload = {"threshold": self.threshold, "seed": self.seed,
                   "per_cause": self.per_cause_counts(),
                   "skipped": {k: sorted(v) for k, v in self.skipped.items() if v},
                   "entries": records}
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _entry_filename(e: CorpusEntry) -> str:
    return f"{e.cause}_{e.source_id}.png"


def select_spatial_anomalies(est: CompetencyEstimator, heldout: LabeledImageSet,
                             quota: int) -> tuple[LabeledImageSet, dict]:
    """Pick quota held-out-class images scoring below threshold.

    High-scoring images are skipped; the returned report carries the skip
    rate so a misbehaving holdout choice is visible instead of silent.
    """
    if quota == 0:
        return heldout.subset([]), {"skipped": 0, "scanned": 0, "skip_rate": 0.0}
    trained = set(est.classifier.class_labels)
    overlap = sorted(set(heldout.labels) & trained)
    if overlap:
        raise DataError(
            f"held-out class was present at training time: {overlap}")
    scores = competency(est, heldout.images)
    below = [i for i, s in enumerate(scores) if s < est.threshold]
    if len(below) < quota:
        raise DataError(
            f"only {len(below)} held-out images score below threshold, need {quota}")
    picked = below[:quota]
    scanned = picked[-1] + 1  # images examined before the quota filled
    skipped = scanned - quota
    report = {"skipped": skipped, "scanned": scanned,
              "skip_rate": skipped / scanned}
    return heldout.subset(picked), report


def _factor_schedule(direction: int) -> list[float]:
    lo, hi = FACTOR_BOUNDS
    values = []
    f = 1.0
    if direction > 0:
        while f * FACTOR_STEP <= hi * (1 + 1e-9):
            f *= FACTOR_STEP
            values.append(f)
    else:
        while f / FACTOR_STEP >= lo * (1 - 1e-9):
            f /= FACTOR_STEP
            values.append(f)
    return values


def _noise_schedule() -> list[float]:
    return [round(NOISE_STEP * k, 10) for k in range(1, int(round(NOISE_MAX / NOISE_STEP)) + 1)]


def _image_seed(global_seed: int, cause: str, source_id: str) -> int:
    return zlib.crc32(f"{global_seed}:{cause}:{source_id}".encode())


def _sweep_candidates(x, cause, direction, seed):
    """Yield (params, candidate) pairs in increasing severity."""
    if cause in ("brightness", "contrast", "saturation"):
        op = {"brightness": adjust_brightness, "contrast": adjust_contrast,
              "saturation": adjust_saturation}[cause]
        for d in (direction, -direction):
            for f in _factor_schedule(d):
                yield {"factor": f}, op(x, f)
    elif cause == "noise":
        for m in _noise_schedule():
            yield {"magnitude": m, "seed": seed}, add_uniform_noise(x, m, seed)
    elif cause == "pixelation":
        for b in PIXELATION_BLOCKS:
            yield {"block_size": b}, pixelate(x, b)
    else:
        raise DataError(f"unknown sweep cause: {cause}")


def synthesize_corpus(est: CompetencyEstimator, sources: LabeledImageSet,
                      heldout: LabeledImageSet, per_cause_quota: int,
                      seed: int = 0) -> LowCompetencyCorpus:
    """Build the six-cause corpus; every image scores below threshold.

    Source images must themselves score above threshold. Sweep direction
    for the factor causes alternates with source index so both over- and
    under-adjusted images appear. Sources whose sweep never crosses are
    skipped and logged; an unfillable quota raises.
    """
    est.require_calibrated()
    if per_cause_quota < 0:
        raise DataError("per_cause_quota must be non-negative")
    causes = list(CAUSES)
    quotas = {c: per_cause_quota for c in causes}
    if is_grayscale(sources.images):
        # chroma-free data: saturation is a no-op, redistribute its quota
        quotas.pop("saturation")
        causes.remove("saturation")
        extra, rem = divmod(per_cause_quota, len(causes))
        for i, c in enumerate(causes):
            quotas[c] += extra + (1 if i < rem else 0)

    src_scores = competency(est, sources.images)
    low = np.flatnonzero(src_scores < est.threshold)
    if len(low):
        bad = [sources.ids[i] for i in low[:5]]
        raise DataError(f"source images must score above threshold; offenders: {bad}")

    entries: list[CorpusEntry] = []
    skipped: dict[str, list[str]] = {c: [] for c in CAUSES}

    spatial_quota = quotas.get("spatial", 0)
    if spatial_quota:
        picked, report = select_spatial_anomalies(est, heldout, spatial_quota)
        scores = competency(est, picked.images)
        for img, img_id, s in zip(picked.images, picked.ids, scores):
            entries.append(CorpusEntry(image=img, cause="spatial", source_id=img_id,
                                       params={"heldout_class": picked.labels[0]},
                                       score=float(s)))
        skipped["spatial"] = [f"skip_rate={report['skip_rate']:.4f}"] if report["skipped"] else []

    for cause in causes:
        if cause == "spatial":
            continue
        quota = quotas[cause]
        filled = 0
        for idx in range(len(sources)):
            if filled >= quota:
                break
            x = sources.images[idx]
            source_id = sources.ids[idx]
            direction = 1 if idx % 2 == 0 else -1
            img_seed = _image_seed(seed, cause, source_id)
            sweep = [(params, quantize(cand))
                     for params, cand in _sweep_candidates(x, cause, direction, img_seed)]
            scores = competency(est, np.stack([c for _, c in sweep]))
            crossing = np.flatnonzero(scores < est.threshold)
            if len(crossing) == 0:
                skipped[cause].append(source_id)
                continue
            first = int(crossing[0])  # mildest qualifying setting wins
            params, cand = sweep[first]
            score = float(scores[first])
            entries.append(CorpusEntry(image=cand, cause=cause, source_id=source_id,
                                       params=params, score=score))
            filled += 1
        if filled < quota:
            raise CorpusSynthesisError(
                f"cause {cause!r}: only {filled}/{quota} sources crossed threshold "
                f"({len(skipped[cause])} skipped, pool size {len(sources)})")

    return LowCompetencyCorpus(entries=entries, threshold=est.threshold,
                               seed=seed, skipped=skipped)


def write_corpus(corpus: LowCompetencyCorpus, out_dir: Path) -> Path:
    """Write PNGs plus manifest.json; scores survive the 8-bit round trip."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for e in corpus.entries:
        save_image(e.image, out_dir / _entry_filename(e))
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(corpus.manifest())
    return manifest_path


def load_corpus(out_dir: Path) -> LowCompetencyCorpus:
    out_dir = Path(out_dir)
    manifest_path = out_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no corpus manifest at {manifest_path}")
    payload = json.loads(manifest_path.read_text())
    entries = []
    for rec in payload["entries"]:
        img = load_image(out_dir / rec["file"])
        entries.append(CorpusEntry(image=img, cause=rec["cause"],
                                   source_id=rec["source_id"], params=rec["params"],
                                   score=rec["competency"]))
    return LowCompetencyCorpus(entries=entries, threshold=payload["threshold"],
                               seed=payload["seed"],
                               skipped={k: list(v) for k, v in payload["skipped"].items()})
