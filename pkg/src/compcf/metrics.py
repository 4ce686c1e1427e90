"""Evaluation metrics and Tables-shaped reports for counterfactual methods.

Perceptual distance follows the LPIPS recipe (per-layer unit-normalized
feature differences, linearly weighted, spatially averaged, summed) over a
frozen seeded backbone. FID/KID use a frozen seeded embedding network in
place of the usual pretrained one; magnitudes are therefore only
comparable within a backbone version, which every report records. Set
embeddings are computed one image at a time and aggregated in float64 so
FID/KID are exactly order-invariant.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import time
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .competency import CompetencyEstimator, competency
from .errors import DataError, NumericalError, ShapeMismatchError
from .models import extract_features, encode, image_to_tensor

PERCEPTUAL_BACKBONE_VERSION = "seeded-perceptual-v1"
EMBEDDING_BACKBONE_VERSION = "seeded-embedding-v3"

_PERCEPTUAL_SEED = 7701
_EMBEDDING_SEED = 7702
_EMBED_DIM = 2048
# embeddings live on a sphere of radius sqrt(_EMBED_SCALE * dim); keeps the
# polynomial-kernel dot products small enough for a tight same-distribution KID
_EMBED_SCALE = 0.04

REPORT_COLUMNS = ["Method", "Success Rate", "Perceptual Loss", "Feature Similarity",
                  "Latent Similarity", "FID", "KID", "Computation Time"]


class _PerceptualNet(nn.Module):
    """Frozen random conv stack; taps after each stage are the LPIPS layers."""

    def __init__(self, seed: int):
        super().__init__()
        torch.manual_seed(seed)
        chans = [3, 16, 32, 64]
        self.stages = nn.ModuleList()
        for cin, cout in zip(chans[:-1], chans[1:]):
            self.stages.append(nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=1),
                nn.ReLU(),
                nn.Conv2d(cout, cout, 3, padding=1),
                nn.ReLU(),
            ))
        self.pool = nn.AvgPool2d(2)
        # per-channel calibration weights, fixed at construction
        gen = torch.Generator().manual_seed(seed + 1)
        self.weights = [torch.rand(c, generator=gen) * 0.9 + 0.1 for c in chans[1:]]
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def layer_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for i, stage in enumerate(self.stages):
            h = stage(h)
            feats.append(h)
            if i < len(self.stages) - 1:
                h = self.pool(h)
        return feats


_EMBED_NATIVE_SIZE = 32


def _probe_textures(gen: torch.Generator, size: int, n: int = 256) -> torch.Tensor:
    """Seeded procedural textures spanning flat, gradient, blocky, noisy, and
    blurred imagery; the standardization reference for the embedding stats."""
    ys, xs = torch.meshgrid(torch.linspace(0, 1, size), torch.linspace(0, 1, size),
                            indexing="ij")
    imgs = []
    for _ in range(n):
        base = torch.rand(3, 1, 1, generator=gen)
        gx = (torch.rand(3, 1, 1, generator=gen) - 0.5) * 2
        gy = (torch.rand(3, 1, 1, generator=gen) - 0.5) * 2
        img = base + gx * xs + gy * ys
        for _ in range(int(torch.randint(0, 3, (1,), generator=gen))):
            h0, w0 = torch.randint(0, size - 4, (2,), generator=gen)
            h1 = h0 + 4 + int(torch.randint(0, size - 4 - int(h0), (1,), generator=gen))
            w1 = w0 + 4 + int(torch.randint(0, size - 4 - int(w0), (1,), generator=gen))
            img[:, h0:h1, w0:w1] = torch.rand(3, 1, 1, generator=gen)
        mag = torch.rand(1, generator=gen) * 0.5
        img = img + (torch.rand(3, size, size, generator=gen) - 0.5) * 2 * mag
        k = int(2 ** torch.randint(0, 3, (1,), generator=gen))  # 1, 2, or 4
        if k > 1:
            img = nn.functional.avg_pool2d(img[None], k)[0]
            img = img.repeat_interleave(k, dim=1).repeat_interleave(k, dim=2)
        imgs.append(img.clamp(0, 1))
    return torch.stack(imgs)


class _EmbeddingNet(nn.Module):
    """Frozen multi-scale statistic extractor behind the 2048-dim embedding.

    The statistic vector mixes raw pixel moments and gradient energies with
    mean+std pooled responses of a frozen random conv stack, standardized
    per dimension against a baked-in synthetic probe batch so every
    statistic contributes at a comparable scale, then lifted through a
    rectified random projection. The rectification matters: distinct
    corruption directions activate distinct units instead of cancelling in
    the set mean the way they would under a purely linear projection.
    Per-image identity is never normalized away.
    """

    def __init__(self, seed: int):
        super().__init__()
        torch.manual_seed(seed)
        chans = [3, 32, 64, 128, 256]
        self.stages = nn.ModuleList(
            nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU())
            for cin, cout in zip(chans[:-1], chans[1:]))
        stat_dim = 12 + 2 * sum(chans[1:])
        gen = torch.Generator().manual_seed(seed + 1)
        self.proj = torch.randn(stat_dim, _EMBED_DIM, generator=gen) / np.sqrt(stat_dim)
        self.bias = torch.rand(_EMBED_DIM, generator=gen) * 2.0 - 1.0
        with torch.no_grad():
            s = self._stats(_probe_textures(gen, _EMBED_NATIVE_SIZE))
            self.stat_mean = s.mean(dim=0)
            self.stat_std = s.std(dim=0).clamp_min(1e-6)
            z = torch.tanh((s - self.stat_mean) / self.stat_std)
            norms = torch.relu(z @ self.proj + self.bias).norm(dim=-1)
        self.out_scale = float(np.sqrt(_EMBED_SCALE * _EMBED_DIM) / norms.median())
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _stats(self, x: torch.Tensor) -> torch.Tensor:
        parts = [
            x.mean(dim=(2, 3)),
            x.var(dim=(2, 3), unbiased=False).clamp_min(1e-12).sqrt(),
            (x[:, :, :, 1:] - x[:, :, :, :-1]).abs().mean(dim=(2, 3)),
            (x[:, :, 1:, :] - x[:, :, :-1, :]).abs().mean(dim=(2, 3)),
        ]
        h = x
        for stage in self.stages:
            h = stage(h)
            parts.append(h.mean(dim=(2, 3)))
            parts.append(h.var(dim=(2, 3), unbiased=False).clamp_min(1e-12).sqrt())
        return torch.cat(parts, dim=1)

    def embed_one(self, x: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            h = x[None] if x.ndim == 3 else x
            if h.shape[-2:] != (_EMBED_NATIVE_SIZE, _EMBED_NATIVE_SIZE):
                h = nn.functional.interpolate(
                    h, size=(_EMBED_NATIVE_SIZE, _EMBED_NATIVE_SIZE),
                    mode="bilinear", align_corners=False)
            z = torch.tanh((self._stats(h) - self.stat_mean) / self.stat_std)
            v = torch.relu(z @ self.proj + self.bias) * self.out_scale
        return v[0].numpy().astype(np.float64)


_perceptual_net: _PerceptualNet | None = None
_embedding_net: _EmbeddingNet | None = None


def perceptual_backbone() -> _PerceptualNet:
    global _perceptual_net
    if _perceptual_net is None:
        _perceptual_net = _PerceptualNet(_PERCEPTUAL_SEED)
    return _perceptual_net


def embedding_backbone() -> _EmbeddingNet:
    global _embedding_net
    if _embedding_net is None:
        _embedding_net = _EmbeddingNet(_EMBEDDING_SEED)
    return _embedding_net


def perceptual_loss_t(x: torch.Tensor, y: torch.Tensor,
                      net: _PerceptualNet | None = None) -> torch.Tensor:
    """Differentiable LPIPS-style distance between NCHW batches.

    `net` overrides the process-wide backbone; passing a converted copy
    (e.g. `.double()`) evaluates the same distance at another precision.
    """
    net = net if net is not None else perceptual_backbone()
    fx = net.layer_features(x)
    fy = net.layer_features(y)
    total = None
    for w, a, b in zip(net.weights, fx, fy):
        a = a / a.norm(dim=1, keepdim=True).clamp_min(1e-10)
        b = b / b.norm(dim=1, keepdim=True).clamp_min(1e-10)
        d = ((a - b) ** 2 * w[None, :, None, None]).sum(dim=1).mean(dim=(1, 2))
        total = d if total is None else total + d
    return total


def perceptual_loss(x: np.ndarray, y: np.ndarray) -> float:
    if np.asarray(x).shape != np.asarray(y).shape:
        raise ShapeMismatchError(
            f"perceptual loss needs equal shapes, got {np.asarray(x).shape} vs {np.asarray(y).shape}")
    with torch.no_grad():
        val = perceptual_loss_t(image_to_tensor(x), image_to_tensor(y))
    return float(val[0]) if np.asarray(x).ndim == 3 else val.numpy().astype(np.float64)


def _cosine(a: np.ndarray, b: np.ndarray, what: str) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what} vectors differ in dimension: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericalError(f"cosine similarity undefined for zero {what} vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def feature_similarity(f_orig: np.ndarray, f_cf: np.ndarray) -> float:
    return _cosine(f_orig, f_cf, "feature")


def latent_similarity(z_orig: np.ndarray, z_cf: np.ndarray) -> float:
    return _cosine(z_orig, z_cf, "latent")


def embed_images(images: np.ndarray) -> np.ndarray:
    """2048-dim embedding per image; computed one at a time so the result
    for an image never depends on which set it appears in."""
    net = embedding_backbone()
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    X = image_to_tensor(arr)
    return np.stack([net.embed_one(X[i]) for i in range(len(X))])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(set_a: np.ndarray, set_b: np.ndarray) -> float:
    """Frechet distance between Gaussians fit to the two sets' embeddings."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise DataError("fid needs at least 2 images per set")
    ea, eb = embed_images(set_a), embed_images(set_b)
    mu_a, mu_b = ea.mean(axis=0), eb.mean(axis=0)
    ca = np.cov(ea, rowvar=False)
    cb = np.cov(eb, rowvar=False)
    ra = _psd_sqrt(ca)
    cross = _psd_sqrt(ra @ cb @ ra)
    if not np.isfinite(cross).all():
        raise NumericalError("matrix square root produced non-finite values")
    val = float(((mu_a - mu_b) ** 2).sum() + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kid(set_a: np.ndarray, set_b: np.ndarray) -> float:
    """Unbiased MMD^2 with the degree-3 polynomial kernel, reported x1000."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise DataError("kid needs at least 2 images per set")
    ea, eb = embed_images(set_a), embed_images(set_b)
    m, n = len(ea), len(eb)
    kaa = _poly_kernel(ea, ea)
    kbb = _poly_kernel(eb, eb)
    kab = _poly_kernel(ea, eb)
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float((term_a + term_b - 2.0 * kab.mean()) * 1000.0)


@dataclasses.dataclass
class MethodRow:
    method: str
    success_rate: float
    perceptual: float
    feature_sim: float
    latent_sim: float
    fid: float
    kid: float
    mean_time: float
    n_results: int
    n_valid: int
    similarity_population: str  # "valid" or "all" (fallback when nothing is valid)


@dataclasses.dataclass
class EvaluationReport:
    rows: list[MethodRow]
    corpus_id: str
    config: dict
    backbone_versions: dict = dataclasses.field(default_factory=lambda: {
        "perceptual": PERCEPTUAL_BACKBONE_VERSION,
        "embedding": EMBEDDING_BACKBONE_VERSION,
    })

    def to_json(self) -> str:
        payload = {
            "corpus_id": self.corpus_id,
            "config": self.config,
            "backbone_versions": self.backbone_versions,
            "columns": REPORT_COLUMNS,
            "rows": [dataclasses.asdict(r) for r in self.rows],
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow([
                r.method,
                f"{r.success_rate:.2f}%",
                f"{r.perceptual:.4f}",
                f"{r.feature_sim:.4f}",
                f"{r.latent_sim:.4f}",
                f"{r.fid:.4f}",
                f"{r.kid:.4f}",
                f"{r.mean_time:.6f}",
            ])
        return buf.getvalue()


def success_rate(results) -> float:
    if not results:
        raise DataError("success rate of an empty result list is undefined")
    return 100.0 * sum(1 for r in results if r.valid) / len(results)


def evaluate(corpus, method: str, est: CompetencyEstimator, cfg=None) -> MethodRow:
    """Generate a counterfactual per corpus image and aggregate the seven metrics.

    Similarity means run over valid results only; when nothing is valid
    (the Orig pseudo-method by construction) they fall back to all results
    and the row says so. Perceptual loss averages over all results. FID and
    KID compare every generated counterfactual against the calibration set.
    """
    from . import counterfactuals as cf

    est.require_calibrated()
    if not corpus.entries:
        raise DataError("cannot evaluate an empty corpus")

    originals = np.stack([e.image for e in corpus.entries])
    results = []
    if method == "Orig":
        for e in corpus.entries:
            t0 = time.perf_counter()
            score = competency(est, e.image)
            dt = time.perf_counter() - t0
            results.append(cf.CounterfactualResult(
                counterfactual=e.image, competency=score,
                valid=score >= est.threshold, iterations_used=0,
                wall_time_seconds=dt, method="Orig", loss_trace=[],
                config={}))
    else:
        for e in corpus.entries:
            results.append(cf.generate(method, e.image, est, cfg))

    cf_images = np.stack([r.counterfactual for r in results])
    perc = perceptual_loss(originals, cf_images)
    f_orig = extract_features(est.classifier, originals)
    f_cf = extract_features(est.classifier, cf_images)
    z_orig = encode(est.autoencoder, originals)
    z_cf = encode(est.autoencoder, cf_images)
    fsims = np.array([feature_similarity(a, b) for a, b in zip(f_orig, f_cf)])
    lsims = np.array([latent_similarity(a, b) for a, b in zip(z_orig, z_cf)])

    valid_mask = np.array([r.valid for r in results])
    population = "valid" if valid_mask.any() else "all"
    sel = valid_mask if valid_mask.any() else np.ones_like(valid_mask)

    ref = est.calibration_set.images
    return MethodRow(
        method=method,
        success_rate=success_rate(results),
        perceptual=float(np.mean(perc)),
        feature_sim=float(fsims[sel].mean()),
        latent_sim=float(lsims[sel].mean()),
        fid=fid(cf_images, ref),
        kid=kid(cf_images, ref),
        mean_time=float(np.mean([r.wall_time_seconds for r in results])),
        n_results=len(results),
        n_valid=int(valid_mask.sum()),
        similarity_population=population,
    )


def evaluate_methods(corpus, methods, est: CompetencyEstimator, cfg=None,
                     corpus_id: str = "corpus") -> EvaluationReport:
    rows = [evaluate(corpus, m, est, cfg) for m in methods]
    snapshot = cfg.snapshot() if cfg is not None else {}
    return EvaluationReport(rows=rows, corpus_id=corpus_id, config=snapshot)


def write_report(report: EvaluationReport, out_dir: Path,
                 stem: str = "report") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(report.to_json())
    csv_path.write_text(report.to_csv())
    return csv_path, json_path
