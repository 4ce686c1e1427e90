"""Release acceptance checks for the full pipeline on the reference workspace.

One test per numbered criterion, so `pytest -v` emits exactly one pass/fail
line for each. Tolerances are stated inline next to their assertions.
"""

import copy
import os

import numpy as np
import pytest
import torch

from compcf import counterfactuals as cf
from compcf import explain as ex
from compcf.competency import competency, competency_of_latent
from compcf.datasets import LabeledImageSet
from compcf.errors import DisjointnessError
from compcf.metrics import (feature_similarity, fid, kid, latent_similarity,
                            perceptual_backbone, perceptual_loss,
                            perceptual_loss_t)
from compcf.models import encode, extract_features, image_to_tensor
from compcf.perturb import (CAUSES, add_uniform_noise, load_corpus,
                            synthesize_corpus, write_corpus)


def test_criterion_01_metric_identities(workspace, corpus10):
    """Self-distances vanish; distribution distances behave as identities demand."""
    calib = workspace.splits.calib.images
    for img in calib[:10]:
        assert perceptual_loss(img, img) <= 1e-6
    feats = extract_features(workspace.estimator.classifier, calib[:10])
    lats = encode(workspace.estimator.autoencoder, calib[:10])
    for f, z in zip(feats, lats):
        assert abs(feature_similarity(f, f) - 1.0) <= 1e-9
        assert abs(latent_similarity(z, z) - 1.0) <= 1e-9

    assert fid(calib, calib.copy()) <= 1e-4

    rng = np.random.default_rng(42)
    half = len(calib) // 2
    for _ in range(4):
        perm = rng.permutation(len(calib))
        value = kid(calib[perm[:half]], calib[perm[half:2 * half]])
        assert abs(value) <= 1.0  # reported on the x1000 scale

    a, b = calib[:half], np.stack([e.image for e in corpus10.entries])
    pa, pb = rng.permutation(len(a)), rng.permutation(len(b))
    assert abs(fid(a, b) - fid(a[pa], b[pb])) <= 1e-6
    assert abs(kid(a, b) - kid(a[pa], b[pb])) <= 1e-9


def _grad32(loss_fn, point):
    var = point.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(loss_fn(var), var)
    return grad.detach()


def _central_difference_rel_errors(loss32, loss64, v0, n_probes, seed, h=1e-4,
                                   min_align=1.0, max_draws=80):
    """Single-precision autodiff vs a float64 central-difference oracle.

    The gradient under test is the one the generators actually descend on
    (fp32); the two oracle evaluations run through float64 copies of the
    same networks so secant noise sits orders of magnitude below the
    tolerance. A random unit direction nearly orthogonal to the gradient
    carries no measurable slope at any precision, so draws are accepted
    only once the analytic slope reaches the RMS alignment scale
    |g| / sqrt(n); the directions stay random within that band.
    """
    g64 = _grad32(loss32, v0).double()
    floor = min_align * float(g64.norm()) / np.sqrt(v0.numel())
    gen = torch.Generator().manual_seed(seed)
    v64 = v0.detach().double()
    rels = []
    draws = 0
    while len(rels) < n_probes and draws < max_draws:
        draws += 1
        d = torch.rand(v0.shape, generator=gen) * 2.0 - 1.0
        u = (d / d.norm()).double()
        an = float((g64 * u).sum())
        if abs(an) < floor:
            continue
        with torch.no_grad():
            plus = float(loss64(v64 + h * u))
            minus = float(loss64(v64 - h * u))
        fd = (plus - minus) / (2.0 * h)
        rels.append(abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    assert len(rels) == n_probes, "alignment filter starved the direction sampler"
    return rels


def _fp64_estimator(est):
    """Deep copy of the estimator with every network cast to float64."""
    est64 = copy.deepcopy(est)
    for module in (est64.classifier.feature_extractor, est64.classifier.softmax_head,
                   est64.autoencoder.encoder, est64.autoencoder.decoder):
        module.double()
    return est64


def test_criterion_02_gradient_checks(workspace, corpus10):
    """Autodiff agrees with central finite differences for all three descent losses."""
    est = workspace.estimator
    est64 = _fp64_estimator(est)
    net64 = copy.deepcopy(perceptual_backbone()).double()
    net64.weights = [w.double() for w in net64.weights]
    cfg = cf.GeneratorConfig()

    scores = np.array([e.score for e in corpus10.entries])
    # probe where the competency sigmoid has gradient signal
    band = [i for i in range(len(scores)) if 0.05 <= scores[i] <= 0.95]
    assert len(band) >= 8, "need competency-responsive probe points"

    def pixel_probe(i):
        # displaced off the penalties' self-minimum so both loss
        # components carry gradient
        x0 = image_to_tensor(corpus10.entries[i].image)
        gen = torch.Generator().manual_seed(500 + i)
        return x0, (x0 + 0.02 * (torch.rand(x0.shape, generator=gen) * 2 - 1)
                    ).clamp(0.0, 1.0)

    def perceptual_pair(x0):
        x064 = x0.double()

        def loss32(v):
            return -est.competency_t(v)[0] + cfg.gamma_image * perceptual_loss_t(x0, v)[0]

        def loss64(v):
            return (-est64.competency_t(v)[0]
                    + cfg.gamma_image * perceptual_loss_t(x064, v, net=net64)[0])

        return loss32, loss64

    def feature_pair(x0):
        with torch.no_grad():
            f0 = est.classifier.features_t(x0).reshape(-1)
            f064 = est64.classifier.features_t(x0.double()).reshape(-1)

        def loss32(v):
            f = est.classifier.features_t(v).reshape(-1)
            cos = (f0 @ f) / (f0.norm() * f.norm()).clamp_min(1e-12)
            return -est.competency_t(v)[0] + cfg.gamma_feature * (1.0 - cos)

        def loss64(v):
            f = est64.classifier.features_t(v).reshape(-1)
            cos = (f064 @ f) / (f064.norm() * f.norm()).clamp_min(1e-12)
            return -est64.competency_t(v)[0] + cfg.gamma_feature * (1.0 - cos)

        return loss32, loss64

    def latent_pair(z0):
        z064 = z0.double()

        def loss32(z):
            zf = z.reshape(-1)
            cos = (z0 @ zf) / (z0.norm() * zf.norm()).clamp_min(1e-12)
            return (-est.competency_of_latent_t(z.reshape(1, -1))[0]
                    + cfg.gamma_latent * (1.0 - cos))

        def loss64(z):
            zf = z.reshape(-1)
            cos = (z064 @ zf) / (z064.norm() * zf.norm()).clamp_min(1e-12)
            return (-est64.competency_of_latent_t(z.reshape(1, -1))[0]
                    + cfg.gamma_latent * (1.0 - cos))

        return loss32, loss64

    # strongest-gradient band entries make the directional slopes sit well
    # above any remaining secant noise
    def pixel_rank(i):
        x0, x_probe = pixel_probe(i)
        return -float(_grad32(perceptual_pair(x0)[0], x_probe).double().norm())

    errs = {"pixel-perceptual": [], "pixel-feature": [], "latent": []}
    for i in sorted(band, key=pixel_rank)[:4]:
        x0, x_probe = pixel_probe(i)
        loss32, loss64 = perceptual_pair(x0)
        errs["pixel-perceptual"] += _central_difference_rel_errors(
            loss32, loss64, x_probe, n_probes=3, seed=100 + i)
        loss32, loss64 = feature_pair(x0)
        errs["pixel-feature"] += _central_difference_rel_errors(
            loss32, loss64, x_probe, n_probes=3, seed=200 + i)

    lat_cands = []
    for i in band:
        z_np = encode(est.autoencoder, corpus10.entries[i].image[None])
        if not 0.05 <= float(competency_of_latent(est, z_np)[0]) <= 0.95:
            continue
        z_start = torch.from_numpy(z_np)
        gen = torch.Generator().manual_seed(600 + i)
        z_probe = z_start + 0.05 * (torch.rand(z_start.shape, generator=gen) * 2 - 1)
        z0 = z_start.reshape(-1)
        gn = float(_grad32(latent_pair(z0)[0], z_probe).double().norm())
        lat_cands.append((-gn, i, z0, z_probe))
    lat_cands.sort(key=lambda t: t[0])
    assert len(lat_cands) >= 4, "need competency-responsive latent probe points"
    for _, i, z0, z_probe in lat_cands[:4]:
        loss32, loss64 = latent_pair(z0)
        errs["latent"] += _central_difference_rel_errors(
            loss32, loss64, z_probe, n_probes=3, seed=300 + i)

    for name, rels in errs.items():
        assert len(rels) >= 10, f"{name}: only {len(rels)} probes"
        assert max(rels) < 1e-2, f"{name}: worst relative error {max(rels):.2e}"


def test_criterion_03_nearest_neighbor_oracle_equivalence(workspace, corpus10):
    """The neighbor generator matches an exhaustive L1 scan on 210 queries."""
    est = workspace.estimator
    pool = est.calibration_set
    queries = [(img, True, i) for i, img in enumerate(pool.images)]
    queries += [(e.image, False, -1) for e in corpus10.entries]
    assert len(queries) >= 200

    lat64 = pool.latents.astype(np.float64)
    for img, is_self, own_idx in queries:
        z = encode(est.autoencoder, img[None])[0].astype(np.float64)
        dists = np.abs(lat64 - z).sum(axis=1)
        ref_idx = int(np.argmin(dists))
        result = cf.generate("LNN", img, est)
        assert result.config["neighbor_index"] == ref_idx
        assert np.array_equal(
            pool.latents[result.config["neighbor_index"]], pool.latents[ref_idx])
        if is_self:
            assert dists[own_idx] == 0.0
            assert dists[ref_idx] == 0.0


def test_criterion_04_stopping_soundness(workspace, corpus10, results10, monkeypatch):
    """valid <=> recomputed competency >= threshold; pixel iterates stay in [0,1]."""
    est = workspace.estimator
    thr = est.threshold
    for method, results in results10.items():
        for result in results:
            fresh = float(competency(est, result.counterfactual))
            if result.valid:
                assert fresh >= thr - 1e-6, f"{method}: valid but scores {fresh}"
            else:
                assert fresh < thr + 1e-6, f"{method}: invalid but scores {fresh}"

    # Every pixel-space iterate passes through the competency forward pass,
    # so recording its inputs observes the full optimization trajectory.
    seen = {"lo": np.inf, "hi": -np.inf, "calls": 0}
    inner = est.competency_t

    def recording(v):
        seen["lo"] = min(seen["lo"], float(v.detach().min()))
        seen["hi"] = max(seen["hi"], float(v.detach().max()))
        seen["calls"] += 1
        return inner(v)

    monkeypatch.setattr(est, "competency_t", recording)
    first_per_cause = {}
    for entry in corpus10.entries:
        first_per_cause.setdefault(entry.cause, entry)
    for entry in first_per_cause.values():
        cf.generate("IGD", entry.image, est)
        cf.generate("FGD", entry.image, est)
    assert seen["calls"] > len(first_per_cause) * 2
    assert seen["lo"] >= 0.0
    assert seen["hi"] <= 1.0


def test_criterion_05_calibration_quality(workspace):
    """Calibrated scores track holdout accuracy; clean vs corrupted separation."""
    est = workspace.estimator
    deviation = est.calibration.fit_info["decile_check"]["mean_abs_deviation"]
    assert deviation <= 0.15

    calib = workspace.splits.calib.images
    clean_scores = competency(est, calib)
    assert (clean_scores >= est.threshold).mean() >= 0.85

    noisy = np.stack([add_uniform_noise(img, 0.5, seed=i)
                      for i, img in enumerate(calib)])
    noisy_scores = competency(est, noisy)
    assert (noisy_scores < est.threshold).mean() >= 0.90


def test_criterion_06_corpus_contract(workspace, tmp_path):
    """Quota 100 yields exactly 600 below-threshold images, byte-reproducibly."""
    est, pool, heldout = (workspace.estimator, workspace.pool,
                          workspace.splits.heldout)
    corpus_a = synthesize_corpus(est, pool, heldout, per_cause_quota=100, seed=0)
    assert len(corpus_a.entries) == 600
    assert corpus_a.per_cause_counts() == {c: 100 for c in CAUSES}
    assert all(e.score < est.threshold for e in corpus_a.entries)

    corpus_b = synthesize_corpus(est, pool, heldout, per_cause_quota=100, seed=0)
    path_a = write_corpus(corpus_a, tmp_path / "a")
    path_b = write_corpus(corpus_b, tmp_path / "b")
    assert path_a.read_bytes() == path_b.read_bytes()
    assert load_corpus(tmp_path / "a").manifest() == corpus_a.manifest()


def test_criterion_07_report_orderings(report10):
    """Realism, proximity, success, and speed orderings across the methods."""
    rows = {r.method: r for r in report10.rows}
    one_shot = ("Reco", "LGD", "LNN")
    for m in one_shot:
        assert rows[m].fid < rows["Orig"].fid, f"{m} FID not below Orig"
        assert rows[m].kid < rows["Orig"].kid, f"{m} KID not below Orig"
    for m in one_shot:
        assert rows["IGD"].perceptual < rows[m].perceptual
    for m in ("IGD", "FGD", "Reco", "LNN"):
        assert rows["LGD"].success_rate >= rows[m].success_rate
    assert rows["LGD"].success_rate >= 90.0
    for m in ("Reco", "LNN"):
        assert rows[m].mean_time < 0.10 * rows["LGD"].mean_time


def test_criterion_08_explanation_pipeline(workspace, corpus10):
    """Exact prompt texts, perfect oracle grid, forced adversarial grid,
    bitwise left half in composites."""
    t = ex.load_templates()
    assert t.dataset_contexts["lunar"] == (
        "I trained a CNN for image classification from a set of images obtained "
        "from a simulated lunar environment. The classifier learns to distinguish "
        "between different regions in this environment, such as regions with "
        "smooth terrain, regions with bumpy terrain, regions at the edge of a "
        "crater, regions inside a crater, and regions near a hill.")
    assert t.dataset_contexts["speed"] == (
        "I trained a CNN for image classification from a dataset containing "
        "speed limit signs. The classifier learns to distinguish between seven "
        "(7) different speed limits: 30, 50, 60, 70, 80, 100, and 120 km/hr.")
    assert t.estimator_context == (
        "In addition to the classification model, I trained a "
        "reconstruction-based competency estimator that estimates the "
        "probability that the classifier's prediction is accurate for a "
        "given image.")
    assert t.query_without_counterfactual == (
        "Here is an image for which the classifier is not confident. In a "
        "single sentence, explain what properties of the image itself might "
        "lead to the observed reduction in model confidence.")
    assert t.query_with_counterfactual == (
        "Here are two images side-by-side. The first (on the left) is the "
        "original image, for which my classifier is not confident. The second "
        "image (on the right) is a similar image, for which my model is more "
        "confident. In a single sentence, explain what properties of the "
        "original image might have led to the observed reduction in model "
        "confidence.")

    oracle = ex.run_explanation_experiment(
        corpus10, ["None", "Reco", "LGD", "LNN"], workspace.estimator,
        ex.OracleStub())
    for method, cells in oracle.accuracies.items():
        for cause, acc in cells.items():
            assert acc == 1.0, f"oracle {method}/{cause} = {acc}"

    adversarial = ex.run_explanation_experiment(
        corpus10, ["None", "Reco"], workspace.estimator,
        ex.StaticStub("The image is too dark."))
    forced = {c: (1.0 if c == "brightness" else 0.0) for c in CAUSES}
    assert adversarial.accuracies["None"] == forced
    assert adversarial.accuracies["Reco"] == forced

    entry = corpus10.entries[0]
    result = cf.generate("Reco", entry.image, workspace.estimator)
    combo = ex.compose_side_by_side(entry.image, result.counterfactual)
    width = entry.image.shape[1]
    assert np.array_equal(combo[:, :width], entry.image)


def test_criterion_09_finetune_builder(workspace, corpus10):
    """6 x quota tuning pairs with exact cause texts; no leakage from the
    evaluation corpus."""
    est = workspace.estimator
    eval_sources = {e.source_id for e in corpus10.entries if e.cause != "spatial"}
    eval_spatial = {e.source_id for e in corpus10.entries if e.cause == "spatial"}
    pool, heldout = workspace.pool, workspace.splits.heldout
    keep = [i for i, sid in enumerate(pool.ids) if sid not in eval_sources]
    keep_h = [i for i, sid in enumerate(heldout.ids) if sid not in eval_spatial]
    extra_pool = LabeledImageSet(images=pool.images[keep],
                                 labels=[pool.labels[i] for i in keep],
                                 ids=[pool.ids[i] for i in keep])
    extra_heldout = LabeledImageSet(images=heldout.images[keep_h],
                                    labels=[heldout.labels[i] for i in keep_h],
                                    ids=[heldout.ids[i] for i in keep_h])
    extra = synthesize_corpus(est, extra_pool, extra_heldout,
                              per_cause_quota=10, seed=1)

    pairs = ex.build_finetune_dataset(extra, eval_corpus=corpus10)
    assert len(pairs) == 6 * 10
    assert ex.CAUSE_TEMPLATES[("saturation", "up")] == \
        "The original image is over-saturated."
    over = [p for p in pairs if p.target == "The original image is over-saturated."]
    assert over and all(p.true_cause == "saturation" for p in over)
    for p in pairs:
        assert p.target in ex.CAUSE_TEMPLATES.values()
        assert p.query == ex.load_templates().query_without_counterfactual

    with pytest.raises(DisjointnessError):
        ex.build_finetune_dataset(corpus10, eval_corpus=corpus10)


@pytest.mark.skipif(
    not (os.environ.get("COMPCF_ENDPOINT_URL") and os.environ.get("COMPCF_ENDPOINT_MODEL")),
    reason="set COMPCF_ENDPOINT_URL / COMPCF_ENDPOINT_MODEL (and optionally "
           "COMPCF_API_KEY) to run the live-endpoint comparison")
def test_criterion_10_networked_informational(workspace, corpus10):
    """Live endpoint: counterfactual-aided accuracy should not trail unaided
    accuracy on the noise and pixelation causes. Informational only."""
    from compcf.perturb import LowCompetencyCorpus

    client = ex.HTTPVisionClient(os.environ["COMPCF_ENDPOINT_URL"],
                                 os.environ["COMPCF_ENDPOINT_MODEL"],
                                 api_key=os.environ.get("COMPCF_API_KEY", ""))
    entries = [e for c in ("noise", "pixelation")
               for e in corpus10.entries if e.cause == c][:10]
    subset = LowCompetencyCorpus(entries=entries, threshold=corpus10.threshold,
                                 seed=corpus10.seed, skipped={})
    grid = ex.run_explanation_experiment(subset, ["None", "Reco"],
                                         workspace.estimator, client)
    unaided = np.mean([grid.accuracies["None"][c] for c in ("noise", "pixelation")])
    aided = np.mean([grid.accuracies["Reco"][c] for c in ("noise", "pixelation")])
    if aided < unaided:
        pytest.xfail(f"informational: aided {aided:.2f} < unaided {unaided:.2f}")
