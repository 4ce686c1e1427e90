"""Shared fixtures: one trained reference workspace reused across the suite.

Training runs once per session on the procedural shapes dataset; everything
downstream (calibration, corpora, counterfactuals, reports) derives from it
deterministically, so tests can assert on stable values.
"""

import dataclasses

import numpy as np
import pytest

from compcf import counterfactuals as cf
from compcf.cli import _source_pool
from compcf.competency import CompetencyEstimator, calibrate
from compcf.datasets import DatasetSplits, LabeledImageSet, make_shapes_dataset, split_dataset
from compcf.models import TrainingConfig, train_autoencoder, train_classifier
from compcf.perturb import LowCompetencyCorpus, synthesize_corpus

THRESHOLD = 0.7
AUTOENCODER_CONFIG = dict(seed=0, conv_channels=(32, 64, 128), epochs=120,
                          input_noise=0.2, latent_dim=16)


@dataclasses.dataclass
class Workspace:
    splits: DatasetSplits
    estimator: CompetencyEstimator
    pool: LabeledImageSet  # high-competency sources for corpus synthesis


@pytest.fixture(scope="session")
def workspace() -> Workspace:
    dataset = make_shapes_dataset(per_class=200, seed=0)
    splits = split_dataset(dataset)
    clf = train_classifier(splits.train, TrainingConfig(seed=0), val_set=splits.val)
    ae = train_autoencoder(splits.train, TrainingConfig(**AUTOENCODER_CONFIG),
                           val_set=splits.val)
    est = CompetencyEstimator(clf, ae, threshold=THRESHOLD)
    calibrate(est, splits.calib)
    return Workspace(splits=splits, estimator=est, pool=_source_pool(est, splits))


@pytest.fixture(scope="session")
def corpus10(workspace) -> LowCompetencyCorpus:
    """Quota-10 evaluation corpus: 60 low-competency images, 10 per cause."""
    return synthesize_corpus(workspace.estimator, workspace.pool,
                             workspace.splits.heldout, per_cause_quota=10, seed=0)


@pytest.fixture(scope="session")
def results10(workspace, corpus10) -> dict:
    """Counterfactuals from every method for every corpus image."""
    out = {}
    for method in cf.METHODS:
        out[method] = [cf.generate(method, e.image, workspace.estimator)
                       for e in corpus10.entries]
    return out


@pytest.fixture(scope="session")
def report10(workspace, corpus10):
    from compcf.metrics import evaluate_methods

    return evaluate_methods(corpus10, ["Orig"] + list(cf.METHODS),
                            workspace.estimator, corpus_id="corpus10")


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
