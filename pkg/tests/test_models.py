"""Classifier and autoencoder training, inference, and checkpointing."""

import numpy as np
import pytest

from compcf.errors import ConfigError, ShapeMismatchError
from compcf.models import (TrainingConfig, checkpoint_hash, classify, decode,
                           encode, extract_features, image_to_tensor,
                           load_autoencoder, load_classifier, reconstruct,
                           save_autoencoder, save_classifier, tensor_to_image)


def test_training_config_validation():
    TrainingConfig().validate()
    with pytest.raises(ConfigError):
        TrainingConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainingConfig(learning_rate=-1.0).validate()
    with pytest.raises(ConfigError):
        TrainingConfig(input_noise=1.0).validate()
    with pytest.raises(ConfigError):
        TrainingConfig(input_noise=-0.1).validate()


def test_tensor_image_round_trip():
    rng = np.random.default_rng(2)
    img = rng.random((32, 32, 3)).astype(np.float32)
    t = image_to_tensor(img)
    assert t.shape == (1, 3, 32, 32)
    assert np.array_equal(tensor_to_image(t[0]), img)
    batch = rng.random((5, 32, 32, 3)).astype(np.float32)
    assert image_to_tensor(batch).shape == (5, 3, 32, 32)


def test_classifier_fits_training_distribution(workspace):
    assert workspace.estimator.classifier.val_accuracy >= 0.98


def test_classifier_outputs(workspace):
    clf = workspace.estimator.classifier
    images = workspace.splits.test.images[:8]
    probs = classify(clf, images)
    assert probs.shape == (8, len(clf.class_labels))
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)
    assert np.array_equal(probs, classify(clf, images))


def test_feature_extraction_shape(workspace):
    clf = workspace.estimator.classifier
    feats = extract_features(clf, workspace.splits.test.images[:4])
    assert feats.ndim == 2 and feats.shape[0] == 4
    assert np.isfinite(feats).all()


def test_autoencoder_quality_and_shapes(workspace):
    ae = workspace.estimator.autoencoder
    assert ae.val_mse < 0.02
    images = workspace.splits.test.images[:4]
    z = encode(ae, images)
    assert z.shape == (4, ae.latent_dim)
    out = decode(ae, z)
    assert out.shape == images.shape
    assert np.array_equal(out, reconstruct(ae, images))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_reconstruction_beats_identity_on_noise(workspace):
    """Denoised training pulls corrupted inputs back toward clean renders."""
    ae = workspace.estimator.autoencoder
    rng = np.random.default_rng(8)
    clean = workspace.splits.test.images[:16]
    noisy = np.clip(clean + 0.25 * (rng.random(clean.shape, dtype=np.float32) * 2 - 1),
                    0.0, 1.0).astype(np.float32)
    recon = reconstruct(ae, noisy)
    err_recon = float(np.mean((recon - clean) ** 2))
    err_noisy = float(np.mean((noisy - clean) ** 2))
    assert err_recon < err_noisy


def test_classifier_checkpoint_round_trip(workspace, tmp_path):
    clf = workspace.estimator.classifier
    path = tmp_path / "clf.pt"
    save_classifier(clf, path)
    loaded = load_classifier(path)
    assert loaded.class_labels == clf.class_labels
    assert loaded.val_accuracy == clf.val_accuracy
    images = workspace.splits.test.images[:6]
    assert np.array_equal(classify(loaded, images), classify(clf, images))
    assert len(checkpoint_hash(path)) == 64
    assert checkpoint_hash(path) == checkpoint_hash(path)


def test_autoencoder_checkpoint_round_trip(workspace, tmp_path):
    ae = workspace.estimator.autoencoder
    path = tmp_path / "ae.pt"
    save_autoencoder(ae, path)
    loaded = load_autoencoder(path)
    assert loaded.latent_dim == ae.latent_dim
    images = workspace.splits.test.images[:6]
    assert np.array_equal(reconstruct(loaded, images), reconstruct(ae, images))


def test_inference_rejects_wrong_shape(workspace):
    clf = workspace.estimator.classifier
    with pytest.raises(ShapeMismatchError):
        classify(clf, np.zeros((2, 16, 16, 3), dtype=np.float32))
