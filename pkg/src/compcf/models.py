"""Classifier and autoencoder: the two networks everything else depends on.

Both are small fixed-architecture convolutional networks meant to train in
seconds on CPU. The classifier exposes its penultimate activations (the
input of the final softmax layer) as the feature vector; the autoencoder
exposes its bottleneck code as the latent vector. All forward passes are
deterministic in eval mode and differentiable with respect to their
inputs, which the downstream gradient-descent generators rely on.

Checkpoints are a single weights file plus a JSON sidecar holding the
architecture descriptor and the training seed, so any run can be rebuilt
from disk exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .datasets import LabeledImageSet
from .errors import ConfigError, DataError, ShapeMismatchError, TrainingError

CHECKPOINT_FORMAT_VERSION = 1


@dataclasses.dataclass
class TrainingConfig:
    """Training hyperparameters plus the architecture descriptor.

    The seed fixes every source of randomness (init, shuffling), so two
    runs with identical config and data produce bit-identical weights.
    """

    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    conv_channels: tuple[int, ...] = (16, 32, 64)
    feature_dim: int = 64  # classifier penultimate width
    latent_dim: int = 64  # autoencoder bottleneck width
    accuracy_floor: float = 0.90  # classifier non-convergence threshold
    mse_ceiling: float = 0.02  # autoencoder non-convergence threshold
    # mild smoothing keeps softmax confidence informative on ambiguous
    # inputs instead of saturating at 1.0 for everything
    label_smoothing: float = 0.03
    # autoencoder only: corrupt the encoder input with uniform noise of
    # this magnitude while regressing onto the clean image (denoising
    # objective). The decoder then projects onto the clean manifold, and
    # off-distribution inputs earn larger reconstruction errors.
    input_noise: float = 0.0

    def validate(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise ConfigError("label_smoothing must lie in [0, 0.5)")
        if not 0.0 <= self.input_noise < 1.0:
            raise ConfigError("input_noise must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.feature_dim <= 0:
            raise ConfigError("feature_dim must be positive")
        if self.latent_dim <= 0:
            raise ConfigError("latent_dim must be positive")
        if not self.conv_channels or any(c <= 0 for c in self.conv_channels):
            raise ConfigError("conv_channels must be positive")


def image_to_tensor(x: np.ndarray) -> torch.Tensor:
    """HWC or NHWC float array in [0,1] -> NCHW float32 tensor."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeMismatchError(f"expected HWC or NHWC image array, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """NCHW or CHW tensor -> NHWC or HWC float32 array."""
    arr = t.detach().cpu().numpy()
    if arr.ndim == 3:
        return np.ascontiguousarray(arr.transpose(1, 2, 0)).astype(np.float32)
    return np.ascontiguousarray(arr.transpose(0, 2, 3, 1)).astype(np.float32)


def _check_input_shape(x: np.ndarray, input_shape: tuple[int, int, int]) -> None:
    shape = tuple(np.asarray(x).shape)
    if shape[-3:] != tuple(input_shape):
        raise ShapeMismatchError(f"expected image shape {tuple(input_shape)}, got {shape}")


class _ConvFeatureExtractor(nn.Module):
    """Conv blocks + flatten + linear + ReLU; output is the feature vector."""

    def __init__(self, input_shape, conv_channels, feature_dim):
        super().__init__()
        h, w, c = input_shape
        layers: list[nn.Module] = []
        in_ch = c
        for out_ch in conv_channels:
            layers += [nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            in_ch = out_ch
            h, w = h // 2, w // 2
        self.convs = nn.Sequential(*layers)
        self.fc = nn.Linear(in_ch * h * w, feature_dim)

    def forward(self, x):
        z = self.convs(x)
        return torch.relu(self.fc(z.flatten(1)))


class _SoftmaxHead(nn.Module):
    """Final linear layer followed by softmax over the training classes."""

    def __init__(self, feature_dim, num_classes):
        super().__init__()
        self.linear = nn.Linear(feature_dim, num_classes)

    def forward(self, features):
        return torch.softmax(self.linear(features), dim=-1)


class Classifier:
    """Image classifier with an exposed feature extractor.

    The feature vector is defined as the input of the final softmax layer;
    `softmax_head` maps it to a probability vector over `class_labels`.
    """

    def __init__(self, feature_extractor, softmax_head, class_labels, input_shape, cfg):
        self.feature_extractor = feature_extractor
        self.softmax_head = softmax_head
        self.class_labels = list(class_labels)
        self.input_shape = tuple(input_shape)
        self.cfg = cfg
        self.val_accuracy: float | None = None
        self.eval()

    def eval(self):
        self.feature_extractor.eval()
        self.softmax_head.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def parameters(self):
        yield from self.feature_extractor.parameters()
        yield from self.softmax_head.parameters()

    # torch-level paths; keep gradients flowing to the input

    def features_t(self, x: torch.Tensor) -> torch.Tensor:
        return self.feature_extractor(x)

    def probs_t(self, x: torch.Tensor) -> torch.Tensor:
        return self.softmax_head(self.features_t(x))

    def logits_t(self, x: torch.Tensor) -> torch.Tensor:
        return self.softmax_head.linear(self.features_t(x))


class Autoencoder:
    """Convolutional autoencoder; decoder output is sigmoid-bounded to [0,1]."""

    def __init__(self, encoder, decoder, latent_dim, input_shape, cfg):
        self.encoder = encoder
        self.decoder = decoder
        self.latent_dim = int(latent_dim)
        self.input_shape = tuple(input_shape)
        self.cfg = cfg
        self.val_mse: float | None = None
        self.eval()

    def eval(self):
        self.encoder.eval()
        self.decoder.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def parameters(self):
        yield from self.encoder.parameters()
        yield from self.decoder.parameters()

    def encode_t(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def decode_t(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.latent_dim:
            raise ShapeMismatchError(
                f"latent dimension mismatch: expected {self.latent_dim}, got {z.shape[-1]}"
            )
        return self.decoder(z)


class _ConvEncoder(nn.Module):
    def __init__(self, input_shape, conv_channels, latent_dim):
        super().__init__()
        h, w, c = input_shape
        layers: list[nn.Module] = []
        in_ch = c
        for out_ch in conv_channels:
            layers += [nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1), nn.ReLU()]
            in_ch = out_ch
            h, w = (h + 1) // 2, (w + 1) // 2
        self.convs = nn.Sequential(*layers)
        self.fc = nn.Linear(in_ch * h * w, latent_dim)
        self.out_spatial = (in_ch, h, w)

    def forward(self, x):
        return self.fc(self.convs(x).flatten(1))


class _ConvDecoder(nn.Module):
    def __init__(self, input_shape, conv_channels, latent_dim, enc_spatial):
        super().__init__()
        c_out = input_shape[2]
        ch, h, w = enc_spatial
        self.fc = nn.Linear(latent_dim, ch * h * w)
        self.start = (ch, h, w)
        layers: list[nn.Module] = []
        rev = list(conv_channels[::-1][1:]) + [c_out]
        in_ch = ch
        for i, out_ch in enumerate(rev):
            layers += [nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1)]
            layers += [nn.Sigmoid() if i == len(rev) - 1 else nn.ReLU()]
            in_ch = out_ch
        self.deconvs = nn.Sequential(*layers)

    def forward(self, z):
        x = torch.relu(self.fc(z))
        x = x.view(-1, *self.start)
        out = self.deconvs(x)
        return out if z.ndim > 1 else out.squeeze(0)


def _dataset_tensors(dataset: LabeledImageSet, class_labels: list[str]):
    X = image_to_tensor(dataset.images)
    label_index = {lab: i for i, lab in enumerate(class_labels)}
    y = torch.tensor([label_index[lab] for lab in dataset.labels], dtype=torch.long)
    return X, y


def _carve_val(dataset: LabeledImageSet, seed: int, frac: float = 0.1):
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5A)))
    order = rng.permutation(len(dataset))
    n_val = max(1, int(round(frac * len(dataset))))
    return dataset.subset(sorted(order[n_val:])), dataset.subset(sorted(order[:n_val]))


def train_classifier(
    dataset: LabeledImageSet,
    cfg: TrainingConfig,
    val_set: LabeledImageSet | None = None,
) -> Classifier:
    """Train the classifier; raises TrainingError below the accuracy floor.

    If no validation set is given, a held-in 10% split is carved from the
    training data (deterministically from the seed).
    """
    cfg.validate()
    counts = dataset.count_per_class()
    if len(counts) < 2:
        raise DataError(f"need at least 2 classes, got {len(counts)}")
    if min(counts.values()) < 20:
        raise DataError(f"need at least 20 images per class, got {counts}")
    input_shape = dataset.images.shape[1:]
    if val_set is None:
        dataset, val_set = _carve_val(dataset, cfg.seed)

    torch.manual_seed(cfg.seed)
    class_labels = sorted(counts)
    fx = _ConvFeatureExtractor(input_shape, cfg.conv_channels, cfg.feature_dim)
    head = _SoftmaxHead(cfg.feature_dim, len(class_labels))
    params = list(fx.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)

    X, y = _dataset_tensors(dataset, class_labels)
    Xv, yv = _dataset_tensors(val_set, class_labels)
    shuffler = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xC1)))
    fx.train(), head.train()
    for _ in range(cfg.epochs):
        order = shuffler.permutation(len(X))
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            logits = head.linear(fx(X[idx]))
            loss = nn.functional.cross_entropy(
                logits, y[idx], label_smoothing=cfg.label_smoothing)
            loss.backward()
            opt.step()

    model = Classifier(fx, head, class_labels, input_shape, cfg)
    with torch.no_grad():
        acc = float((model.probs_t(Xv).argmax(dim=1) == yv).float().mean())
    model.val_accuracy = acc
    if acc < cfg.accuracy_floor:
        raise TrainingError(
            f"classifier failed to converge: val accuracy {acc:.3f} < floor {cfg.accuracy_floor}"
        )
    return model


def train_autoencoder(
    dataset: LabeledImageSet,
    cfg: TrainingConfig,
    val_set: LabeledImageSet | None = None,
) -> Autoencoder:
    """Train the reconstruction autoencoder; raises TrainingError above the MSE ceiling."""
    cfg.validate()
    input_shape = dataset.images.shape[1:]
    if val_set is None:
        dataset, val_set = _carve_val(dataset, cfg.seed)

    torch.manual_seed(cfg.seed + 1)
    enc = _ConvEncoder(input_shape, cfg.conv_channels, cfg.latent_dim)
    dec = _ConvDecoder(input_shape, cfg.conv_channels, cfg.latent_dim, enc.out_spatial)
    params = list(enc.parameters()) + list(dec.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)

    X = image_to_tensor(dataset.images)
    Xv = image_to_tensor(val_set.images)
    shuffler = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xAE)))
    noise_gen = torch.Generator().manual_seed(cfg.seed + 2)
    enc.train(), dec.train()
    for _ in range(cfg.epochs):
        order = shuffler.permutation(len(X))
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            clean = X[idx]
            inp = clean
            if cfg.input_noise > 0.0:
                jitter = torch.rand(clean.shape, generator=noise_gen) * 2.0 - 1.0
                inp = (clean + cfg.input_noise * jitter).clamp(0.0, 1.0)
            opt.zero_grad()
            recon = dec(enc(inp))
            loss = nn.functional.mse_loss(recon, clean)
            loss.backward()
            opt.step()

    model = Autoencoder(enc, dec, cfg.latent_dim, input_shape, cfg)
    with torch.no_grad():
        mse = float(nn.functional.mse_loss(model.decode_t(model.encode_t(Xv)), Xv))
    model.val_mse = mse
    if mse > cfg.mse_ceiling:
        raise TrainingError(
            f"autoencoder failed to converge: val MSE {mse:.4f} > ceiling {cfg.mse_ceiling}"
        )
    return model


# numpy-level operation surface


def classify(model: Classifier, x: np.ndarray) -> np.ndarray:
    """Probability vector over model.class_labels (batched input -> matrix)."""
    _check_input_shape(x, model.input_shape)
    with torch.no_grad():
        probs = model.probs_t(image_to_tensor(x)).numpy()
    return probs[0] if np.asarray(x).ndim == 3 else probs


def extract_features(model: Classifier, x: np.ndarray) -> np.ndarray:
    """Penultimate activations fed to the softmax head (batched -> matrix)."""
    _check_input_shape(x, model.input_shape)
    with torch.no_grad():
        feats = model.features_t(image_to_tensor(x)).numpy()
    return feats[0] if np.asarray(x).ndim == 3 else feats


def encode(ae: Autoencoder, x: np.ndarray) -> np.ndarray:
    """Latent codes, computed image by image.

    Per-image evaluation keeps each latent independent of batch
    composition (float32 conv kernels vary with batch size), so the
    same picture always maps to the same code bitwise. Neighbor
    lookups rely on this.
    """
    _check_input_shape(x, ae.input_shape)
    t = image_to_tensor(x)
    with torch.no_grad():
        z = torch.cat([ae.encode_t(t[i:i + 1]) for i in range(t.shape[0])]).numpy()
    return z[0] if np.asarray(x).ndim == 3 else z


def decode(ae: Autoencoder, z: np.ndarray) -> np.ndarray:
    z_t = torch.from_numpy(np.asarray(z, dtype=np.float32))
    with torch.no_grad():
        out = ae.decode_t(z_t)
    return tensor_to_image(out)


def reconstruct(ae: Autoencoder, x: np.ndarray) -> np.ndarray:
    """decode(encode(x)), by definition."""
    return decode(ae, encode(ae, x))


# checkpoint persistence


def _sidecar_path(path: Path) -> Path:
    return Path(path).with_suffix(".json")


def _save_checkpoint(path: Path, state: dict, sidecar: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)
    sidecar = dict(sidecar, format_version=CHECKPOINT_FORMAT_VERSION)
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def save_classifier(model: Classifier, path: Path) -> None:
    _save_checkpoint(
        path,
        {"feature_extractor": model.feature_extractor.state_dict(),
         "softmax_head": model.softmax_head.state_dict()},
        {"kind": "classifier",
         "arch": dataclasses.asdict(model.cfg),
         "seed": model.cfg.seed,
         "class_labels": model.class_labels,
         "input_shape": list(model.input_shape),
         "val_accuracy": model.val_accuracy},
    )


def load_classifier(path: Path) -> Classifier:
    meta = json.loads(_sidecar_path(path).read_text())
    if meta.get("kind") != "classifier":
        raise DataError(f"{path} is not a classifier checkpoint")
    cfg = TrainingConfig(**{**meta["arch"], "conv_channels": tuple(meta["arch"]["conv_channels"])})
    fx = _ConvFeatureExtractor(meta["input_shape"], cfg.conv_channels, cfg.feature_dim)
    head = _SoftmaxHead(cfg.feature_dim, len(meta["class_labels"]))
    state = torch.load(path, weights_only=True)
    fx.load_state_dict(state["feature_extractor"])
    head.load_state_dict(state["softmax_head"])
    model = Classifier(fx, head, meta["class_labels"], meta["input_shape"], cfg)
    model.val_accuracy = meta.get("val_accuracy")
    return model


def save_autoencoder(model: Autoencoder, path: Path) -> None:
    _save_checkpoint(
        path,
        {"encoder": model.encoder.state_dict(), "decoder": model.decoder.state_dict()},
        {"kind": "autoencoder",
         "arch": dataclasses.asdict(model.cfg),
         "seed": model.cfg.seed,
         "input_shape": list(model.input_shape),
         "latent_dim": model.latent_dim,
         "val_mse": model.val_mse},
    )


def load_autoencoder(path: Path) -> Autoencoder:
    meta = json.loads(_sidecar_path(path).read_text())
    if meta.get("kind") != "autoencoder":
        raise DataError(f"{path} is not an autoencoder checkpoint")
    cfg = TrainingConfig(**{**meta["arch"], "conv_channels": tuple(meta["arch"]["conv_channels"])})
    enc = _ConvEncoder(meta["input_shape"], cfg.conv_channels, cfg.latent_dim)
    dec = _ConvDecoder(meta["input_shape"], cfg.conv_channels, cfg.latent_dim, enc.out_spatial)
    state = torch.load(path, weights_only=True)
    enc.load_state_dict(state["encoder"])
    dec.load_state_dict(state["decoder"])
    model = Autoencoder(enc, dec, cfg.latent_dim, meta["input_shape"], cfg)
    model.val_mse = meta.get("val_mse")
    return model


def checkpoint_hash(path: Path) -> str:
    """SHA-256 of the weights file, for run manifests."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
