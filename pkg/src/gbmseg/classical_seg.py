"""Autoencoder features + K-means clustering as a classical tumor segmentation baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .errors import ValidationError
from .training import AdamState, TrainConfig, adam_step

MIN_TUMOR_AREA = 50


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations: int
    inertia_history: list = field(default_factory=list)
    # inertia per iteration for every restart, winner included
    run_histories: list = field(default_factory=list)


def _sq_dists(points, centroids):
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp(points, k, rng):
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining points coincide with a centre: take the first unused index
            used = set(chosen)
            nxt = next(i for i in range(n) if i not in used)
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen].copy()


def _lloyd(x, k, rng, max_iters, tol):
    n = len(x)
    centroids = _kmeanspp(x, k, rng)
    history = []
    it = 0
    while True:
        d2 = _sq_dists(x, centroids)
        assign = d2.argmin(axis=1)
        nearest = d2[np.arange(n), assign]
        inertia = float(nearest.sum())
        if history and inertia > history[-1] + 1e-9 * max(1.0, history[-1]):
            raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        if it >= max_iters or (it > 0 and shift < tol):
            break
        it += 1
        new = centroids.copy()
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = x[assign == j].mean(axis=0)
        taken = set()
        for j in np.flatnonzero(counts == 0):
            for i in np.argsort(-nearest, kind="stable"):
                if int(i) not in taken:
                    taken.add(int(i))
                    new[j] = x[i]
                    break
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
    return KMeansResult(centroids=centroids, assignments=assign, inertia=history[-1], iterations=it,
                        inertia_history=history)


def kmeans(points, k: int, seed: int = 0, max_iters: int = 300, tol: float = 1e-6,
           n_init: int = 10) -> KMeansResult:
    """Lloyd's algorithm from seeded k-means++ starts; the lowest-inertia run wins.

    Ties in assignment go to the lowest centroid index. An empty cluster is
    re-seeded at the point farthest from its current centroid. Inertia is
    checked to be non-increasing on every iteration of every run.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValidationError(f"points must be N x D, got shape {x.shape}")
    n = len(x)
    if k < 1 or n < k:
        raise ValidationError(f"need N >= k >= 1, got N={n}, k={k}")
    if n_init < 1:
        raise ValidationError("n_init must be >= 1")
    if not np.isfinite(x).all():
        raise ValidationError("points contain non-finite values")

    rng = np.random.default_rng(seed)
    best = None
    histories = []
    for _ in range(n_init):
        res = _lloyd(x, k, rng, max_iters, tol)
        histories.append(res.inertia_history)
        if best is None or res.inertia < best.inertia:
            best = res
    best.run_histories = histories
    return best


@dataclass(frozen=True)
class AutoencoderSpec:
    latent_channels: int = 8
    depth: int = 2
    input_side: int = 256
    base_channels: int = 16

    def __post_init__(self):
        if self.depth < 1 or self.latent_channels < 1:
            raise ValidationError("depth and latent_channels must be >= 1")
        if self.input_side % (2 ** self.depth):
            raise ValidationError(f"input_side {self.input_side} not divisible by 2**depth")

    @property
    def latent_side(self) -> int:
        return self.input_side // 2 ** self.depth


class ConvAutoencoder(nn.Module):
    def __init__(self, spec: AutoencoderSpec):
        super().__init__()
        self.spec = spec
        enc, cin = [], 1
        for i in range(spec.depth):
            w = spec.base_channels * 2 ** i
            enc += [nn.Conv2d(cin, w, 3, padding=1), nn.ReLU(), nn.Conv2d(w, w, 3, stride=2, padding=1), nn.ReLU()]
            cin = w
        enc.append(nn.Conv2d(cin, spec.latent_channels, 1))
        self.encoder = nn.Sequential(*enc)
        dec, cin = [], spec.latent_channels
        for i in reversed(range(spec.depth)):
            w = spec.base_channels * 2 ** i
            dec += [nn.ConvTranspose2d(cin, w, 2, stride=2), nn.ReLU()]
            cin = w
        dec.append(nn.Conv2d(cin, 1, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

    def forward(self, x):
        return torch.sigmoid(self.decoder(self.encoder(x)))


def build_autoencoder(spec: AutoencoderSpec, seed: int = 0) -> ConvAutoencoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ConvAutoencoder(spec)
    return model


def _as_batch(images, side):
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    if x.shape[1:] != (1, side, side):
        raise ValidationError(f"expected images of shape (N, 1, {side}, {side}), got {x.shape}")
    return torch.from_numpy(x)


def fit_autoencoder(images, spec: AutoencoderSpec, config: TrainConfig = TrainConfig(epochs=50)):
    """Mean-squared reconstruction training with Adam; returns (autoencoder, per-epoch MSE)."""
    x = _as_batch(images, spec.input_side)
    ae = build_autoencoder(spec, config.seed)
    rng = np.random.default_rng(config.seed)
    named = dict(ae.named_parameters())
    state = AdamState()
    losses = []
    for _ in range(config.epochs):
        ae.train()
        order = torch.from_numpy(rng.permutation(len(x)))
        for start in range(0, len(x), config.batch_size):
            batch = x[order[start:start + config.batch_size]]
            ae.zero_grad(set_to_none=True)
            loss = F.mse_loss(ae(batch), batch)
            loss.backward()
            grads = {n: p.grad for n, p in named.items() if p.grad is not None}
            new, state = adam_step({n: p.detach() for n, p in named.items()}, grads, state, config, state.t + 1)
            with torch.no_grad():
                for n, p in named.items():
                    p.copy_(new[n])
        with torch.no_grad():
            losses.append(float(F.mse_loss(ae(x), x)))
    ae.eval()
    return ae, losses


def train_autoencoder(images, spec: AutoencoderSpec, config: TrainConfig = TrainConfig(epochs=50)) -> nn.Module:
    """Train the autoencoder and hand back its encoder half."""
    ae, _ = fit_autoencoder(images, spec, config)
    encoder = ae.encoder
    encoder.spec = spec
    return encoder


def encode(encoder: nn.Module, image) -> np.ndarray:
    x = _as_batch(image, encoder.spec.input_side)
    with torch.no_grad():
        return encoder(x)[0].numpy()


def pixel_features(image, encoder: nn.Module | None = None) -> np.ndarray:
    """(H*W, D) rows of (intensity, row/side, col/side[, latent channels scaled to [0, 1]])."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    side = max(h, w)
    r, c = np.mgrid[0:h, 0:w]
    feats = [img, r / side, c / side]
    if encoder is not None:
        with torch.no_grad():
            lat = encoder(_as_batch(img, encoder.spec.input_side))
            lat = F.interpolate(lat, size=(h, w), mode="bilinear", align_corners=False)[0].double().numpy()
        for ch in lat:
            span = ch.max() - ch.min()
            feats.append((ch - ch.min()) / span if span > 0 else np.zeros_like(ch))
    return np.stack([f.ravel() for f in feats], axis=1)


def kmeans_segment(image, encoder: nn.Module | None = None, k: int = 4, seed: int = 0,
                   max_iters: int = 100, tol: float = 1e-6, n_init: int = 10) -> np.ndarray:
    """Cluster pixels and label clusters by descending mean intensity (0 = brightest)."""
    if k < 2:
        raise ValidationError("k must be >= 2 for a segmentation")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError(f"expected a 2-D grayscale image, got shape {img.shape}")
    res = kmeans(pixel_features(img, encoder), k, seed=seed, max_iters=max_iters, tol=tol, n_init=n_init)
    flat = img.ravel()
    present = np.unique(res.assignments)
    means = {j: flat[res.assignments == j].mean() for j in present}
    order = sorted(present, key=lambda j: (-means[j], j))
    lut = np.zeros(k, dtype=np.int64)
    for new, old in enumerate(order):
        lut[old] = new
    return lut[res.assignments].reshape(img.shape)


def remove_small_components(binary, min_area: int) -> np.ndarray:
    labels, n = ndimage.label(binary)
    if n == 0:
        return np.zeros_like(binary, dtype=bool)
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_area
    keep[0] = False
    return keep[labels]


def extract_tumor_mask(seg, image=None, min_area: int = MIN_TUMOR_AREA, brightest: bool = True) -> np.ndarray:
    """Brightest cluster as tumor, minus connected components smaller than min_area.

    brightest=False picks the darkest cluster instead, for modalities where the
    lesion is hypointense. A segmentation with a single cluster has nothing to
    contrast against and yields an empty mask.
    """
    seg = np.asarray(seg)
    if len(np.unique(seg)) < 2:
        return np.zeros(seg.shape, dtype=bool)
    if image is not None:
        img = np.asarray(image, dtype=np.float64)
        labels = np.unique(seg)
        sign = 1.0 if brightest else -1.0
        tumor = max(labels, key=lambda j: (sign * img[seg == j].mean(), -j))
    else:
        # kmeans_segment labels clusters by descending brightness
        tumor = 0 if brightest else int(seg.max())
    return remove_small_components(seg == tumor, min_area)
