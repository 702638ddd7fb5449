"""Synthetic multi-domain segmentation data with feature skew.

Content (blob shapes, hence labels) is drawn from a stream keyed only by
(seed, sample index), never by domain, so every domain shares the same
label maps and the label distribution matches across domains exactly.
Style is applied afterwards per domain: radial spectral band gains, a
gamma curve, a low-frequency bias field, and pixel noise. Identity styles
short-circuit, leaving the rendering bit-exact.

numpy's FFT is used here for image styling only; the differentiable
spectral path of the model has its own transform.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

# radial frequency band edges (normalized radius), 4 gain bands
_BAND_EDGES = (0.0, 0.08, 0.20, 0.45, 1.0000001)


@dataclass(frozen=True)
class DomainStyle:
    band_gains: tuple = (1.0, 1.0, 1.0, 1.0)
    gamma: float = 1.0
    bias_amp: float = 0.0
    bias_freq: tuple = (1.0, 0.5)  # fixed per-domain shading orientation
    bias_phase: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if len(self.band_gains) != len(_BAND_EDGES) - 1:
            raise ContractError(f"band_gains needs {len(_BAND_EDGES) - 1} entries")
        if any(g <= 0 for g in self.band_gains) or self.gamma <= 0:
            raise ContractError("gains and gamma must be positive")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be nonnegative")

    @property
    def is_identity(self) -> bool:
        return (all(g == 1.0 for g in self.band_gains) and self.gamma == 1.0
                and self.bias_amp == 0.0 and self.noise_sigma == 0.0)

    @staticmethod
    def identity() -> "DomainStyle":
        return DomainStyle()


class Dataset:
    """Images (n,1,H,W) in [0,1] with integer label maps (n,H,W)."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, domain_id: int, split: str):
        self.images = images
        self.labels = labels
        self.domain_id = domain_id
        self.split = split

    def __len__(self) -> int:
        return self.images.shape[0]


def _content_rng(seed: int, index: int):
    return np.random.default_rng(np.random.SeedSequence((seed, 0, index)))


def _style_rng(seed: int, domain_id: int, index: int):
    return np.random.default_rng(np.random.SeedSequence((seed, 1, domain_id, index)))


def _draw_labels(rng, h: int) -> np.ndarray:
    """Union of wobbled ellipses with 5-60% foreground; redraws otherwise."""
    yy, xx = np.mgrid[0:h, 0:h].astype(float)
    for _ in range(100):
        mask = np.zeros((h, h), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0.25 * h, 0.75 * h, size=2)
            a, b = rng.uniform(0.10 * h, 0.30 * h, size=2)
            theta = rng.uniform(0.0, np.pi)
            amp = rng.uniform(0.0, 0.15)
            k = int(rng.integers(2, 6))
            phase = rng.uniform(0.0, 2 * np.pi)
            u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
            v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
            r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
            phi = np.arctan2(v, u)
            mask |= r <= 1.0 + amp * np.sin(k * phi + phase)
        frac = mask.mean()
        if 0.05 <= frac <= 0.60:
            return mask.astype(np.int64)
    raise ContractError("could not draw a foreground fraction in [0.05, 0.60]")


def _render_content(rng, labels: np.ndarray) -> np.ndarray:
    """Style-independent rendering: base intensities plus smooth texture."""
    h = labels.shape[0]
    yy, xx = np.mgrid[0:h, 0:h].astype(float)
    img = np.where(labels == 1, 0.68, 0.32)
    for _ in range(3):
        fy, fx = rng.uniform(-3.0, 3.0, size=2)
        phase = rng.uniform(0.0, 2 * np.pi)
        amp = rng.uniform(0.03, 0.07)
        img = img + amp * np.cos(2 * np.pi * (fy * yy + fx * xx) / h + phase)
    return np.clip(img, 0.0, 1.0)


def _radial_gain_map(h: int, w: int, gains) -> np.ndarray:
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.sqrt(fy ** 2 + fx ** 2) / np.sqrt(0.5)  # normalize to [0,1]
    gain = np.ones((h, w))
    for band, g in enumerate(gains):
        lo, hi = _BAND_EDGES[band], _BAND_EDGES[band + 1]
        gain[(radius >= lo) & (radius < hi)] = g
    return gain


def apply_style(image: np.ndarray, style: DomainStyle, style_rng) -> np.ndarray:
    """Domain styling; never touches labels. Identity styles return the
    input unchanged (bit-exact)."""
    if style.is_identity:
        return image.copy()
    h, w = image.shape
    spec = np.fft.fft2(image)
    spec *= _radial_gain_map(h, w, style.band_gains)
    out = np.fft.ifft2(spec).real
    out = np.clip(out, 0.0, 1.0) ** style.gamma
    if style.bias_amp:
        yy, xx = np.mgrid[0:h, 0:w].astype(float)
        fy, fx = style.bias_freq
        out = out + style.bias_amp * np.cos(
            2 * np.pi * (fy * yy + fx * xx) / h + style.bias_phase)
    if style.noise_sigma:
        out = out + style.noise_sigma * style_rng.normal(size=(h, w))
    return np.clip(out, 0.0, 1.0)


def _make_sample(seed: int, index: int, domain_id: int, style: DomainStyle, h: int):
    rng = _content_rng(seed, index)
    labels = _draw_labels(rng, h)
    content = _render_content(rng, labels)
    image = apply_style(content, style, _style_rng(seed, domain_id, index))
    return image[None], labels


_TEST_INDEX_BASE = 1_000_000  # keeps test content disjoint from train content


def generate_domain(domain_id: int, style: DomainStyle, n_train: int, n_test: int,
                    seed: int, image_size: int = 64):
    """Deterministic (train, test) datasets for one domain.

    Content indices are shared across domains: the same seed and index give
    the same label map everywhere, only the styling differs.
    """
    if n_train < 1 or n_test < 1:
        raise ContractError("need at least one train and one test sample")
    train_imgs, train_labels = [], []
    for i in range(n_train):
        img, lab = _make_sample(seed, i, domain_id, style, image_size)
        train_imgs.append(img)
        train_labels.append(lab)
    test_imgs, test_labels = [], []
    for i in range(n_test):
        img, lab = _make_sample(seed, _TEST_INDEX_BASE + i, domain_id, style, image_size)
        test_imgs.append(img)
        test_labels.append(lab)
    return (Dataset(np.stack(train_imgs), np.stack(train_labels), domain_id, "train"),
            Dataset(np.stack(test_imgs), np.stack(test_labels), domain_id, "test"))


def default_styles(m: int):
    """Fixed distinct styles; domain 0 is the identity."""
    table = [
        DomainStyle(),
        DomainStyle(band_gains=(1.0, 0.35, 0.25, 0.20), gamma=1.90,
                    bias_amp=0.28, bias_freq=(0.8, 0.3), bias_phase=0.7,
                    noise_sigma=0.03),
        DomainStyle(band_gains=(1.0, 2.40, 3.40, 4.60), gamma=0.55,
                    bias_amp=0.0, noise_sigma=0.09),
        DomainStyle(band_gains=(1.0, 0.55, 2.60, 0.30), gamma=1.45,
                    bias_amp=0.40, bias_freq=(-0.4, 1.1), bias_phase=2.4,
                    noise_sigma=0.05),
        DomainStyle(band_gains=(1.0, 2.10, 0.40, 1.70), gamma=0.75,
                    bias_amp=0.30, bias_freq=(1.2, -0.6), bias_phase=4.1,
                    noise_sigma=0.06),
        DomainStyle(band_gains=(1.0, 0.30, 0.90, 2.20), gamma=1.35,
                    bias_amp=0.22, bias_freq=(0.3, 1.4), bias_phase=1.9,
                    noise_sigma=0.10),
    ]
    if m > len(table):
        raise ContractError(f"provide explicit styles for more than {len(table)} domains")
    return table[:m]


def make_federation_data(styles, n_train: int, n_test: int, seed: int,
                         image_size: int = 64):
    """One domain per client: client training sets plus per-domain test sets."""
    styles = list(styles)
    if len(set(styles)) != len(styles):
        raise ContractError("domain styles must be distinct")
    train_sets, test_sets = [], {}
    for domain_id, style in enumerate(styles):
        train, test = generate_domain(domain_id, style, n_train, n_test, seed,
                                      image_size)
        train_sets.append(train)
        test_sets[domain_id] = test
    return train_sets, test_sets


def augment_pair(image: np.ndarray, labels: np.ndarray, rng):
    """Shared random flip/rotation for an image (1,H,W) and its labels (H,W)."""
    k = int(rng.integers(0, 4))
    img = np.rot90(image, k, axes=(1, 2))
    lab = np.rot90(labels, k, axes=(0, 1))
    if rng.integers(0, 2):
        img = img[:, :, ::-1]
        lab = lab[:, ::-1]
    return np.ascontiguousarray(img), np.ascontiguousarray(lab)


def dump_dataset(dataset: Dataset, directory, seed=None, style=None) -> None:
    """Raw dump: little-endian float64 images, uint8 labels, and a text
    manifest describing shapes and provenance."""
    import os

    os.makedirs(directory, exist_ok=True)
    n, _, h, w = dataset.images.shape
    with open(os.path.join(directory, "images.f64"), "wb") as fh:
        fh.write(dataset.images.astype("<f8").tobytes())
    with open(os.path.join(directory, "labels.u8"), "wb") as fh:
        fh.write(dataset.labels.astype(np.uint8).tobytes())
    lines = [
        f"samples {n}",
        f"height {h}",
        f"width {w}",
        f"domain_id {dataset.domain_id}",
        f"split {dataset.split}",
    ]
    if seed is not None:
        lines.append(f"seed {seed}")
    if style is not None:
        lines.append(f"style {style}")
    with open(os.path.join(directory, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
