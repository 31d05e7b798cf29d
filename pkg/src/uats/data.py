"""Synthetic multi-class segmentation benchmark and data handling.

Each sample mimics an axial slice through a gland: a large central blob
(class 1), a band wrapped around its lower half (class 2), a small dark
duct inside the blob (class 3) and a short bright crescent on its upper
rim (class 4).  Classes 3 and 4 are deliberately tiny, so they are the
minority classes that should profit from extra unlabeled data.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .metrics import signal_to_noise

CLASS_NAMES = ("background", "blob", "band", "duct", "crescent")
POOLS = ("labeled", "unlabeled", "test")


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) in [0, 1]
    label: np.ndarray | None  # (H, W) integer class map
    id: str
    seed: int
    pool: str = "labeled"

    def without_label(self) -> "Sample":
        return replace(self, label=None, pool="unlabeled")


@dataclass(frozen=True)
class SyntheticSpec:
    size: int = 64
    seed: int = 0
    labeled_fraction: float = 0.5
    test_fraction: float = 0.2
    texture_sigma: float = 0.09
    bias_strength: float = 0.15
    blob_axes: tuple = (14.0, 18.0)  # range of the larger semi-axis (pixels at size 64)
    aspect: tuple = (0.65, 0.85)
    band_width: tuple = (4.5, 6.0)
    duct_radius: tuple = (2.2, 3.0)
    crescent_width: tuple = (3.2, 4.0)
    crescent_span: tuple = (0.2, 0.3)  # half angle in radians
    # mean intensity of background, blob, band, duct, crescent
    intensities: tuple = (0.30, 0.50, 0.72, 0.28, 0.90)
    distractors: int = 3

    def to_dict(self) -> dict:
        return asdict(self)


def _smooth_field(rng, size, scale):
    f = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 6)
    f /= np.abs(f).max() + 1e-12
    return scale * f


def synthesize(spec: SyntheticSpec, seed) -> tuple[np.ndarray, np.ndarray]:
    """One raw image (H, W) clipped to [0, 1] and its label map."""
    rng = np.random.default_rng(seed)
    n = spec.size
    k = n / 64.0
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cy = n / 2 + rng.uniform(-3, 3) * k
    cx = n / 2 + rng.uniform(-3, 3) * k
    theta = np.deg2rad(rng.uniform(-15, 15))
    ax = rng.uniform(*spec.blob_axes) * k
    ay = ax * rng.uniform(*spec.aspect)
    # rotated frame; v points "down" (towards the band side)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    wobble = 1.0 + 0.06 * np.sin(3 * np.arctan2(v, u) + rng.uniform(0, 2 * np.pi))
    r = np.sqrt((u / ax) ** 2 + (v / ay) ** 2) / wobble

    label = np.zeros((n, n), dtype=np.uint8)
    blob = r <= 1.0
    label[blob] = 1

    bw = rng.uniform(*spec.band_width) * k
    r_band = np.sqrt((u / (ax + bw)) ** 2 + (v / (ay + bw)) ** 2) / wobble
    band_extent = rng.uniform(-0.35, -0.15) * ay
    band = (r_band <= 1.0) & ~blob & (v > band_extent)
    label[band] = 2

    # crescent hugging the upper rim of the blob
    cw = rng.uniform(*spec.crescent_width) * k
    phi0 = rng.uniform(-0.5, 0.5)
    half_span = rng.uniform(*spec.crescent_span)
    ang = np.arctan2(-v, u) - np.pi / 2  # 0 at the top of the blob
    ang = (ang + np.pi) % (2 * np.pi) - np.pi
    r_cres = np.sqrt((u / (ax + cw)) ** 2 + (v / (ay + cw)) ** 2) / wobble
    ragged = 1.0 + 0.25 * np.sin(7 * ang + rng.uniform(0, 2 * np.pi))
    cres = (~blob) & (r_cres <= 1.0) & (np.abs(ang - phi0) <= half_span * ragged) & (v < 0)
    label[cres & (label == 0)] = 4

    # duct: a small disc inside the blob, above its centre
    dr = rng.uniform(*spec.duct_radius) * k
    du = rng.uniform(-0.25, 0.25) * ax
    dv = rng.uniform(-0.3, 0.1) * ay
    duct = ((u - du) ** 2 + (v - dv) ** 2) <= dr ** 2
    label[duct & blob] = 3

    base = np.asarray(spec.intensities, dtype=np.float64)
    img = base[label].astype(np.float64)
    # dark distractor spots in the background resemble the small classes
    for _ in range(spec.distractors):
        sy, sx = rng.uniform(0.1 * n, 0.9 * n, size=2)
        rad = rng.uniform(1.5, 3.0) * k
        spot = ((yy - sy) ** 2 + (xx - sx) ** 2 <= rad ** 2) & (label == 0)
        img[spot] = base[3] + rng.uniform(-0.03, 0.03)
    img = ndimage.gaussian_filter(img, 0.7)
    texture = ndimage.gaussian_filter(rng.normal(size=(n, n)), 0.6)
    texture *= spec.texture_sigma / (texture.std() + 1e-12)
    img = img + texture + _smooth_field(rng, n, spec.bias_strength)
    return np.clip(img, 0.0, 1.0), label


def normalize_intensity(image, lower: float = 1.0, upper: float = 99.0) -> np.ndarray:
    """Clip to the given percentiles, then rescale to [0, 1]; a constant image maps to zeros."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = np.percentile(image, [lower, upper])
    if not hi > lo:
        return np.zeros_like(image)
    clipped = np.clip(image, lo, hi)
    return (clipped - lo) / (hi - lo)


def generate_dataset(spec: SyntheticSpec, n: int) -> list[Sample]:
    """``n`` normalised samples with pool assignment.

    The first ``labeled_fraction`` of the samples form the labeled pool, of
    which the last ``test_fraction`` is frozen as test set; the rest are
    unlabeled (labels dropped).
    """
    if n < 1:
        raise ValueError("need at least one sample")
    n_lab = int(round(spec.labeled_fraction * n))
    n_test = int(round(spec.test_fraction * n_lab))
    samples = []
    for i in range(n):
        seed = int(np.random.SeedSequence([spec.seed, i]).generate_state(1)[0])
        raw, label = synthesize(spec, seed)
        img = normalize_intensity(raw)[None]
        if i < n_lab - n_test:
            pool = "labeled"
        elif i < n_lab:
            pool = "test"
        else:
            pool = "unlabeled"
        samples.append(Sample(img, label if pool != "unlabeled" else None, f"s{i:04d}", seed, pool))
    return samples


def class_frequencies(labels, num_classes: int = len(CLASS_NAMES)) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for lab in labels:
        counts += np.bincount(np.asarray(lab).ravel(), minlength=num_classes)[:num_classes]
    return counts


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    max_rotation_deg: float = 15.0
    scale_range: tuple = (0.9, 1.1)


def flip(array, axis):
    return np.flip(array, axis=axis).copy()


@dataclass(frozen=True)
class GeometricTransform:
    """A sampled flip/rotate/scale transform that can be replayed on several arrays."""
    flips: tuple
    angle: float
    scale: float

    @classmethod
    def sample(cls, seed, config: AugmentConfig = AugmentConfig()) -> "GeometricTransform":
        rng = np.random.default_rng(seed)
        flips = tuple(ax for ax in (-2, -1) if rng.random() < config.flip_prob)
        angle = float(np.deg2rad(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg)))
        scale = float(rng.uniform(*config.scale_range))
        return cls(flips, angle, scale)

    def apply(self, array, order: int) -> np.ndarray:
        """Transform the last two axes of ``array``; ``order`` 1 is bilinear, 0 nearest."""
        array = np.asarray(array)
        for ax in self.flips:
            array = flip(array, ax)
        if self.angle == 0.0 and self.scale == 1.0:
            return array
        h, w = array.shape[-2:]
        centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        c, s = np.cos(self.angle), np.sin(self.angle)
        # output coordinate o samples input coordinate A o + offset
        A = np.array([[c, -s], [s, c]]) / self.scale
        offset = centre - A @ centre
        lead = array.shape[:-2]
        planes = array.reshape((-1, h, w))
        out = np.stack([
            ndimage.affine_transform(p, A, offset=offset, order=order, mode="nearest") for p in planes
        ])
        return out.reshape(lead + (h, w))


def augment(image, label=None, seed=None, config: AugmentConfig = AugmentConfig()):
    """Random flips, rotation and isotropic scaling applied identically to image and label.

    ``image`` is (C, H, W); ``label`` is (H, W) or None.  The image is
    resampled bilinearly, the label by nearest neighbour.
    """
    t = GeometricTransform.sample(seed, config)
    image = t.apply(np.asarray(image, dtype=np.float64), order=1)
    if label is not None:
        label = t.apply(label, order=0)
    return image, label


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    labeled: list
    unlabeled: list
    validation: list
    test: list
    ratio: float
    repeat: int

    def test_hash(self) -> str:
        h = hashlib.sha256()
        for s in self.test:
            h.update(s.id.encode())
            h.update(s.image.tobytes())
        return h.hexdigest()


def make_split(dataset, ratio: float, repeat: int = 0, seed: int = 0,
               val_fraction: float = 0.25) -> DatasetSplit:
    """Sample ``floor(ratio * pool)`` labeled cases; 25% of them (at least one) validate.

    Labeled-pool cases that are not drawn join the unlabeled set without
    their labels.  The test set is the dataset's fixed test pool.
    """
    pool = [s for s in dataset if s.pool == "labeled"]
    unlabeled = [s for s in dataset if s.pool == "unlabeled"]
    test = [s for s in dataset if s.pool == "test"]
    k = int(np.floor(ratio * len(pool) + 1e-9))
    if k < 2:
        need = int(np.ceil(2 / ratio)) if ratio > 0 else "inf"
        raise ValueError(
            f"ratio {ratio} of a labeled pool of {len(pool)} gives {k} labeled samples; "
            f"need a pool of at least {need} (minimum 2 labeled samples)"
        )
    rng = np.random.default_rng([seed, repeat, int(round(ratio * 1000))])
    order = rng.permutation(len(pool))
    chosen = sorted(order[:k])
    rest = sorted(order[k:])
    n_val = max(1, int(np.floor(val_fraction * k)))
    perm = rng.permutation(k)
    val_idx = sorted(chosen[i] for i in perm[:n_val])
    held = set(val_idx)
    train_idx = [i for i in chosen if i not in held]
    return DatasetSplit(
        labeled=[pool[i] for i in train_idx],
        unlabeled=unlabeled + [pool[i].without_label() for i in rest],
        validation=[pool[i] for i in val_idx],
        test=test,
        ratio=ratio,
        repeat=repeat,
    )


def add_gaussian_noise(image, sigma: float, seed=None):
    """Additive N(0, sigma^2) noise followed by min-max renormalisation.

    Returns ``(noisy, snr)`` with ``snr = mean(image) / std(noise)`` measured
    on the realised noise before renormalising.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    image = np.asarray(image, dtype=np.float64)
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=image.shape)
    noisy = image + noise
    snr = signal_to_noise(image, noise)
    lo, hi = noisy.min(), noisy.max()
    out = (noisy - lo) / (hi - lo) if hi > lo else np.zeros_like(noisy)
    return out, snr


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

GRID_MAGIC = "UGRID"
GRID_VERSION = 1


def write_grid(path, array, num_classes: int = 0) -> None:
    """Flat little-endian grid behind a one-line ASCII header.

    Header: ``UGRID <version> <dtype> <ndim> <dims...> <num_classes>``.
    """
    array = np.ascontiguousarray(array)
    dt = array.dtype.newbyteorder("<") if array.dtype.byteorder not in ("|", "<") else array.dtype
    array = array.astype(dt, copy=False)
    header = " ".join([GRID_MAGIC, str(GRID_VERSION), dt.str, str(array.ndim),
                       *map(str, array.shape), str(num_classes)]) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(array.tobytes())


def read_grid(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        if len(header) < 4 or header[0] != GRID_MAGIC:
            raise ValueError(f"{path}: not a grid file")
        if int(header[1]) != GRID_VERSION:
            raise ValueError(f"{path}: grid version {header[1]}, expected {GRID_VERSION}")
        dtype = np.dtype(header[2])
        ndim = int(header[3])
        shape = tuple(int(v) for v in header[4:4 + ndim])
        num_classes = int(header[4 + ndim])
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {np.prod(shape)} values, found {data.size}")
    return data.reshape(shape).astype(dtype.newbyteorder("="), copy=True), num_classes


MANIFEST = "manifest.tsv"


def write_dataset(directory, samples, spec: SyntheticSpec | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# uats synthetic dataset"]
    if spec is not None:
        lines.append("# spec " + json.dumps(spec.to_dict(), sort_keys=True))
    lines.append("id\tpool\tseed\thas_label")
    nc = len(CLASS_NAMES)
    for s in samples:
        write_grid(directory / f"{s.id}.img", s.image, nc)
        if s.label is not None:
            write_grid(directory / f"{s.id}.lbl", s.label.astype(np.uint8), nc)
        lines.append(f"{s.id}\t{s.pool}\t{s.seed}\t{int(s.label is not None)}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return directory


def read_manifest(directory) -> list[dict]:
    rows = []
    header = None
    for line in (Path(directory) / MANIFEST).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if header is None:
            header = parts
            continue
        rows.append(dict(zip(header, parts)))
    return rows


def read_dataset(directory) -> list[Sample]:
    directory = Path(directory)
    if not (directory / MANIFEST).exists():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    samples = []
    for row in read_manifest(directory):
        img, _ = read_grid(directory / f"{row['id']}.img")
        label = None
        if row["has_label"] == "1":
            label, _ = read_grid(directory / f"{row['id']}.lbl")
        samples.append(Sample(img, label, row["id"], int(row["seed"]), row["pool"]))
    return samples


def default_data_root() -> Path:
    return Path(os.environ.get("UATS_DATA_ROOT", "data"))
