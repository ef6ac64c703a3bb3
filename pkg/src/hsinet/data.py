"""Dataset assembly: per-class splits, patch extraction, D4 augmentation,
per-band standardization, manifests, and a synthetic multi-domain generator.

Pixels are addressed by flat index y * width + x over the label raster.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .envi import HyperCube, LabelRaster, load_envi, load_label_raster, write_envi
from .errors import ConfigError, DataError, ShapeError

_EMPTY_IDX = np.empty(0, dtype=np.int64)


@dataclass
class DomainDataset:
    """A hyperspectral cube with labels, class count, and train/test pixel sets."""

    cube: HyperCube
    labels: LabelRaster
    classes: int
    name: str = "domain"
    sensor: str = "A"
    train_idx: np.ndarray = field(default_factory=lambda: _EMPTY_IDX.copy())
    test_idx: np.ndarray = field(default_factory=lambda: _EMPTY_IDX.copy())

    def __post_init__(self):
        if (self.labels.height, self.labels.width) != (self.cube.height, self.cube.width):
            raise DataError(
                f"label raster {self.labels.height}x{self.labels.width} does not match "
                f"cube {self.cube.height}x{self.cube.width}"
            )
        if self.labels.labels.max(initial=0) > self.classes:
            raise DataError(
                f"label {int(self.labels.labels.max())} exceeds declared class count "
                f"{self.classes}"
            )
        flat = self.labels.labels.ravel()
        for what, idx in (("train", self.train_idx), ("test", self.test_idx)):
            if idx.size and (idx.min() < 0 or idx.max() >= flat.size):
                raise DataError(f"{what} index out of raster range")
            if idx.size and (flat[idx] == 0).any():
                raise DataError(f"{what} split contains unlabeled pixels")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise DataError("train and test splits overlap")

    @property
    def labeled_count(self):
        return int((self.labels.labels > 0).sum())

    def labeled_indices(self):
        return np.flatnonzero(self.labels.labels.ravel() > 0)


@dataclass
class SynthConfig:
    """Synthetic domain: smooth per-class spectra + blob-shaped class map + noise."""

    classes: int
    bands: int
    height: int
    width: int
    noise_std: float = 0.05
    blob_scale: int = 8
    seed: int = 0
    signature_seed: int | None = None
    name: str = "synth"
    sensor: str = "A"

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"synthetic domain needs >= 2 classes, got {self.classes}")
        if self.bands < 1:
            raise ConfigError(f"synthetic domain needs >= 1 band, got {self.bands}")
        if self.height < 1 or self.width < 1:
            raise ConfigError("synthetic raster dimensions must be positive")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.blob_scale < 1:
            raise ConfigError("blob_scale must be >= 1")


def split_per_class(ds, n_per_class, rng):
    """Pick exactly n_per_class train pixels from every class; the rest of the
    labeled pixels go to test. Unlabeled pixels (label 0) are in neither."""
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    flat = ds.labels.labels.ravel()
    train_parts = []
    test_parts = []
    for cls in range(1, ds.classes + 1):
        idx = np.flatnonzero(flat == cls)
        if idx.size < n_per_class:
            raise DataError(
                f"class {cls} has only {idx.size} labeled pixels, need {n_per_class}"
            )
        perm = rng.permutation(idx.size)
        train_parts.append(idx[perm[:n_per_class]])
        test_parts.append(idx[perm[n_per_class:]])
    train = np.sort(np.concatenate(train_parts)).astype(np.int64)
    test = np.sort(np.concatenate(test_parts)).astype(np.int64)
    return train, test


def with_split(ds, n_per_class, rng):
    train, test = split_per_class(ds, n_per_class, rng)
    return replace(ds, train_idx=train, test_idx=test)


def _check_patch(patch):
    if patch < 1 or patch % 2 == 0:
        raise ConfigError(f"patch size must be odd and >= 1, got {patch}")


def _reflect_pad(data, pad):
    if pad == 0:
        return data
    if pad >= data.shape[1] or pad >= data.shape[2]:
        raise DataError(
            f"raster {data.shape[1]}x{data.shape[2]} too small for reflect "
            f"padding of {pad}"
        )
    return np.pad(data, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")


def extract_patch(cube, x, y, patch):
    """Neighborhood centered at (x, y) as (1, bands, patch, patch); borders
    are reflect-padded (index -1 mirrors index 1)."""
    _check_patch(patch)
    if not (0 <= x < cube.width and 0 <= y < cube.height):
        raise DataError(f"pixel ({x}, {y}) outside raster {cube.width}x{cube.height}")
    pad = patch // 2
    padded = _reflect_pad(cube.data, pad)
    return padded[np.newaxis, :, y:y + patch, x:x + patch].copy()


def augment_d4(patch, k):
    """Apply the k-th symmetry of the square across the last two axes:
    0 identity, 1-3 rotations by 90/180/270, 4 horizontal flip, 5 vertical
    flip, 6 main-diagonal transpose, 7 anti-diagonal transpose."""
    if not 0 <= k < 8:
        raise ConfigError(f"D4 element index {k} out of range 0..7")
    if patch.shape[-1] != patch.shape[-2]:
        raise ShapeError(f"D4 needs square spatial dims, got {patch.shape}")
    if k == 0:
        out = patch
    elif k <= 3:
        out = np.rot90(patch, k, axes=(-2, -1))
    elif k == 4:
        out = np.flip(patch, axis=-1)
    elif k == 5:
        out = np.flip(patch, axis=-2)
    elif k == 6:
        out = np.swapaxes(patch, -2, -1)
    else:
        out = np.swapaxes(patch[..., ::-1, ::-1], -2, -1)
    return np.ascontiguousarray(out)


def normalize_bands(ds):
    """Standardize every band to zero mean / unit variance using statistics
    from the train pixels only; zero-variance bands are centered with a
    warning and left at scale 1."""
    if ds.train_idx.size == 0:
        raise DataError("normalize_bands needs a non-empty train split")
    w = ds.cube.width
    ys, xs = np.divmod(ds.train_idx, w)
    vals = ds.cube.data[:, ys, xs].astype(np.float64)
    mean = vals.mean(axis=1)
    std = vals.std(axis=1)
    flat_bands = np.flatnonzero(std == 0)
    if flat_bands.size:
        warnings.warn(
            f"bands {flat_bands.tolist()} have zero variance on the train split; "
            "centering only"
        )
        std = std.copy()
        std[flat_bands] = 1.0
    new = ((ds.cube.data.astype(np.float64) - mean[:, None, None]) / std[:, None, None])
    cube = replace(ds.cube, data=new.astype(np.float32))
    return replace(ds, cube=cube)


class PatchBatcher:
    """Assembles centered patches for batches of flat pixel indices.

    The cube is reflect-padded once; `batch` gathers windows and returns
    0-based class targets alongside.
    """

    def __init__(self, ds, patch):
        _check_patch(patch)
        self.patch = patch
        self.width = ds.cube.width
        padded = _reflect_pad(ds.cube.data, patch // 2)
        self._windows = sliding_window_view(padded, (patch, patch), axis=(1, 2))
        self._labels = ds.labels.labels.ravel()

    def batch(self, pixel_idx):
        ys, xs = np.divmod(pixel_idx, self.width)
        x = self._windows[:, ys, xs]  # (bands, n, patch, patch)
        x = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
        labels = self._labels[pixel_idx]
        if (labels == 0).any():
            raise DataError("batch contains unlabeled pixels")
        return x, (labels - 1).astype(np.int64)


def synth_generate(cfg):
    """Deterministic synthetic domain: per-class spectra are mixtures of
    Gaussian bumps over a continuous band axis (so the same signature seed
    renders consistently at any band count), the class map is a Voronoi
    partition of seeded blob centers (every class owns at least one center),
    and pixels are the class spectrum plus white noise."""
    rng = np.random.default_rng(cfg.seed)
    sig_seed = cfg.seed if cfg.signature_seed is None else cfg.signature_seed
    sig_rng = np.random.default_rng(sig_seed)

    n_bumps = 4
    centers = sig_rng.uniform(0.0, 1.0, (cfg.classes, n_bumps))
    widths = sig_rng.uniform(0.04, 0.25, (cfg.classes, n_bumps))
    amps = sig_rng.uniform(0.4, 1.2, (cfg.classes, n_bumps))
    t = np.linspace(0.0, 1.0, cfg.bands)
    sig = np.zeros((cfg.classes, cfg.bands))
    for j in range(n_bumps):
        sig += amps[:, j:j + 1] * np.exp(
            -((t[None, :] - centers[:, j:j + 1]) ** 2) / (2.0 * widths[:, j:j + 1] ** 2)
        )

    h, w = cfg.height, cfg.width
    n_centers = max(cfg.classes, int(round(h * w / cfg.blob_scale ** 2)))
    n_centers = min(n_centers, h * w)
    pos = rng.choice(h * w, size=n_centers, replace=False)
    cls = np.empty(n_centers, dtype=np.int64)
    cls[:cfg.classes] = np.arange(cfg.classes)
    if n_centers > cfg.classes:
        cls[cfg.classes:] = rng.integers(0, cfg.classes, n_centers - cfg.classes)
    cy, cx = np.divmod(pos, w)
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
    class_map = cls[np.argmin(d2, axis=0)]

    data = sig[class_map].transpose(2, 0, 1)
    if cfg.noise_std > 0:
        data = data + rng.normal(0.0, cfg.noise_std, data.shape)
    cube = HyperCube.from_array(data.astype(np.float32))
    labels = LabelRaster.from_array((class_map + 1).astype(np.int32))
    return DomainDataset(
        cube=cube,
        labels=labels,
        classes=cfg.classes,
        name=cfg.name,
        sensor=cfg.sensor,
        train_idx=np.arange(h * w, dtype=np.int64),
    )


def load_manifest(path):
    """Load a dataset manifest: {name, sensor, header, data, labels, classes};
    relative paths resolve against the manifest's directory. All labeled
    pixels start in the train split."""
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest '{path}' does not exist") from None
    except json.JSONDecodeError as e:
        raise DataError(f"manifest '{path}' is not valid JSON: {e}") from e
    for key in ("name", "sensor", "header", "data", "labels", "classes"):
        if key not in cfg:
            raise DataError(f"manifest '{path}' missing key '{key}'")
    base = path.parent
    cube = load_envi(base / cfg["header"], base / cfg["data"])
    labels = load_label_raster(base / cfg["labels"])
    ds = DomainDataset(
        cube=cube,
        labels=labels,
        classes=int(cfg["classes"]),
        name=cfg["name"],
        sensor=cfg["sensor"],
    )
    return replace(ds, train_idx=ds.labeled_indices())


def write_dataset(ds, out_dir, interleave="bsq", data_type=4, byte_order=0):
    """Write a dataset as ENVI cube + ENVI int16 label raster + manifest JSON;
    returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = ds.name
    write_envi(ds.cube, out_dir / f"{name}.hdr", out_dir / f"{name}.img",
               interleave=interleave, data_type=data_type, byte_order=byte_order)
    label_cube = HyperCube.from_array(ds.labels.labels[np.newaxis].astype(np.float32))
    write_envi(label_cube, out_dir / f"{name}_labels.hdr", out_dir / f"{name}_labels.img",
               interleave="bsq", data_type=2, byte_order=byte_order)
    manifest = {
        "name": name,
        "sensor": ds.sensor,
        "header": f"{name}.hdr",
        "data": f"{name}.img",
        "labels": f"{name}_labels.hdr",
        "classes": ds.classes,
    }
    manifest_path = out_dir / f"{name}.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path
