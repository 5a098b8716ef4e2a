"""Synthetic imbalanced segmentation data: generation, indexing, augmentation.

Patches are square RGB rasters in [0, 1] with integer label maps where 0 is
background and 1..C are foreground classes. The generator paints class-colored
rectangles and ellipses over a textured background so the classes are
learnable from color but not noise-free. Everything is deterministic given a
seed; per-patch RNG streams make generation order-independent.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

# distinct mean colors per class; background carries a green-gray texture
_CLASS_COLORS = np.array([
    [0.75, 0.25, 0.20],
    [0.20, 0.45, 0.80],
    [0.85, 0.75, 0.20],
    [0.60, 0.20, 0.70],
    [0.20, 0.75, 0.55],
    [0.90, 0.50, 0.10],
])
_BG_COLOR = np.array([0.35, 0.38, 0.33])
_NOISE_SIGMA = 0.1


@dataclass
class Patch:
    """One sample: RGB raster plus integer label map."""
    id: int
    image: np.ndarray   # (S, S, 3) float32 in [0, 1]
    labels: np.ndarray  # (S, S) uint8 in {0..C}


@dataclass
class ClassIndex:
    """Per-class sample id sets: sets[0] is background-only, sets[c] contains
    every patch with at least one pixel of class c."""
    sets: list[list[int]]
    num_classes: int


@dataclass
class ImbalanceProfile:
    """Target pixel fractions (background first, summing to 1) and per-class
    patch presence probabilities."""
    pixel_fractions: tuple[float, ...]
    presence: tuple[float, ...]

    def __post_init__(self):
        self.pixel_fractions = tuple(float(f) for f in self.pixel_fractions)
        self.presence = tuple(float(p) for p in self.presence)
        if len(self.pixel_fractions) != len(self.presence) + 1:
            raise DataError(
                f"expected {len(self.presence) + 1} pixel fractions "
                f"(background + one per class), got {len(self.pixel_fractions)}")
        if any(f < 0 for f in self.pixel_fractions):
            raise DataError("pixel fractions must be non-negative")
        total = sum(self.pixel_fractions)
        if abs(total - 1.0) > 1e-9:
            raise DataError(f"pixel fractions must sum to 1, got {total}")
        for c, (f, p) in enumerate(zip(self.pixel_fractions[1:], self.presence), 1):
            if not 0.0 <= p <= 1.0:
                raise DataError(f"presence probability for class {c} out of [0, 1]: {p}")
            if f == 0.0 and p > 0.0:
                raise DataError(
                    f"class {c} has zero pixel fraction but presence {p} > 0")
            if f > 0.0 and p == 0.0:
                raise DataError(
                    f"class {c} has pixel fraction {f} > 0 but zero presence")
            if p > 0.0 and f / p > 0.5:
                raise DataError(
                    f"class {c} needs fraction {f / p:.3f} of each containing "
                    f"patch; shapes above 0.5 do not fit")

    @property
    def num_classes(self) -> int:
        return len(self.presence)


def default_profile() -> ImbalanceProfile:
    """Severely imbalanced 4-class profile used by the desk experiments."""
    return ImbalanceProfile(
        pixel_fractions=(0.9636, 0.0278, 0.0033, 0.0034, 0.0019),
        presence=(0.364, 0.123, 0.119, 0.112),
    )


def _paint_shape(rng, image, labels, cls, area, size):
    """Paints one rectangle or ellipse of roughly the given pixel area."""
    aspect = rng.uniform(0.5, 2.0)
    if rng.random() < 0.5:
        # rectangle with half-sides (hw, hh)
        wid = np.sqrt(area * aspect)
        hei = area / wid
        hw = max(1, int(round(wid / 2)))
        hh = max(1, int(round(hei / 2)))
        hw, hh = min(hw, size // 2 - 1), min(hh, size // 2 - 1)
        cy = rng.integers(hh, size - hh)
        cx = rng.integers(hw, size - hw)
        mask = np.zeros((size, size), dtype=bool)
        mask[cy - hh:cy + hh, cx - hw:cx + hw] = True
    else:
        a = np.sqrt(area * aspect / np.pi)
        b = area / (np.pi * a)
        a, b = max(a, 1.0), max(b, 1.0)
        a, b = min(a, size / 2 - 1), min(b, size / 2 - 1)
        cy = rng.uniform(b, size - b)
        cx = rng.uniform(a, size - a)
        yy, xx = np.mgrid[0:size, 0:size]
        mask = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    color = _CLASS_COLORS[(cls - 1) % len(_CLASS_COLORS)]
    image[mask] = color
    labels[mask] = cls


def generate_synthetic(profile: ImbalanceProfile, count: int, patch_size: int,
                       seed: int) -> list[Patch]:
    """Generates `count` patches targeting the profile's imbalance statistics.

    Per-class presence is Bernoulli; shape areas are jittered around
    fraction/presence so that dataset-level pixel fractions land near the
    profile targets.
    """
    if count < 1:
        raise DataError(f"count must be >= 1, got {count}")
    if patch_size < 4 or patch_size & (patch_size - 1):
        raise DataError(f"patch_size must be a power of two >= 4, got {patch_size}")
    num_classes = profile.num_classes
    patches = []
    for pid in range(count):
        rng = np.random.default_rng([seed, pid])
        image = np.empty((patch_size, patch_size, 3))
        coarse = rng.normal(0.0, 0.06, (patch_size // 4, patch_size // 4, 1))
        image[...] = _BG_COLOR + np.repeat(np.repeat(coarse, 4, 0), 4, 1)
        labels = np.zeros((patch_size, patch_size), dtype=np.uint8)
        for cls in range(1, num_classes + 1):
            p = profile.presence[cls - 1]
            if p <= 0.0 or rng.random() >= p:
                continue
            target = profile.pixel_fractions[cls] / p * patch_size * patch_size
            area = target * rng.uniform(0.75, 1.25)
            _paint_shape(rng, image, labels, cls, area, patch_size)
        image += rng.normal(0.0, _NOISE_SIGMA, image.shape)
        np.clip(image, 0.0, 1.0, out=image)
        patches.append(Patch(pid, image.astype(np.float32), labels))
    return patches


def measure_pixel_fractions(patches: list[Patch], num_classes: int) -> np.ndarray:
    """Observed per-class pixel fractions (background first) over a dataset."""
    counts = np.zeros(num_classes + 1, dtype=np.int64)
    for p in patches:
        counts += np.bincount(p.labels.ravel(), minlength=num_classes + 1)
    return counts / counts.sum()


def build_class_index(patches: list[Patch], num_classes: int) -> ClassIndex:
    """Builds S_0..S_C: S_0 holds background-only ids, S_c every id whose
    label map contains class c. Ids are listed in ascending order."""
    sets = [[] for _ in range(num_classes + 1)]
    for p in sorted(patches, key=lambda q: q.id):
        present = np.unique(p.labels)
        if present.max(initial=0) > num_classes:
            raise DataError(
                f"patch {p.id} has label {present.max()} > C={num_classes}")
        if present.size == 1 and present[0] == 0:
            sets[0].append(p.id)
        else:
            for cls in present:
                if cls > 0:
                    sets[int(cls)].append(p.id)
    return ClassIndex(sets=sets, num_classes=num_classes)


def apply_dihedral(image: np.ndarray, labels: np.ndarray, element: int):
    """Applies one of the 8 square symmetries (4 rotations x optional flip)."""
    if image.shape[0] != image.shape[1]:
        raise DataError(f"dihedral ops need square patches, got {image.shape[:2]}")
    k = element & 3
    img = np.rot90(image, k, axes=(0, 1))
    lab = np.rot90(labels, k, axes=(0, 1))
    if element & 4:
        img = img[:, ::-1]
        lab = lab[:, ::-1]
    return np.ascontiguousarray(img), np.ascontiguousarray(lab)


def augment(patch: Patch, seed: int) -> Patch:
    """Applies a uniformly chosen square symmetry to image and labels alike."""
    element = int(np.random.default_rng(seed).integers(8))
    img, lab = apply_dihedral(patch.image, patch.labels, element)
    return Patch(patch.id, img, lab)


def save_dataset(path: str, patches: list[Patch], num_classes: int):
    """Writes the on-disk layout: manifest.txt plus raw per-patch files
    (little-endian float32 images, 8-bit labels)."""
    os.makedirs(path, exist_ok=True)
    size = patches[0].image.shape[0]
    lines = [f"# patches={len(patches)} classes={num_classes} size={size}"]
    for p in patches:
        img_name = f"img_{p.id:06d}.f32"
        lbl_name = f"lbl_{p.id:06d}.u8"
        p.image.astype("<f4").tofile(os.path.join(path, img_name))
        p.labels.astype(np.uint8).tofile(os.path.join(path, lbl_name))
        counts = np.bincount(p.labels.ravel(), minlength=num_classes + 1)
        counts_txt = ",".join(str(int(c)) for c in counts)
        lines.append(f"{p.id}\t{img_name}\t{lbl_name}\t{counts_txt}")
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path: str) -> tuple[list[Patch], int]:
    """Reads a dataset directory written by save_dataset; returns (patches, C)."""
    with open(os.path.join(path, "manifest.txt")) as fh:
        lines = fh.read().splitlines()
    header = dict(kv.split("=") for kv in lines[0].lstrip("# ").split())
    num_classes = int(header["classes"])
    size = int(header["size"])
    patches = []
    for ln in lines[1:]:
        if not ln:
            continue
        pid, img_name, lbl_name, _counts = ln.split("\t")
        image = np.fromfile(os.path.join(path, img_name), dtype="<f4")
        labels = np.fromfile(os.path.join(path, lbl_name), dtype=np.uint8)
        patches.append(Patch(int(pid),
                             image.reshape(size, size, 3),
                             labels.reshape(size, size)))
    return patches, num_classes
