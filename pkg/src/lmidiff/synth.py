"""Procedural two-modality phantoms with ground-truth tissue masks.

Each phantom is a background plus 3-6 overlapping ellipses, each carrying a
tissue label. Both modalities are rendered from the same mask: a per-class
base intensity (different, order-scrambled tables for the two modalities),
a per-class sinusoidal texture shared by both modalities, and independent
pixel noise. Texture amplitudes differ per class so that neighborhood
entropy carries a class signature that survives the change of modality.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import load_image, load_mask, save_image, save_mask
from .seeding import derive_seed

log = logging.getLogger(__name__)

# target modality ("T1w-like") and source modality ("PDw-like") base intensities
TABLE_TARGET = (0.1, 0.45, 0.75, 0.95, 0.3)
TABLE_SOURCE = (0.2, 0.85, 0.35, 0.6, 0.9)
# shared per-class texture amplitude; each stays below half the gap to the
# neighboring target intensities so intensity clustering still separates classes
TEXTURE_AMPLITUDE = (0.0, 0.05, 0.07, 0.02, 0.035)
# texture wave number range, cycles per image side
TEXTURE_CYCLES = (3, 5)
NOISE_STD = 0.02


@dataclass
class Phantom:
    mask: np.ndarray
    modality_a: np.ndarray  # source
    modality_b: np.ndarray  # target
    seed: int


def _ellipse_mask(size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.3, 0.7, 2) * size
    ay, ax = rng.uniform(0.12, 0.4, 2) * size
    theta = rng.uniform(0.0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def gen_phantom(seed, size=32, k_tissue=5):
    """Render one aligned source/target pair and its mask."""
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    if not 2 <= k_tissue <= 5:
        raise ValueError(f"k_tissue must be in 2..5, got {k_tissue}")
    rng = np.random.default_rng(seed)
    mask = np.zeros((size, size), dtype=np.int64)
    for _ in range(rng.integers(3, 7)):
        mask[_ellipse_mask(size, rng)] = rng.integers(1, k_tissue)

    yy, xx = np.mgrid[0:size, 0:size] / size
    texture = np.zeros((size, size))
    for c in range(k_tissue):
        cycles = rng.integers(TEXTURE_CYCLES[0], TEXTURE_CYCLES[1] + 1)
        angle = rng.uniform(0.0, np.pi)
        ky, kx = cycles * np.sin(angle), cycles * np.cos(angle)
        phase = rng.uniform(0.0, 2 * np.pi)
        field = TEXTURE_AMPLITUDE[c] * np.sin(2 * np.pi * (ky * yy + kx * xx) + phase)
        texture[mask == c] = field[mask == c]

    def render(table):
        img = np.asarray(table)[mask] + texture + NOISE_STD * rng.standard_normal((size, size))
        return np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)

    b = render(TABLE_TARGET)
    a = render(TABLE_SOURCE)
    return Phantom(mask=mask, modality_a=a, modality_b=b, seed=seed)


def _manifest_lines(seed, n_train, n_test, size, k_tissue):
    lines = [f"seed={seed}", f"size={size}", f"n_train={n_train}", f"n_test={n_test}",
             f"k_tissue={k_tissue}",
             "table_target=" + ",".join(map(repr, TABLE_TARGET[:k_tissue])),
             "table_source=" + ",".join(map(repr, TABLE_SOURCE[:k_tissue])),
             "texture_amplitude=" + ",".join(map(repr, TEXTURE_AMPLITUDE[:k_tissue])),
             f"noise_std={NOISE_STD!r}"]
    lines += [f"train.{i:04d}=train/f{i:04d}.lmif" for i in range(n_train)]
    for i in range(n_test):
        lines += [f"test.{i:04d}.source=test/g{i:04d}.lmif",
                  f"test.{i:04d}.target=test/f{i:04d}.lmif",
                  f"test.{i:04d}.mask=test/mask{i:04d}.pgm"]
    return lines


def gen_dataset(root, seed=0, n_train=64, n_test=16, size=32, k_tissue=5):
    """Write a zero-shot dataset tree.

    ``train/`` holds only target-modality images; ``test/`` holds source,
    target and mask for held-out phantoms. Every phantom seed is derived
    from ``seed``, recorded in ``manifest.txt``.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    root = Path(root)
    (root / "train").mkdir(parents=True, exist_ok=True)
    (root / "test").mkdir(parents=True, exist_ok=True)
    for i in range(n_train):
        ph = gen_phantom(derive_seed(seed, "phantom-train", i), size, k_tissue)
        save_image(ph.modality_b, root / "train" / f"f{i:04d}.lmif")
    for i in range(n_test):
        ph = gen_phantom(derive_seed(seed, "phantom-test", i), size, k_tissue)
        save_image(ph.modality_a, root / "test" / f"g{i:04d}.lmif")
        save_image(ph.modality_b, root / "test" / f"f{i:04d}.lmif")
        save_mask(ph.mask, root / "test" / f"mask{i:04d}.pgm")
    (root / "manifest.txt").write_text("\n".join(_manifest_lines(seed, n_train, n_test, size, k_tissue)) + "\n")
    log.info("wrote %d train / %d test phantoms to %s", n_train, n_test, root)
    return root


def read_manifest(root):
    path = Path(root) / "manifest.txt"
    entries = {}
    for line in path.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            entries[key.strip()] = value.strip()
    return entries


@dataclass
class Dataset:
    train: np.ndarray   # (n_train, H, W) target modality
    source: np.ndarray  # (n_test, H, W)
    target: np.ndarray  # (n_test, H, W)
    masks: np.ndarray   # (n_test, H, W)
    manifest: dict


def load_dataset(root):
    root = Path(root)
    man = read_manifest(root)
    n_train, n_test = int(man["n_train"]), int(man["n_test"])
    train = np.stack([load_image(root / man[f"train.{i:04d}"]) for i in range(n_train)])
    source = np.stack([load_image(root / man[f"test.{i:04d}.source"]) for i in range(n_test)])
    target = np.stack([load_image(root / man[f"test.{i:04d}.target"]) for i in range(n_test)])
    masks = np.stack([load_mask(root / man[f"test.{i:04d}.mask"]) for i in range(n_test)])
    return Dataset(train, source, target, masks, man)
