"""
Synthetic H&E-like images and a bundled BreakHis-style fixture.

Images are rendered through the same Beer-Lambert model the stain module
inverts, so the true stain matrix and concentrations are known.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .stain import order_stains
from .types import ClassLabel, PathLike, save_image
from .vit.config import VitConfig, init_random_weights
from .vit.container import save_weights


logger = logging.getLogger(__name__)

# Hematoxylin and eosin OD directions (columns), unit-normalized below.
REFERENCE_STAINS = np.array([
    [0.650, 0.072],
    [0.704, 0.990],
    [0.286, 0.105],
])
REFERENCE_STAINS = REFERENCE_STAINS / np.linalg.norm(REFERENCE_STAINS, axis=0, keepdims=True)

FIXTURE_ENCODER = VitConfig(image_size=224, patch_size=32, embed_dim=32, n_blocks=2, n_heads=2, mlp_dim=128)

# (top-level folder, kind letter, subtype code, subtype folder) per class; benign cycles its subtypes.
_BREAKHIS_LAYOUT: Dict[ClassLabel, Tuple[Tuple[str, str, str, str], ...]] = {
    ClassLabel.BENIGN: (
        ("benign", "B", "A", "adenosis"),
        ("benign", "B", "F", "fibroadenoma"),
        ("benign", "B", "TA", "tubular_adenoma"),
        ("benign", "B", "PT", "phyllodes_tumor"),
    ),
    ClassLabel.DUCTAL: (("malignant", "M", "DC", "ductal_carcinoma"),),
    ClassLabel.LOBULAR: (("malignant", "M", "LC", "lobular_carcinoma"),),
    ClassLabel.MUCINOUS: (("malignant", "M", "MC", "mucinous_carcinoma"),),
    ClassLabel.PAPILLARY: (("malignant", "M", "PC", "papillary_carcinoma"),),
}


def _unit(w: np.ndarray) -> np.ndarray:
    return w / np.linalg.norm(w, axis=0, keepdims=True)


def random_stain_matrix(rng: np.random.Generator, max_cosine: float = 0.9, min_blue_gap: float = 0.1,
                        max_tries: int = 10000) -> np.ndarray:
    """Random unit-column 3 x 2 stain matrix, hematoxylin first, with well separated columns."""
    for _ in range(max_tries):
        w, _ = order_stains(_unit(rng.uniform(0.05, 1.0, size=(3, 2))))
        cosine = float(w[:, 0] @ w[:, 1])
        if cosine <= max_cosine and w[2, 0] - w[2, 1] >= min_blue_gap:
            return w
    raise RuntimeError("Could not draw a separated stain matrix")


def render(w: np.ndarray, h: np.ndarray, shape: Tuple[int, int], i0: float = 255.0) -> np.ndarray:
    """I = i0 * exp(-W H), rounded to uint8 and laid out H x W x 3."""
    intensities = np.clip(np.rint(i0 * np.exp(-(w @ h))), 0, 255).astype(np.uint8)
    return intensities.T.reshape(shape[0], shape[1], 3)


def random_concentrations(rng: np.random.Generator, n_pixels: int, single_stain: bool = False,
                          pure_fraction: float = 0.25, low: float = 0.2, high: float = 1.2) -> np.ndarray:
    """
    2 x P concentrations in [low, high].

    A fraction of pixels carries only one stain, which pins down the stain
    directions for the factorization.
    """
    h = rng.uniform(low, high, size=(2, n_pixels))
    pure = rng.random(n_pixels) < pure_fraction
    zeroed_row = rng.integers(0, 2, size=n_pixels)
    h[zeroed_row[pure], np.flatnonzero(pure)] = 0.0
    if single_stain:
        h[1] = 0.0
    return h


def synthetic_stain_image(w: np.ndarray, size: Tuple[int, int] = (64, 64), seed: int = 0,
                          single_stain: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Fully stained image with known concentrations; returns (image, H)."""
    rng = np.random.default_rng(seed)
    h = random_concentrations(rng, size[0] * size[1], single_stain=single_stain)
    return render(w, h, size), h


def tissue_image(rng: np.random.Generator, size: int = 224, w: Optional[np.ndarray] = None,
                 nuclei: float = 0.6, stroma: float = 0.6, texture: float = 3.0,
                 background: float = 0.25) -> np.ndarray:
    """Smooth blob texture with white background, loosely resembling an H&E field."""
    w = REFERENCE_STAINS if w is None else w
    shape = (size, size)
    tissue = gaussian_filter(rng.standard_normal(shape), sigma=8.0)
    mask = tissue > np.quantile(tissue, background)
    nuclei_field = np.clip(gaussian_filter(rng.standard_normal(shape), sigma=texture), 0, None)
    nuclei_field *= nuclei / max(float(nuclei_field.max()), 1e-6) * 2.0
    stroma_field = stroma * (0.6 + 0.4 * gaussian_filter(rng.random(shape), sigma=2.0))
    h = np.stack([nuclei_field, stroma_field]) * mask
    return render(w, h.reshape(2, -1), shape)


def perturbed_stains(rng: np.random.Generator, scale: float = 0.08) -> np.ndarray:
    """Reference stains with a small random tilt, as slides from another lab would show."""
    w = np.clip(REFERENCE_STAINS + rng.normal(0.0, scale, size=(3, 2)), 0.01, None)
    return order_stains(_unit(w))[0]


def _class_style(label: ClassLabel) -> Dict[str, float]:
    k = label.index
    return {"nuclei": 0.3 + 0.25 * k, "stroma": 1.0 - 0.15 * k, "texture": 1.5 + 1.0 * k}


@dataclass(frozen=True)
class FixturePaths:
    root: Path
    dataset_root: Path
    target_image: Path
    weights: Path
    config: Path


def write_fixture(out_dir: PathLike, per_class: int = 8, size: int = 224, seed: int = 0) -> FixturePaths:
    """
    Write a five-class BreakHis-style tree at 40x, a stain target image, toy
    encoder weights and a run config that ties them together.
    """
    root = Path(out_dir)
    dataset_root = root / "dataset" / "BreaKHis_v1" / "histology_slides" / "breast"
    rng = np.random.default_rng(seed)

    for label, layouts in _BREAKHIS_LAYOUT.items():
        style = _class_style(label)
        for i in range(per_class):
            top, kind, code, folder = layouts[i % len(layouts)]
            slide = f"{1000 + label.index * 100 + i // 4}"
            slide_dir = dataset_root / top / "SOB" / folder / f"SOB_{kind}_{code}_14-{slide}" / "40X"
            name = f"SOB_{kind}_{code}-14-{slide}-40-{i + 1:03d}.png"
            image = tissue_image(rng, size, perturbed_stains(rng), **style)
            save_image(image, slide_dir / name)

    target = save_image(tissue_image(rng, size), root / "target.png")
    weights = root / "vit_toy.hfwt"
    save_weights(init_random_weights(FIXTURE_ENCODER, seed=seed), weights)

    config = {
        "paths": {
            "dataset_root": "dataset",
            "weights": weights.name,
            "output_dir": "run",
            "target_image": target.name,
        },
        "magnification": 40,
        "seed": seed,
        "jobs": 2,
        "snmf": {"max_iters": 60, "rel_tol": 1e-3},
        "train": {"epochs": 20, "batch_size": 32},
    }
    config_path = root / "run.json"
    config_path.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote fixture with {per_class * len(_BREAKHIS_LAYOUT)} images to {root}")
    return FixturePaths(root=root, dataset_root=root / "dataset", target_image=target, weights=weights,
                        config=config_path)
