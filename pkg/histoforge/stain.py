"""
Structure-preserving stain normalization.

Images are mapped to optical density (OD) space, where stains mix linearly
(V = W H). A two-column stain matrix W is learned by sparse non-negative
matrix factorization; a source image is re-rendered with the target's W and
its own concentrations rescaled to the target's dynamic range.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .config import SnmfParams
from .exceptions import (
    InsufficientTissueError, NonFiniteObjectiveError, RankDeficientStainMatrixError, StainError
)
from .types import ImageTensor, PathLike, check_rgb


logger = logging.getLogger(__name__)

BLUE = 2
UNIT_NORM_TOL = 1e-6
PARALLEL_COSINE = 0.999
PERCENTILE_FLOOR = 1e-6


@dataclass(frozen=True)
class ODMatrix:
    """Optical densities of the foreground pixels plus the mask to put them back."""
    values: np.ndarray  # 3 x P
    mask: np.ndarray    # H x W, True where the pixel is foreground

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != 3:
            raise StainError(f"OD values must be 3 x P, got {self.values.shape}")
        if int(self.mask.sum()) != self.values.shape[1]:
            raise StainError("OD mask count does not match the number of OD columns")

    @property
    def n_pixels(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.mask.shape


@dataclass(frozen=True)
class StainModel:
    """Stain matrix (hematoxylin column first) and per-stain concentration percentiles."""
    w: np.ndarray    # 3 x 2
    p99: np.ndarray  # 2
    params: Optional[SnmfParams] = None

    def __post_init__(self):
        if self.w.shape != (3, 2) or self.p99.shape != (2,):
            raise StainError(f"Stain model shapes must be (3, 2) and (2,), got {self.w.shape}, {self.p99.shape}")
        if np.any(self.w < 0):
            raise StainError("Stain matrix has negative entries")
        norms = np.linalg.norm(self.w, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise StainError(f"Stain matrix columns are not unit norm: {norms}")
        if np.any(self.p99 <= 0):
            raise StainError(f"Concentration percentiles must be positive: {self.p99}")

    def to_dict(self) -> dict:
        return {
            "w": [float(x) for x in self.w.reshape(-1)],
            "p99": [float(x) for x in self.p99],
            "params": self.params.model_dump() if self.params is not None else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StainModel":
        try:
            w = np.asarray(data["w"], dtype=np.float64).reshape(3, 2)
            p99 = np.asarray(data["p99"], dtype=np.float64)
        except (KeyError, ValueError) as e:
            raise StainError("Malformed stain model", str(e)) from None
        params = SnmfParams.model_validate(data["params"]) if data.get("params") else None
        return cls(w=w, p99=p99, params=params)

    def save_json(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load_json(cls, path: PathLike) -> "StainModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class Factorization:
    """Result of a sparse NMF run."""
    w: np.ndarray
    h: np.ndarray
    objective_history: Tuple[float, ...]
    n_iters: int
    converged: bool


def rgb_to_od(image: ImageTensor, i0: float = 255.0, beta: float = 0.15) -> ODMatrix:
    """
    Convert RGB intensities to optical density V = ln(i0 / I).

    Zero intensities are lifted to 1 before the log; pixels whose largest
    channel OD is below beta are treated as background and dropped.
    """
    if i0 <= 0:
        raise StainError(f"Illumination intensity must be positive, got {i0}")
    image = check_rgb(image).astype(np.float64)
    lifted = np.maximum(image, 1.0)
    od = np.maximum(np.log(i0 / lifted), 0.0)
    mask = od.max(axis=2) >= beta
    return ODMatrix(values=od[mask].T.copy(), mask=mask)


def od_to_rgb(od: ODMatrix, i0: float = 255.0) -> ImageTensor:
    """Render OD back to intensities; background pixels come back pure white."""
    if i0 <= 0:
        raise StainError(f"Illumination intensity must be positive, got {i0}")
    height, width = od.shape
    out = np.full((height, width, 3), float(i0))
    intensities = np.clip(i0 * np.exp(-od.values), 0.0, i0)
    out[od.mask] = intensities.T
    out = np.rint(out)
    if i0 <= 255:
        return out.astype(np.uint8)
    return out


def snmf_objective(v: np.ndarray, w: np.ndarray, h: np.ndarray, lambda_sparse: float) -> float:
    """||V - W H||_F^2 + lambda * ||H||_1."""
    residual = v - w @ h
    return float(np.sum(residual * residual) + lambda_sparse * np.sum(np.abs(h)))


def order_stains(w: np.ndarray, h: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Put the column with the larger blue OD component (hematoxylin) first."""
    if w[BLUE, 0] >= w[BLUE, 1]:
        return w, h
    w = w[:, ::-1].copy()
    if h is not None:
        h = h[::-1].copy()
    return w, h


def _normalize_columns(w: np.ndarray) -> np.ndarray:
    return w / np.linalg.norm(w, axis=0, keepdims=True)


def _check_stain_matrix(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (3, 2):
        raise StainError(f"Stain matrix must be 3 x 2, got {w.shape}")
    norms = np.linalg.norm(w, axis=0)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise StainError(f"Stain matrix columns must be unit norm, got norms {norms}")
    cosine = float(w[:, 0] @ w[:, 1] / (norms[0] * norms[1]))
    if cosine > PARALLEL_COSINE:
        raise RankDeficientStainMatrixError(f"Stain vectors are nearly parallel (cosine {cosine:.6f})")
    return w


def factorize(v: np.ndarray, params: SnmfParams = SnmfParams(), inner_iters: int = 10) -> Factorization:
    """
    Sparse NMF of a 3 x P OD matrix into unit-column W (3 x 2) and H (2 x P).

    H takes `inner_iters` multiplicative updates per sweep; each W column is
    then refit exactly under the unit-norm constraint. Both steps never
    increase the objective, so the recorded history is nonincreasing.
    Stops after max_iters sweeps or when the relative decrease drops below rel_tol.
    """
    rng = np.random.default_rng(params.seed)
    half_lambda = params.lambda_sparse / 2.0
    n_pixels = v.shape[1]

    # uniform on (0, 1]
    w = _normalize_columns(1.0 - rng.random((3, params.r)))
    h = 1.0 - rng.random((params.r, n_pixels))

    objective = snmf_objective(v, w, h, params.lambda_sparse)
    history = [objective]
    converged = False
    n_iters = 0
    for n_iters in range(1, params.max_iters + 1):
        wtv = w.T @ v
        wtw = w.T @ w
        for _ in range(inner_iters):
            h *= wtv / (wtw @ h + half_lambda + 1e-300)

        for k in range(params.r):
            others = [j for j in range(params.r) if j != k]
            residual = v - w[:, others] @ h[others]
            direction = np.maximum(residual @ h[k], 0.0)
            norm = np.linalg.norm(direction)
            if norm > 0:
                w[:, k] = direction / norm

        previous = objective
        objective = snmf_objective(v, w, h, params.lambda_sparse)
        if not np.isfinite(objective):
            raise NonFiniteObjectiveError(f"SNMF objective became non-finite at iteration {n_iters}")
        history.append(objective)
        if previous <= 0 or (previous - objective) < params.rel_tol * previous:
            converged = True
            break

    w, h = order_stains(w, h)
    logger.debug(f"SNMF stopped after {n_iters} iterations (objective {objective:.6g}, converged={converged})")
    return Factorization(w=w, h=h, objective_history=tuple(history), n_iters=n_iters, converged=converged)


def solve_concentrations(od, w: np.ndarray, lambda_sparse: float,
                         max_iters: int = 200, rel_tol: float = 1e-4) -> np.ndarray:
    """
    Non-negative lasso for H with W fixed, by exact coordinate descent over rows.

    Args:
        od: ODMatrix or a raw 3 x P array
        w: Unit-column 3 x 2 stain matrix
        lambda_sparse: L1 weight on H

    Returns:
        2 x P concentration matrix, all entries >= 0
    """
    v = od.values if isinstance(od, ODMatrix) else np.asarray(od, dtype=np.float64)
    w = _check_stain_matrix(w)
    n_stains = w.shape[1]
    h = np.zeros((n_stains, v.shape[1]))
    if v.shape[1] == 0:
        return h

    half_lambda = lambda_sparse / 2.0
    objective = snmf_objective(v, w, h, lambda_sparse)
    for _ in range(max_iters):
        for k in range(n_stains):
            others = [j for j in range(n_stains) if j != k]
            residual = v - w[:, others] @ h[others]
            h[k] = np.maximum(w[:, k] @ residual - half_lambda, 0.0)
        previous = objective
        objective = snmf_objective(v, w, h, lambda_sparse)
        if not np.isfinite(objective):
            raise NonFiniteObjectiveError("Concentration objective became non-finite")
        if objective <= 0 or (previous - objective) < rel_tol * previous:
            break
    return h


def _percentiles(h: np.ndarray, q: float) -> np.ndarray:
    p = np.percentile(h, q, axis=1)
    if np.any(p < PERCENTILE_FLOOR):
        logger.warning(f"Stain concentration percentile below {PERCENTILE_FLOOR}: {p}; flooring")
        p = np.maximum(p, PERCENTILE_FLOOR)
    return p


def fit_stain_model(image: ImageTensor, params: SnmfParams = SnmfParams()
                    ) -> Tuple[StainModel, ODMatrix, np.ndarray, Factorization]:
    """
    Estimate a stain model and also return the OD matrix and concentrations used.

    The percentiles come from H re-solved against the final W at
    lambda_concentration, not from the factorization's own H at lambda_sparse,
    so the statistics match how normalize_to_target solves source images.
    """
    od = rgb_to_od(image, params.i0, params.beta)
    if od.n_pixels < params.min_foreground:
        raise InsufficientTissueError(
            f"Only {od.n_pixels} foreground pixels; at least {params.min_foreground} are required",
            {"foreground": od.n_pixels, "beta": params.beta},
        )
    fac = factorize(od.values, params)
    h = solve_concentrations(od, fac.w, params.lambda_concentration, params.max_iters, params.rel_tol)
    model = StainModel(w=fac.w, p99=_percentiles(h, params.percentile), params=params)
    return model, od, h, fac


def estimate_stain_model(image: ImageTensor, params: SnmfParams = SnmfParams()) -> StainModel:
    """Learn the stain matrix and concentration percentiles of an image."""
    model, _, _, _ = fit_stain_model(image, params)
    return model


def normalize_to_target(source: ImageTensor, target_model: StainModel,
                        params: SnmfParams = SnmfParams()) -> ImageTensor:
    """
    Re-render a source image in the target's stain basis.

    Source concentrations are rescaled per stain by target_p99 / source_p99;
    background pixels are copied through unchanged.
    """
    source = check_rgb(source)
    od = rgb_to_od(source, params.i0, params.beta)
    if od.n_pixels == 0:
        return source.copy()

    source_model, od, h, _ = fit_stain_model(source, params)
    scale = target_model.p99 / source_model.p99
    rendered = od_to_rgb(ODMatrix(values=target_model.w @ (h * scale[:, None]), mask=od.mask), params.i0)
    rendered[~od.mask] = source[~od.mask]
    return rendered


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
