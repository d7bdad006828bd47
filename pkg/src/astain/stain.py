"""Optical density, Macenko stain estimation/normalization and color augmentation.

Images are ``uint8`` arrays of shape ``[H, W, 3]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_I0 = 255.0
REFERENCE_HEMATOXYLIN = (0.65, 0.70, 0.29)
REFERENCE_EOSIN = (0.07, 0.99, 0.11)
REFERENCE_MAX_CONCENTRATIONS = (1.9705, 1.0308)


class StainEstimationError(ValueError):
    """The image does not support a two-stain decomposition."""


class UnderTissueError(StainEstimationError):
    """Too few pixels above the optical-density threshold."""


class DegenerateStainError(StainEstimationError):
    """Optical-density covariance has rank < 2 or the stain columns are dependent."""


def _unit_columns(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=0, keepdims=True)
    # leave already-unit columns bit-identical so serialization round trips exactly
    return a / np.where(np.abs(n - 1.0) < 1e-12, 1.0, n)


def _order_columns(a: np.ndarray) -> np.ndarray:
    # hematoxylin first: larger blue-channel absorbance
    return a if a[2, 0] >= a[2, 1] else a[:, ::-1]


@dataclass
class StainModel:
    """Absorbance matrix (unit, non-negative columns: hematoxylin, eosin) plus concentration scale."""

    A: np.ndarray = field(default_factory=lambda: np.column_stack(
        [REFERENCE_HEMATOXYLIN, REFERENCE_EOSIN]).astype(float))
    I0: float = DEFAULT_I0
    concentration_scale: np.ndarray = field(
        default_factory=lambda: np.array(REFERENCE_MAX_CONCENTRATIONS))

    def __post_init__(self):
        a = np.asarray(self.A, dtype=float)
        if a.shape != (3, 2):
            raise ValueError(f"stain matrix must be 3x2, got {a.shape}")
        if (a < 0).any():
            raise ValueError("stain matrix entries must be non-negative")
        self.A = _order_columns(_unit_columns(a))
        self.concentration_scale = np.asarray(self.concentration_scale, dtype=float)

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "I0": self.I0,
                "concentration_scale": self.concentration_scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "StainModel":
        return cls(np.array(d["A"]), float(d.get("I0", DEFAULT_I0)),
                   np.array(d.get("concentration_scale", REFERENCE_MAX_CONCENTRATIONS)))


@dataclass
class ColorAugmentConfig:
    scale_low: float = 0.9
    scale_high: float = 1.1
    shift_low: float = -10.0
    shift_high: float = 10.0

    def __post_init__(self):
        if self.scale_low > self.scale_high or self.shift_low > self.shift_high:
            raise ValueError("color augmentation ranges must satisfy low <= high")

    def draw(self, rng: np.random.Generator, n: int = 1):
        """Per-channel ``(scale, shift)`` arrays of shape ``[n, 3]``."""
        a = rng.uniform(self.scale_low, self.scale_high, size=(n, 3))
        b = rng.uniform(self.shift_low, self.shift_high, size=(n, 3))
        return a, b


# --------------------------------------------------------------------------
# Beer-Lambert
# --------------------------------------------------------------------------

def rgb_to_od(image: np.ndarray, I0: float = DEFAULT_I0) -> np.ndarray:
    if I0 <= 0:
        raise ValueError("I0 must be positive")
    return -np.log(np.maximum(np.asarray(image, dtype=float), 1.0) / I0)


def od_to_rgb(od: np.ndarray, I0: float = DEFAULT_I0) -> np.ndarray:
    return np.clip(np.rint(I0 * np.exp(-od)), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# closed-form symmetric 3x3 eigen-solve
# --------------------------------------------------------------------------

def _null_vector(m: np.ndarray) -> np.ndarray:
    """Unit vector spanning the null space of a rank-2 symmetric 3x3 matrix."""
    r0, r1, r2 = m
    cands = (np.cross(r0, r1), np.cross(r0, r2), np.cross(r1, r2))
    v = max(cands, key=lambda c: c @ c)
    n = math.sqrt(v @ v)
    if n == 0.0:
        raise DegenerateStainError("eigenvector undefined for a repeated eigenvalue")
    return v / n


def eigh_symmetric_3x3(m: np.ndarray):
    """Eigenvalues (descending) and matching unit eigenvectors (columns) of a symmetric 3x3 matrix.

    Eigenvalues come from the trigonometric solution of the characteristic
    cubic. The best-isolated eigenvector is taken as a cross product of rows of
    ``m - lambda*I``; the other two come from a 2x2 solve in its orthogonal
    complement, which stays stable when the remaining pair is close.
    """
    m = np.asarray(m, dtype=float)
    q = np.trace(m) / 3.0
    off = m[0, 1] ** 2 + m[0, 2] ** 2 + m[1, 2] ** 2
    p2 = ((m[0, 0] - q) ** 2 + (m[1, 1] - q) ** 2 + (m[2, 2] - q) ** 2 + 2.0 * off)
    if p2 <= 1e-300:
        return np.full(3, q), np.eye(3)
    p = math.sqrt(p2 / 6.0)
    b = (m - q * np.eye(3)) / p
    r = np.clip(np.linalg.det(b) / 2.0, -1.0, 1.0)
    phi = math.acos(r) / 3.0
    l1 = q + 2.0 * p * math.cos(phi)
    l3 = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
    l2 = 3.0 * q - l1 - l3
    vals = np.array([l1, l2, l3])

    iso = 0 if (l1 - l2) >= (l2 - l3) else 2
    v_iso = _null_vector(m - vals[iso] * np.eye(3))
    # orthonormal basis of the complement
    seed = np.eye(3)[np.argmin(np.abs(v_iso))]
    u1 = np.cross(v_iso, seed)
    u1 /= np.linalg.norm(u1)
    u2 = np.cross(v_iso, u1)
    basis = np.column_stack([u1, u2])
    s = basis.T @ m @ basis
    a, c, d = s[0, 0], s[0, 1], s[1, 1]
    theta = 0.5 * math.atan2(2.0 * c, a - d)
    w_big = basis @ np.array([math.cos(theta), math.sin(theta)])
    w_small = basis @ np.array([-math.sin(theta), math.cos(theta)])
    vecs = np.empty((3, 3))
    if iso == 0:
        vecs[:, 0], vecs[:, 1], vecs[:, 2] = v_iso, w_big, w_small
    else:
        vecs[:, 0], vecs[:, 1], vecs[:, 2] = w_big, w_small, v_iso
    return vals, vecs


# --------------------------------------------------------------------------
# Macenko
# --------------------------------------------------------------------------

def _tissue_od(image, I0, od_threshold, min_pixels=100):
    od = rgb_to_od(image, I0).reshape(-1, 3)
    tissue = od[np.linalg.norm(od, axis=1) > od_threshold]
    if len(tissue) < min_pixels:
        raise UnderTissueError(
            f"only {len(tissue)} pixels exceed OD magnitude {od_threshold}; need {min_pixels}")
    return od, tissue


def estimate_stain_matrix(image: np.ndarray, od_threshold: float = 0.15,
                          angle_percentile: float = 1.0, I0: float = DEFAULT_I0) -> StainModel:
    """Macenko estimate of the two stain absorbance vectors of ``image``.

    The returned model's ``concentration_scale`` is the 99th percentile of the
    image's own concentrations.
    """
    od, tissue = _tissue_od(image, I0, od_threshold)
    cov = np.cov(tissue, rowvar=False)
    vals, vecs = eigh_symmetric_3x3(cov)
    if vals[1] <= 1e-12 * max(vals[0], 1e-300):
        raise DegenerateStainError("optical-density covariance has rank < 2")
    plane = vecs[:, :2].copy()
    # orient so tissue projects onto the positive first axis; keeps angles off the +-pi cut
    if plane[:, 0].sum() < 0:
        plane[:, 0] *= -1
    if plane[:, 1].sum() < 0:
        plane[:, 1] *= -1
    proj = tissue @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [angle_percentile, 100.0 - angle_percentile])
    cols = []
    for ang in (lo, hi):
        v = plane @ np.array([math.cos(ang), math.sin(ang)])
        if v.sum() < 0:
            v = -v
        cols.append(np.clip(v, 0.0, None))
    a = np.column_stack(cols)
    if np.any(np.linalg.norm(a, axis=0) == 0):
        raise DegenerateStainError("estimated stain vector vanished after sign correction")
    model = StainModel(a, I0)
    conc = compute_concentrations(od, model.A)
    model.concentration_scale = np.percentile(conc, 99, axis=0)
    return model


def compute_concentrations(od: np.ndarray, A: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Least-squares stain concentrations ``[N, 2]`` for OD rows ``[N, 3]``."""
    A = np.asarray(A, dtype=float)
    gram = A.T @ A
    det = gram[0, 0] * gram[1, 1] - gram[0, 1] ** 2
    if abs(det) < 1e-12 * max(np.trace(gram) ** 2, 1e-300):
        raise DegenerateStainError("stain columns are linearly dependent")
    inv = np.array([[gram[1, 1], -gram[0, 1]], [-gram[0, 1], gram[0, 0]]]) / det
    c = np.asarray(od, dtype=float).reshape(-1, 3) @ A @ inv.T
    return np.maximum(c, 0.0) if clamp else c


def normalize_image(image: np.ndarray, reference: StainModel | None = None,
                    percentile: float = 99.0, od_threshold: float = 0.15,
                    angle_percentile: float = 1.0) -> np.ndarray:
    """Re-render ``image`` with the reference absorbance matrix and concentration scale."""
    reference = reference or StainModel()
    own = estimate_stain_matrix(image, od_threshold, angle_percentile, reference.I0)
    od = rgb_to_od(image, reference.I0).reshape(-1, 3)
    conc = compute_concentrations(od, own.A)
    top = np.percentile(conc, percentile, axis=0)
    top = np.where(top > 0, top, 1.0)
    conc *= reference.concentration_scale / top
    out = od_to_rgb(conc @ reference.A.T, reference.I0)
    return out.reshape(np.shape(image))


def fit_reference(image: np.ndarray, percentile: float = 99.0, od_threshold: float = 0.15,
                  angle_percentile: float = 1.0, I0: float = DEFAULT_I0) -> StainModel:
    """Reference model taken from a target image (its stain matrix and concentration percentile)."""
    model = estimate_stain_matrix(image, od_threshold, angle_percentile, I0)
    od = rgb_to_od(image, I0).reshape(-1, 3)
    model.concentration_scale = np.percentile(compute_concentrations(od, model.A), percentile, axis=0)
    return model


def compose_image(conc: np.ndarray, A: np.ndarray, I0: float = DEFAULT_I0) -> np.ndarray:
    """Beer-Lambert rendering of a ``[H, W, 2]`` concentration field."""
    return od_to_rgb(conc @ np.asarray(A, dtype=float).T, I0)


# --------------------------------------------------------------------------
# color augmentation
# --------------------------------------------------------------------------

def apply_color_transform(image: np.ndarray, scale, shift) -> np.ndarray:
    """``round(scale_c * I_c + shift_c)`` clamped to [0, 255]; keeps the input dtype if integral."""
    out = np.clip(np.rint(np.asarray(image, dtype=float) * scale + shift), 0, 255)
    return out.astype(np.uint8) if np.asarray(image).dtype == np.uint8 else out


def color_augment(image: np.ndarray, config: ColorAugmentConfig | None = None,
                  seed=None) -> np.ndarray:
    """Per-channel random affine intensity transform, one draw per image."""
    config = config or ColorAugmentConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    a, b = config.draw(rng)
    return apply_color_transform(image, a[0], b[0])
