"""Dataset layout, patch extraction, synthetic multi-domain data and checkpoint files."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import model as M
from .stain import REFERENCE_EOSIN, REFERENCE_HEMATOXYLIN, compose_image

log = logging.getLogger(__name__)

PATCH = M.PATCH
HALF = PATCH // 2
# 63x63 patch rotated by any angle and zoomed out to 0.8 needs a radius of 31*sqrt(2)/0.8
CONTEXT_HALF = int(math.ceil(HALF * math.sqrt(2) / 0.8))
CONTEXT = 2 * CONTEXT_HALF + 1
SPLITS = ("train", "validation", "internal-test", "external-test")


class DatasetError(Exception):
    pass


class ManifestError(DatasetError):
    pass


class ImageReadError(DatasetError):
    pass


class AnnotationFormatError(DatasetError):
    pass


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from exc


def write_image(path, image: np.ndarray) -> None:
    """PNG or binary PPM (P6), chosen by suffix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(np.asarray(image, dtype=np.uint8), "RGB").save(path, format=fmt)


# --------------------------------------------------------------------------
# dataset model
# --------------------------------------------------------------------------

@dataclass
class ImageRecord:
    image: np.ndarray
    annotations: np.ndarray  # [k, 2] integer (row, col)
    image_id: str = ""
    path: str | None = None
    annotation_path: str | None = None


@dataclass
class Case:
    case_id: str
    domain: int
    split: str
    images: list[ImageRecord] = field(default_factory=list)


@dataclass
class Dataset:
    cases: list[Case]
    dropped_annotations: int = 0

    def split(self, *names: str) -> "Dataset":
        for n in names:
            if n not in SPLITS:
                raise ValueError(f"unknown split {n!r}; expected one of {SPLITS}")
        return Dataset([c for c in self.cases if c.split in names])

    @property
    def domains(self) -> list[int]:
        return sorted({c.domain for c in self.cases})

    @property
    def images(self) -> list[ImageRecord]:
        return [im for c in self.cases for im in c.images]

    def n_annotations(self) -> int:
        return sum(len(im.annotations) for im in self.images)

    def map_images(self, fn) -> "Dataset":
        """Copy of the dataset with ``fn`` applied to every image array."""
        cases = [Case(c.case_id, c.domain, c.split,
                      [ImageRecord(fn(im.image), im.annotations, im.image_id, im.path,
                                   im.annotation_path) for im in c.images])
                 for c in self.cases]
        return Dataset(cases, self.dropped_annotations)


def _border_ok(ann: np.ndarray, shape) -> np.ndarray:
    h, w = shape[:2]
    if len(ann) == 0:
        return np.zeros(0, dtype=bool)
    return ((ann[:, 0] >= HALF) & (ann[:, 0] < h - HALF) &
            (ann[:, 1] >= HALF) & (ann[:, 1] < w - HALF))


def read_annotations(path) -> np.ndarray:
    rows = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise AnnotationFormatError(f"cannot open annotation file {path}: {exc}") from exc
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not x.strip() for x in row):
                continue
            try:
                if len(row) != 2:
                    raise ValueError(f"expected 2 fields, got {len(row)}")
                rows.append((int(row[0]), int(row[1])))
            except ValueError as exc:
                raise AnnotationFormatError(f"{path}:{lineno}: malformed row {row!r} ({exc})") from exc
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def load_dataset(root) -> Dataset:
    """Load ``root/manifest.json`` and every image/annotation it references."""
    root = Path(root)
    manifest = root / "manifest.json"
    if not manifest.is_file():
        raise ManifestError(f"missing manifest {manifest}")
    try:
        spec = json.loads(manifest.read_text())
        entries = spec["cases"] if isinstance(spec, dict) else spec
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ManifestError(f"malformed manifest {manifest}: {exc}") from exc
    cases = []
    dropped = 0
    for n, entry in enumerate(entries):
        try:
            case = Case(str(entry["case_id"]), int(entry.get("domain", n)), entry.get("split", "train"))
            image_entries = entry["images"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{manifest}: case #{n} malformed ({exc})") from exc
        if case.split not in SPLITS:
            raise ManifestError(f"{manifest}: case {case.case_id} has unknown split {case.split!r}")
        for k, item in enumerate(image_entries):
            if not isinstance(item, dict) or "image" not in item:
                raise ManifestError(f"{manifest}: case {case.case_id} image #{k} lacks an 'image' path")
            img_path = root / item["image"]
            img = read_image(img_path)
            ann_rel = item.get("annotations")
            ann = read_annotations(root / ann_rel) if ann_rel else np.zeros((0, 2), np.int64)
            ok = _border_ok(ann, img.shape)
            if (~ok).any():
                log.info("%s: dropped %d annotations within %d px of the border",
                         img_path, int((~ok).sum()), HALF)
                dropped += int((~ok).sum())
            case.images.append(ImageRecord(img, ann[ok], item.get("image_id", Path(item["image"]).stem),
                                           str(item["image"]), ann_rel))
        cases.append(case)
    if dropped:
        log.warning("dropped %d border-violating annotations", dropped)
    dense = {d: k for k, d in enumerate(sorted({c.domain for c in cases}))}
    for c in cases:
        c.domain = dense[c.domain]
    return Dataset(cases, dropped)


def write_dataset(dataset: Dataset, root, image_format: str = "png") -> None:
    root = Path(root)
    entries = []
    for case in dataset.cases:
        images = []
        for k, rec in enumerate(case.images):
            image_id = rec.image_id or f"img{k:03d}"
            img_rel = f"{case.case_id}/{image_id}.{image_format}"
            ann_rel = f"{case.case_id}/{image_id}.csv"
            write_image(root / img_rel, rec.image)
            with open(root / ann_rel, "w", newline="") as fh:
                csv.writer(fh).writerows(np.asarray(rec.annotations, dtype=np.int64).tolist())
            images.append({"image": img_rel, "annotations": ann_rel, "image_id": image_id})
        entries.append({"case_id": case.case_id, "domain": case.domain, "split": case.split,
                        "images": images})
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps({"cases": entries}, indent=1))


# --------------------------------------------------------------------------
# patch extraction
# --------------------------------------------------------------------------

@dataclass
class SpatialAugment:
    angle: float = 0.0     # degrees, counter-clockwise
    mirror: bool = False   # flip columns before rotating
    scale: float = 1.0     # >1 enlarges content


def context_window(image: np.ndarray, center) -> np.ndarray:
    """``CONTEXT x CONTEXT`` window around ``center``; reflects the image where it runs out."""
    r, c = int(center[0]), int(center[1])
    h, w = image.shape[:2]
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"center {center} outside image {h}x{w}")
    r0, r1 = r - CONTEXT_HALF, r + CONTEXT_HALF + 1
    c0, c1 = c - CONTEXT_HALF, c + CONTEXT_HALF + 1
    if r0 >= 0 and c0 >= 0 and r1 <= h and c1 <= w:
        return image[r0:r1, c0:c1].copy()
    pad = ((max(0, -r0), max(0, r1 - h)), (max(0, -c0), max(0, c1 - w)), (0, 0))
    if max(pad[0] + pad[1]) >= min(h, w):
        raise ValueError(f"image {h}x{w} too small to reflect-pad a {CONTEXT}-pixel context")
    padded = np.pad(image, pad, mode="reflect")
    return padded[r0 + pad[0][0]:r1 + pad[0][0], c0 + pad[1][0]:c1 + pad[1][0]].copy()


def sample_grid(params: list[SpatialAugment], size: int = PATCH, half: int = CONTEXT_HALF):
    """Source row/col coordinates ``[N, size, size]`` inside a context window for each augmentation."""
    o = np.arange(size, dtype=float) - size // 2
    orow, ocol = np.meshgrid(o, o, indexing="ij")
    n = len(params)
    rows = np.empty((n, size, size))
    cols = np.empty((n, size, size))
    for k, p in enumerate(params):
        oc = -ocol if p.mirror else ocol
        t = math.radians(p.angle)
        ct, st = math.cos(t), math.sin(t)
        rows[k] = half + (ct * orow + st * oc) / p.scale
        cols[k] = half + (-st * orow + ct * oc) / p.scale
    return rows, cols


def bilinear(windows: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear samples of ``windows[N, S, S, C]`` at per-window coordinates; returns float ``[N, h, w, C]``."""
    n, s = windows.shape[0], windows.shape[1]
    rows = np.clip(rows, 0, s - 1)
    cols = np.clip(cols, 0, s - 1)
    r0 = np.minimum(np.floor(rows).astype(np.int64), s - 2)
    c0 = np.minimum(np.floor(cols).astype(np.int64), s - 2)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]
    idx = np.arange(n)[:, None, None]
    w = windows.astype(float)
    top = w[idx, r0, c0] * (1 - fc) + w[idx, r0, c0 + 1] * fc
    bot = w[idx, r0 + 1, c0] * (1 - fc) + w[idx, r0 + 1, c0 + 1] * fc
    return top * (1 - fr) + bot * fr


def extract_patch(image: np.ndarray, center, augment: SpatialAugment | None = None) -> np.ndarray:
    """63x63 patch centered at ``center``: exact crop without augmentation, bilinear otherwise."""
    r, c = int(center[0]), int(center[1])
    h, w = image.shape[:2]
    if augment is None:
        if not (HALF <= r < h - HALF and HALF <= c < w - HALF):
            raise ValueError(f"63x63 patch at {center} leaves the {h}x{w} image")
        return image[r - HALF:r + HALF + 1, c - HALF:c + HALF + 1].astype(float)
    win = context_window(image, center)
    rows, cols = sample_grid([augment])
    return bilinear(win[None], rows, cols)[0]


def random_augment(rng: np.random.Generator, n: int, scale_range=(0.8, 1.2)) -> list[SpatialAugment]:
    angles = rng.uniform(0.0, 360.0, n)
    mirrors = rng.random(n) < 0.5
    scales = rng.uniform(scale_range[0], scale_range[1], n)
    return [SpatialAugment(float(a), bool(m), float(s)) for a, m, s in zip(angles, mirrors, scales)]


def to_network_input(patches: np.ndarray) -> np.ndarray:
    """``[N, 63, 63, 3]`` intensities in [0, 255] -> ``[N, 3, 63, 63]`` float network input."""
    x = np.asarray(patches, dtype=float)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2)) / 255.0 - 0.5


# --------------------------------------------------------------------------
# synthetic multi-domain data
# --------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    """Desk-scale stand-in for a multi-lab mitosis dataset.

    Every domain is one slide: a perturbed stain matrix, a per-channel affine
    color transform and a background texture scale. Training-lab domains draw
    their appearance from a narrow distribution; held-out (external) domains
    come from a shifted one. Mitoses are dark elongated ellipses, distractors
    are lighter, rounder and smaller nuclei; these shape statistics are the
    same in every domain.
    """

    domains: int = 8
    heldout_domains: int = 2
    images_per_domain: int = 8
    validation_images_per_domain: int = 2
    test_images_per_domain: int = 2
    heldout_images_per_domain: int = 16
    image_size: int = 256
    positives_per_image: int = 4
    distractors_per_image: int = 24
    match_radius: float = 30.0
    # appearance: training lab
    stain_jitter: float = 0.03
    color_scale_spread: float = 0.03
    color_shift_spread: float = 3.0
    texture_sigma: tuple = (2.0, 6.0)
    # appearance: external lab (offsets applied on top of the training-lab draw)
    heldout_stain_jitter: float = 0.08
    heldout_color_scale: tuple = (0.80, 0.88)
    heldout_color_shift: tuple = (-14.0, 14.0)
    heldout_texture_sigma: tuple = (1.0, 1.6)
    # objects
    mitosis_axes: tuple = (5.0, 8.0)
    mitosis_ratio: tuple = (1.8, 2.6)
    mitosis_hematoxylin: tuple = (1.3, 1.8)
    distractor_radius: tuple = (3.0, 5.5)
    distractor_ratio: tuple = (1.0, 1.3)
    distractor_hematoxylin: tuple = (0.6, 1.0)
    noise_std: float = 2.0
    max_retries: int = 200

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class DomainAppearance:
    stain: np.ndarray
    color_scale: np.ndarray
    color_shift: np.ndarray
    texture_sigma: float


def _draw_appearance(rng, cfg: SyntheticConfig, heldout: bool) -> DomainAppearance:
    base = np.column_stack([REFERENCE_HEMATOXYLIN, REFERENCE_EOSIN])
    jitter = cfg.heldout_stain_jitter if heldout else cfg.stain_jitter
    stain = np.clip(base + rng.uniform(-jitter, jitter, base.shape), 0.01, None)
    stain /= np.linalg.norm(stain, axis=0)
    if heldout:
        scale = rng.uniform(*cfg.heldout_color_scale, 3)
        shift = rng.uniform(*cfg.heldout_color_shift, 3)
        sigma = rng.uniform(*cfg.heldout_texture_sigma)
    else:
        scale = 1 + rng.uniform(-cfg.color_scale_spread, cfg.color_scale_spread, 3)
        shift = rng.uniform(-cfg.color_shift_spread, cfg.color_shift_spread, 3)
        sigma = rng.uniform(*cfg.texture_sigma)
    return DomainAppearance(stain, scale, shift, sigma)


def _ellipse(field_, center, a, b, theta, value):
    h, w = field_.shape
    r0, c0 = center
    ext = int(math.ceil(max(a, b))) + 2
    rs = slice(max(0, int(r0) - ext), min(h, int(r0) + ext + 1))
    cs = slice(max(0, int(c0) - ext), min(w, int(c0) + ext + 1))
    rr, cc = np.mgrid[rs, cs]
    dr, dc = rr - r0, cc - c0
    u = dr * math.cos(theta) + dc * math.sin(theta)
    v = -dr * math.sin(theta) + dc * math.cos(theta)
    d = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    # soft edge, one pixel wide
    cover = np.clip((1.0 - d) * min(a, b) + 0.5, 0.0, 1.0)
    field_[rs, cs] = np.maximum(field_[rs, cs], value * cover)


def _texture(rng, shape, sigma):
    t = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return t / (t.std() + 1e-12)


def _place(rng, n, size, margin, min_dist, avoid=(), avoid_dist=0.0, lattice=None, retries=200):
    """Random centers with pairwise spacing; a dead-end partial layout is discarded and redrawn."""
    for _ in range(retries):
        pts = []
        for _ in range(n):
            for _ in range(50):
                if lattice is not None:
                    p = (int(rng.choice(lattice)), int(rng.choice(lattice)))
                else:
                    p = tuple(int(v) for v in rng.integers(margin, size - margin, 2))
                if all(math.dist(p, q) >= min_dist for q in pts) and \
                   all(math.dist(p, q) >= avoid_dist for q in avoid):
                    pts.append(p)
                    break
            else:
                break
        if len(pts) == n:
            return pts
    raise ValueError(f"could not place {n} non-overlapping blobs in a {size}px image "
                     f"after {retries} attempts")


def render_image(rng: np.random.Generator, cfg: SyntheticConfig, look: DomainAppearance):
    """One synthetic tile; returns ``(image, mitosis_centers[k, 2])``."""
    s = cfg.image_size
    # mitoses sit on the stride-16 dense-inference lattice
    lattice = [M.OFFSET + M.STRIDE * k for k in range(s) if 40 <= M.OFFSET + M.STRIDE * k <= s - 41]
    mitoses = _place(rng, cfg.positives_per_image, s, 40, 2 * cfg.match_radius,
                     lattice=lattice, retries=cfg.max_retries)
    distractors = _place(rng, cfg.distractors_per_image, s, 8, 12.0, avoid=mitoses,
                         avoid_dist=20.0, retries=cfg.max_retries)
    tex = _texture(rng, (s, s), look.texture_sigma)
    hema = 0.12 + 0.05 * tex
    eosin = 0.45 + 0.15 * _texture(rng, (s, s), look.texture_sigma) + 0.05 * tex
    for p in distractors:
        r = rng.uniform(*cfg.distractor_radius)
        ratio = rng.uniform(*cfg.distractor_ratio)
        _ellipse(hema, p, r * math.sqrt(ratio), r / math.sqrt(ratio), rng.uniform(0, math.pi),
                 rng.uniform(*cfg.distractor_hematoxylin))
    for p in mitoses:
        a = rng.uniform(*cfg.mitosis_axes)
        _ellipse(hema, p, a, a / rng.uniform(*cfg.mitosis_ratio), rng.uniform(0, math.pi),
                 rng.uniform(*cfg.mitosis_hematoxylin))
    conc = np.clip(np.stack([hema, eosin], axis=-1), 0.0, None)
    img = compose_image(conc, look.stain).astype(float)
    img = img * look.color_scale + look.color_shift + rng.normal(0, cfg.noise_std, img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return img, np.array(mitoses, dtype=np.int64).reshape(-1, 2)


def generate_synthetic_dataset(config: SyntheticConfig | None = None, seed: int = 0) -> Dataset:
    """Deterministic multi-domain dataset: train/validation/internal-test cases per training
    domain and external-test cases for each held-out domain."""
    cfg = config or SyntheticConfig()
    cases = []
    plan = [(d, False) for d in range(cfg.domains)] + \
           [(cfg.domains + k, True) for k in range(cfg.heldout_domains)]
    for d, heldout in plan:
        rng = np.random.default_rng([seed, 2017, d])
        look = _draw_appearance(rng, cfg, heldout)
        if heldout:
            splits = [("external-test", cfg.heldout_images_per_domain, "")]
        else:
            splits = [("train", cfg.images_per_domain, ""),
                      ("validation", cfg.validation_images_per_domain, "-val"),
                      ("internal-test", cfg.test_images_per_domain, "-test")]
        for split, n, suffix in splits:
            case = Case(f"{'ext' if heldout else 'lab'}-d{d:02d}{suffix}", d, split)
            for k in range(n):
                img, ann = render_image(rng, cfg, look)
                case.images.append(ImageRecord(img, ann, f"img{k:03d}"))
            cases.append(case)
    return Dataset(cases)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(model: M.MitosisClassifier, branch: M.DomainBranch | None, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        M.write_state(M.state_dict(model, branch), fh)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns ``(model, branch_or_None)``."""
    with open(path, "rb") as fh:
        return M.load_state(M.read_state(fh))
