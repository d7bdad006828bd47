"""Dense inference, local maxima, detection matching, operating-point selection and feature probes."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import struct
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.optimize import linear_sum_assignment

from . import data as D
from . import tensor as T
from .model import OFFSET, PATCH, STRIDE, MitosisClassifier

log = logging.getLogger(__name__)

DEFAULT_RADIUS = 30.0
PMAP_MAGIC = b"PMAP v1\n"


@dataclass
class ProbabilityMap:
    values: np.ndarray
    stride: int = STRIDE
    offset: int = OFFSET

    def pixel_of(self, i, j):
        return self.offset + self.stride * i, self.offset + self.stride * j


@dataclass(frozen=True)
class Detection:
    row: float
    col: float
    score: float


@dataclass
class F1Report:
    true_positives: int
    false_positives: int
    false_negatives: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "F1Report":
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return cls(int(tp), int(fp), int(fn), p, r, f)

    def __add__(self, other: "F1Report") -> "F1Report":
        return F1Report.from_counts(self.true_positives + other.true_positives,
                                    self.false_positives + other.false_positives,
                                    self.false_negatives + other.false_negatives)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# dense inference
# --------------------------------------------------------------------------

def map_extent(h: int, w: int) -> tuple[int, int]:
    return (h - PATCH) // STRIDE + 1, (w - PATCH) // STRIDE + 1


def dense_inference(model: MitosisClassifier, image: np.ndarray) -> ProbabilityMap:
    """P(mitosis) for every stride-16 patch position of a ``[H, W, 3]`` image."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise T.ShapeError(f"expected an [H, W, 3] image, got {image.shape}")
    logits = model.dense_logits(D.to_network_input(image[None]))[0]
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return ProbabilityMap(e[1] / e.sum(axis=0))


# --------------------------------------------------------------------------
# local maxima
# --------------------------------------------------------------------------

_NEIGHBORS = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj]


def local_maxima(pmap: ProbabilityMap, threshold: float) -> list[Detection]:
    """Strict 8-neighborhood maxima at or above ``threshold``.

    A connected plateau of equal values with no strictly larger neighbor is
    reported once, at its row-major-first cell.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    v = np.asarray(pmap.values, dtype=float)
    h, w = v.shape
    peak = maximum_filter(v, size=3, mode="constant", cval=-np.inf) == v
    peak &= v >= threshold
    seen = np.zeros_like(peak)
    found = []
    for i, j in zip(*np.nonzero(peak)):
        if seen[i, j]:
            continue
        comp, ok = [], True
        queue = deque([(i, j)])
        seen[i, j] = True
        while queue:
            a, b = queue.popleft()
            comp.append((a, b))
            ok &= bool(peak[a, b])
            for di, dj in _NEIGHBORS:
                x, y = a + di, b + dj
                if 0 <= x < h and 0 <= y < w and not seen[x, y] and v[x, y] == v[i, j]:
                    seen[x, y] = True
                    queue.append((x, y))
        if ok:
            a, b = min(comp)
            r, c = pmap.pixel_of(a, b)
            found.append(Detection(float(r), float(c), float(v[a, b])))
    return found


# --------------------------------------------------------------------------
# matching and scoring
# --------------------------------------------------------------------------

def _as_points(points) -> np.ndarray:
    return np.asarray(points, dtype=float).reshape(-1, 2)


def _greedy_pairs(det, gt, radius):
    order = sorted(range(len(det)), key=lambda k: -det[k].score)
    free = np.ones(len(gt), dtype=bool)
    tp = 0
    for k in order:
        if not free.any():
            break
        d = np.hypot(gt[:, 0] - det[k].row, gt[:, 1] - det[k].col)
        d[~free] = np.inf
        m = int(np.argmin(d))
        if d[m] <= radius:
            free[m] = False
            tp += 1
    return tp


def _optimal_pairs(det, gt, radius):
    if not det or not len(gt):
        return 0
    pts = np.array([(d.row, d.col) for d in det])
    dist = np.hypot(pts[:, None, 0] - gt[None, :, 0], pts[:, None, 1] - gt[None, :, 1])
    ok = dist <= radius
    # one extra pair outweighs any change in summed distance
    big = radius * (min(dist.shape) + 1)
    cost = np.where(ok, dist - big, 0.0)
    r, c = linear_sum_assignment(cost)
    return int(ok[r, c].sum())


def match_detections(detections, ground_truth, radius: float = DEFAULT_RADIUS,
                     method: str = "optimal") -> F1Report:
    """One-to-one matching of detections to ground-truth centers within ``radius``.

    ``optimal`` maximizes the number of matched pairs; ``greedy`` lets
    detections, in order of descending score, claim their nearest free center.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    det = list(detections)
    gt = _as_points(ground_truth)
    if method == "optimal":
        tp = _optimal_pairs(det, gt, radius)
    elif method == "greedy":
        tp = _greedy_pairs(det, gt, radius)
    else:
        raise ValueError(f"unknown matching method {method!r}")
    return F1Report.from_counts(tp, len(det) - tp, len(gt) - tp)


def brute_force_matches(detections, ground_truth, radius: float) -> int:
    """Largest one-to-one matching by enumerating every injective assignment (small inputs only)."""
    det = list(detections)
    gt = _as_points(ground_truth)
    n, m = len(det), len(gt)
    ok = [[np.hypot(d.row - g[0], d.col - g[1]) <= radius for g in gt] for d in det]
    best = 0
    # each detection picks a distinct GT index or None
    slots = list(range(m)) + [None] * n
    for choice in set(itertools.permutations(slots, n)):
        best = max(best, sum(1 for k, g in enumerate(choice) if g is not None and ok[k][g]))
    return best


@dataclass
class OperatingPoint:
    threshold: float
    f1: float
    warning: str | None = None


def sweep_thresholds(maxima_per_image, ground_truth_per_image, radius: float = DEFAULT_RADIUS,
                     method: str = "optimal") -> list[tuple[float, F1Report]]:
    """Pooled F1 at each distinct local-maximum score, in ascending threshold order."""
    scores = sorted({d.score for dets in maxima_per_image for d in dets})
    out = []
    for t in scores:
        total = F1Report.from_counts(0, 0, 0)
        for dets, gt in zip(maxima_per_image, ground_truth_per_image):
            total = total + match_detections([d for d in dets if d.score >= t], gt, radius, method)
        out.append((t, total))
    return out


def best_threshold(maxima_per_image, ground_truth_per_image, radius: float = DEFAULT_RADIUS,
                   method: str = "optimal") -> OperatingPoint:
    """Threshold with maximal pooled F1; ties go to the higher threshold."""
    if sum(len(_as_points(g)) for g in ground_truth_per_image) == 0:
        raise ValueError("validation set has no annotated mitoses")
    sweep = sweep_thresholds(maxima_per_image, ground_truth_per_image, radius, method)
    if not sweep:
        log.warning("no local maxima on the validation set; threshold defaults to 1.0")
        return OperatingPoint(1.0, 0.0, "no detections at any threshold")
    best_t, best_f = sweep[0][0], sweep[0][1].f1
    for t, rep in sweep[1:]:
        if rep.f1 >= best_f:
            best_t, best_f = t, rep.f1
    return OperatingPoint(best_t, best_f)


def probability_maps(model: MitosisClassifier, dataset: D.Dataset) -> list[ProbabilityMap]:
    return [dense_inference(model, rec.image) for rec in dataset.images]


def select_operating_point(model: MitosisClassifier, validation: D.Dataset,
                           radius: float = DEFAULT_RADIUS, method: str = "optimal") -> OperatingPoint:
    """F1-maximizing threshold on a validation set, from one pass of dense inference."""
    maps = probability_maps(model, validation)
    maxima = [local_maxima(m, 0.0) for m in maps]
    return best_threshold(maxima, [r.annotations for r in validation.images], radius, method)


def evaluate_maps(maps, ground_truth_per_image, threshold: float,
                  radius: float = DEFAULT_RADIUS, method: str = "optimal") -> F1Report:
    total = F1Report.from_counts(0, 0, 0)
    for m, gt in zip(maps, ground_truth_per_image):
        total = total + match_detections(local_maxima(m, threshold), gt, radius, method)
    return total


def evaluate(model: MitosisClassifier, test: D.Dataset, threshold: float,
             radius: float = DEFAULT_RADIUS, method: str = "optimal") -> F1Report:
    """Counts summed over every test image, then precision/recall/F1 from the sums."""
    return evaluate_maps(probability_maps(model, test), [r.annotations for r in test.images],
                         threshold, radius, method)


def report_json(report: F1Report, threshold: float, radius: float, **extra) -> str:
    body = report.to_dict()
    body.update(threshold=threshold, radius=radius, **extra)
    return json.dumps(body, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# probability map files
# --------------------------------------------------------------------------

def write_pmap(pmap: ProbabilityMap, fh) -> None:
    v = np.asarray(pmap.values)
    fh.write(PMAP_MAGIC)
    fh.write(f"{v.shape[0]} {v.shape[1]} {pmap.stride} {pmap.offset}\n".encode())
    fh.write(v.astype("<f4").tobytes())


def read_pmap(fh) -> ProbabilityMap:
    if fh.readline() != PMAP_MAGIC:
        raise ValueError("not a PMAP v1 file")
    try:
        h, w, stride, offset = (int(t) for t in fh.readline().split())
    except ValueError as exc:
        raise ValueError("malformed PMAP header") from exc
    raw = fh.read()
    if len(raw) != 4 * h * w:
        raise ValueError(f"PMAP payload holds {len(raw)} bytes, expected {4 * h * w}")
    return ProbabilityMap(np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(float), stride, offset)


# --------------------------------------------------------------------------
# features and the domain probe
# --------------------------------------------------------------------------

@dataclass
class FeatureTable:
    case_ids: list
    image_ids: list
    labels: np.ndarray
    domains: np.ndarray
    features: np.ndarray

    def __len__(self):
        return len(self.labels)

    def write_csv(self, fh) -> None:
        w = csv.writer(fh)
        w.writerow(["case", "image", "y", "d"] + [f"f{k}" for k in range(self.features.shape[1])])
        for row in zip(self.case_ids, self.image_ids, self.labels, self.domains, self.features):
            w.writerow(list(row[:2]) + [int(row[2]), int(row[3])] + [repr(float(f)) for f in row[4]])


def export_features(model: MitosisClassifier, x: np.ndarray, case_ids, image_ids, labels,
                    domains, batch_size: int = 256) -> FeatureTable:
    """Flattened fourth-block activations (64 per patch) for network inputs ``x[N, 3, 63, 63]``."""
    feats = [model.features(x[k:k + batch_size]) for k in range(0, len(x), batch_size)]
    f = np.concatenate(feats) if feats else np.zeros((0, 64))
    return FeatureTable(list(case_ids), list(image_ids), np.asarray(labels), np.asarray(domains), f)


def dataset_patches(dataset: D.Dataset, negatives_per_image: int = 8, seed: int = 0,
                    exclusion_radius: float = 15.0):
    """Unaugmented patches at annotations and random background points, with their labels.

    Returns ``(x, case_ids, image_ids, labels, domains)``.
    """
    rng = np.random.default_rng([seed, 808])
    patches, cases, images, labels, domains = [], [], [], [], []
    for case in dataset.cases:
        for rec in case.images:
            ann = rec.annotations.reshape(-1, 2)
            h, w = rec.image.shape[:2]
            points = [(tuple(p), 1) for p in ann.astype(int)]
            k = 0
            while k < negatives_per_image:
                r = int(rng.integers(D.HALF, h - D.HALF))
                c = int(rng.integers(D.HALF, w - D.HALF))
                if len(ann) and np.min(np.hypot(ann[:, 0] - r, ann[:, 1] - c)) < exclusion_radius:
                    continue
                points.append(((r, c), 0))
                k += 1
            for rc, y in points:
                patches.append(D.extract_patch(rec.image, rc))
                cases.append(case.case_id)
                images.append(rec.image_id)
                labels.append(y)
                domains.append(case.domain)
    return D.to_network_input(np.stack(patches)), cases, images, np.array(labels), np.array(domains)


def domain_probe(train_features: np.ndarray, train_domains, test_features: np.ndarray,
                 test_domains, epochs: int = 200, lr: float = 0.01, momentum: float = 0.9,
                 batch_size: int = 32, seed: int = 0) -> float:
    """Held-out accuracy of a softmax layer trained to predict the domain from frozen features.

    Features are standardized with training-split statistics; the inputs are not modified.
    """
    xtr = np.asarray(train_features, dtype=float)
    xte = np.asarray(test_features, dtype=float)
    ytr_raw, yte_raw = np.asarray(train_domains), np.asarray(test_domains)
    classes = np.unique(ytr_raw)
    if len(classes) < 2 or len(np.unique(yte_raw)) < 2:
        raise ValueError("domain probe needs at least two domains in both splits")
    index = {c: k for k, c in enumerate(classes)}
    if any(c not in index for c in np.unique(yte_raw)):
        raise ValueError("test split contains domains absent from the training split")
    ytr = np.array([index[c] for c in ytr_raw])
    yte = np.array([index[c] for c in yte_raw])

    mu = xtr.mean(axis=0)
    sd = xtr.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    xtr, xte = (xtr - mu) / sd, (xte - mu) / sd

    k = len(classes)
    w = np.zeros((k, xtr.shape[1]))
    b = np.zeros(k)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(xtr))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            logits, _ = T.fully_connected(xtr[idx], w, b)
            _, probs = T.softmax_cross_entropy(logits, ytr[idx])
            g = T.softmax_cross_entropy_backward(probs, ytr[idx])
            vw = momentum * vw + g.T @ xtr[idx]
            vb = momentum * vb + g.sum(axis=0)
            w -= lr * vw
            b -= lr * vb
    pred = np.argmax(xte @ w.T + b, axis=1)
    return float(np.mean(pred == yte))
