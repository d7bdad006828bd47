"""Baseline and domain-adversarial training, batch sampling and hard-negative mining."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as D
from . import tensor as T
from .model import DomainBranch, MitosisClassifier, STRIDE, OFFSET
from .stain import ColorAugmentConfig, apply_color_transform

log = logging.getLogger(__name__)

POSITIVE, RANDOM_NEGATIVE, MINED_NEGATIVE = 0, 1, 2


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    """Optimizer, schedule and approach toggles. Defaults are the full-scale values."""

    batch_size: int = 64
    domain_batch_size: int | None = None
    base_lr: float = 0.01
    lr_decay: float = 0.9
    decay_interval: int = 5000
    weight_decay: float = 0.0005
    momentum: float = 0.9
    total_iterations: int = 40000
    lr_domain: float = 0.0025
    alpha_max: float = 1.0
    cycle_length: int = 2000
    warmup_fraction: float = 0.25
    color_augmentation: bool = False
    stain_normalization: bool = False
    domain_adversarial: bool = False
    mined_fraction: float = 0.5
    scale_range: tuple = (0.8, 1.2)
    fusion: str = "sum"
    shared_domain_pass: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha_max <= 1.0:
            raise ValueError(f"alpha_max must lie in [0, 1], got {self.alpha_max}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError(f"warmup_fraction must lie in (0, 1), got {self.warmup_fraction}")
        if self.cycle_length < 1:
            raise ValueError("cycle_length must be positive")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 2 for class balancing")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be non-negative")
        self.scale_range = tuple(self.scale_range)

    @property
    def domain_batch(self) -> int:
        return self.domain_batch_size or self.batch_size

    def check_domains(self, n_domains: int) -> None:
        if not self.domain_adversarial:
            return
        if n_domains < 2:
            raise ValueError(f"domain-adversarial training needs >= 2 domains, got {n_domains}")
        if self.domain_batch % n_domains:
            raise ValueError(f"domain batch size {self.domain_batch} is not divisible by "
                             f"{n_domains} domains")

    def optimizer(self) -> T.OptimizerState:
        return T.OptimizerState(self.base_lr, self.momentum, self.weight_decay, 0,
                                self.lr_decay, self.decay_interval)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d


@dataclass
class TrainStepReport:
    iteration: int
    L_M: float
    L_D: float = math.nan
    alpha: float = 0.0
    lr: float = 0.0


# --------------------------------------------------------------------------
# patch pools and batches
# --------------------------------------------------------------------------

@dataclass
class PatchPool:
    """Context windows around candidate patch centers with class, domain and provenance."""

    contexts: np.ndarray          # [N, CONTEXT, CONTEXT, 3] uint8
    labels: np.ndarray            # [N] 0/1
    domains: np.ndarray           # [N] dense domain index
    kinds: np.ndarray             # POSITIVE / RANDOM_NEGATIVE / MINED_NEGATIVE
    sources: np.ndarray           # [N, 4] (case index, image index, row, col)
    domain_ids: list = field(default_factory=list)  # dense index -> original domain label

    def __len__(self):
        return len(self.labels)

    @property
    def n_domains(self) -> int:
        return len(self.domain_ids)


@dataclass
class HardNegative:
    case_index: int
    image_index: int
    row: int
    col: int
    score: float


def _random_negatives(rng, image, ann, n, exclusion_radius):
    h, w = image.shape[:2]
    out = []
    tries = 0
    while len(out) < n and tries < 100 * n:
        tries += 1
        r = int(rng.integers(D.HALF, h - D.HALF))
        c = int(rng.integers(D.HALF, w - D.HALF))
        if len(ann) and np.min(np.hypot(ann[:, 0] - r, ann[:, 1] - c)) < exclusion_radius:
            continue
        out.append((r, c))
    return out


def build_patch_pool(dataset: D.Dataset, negatives_per_image: int = 16, seed: int = 0,
                     exclusion_radius: float = 15.0,
                     hard_negatives: list[HardNegative] | None = None) -> PatchPool:
    """Positives at every annotation, random negatives away from them, plus any mined negatives."""
    rng = np.random.default_rng([seed, 31])
    domain_ids = sorted({c.domain for c in dataset.cases})
    dense = {d: k for k, d in enumerate(domain_ids)}
    ctx, labels, doms, kinds, src = [], [], [], [], []

    def add(image, rc, label, kind, dom, ci, ii):
        ctx.append(D.context_window(image, rc))
        labels.append(label)
        kinds.append(kind)
        doms.append(dom)
        src.append((ci, ii, int(rc[0]), int(rc[1])))

    for ci, case in enumerate(dataset.cases):
        dom = dense[case.domain]
        for ii, rec in enumerate(case.images):
            for rc in rec.annotations:
                add(rec.image, rc, 1, POSITIVE, dom, ci, ii)
            for rc in _random_negatives(rng, rec.image, rec.annotations, negatives_per_image,
                                        exclusion_radius):
                add(rec.image, rc, 0, RANDOM_NEGATIVE, dom, ci, ii)
    for hn in hard_negatives or ():
        case = dataset.cases[hn.case_index]
        add(case.images[hn.image_index].image, (hn.row, hn.col), 0, MINED_NEGATIVE,
            dense[case.domain], hn.case_index, hn.image_index)
    if not labels:
        raise ValueError("dataset yields no patches")
    return PatchPool(np.stack(ctx), np.array(labels), np.array(doms), np.array(kinds),
                     np.array(src, dtype=np.int64), domain_ids)


@dataclass
class Batch:
    x: np.ndarray          # [B, 3, 63, 63] network input
    labels: np.ndarray
    domains: np.ndarray
    indices: np.ndarray    # rows of the source pool
    augment: list          # SpatialAugment per sample


def make_batch(pool: PatchPool, idx: np.ndarray, rng: np.random.Generator,
               config: TrainingConfig) -> Batch:
    """Spatially augment (rotation, mirror, scale) and optionally color-augment pool entries."""
    params = D.random_augment(rng, len(idx), config.scale_range)
    rows, cols = D.sample_grid(params)
    patches = D.bilinear(pool.contexts[idx], rows, cols)
    if config.color_augmentation:
        a, b = ColorAugmentConfig().draw(rng, len(idx))
        patches = apply_color_transform(patches, a[:, None, None, :], b[:, None, None, :])
    return Batch(D.to_network_input(patches), pool.labels[idx], pool.domains[idx], idx, params)


def sample_class_balanced_batch(pool: PatchPool, size: int, rng: np.random.Generator,
                                config: TrainingConfig) -> Batch:
    """``size/2`` positives and ``size/2`` negatives, drawn with replacement.

    When mined negatives exist, each negative comes from the mined pool with
    probability ``config.mined_fraction``.
    """
    pos = np.flatnonzero(pool.labels == 1)
    rand_neg = np.flatnonzero(pool.kinds == RANDOM_NEGATIVE)
    mined = np.flatnonzero(pool.kinds == MINED_NEGATIVE)
    if len(pos) == 0 or len(rand_neg) + len(mined) == 0:
        raise ValueError("class-balanced sampling needs at least one positive and one negative")
    half = size // 2
    p_idx = rng.choice(pos, half)
    if len(mined) and len(rand_neg):
        use_mined = rng.random(half) < config.mined_fraction
        n_idx = np.where(use_mined, rng.choice(mined, half), rng.choice(rand_neg, half))
    else:
        n_idx = rng.choice(mined if len(mined) else rand_neg, half)
    return make_batch(pool, np.concatenate([p_idx, n_idx]), rng, config)


def sample_domain_balanced_batch(pool: PatchPool, size: int, rng: np.random.Generator,
                                 config: TrainingConfig) -> Batch:
    """``size / D`` random patches from each of the pool's D domains."""
    n = pool.n_domains
    if n == 0 or size % n:
        raise ValueError(f"batch size {size} not divisible by {n} domains")
    per = size // n
    idx = []
    for d in range(n):
        members = np.flatnonzero(pool.domains == d)
        if len(members) == 0:
            raise ValueError(f"domain {pool.domain_ids[d]} has no samples")
        idx.append(rng.choice(members, per))
    return make_batch(pool, np.concatenate(idx), rng, config)


# --------------------------------------------------------------------------
# update rules
# --------------------------------------------------------------------------

def alpha_at(iteration: int, config: TrainingConfig) -> float:
    """Cyclic adversarial weight: zero during the warm-up part of each cycle, then a linear ramp."""
    phase = (iteration % config.cycle_length) / config.cycle_length
    if phase <= config.warmup_fraction:
        return 0.0
    return config.alpha_max * (phase - config.warmup_fraction) / (1.0 - config.warmup_fraction)


def _finite(name, value, iteration):
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{name} became {value} at iteration {iteration}")


def train_step_baseline(model: MitosisClassifier, batch: Batch, state: T.OptimizerState) -> TrainStepReport:
    """Cross-entropy descent on θ_M with momentum SGD."""
    it, lr = state.iteration, state.lr_at()
    model.zero_grad()
    trace = model.forward(batch.x, "train")
    loss, probs = T.softmax_cross_entropy(trace.logits, batch.labels)
    _finite("L_M", loss, it)
    model.backward(dlogits=T.softmax_cross_entropy_backward(probs, batch.labels))
    T.sgd_step(model.parameters, state)
    return TrainStepReport(it, loss, lr=lr)


def domain_gradients(model: MitosisClassifier, branch: DomainBranch, batch: Batch) -> float:
    """One shared forward/backward for the domain loss.

    Leaves ∂L_D/∂θ_D in the branch gradients and ∂L_D/∂θ_M in the classifier
    gradients; returns L_D. The classifier's running statistics are not updated.
    """
    model.zero_grad()
    branch.zero_grad()
    trace = model.forward(batch.x, "train", update_running=False)
    logits = branch.forward(trace.tap2, trace.tap4, "train")
    loss, probs = T.softmax_cross_entropy(logits, batch.domains)
    dtap2, dtap4 = branch.backward(T.softmax_cross_entropy_backward(probs, batch.domains))
    model.backward(dtap2=dtap2, dtap4=dtap4)
    return loss


def apply_domain_updates(model: MitosisClassifier, branch: DomainBranch, lr_domain: float,
                         alpha: float, domain_step: bool = True, adversarial_step: bool = True) -> None:
    """Plain-SGD descent of θ_D and α-weighted ascent of θ_M on the stored L_D gradients."""
    if domain_step:
        for p in branch.parameters:
            p.value -= lr_domain * p.grad
    if adversarial_step and alpha > 0.0:
        for p in model.parameters:
            p.value += alpha * lr_domain * p.grad
    model.zero_grad()
    branch.zero_grad()


def train_step_dann(model: MitosisClassifier, branch: DomainBranch, class_batch: Batch,
                    domain_batch: Batch, state: T.OptimizerState, alpha: float,
                    lr_domain: float, shared_pass: bool = True) -> TrainStepReport:
    """Classification pass, then domain-classifier descent and adversarial ascent.

    With ``shared_pass`` both domain updates use gradients from one forward
    pass; otherwise the ascent step recomputes them after the descent step.
    """
    report = train_step_baseline(model, class_batch, state)
    loss_d = domain_gradients(model, branch, domain_batch)
    _finite("L_D", loss_d, report.iteration)
    if shared_pass:
        apply_domain_updates(model, branch, lr_domain, alpha)
    else:
        apply_domain_updates(model, branch, lr_domain, alpha, adversarial_step=False)
        if alpha > 0.0:
            domain_gradients(model, branch, domain_batch)
            apply_domain_updates(model, branch, lr_domain, alpha, domain_step=False)
    report.L_D = loss_d
    report.alpha = alpha
    return report


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass
class TrainingResult:
    model: MitosisClassifier
    branch: DomainBranch | None
    log: list[TrainStepReport]


def branch_seed(seed: int, cycle: int) -> int:
    return int(np.random.SeedSequence([seed, 977, cycle]).generate_state(1)[0])


def run_training(config: TrainingConfig, pool: PatchPool, progress=None) -> TrainingResult:
    """Run ``config.total_iterations`` steps; deterministic given ``(config, pool)``."""
    if len(pool) == 0:
        raise ValueError("empty patch pool")
    config.check_domains(pool.n_domains)
    model = MitosisClassifier(config.seed)
    branch = None
    if config.domain_adversarial:
        branch = DomainBranch(pool.n_domains, branch_seed(config.seed, 0), config.fusion)
    state = config.optimizer()
    rng = np.random.default_rng([config.seed, 4242])
    history = []
    for it in range(config.total_iterations):
        cls_batch = sample_class_balanced_batch(pool, config.batch_size, rng, config)
        if branch is None:
            report = train_step_baseline(model, cls_batch, state)
        else:
            if it % config.cycle_length == 0:
                branch.reinit(branch_seed(config.seed, it // config.cycle_length))
            dom_batch = sample_domain_balanced_batch(pool, config.domain_batch, rng, config)
            report = train_step_dann(model, branch, cls_batch, dom_batch, state,
                                     alpha_at(it, config), config.lr_domain,
                                     config.shared_domain_pass)
        history.append(report)
        if progress is not None:
            progress(report)
    return TrainingResult(model, branch, history)


def write_log(history: list[TrainStepReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "L_M", "L_D", "alpha", "lr"])
        for r in history:
            w.writerow([r.iteration, repr(r.L_M), "" if math.isnan(r.L_D) else repr(r.L_D),
                        repr(r.alpha), repr(r.lr)])


# --------------------------------------------------------------------------
# hard-negative mining
# --------------------------------------------------------------------------

def sample_map_locations(weights: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn without replacement, each draw proportional to the remaining weights."""
    w = np.asarray(weights, dtype=float).ravel()
    if count < 1:
        raise ValueError("count must be >= 1")
    nonzero = int((w > 0).sum())
    if nonzero == 0:
        raise ValueError("probability map is zero everywhere after exclusion")
    if count > nonzero:
        raise ValueError(f"requested {count} locations but only {nonzero} cells have mass")
    return rng.choice(w.size, size=count, replace=False, p=w / w.sum())


def exclusion_mask(pmap_shape, annotations: np.ndarray, radius: float,
                   stride: int = STRIDE, offset: int = OFFSET) -> np.ndarray:
    """True for map cells whose pixel center lies within ``radius`` of any annotation."""
    rows = offset + stride * np.arange(pmap_shape[0])
    cols = offset + stride * np.arange(pmap_shape[1])
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    mask = np.zeros(pmap_shape, dtype=bool)
    for r, c in np.asarray(annotations).reshape(-1, 2):
        mask |= np.hypot(rr - r, cc - c) < radius
    return mask


def mine_hard_negatives(model: MitosisClassifier, dataset: D.Dataset, count: int,
                        exclusion_radius: float = 15.0, seed: int = 0) -> list[HardNegative]:
    """Sample ``count`` map cells proportionally to P(mitosis), away from ground truth."""
    from .evaluation import dense_inference

    weights, where = [], []
    for ci, case in enumerate(dataset.cases):
        for ii, rec in enumerate(case.images):
            pmap = dense_inference(model, rec.image)
            v = pmap.values.copy()
            v[exclusion_mask(v.shape, rec.annotations, exclusion_radius, pmap.stride, pmap.offset)] = 0.0
            weights.append(v.ravel())
            i, j = np.unravel_index(np.arange(v.size), v.shape)
            where.append(np.column_stack([np.full(v.size, ci), np.full(v.size, ii),
                                          pmap.offset + pmap.stride * i,
                                          pmap.offset + pmap.stride * j]))
    w = np.concatenate(weights)
    loc = np.concatenate(where)
    picks = sample_map_locations(w, count, np.random.default_rng([seed, 55]))
    return [HardNegative(int(loc[k, 0]), int(loc[k, 1]), int(loc[k, 2]), int(loc[k, 3]), float(w[k]))
            for k in picks]
