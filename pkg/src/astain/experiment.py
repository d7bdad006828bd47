"""Desk-scale multi-domain experiment: baseline, CA, DANN and CA+DANN over several seeds."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as D
from . import evaluation as E
from .trainer import TrainingConfig, build_patch_pool, mine_hard_negatives, run_training

log = logging.getLogger(__name__)

METHODS = {
    "baseline": dict(color_augmentation=False, domain_adversarial=False),
    "CA": dict(color_augmentation=True, domain_adversarial=False),
    "DANN": dict(color_augmentation=False, domain_adversarial=True),
    "CA+DANN": dict(color_augmentation=True, domain_adversarial=True),
}


def desk_config(**overrides) -> TrainingConfig:
    """Scaled-down schedule that fits a single CPU core."""
    base = dict(batch_size=32, domain_batch_size=32, total_iterations=1500, cycle_length=500,
                decay_interval=5000)
    base.update(overrides)
    return TrainingConfig(**base)


@dataclass
class RunResult:
    method: str
    seed: int
    threshold: float
    in_domain: E.F1Report
    held_out: E.F1Report
    probe_accuracy: float
    seconds: float


@dataclass
class ExperimentSetup:
    dataset: D.Dataset
    pool: object
    probe_train: tuple
    probe_test: tuple
    hard_negatives: list = field(default_factory=list)


def prepare(synthetic: D.SyntheticConfig | None = None, data_seed: int = 0,
            negatives_per_image: int = 24, mined: int = 200, mining_iterations: int = 400,
            mining_config: TrainingConfig | None = None) -> ExperimentSetup:
    """Generate data, mine one shared set of hard negatives and assemble the training pool."""
    ds = D.generate_synthetic_dataset(synthetic or D.SyntheticConfig(), data_seed)
    train = ds.split("train")
    pool = build_patch_pool(train, negatives_per_image, seed=data_seed)
    hard = []
    if mined:
        cfg = mining_config or desk_config(total_iterations=mining_iterations, seed=10_000 + data_seed)
        first = run_training(cfg, pool).model
        hard = mine_hard_negatives(first, train, mined, seed=data_seed)
        pool = build_patch_pool(train, negatives_per_image, seed=data_seed, hard_negatives=hard)
    probe_train = E.dataset_patches(train, seed=data_seed)
    probe_test = E.dataset_patches(ds.split("validation", "internal-test"), seed=data_seed + 1)
    return ExperimentSetup(ds, pool, probe_train, probe_test, hard)


def probe_accuracy(model, setup: ExperimentSetup) -> float:
    tr = E.export_features(model, *setup.probe_train)
    te = E.export_features(model, *setup.probe_test)
    return E.domain_probe(tr.features, tr.domains, te.features, te.domains)


def run_method(setup: ExperimentSetup, method: str, seed: int, config: TrainingConfig,
               radius: float = E.DEFAULT_RADIUS) -> RunResult:
    cfg = replace(config, seed=seed, **METHODS[method])
    t0 = time.perf_counter()
    model = run_training(cfg, setup.pool).model
    seconds = time.perf_counter() - t0
    ds = setup.dataset
    op = E.select_operating_point(model, ds.split("validation"), radius)
    ind = E.evaluate(model, ds.split("internal-test"), op.threshold, radius)
    ext = E.evaluate(model, ds.split("external-test"), op.threshold, radius)
    acc = probe_accuracy(model, setup)
    log.info("%s seed %d: in-domain F1 %.3f, held-out F1 %.3f, probe %.3f, %.0fs",
             method, seed, ind.f1, ext.f1, acc, seconds)
    return RunResult(method, seed, op.threshold, ind, ext, acc, seconds)


def summarize(results: list[RunResult]) -> dict:
    out = {}
    for m in dict.fromkeys(r.method for r in results):
        rs = [r for r in results if r.method == m]
        out[m] = {
            "in_domain_f1": float(np.mean([r.in_domain.f1 for r in rs])),
            "held_out_f1": float(np.mean([r.held_out.f1 for r in rs])),
            "held_out_f1_std": float(np.std([r.held_out.f1 for r in rs])),
            "probe_accuracy": float(np.mean([r.probe_accuracy for r in rs])),
            "max_seconds": float(max(r.seconds for r in rs)),
        }
    return out


def orderings(summary: dict) -> dict[str, bool]:
    """The four comparisons that define success of the desk experiment."""
    b = summary["baseline"]
    return {
        "a": all(summary[m]["held_out_f1"] > b["held_out_f1"] for m in ("CA", "DANN", "CA+DANN")),
        "b": (summary["CA+DANN"]["held_out_f1"] >= summary["DANN"]["held_out_f1"]
              and summary["CA+DANN"]["held_out_f1"] >= summary["CA"]["held_out_f1"]),
        "c": summary["DANN"]["probe_accuracy"] < b["probe_accuracy"],
        "d": all(abs(s["in_domain_f1"] - b["in_domain_f1"]) <= 0.1 for s in summary.values()),
    }


def run_experiment(seeds=(1, 2, 3), methods=tuple(METHODS), config: TrainingConfig | None = None,
                   setup: ExperimentSetup | None = None, **prepare_kw):
    setup = setup or prepare(**prepare_kw)
    config = config or desk_config()
    results = [run_method(setup, m, s, config) for s in seeds for m in methods]
    return setup, results
