"""Command-line entry point: ``astain <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from pathlib import Path


from . import data as D
from . import evaluation as E
from . import stain as S
from . import trainer as TR
from .model import CheckpointError

log = logging.getLogger("astain")

IMAGE_SUFFIXES = {".png", ".ppm", ".pnm"}


class UsageError(Exception):
    """Invalid flag combination, detected before any work is done."""


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, args, **extra) -> None:
    body = {k: v for k, v in vars(args).items() if k != "func"}
    body.update(extra)
    (out / "config.json").write_text(json.dumps(body, indent=2, sort_keys=True, default=str))


def _reference(args) -> S.StainModel:
    if getattr(args, "reference", None):
        return S.StainModel.from_dict(json.loads(Path(args.reference).read_text()))
    return S.StainModel()


def _normalizer(reference: S.StainModel):
    def apply(image):
        try:
            return S.normalize_image(image, reference)
        except S.UnderTissueError:
            log.warning("image left unnormalized: too little tissue")
            return image
    return apply


def _load(args) -> D.Dataset:
    ds = D.load_dataset(args.dataset)
    if getattr(args, "sn", False):
        ds = ds.map_images(_normalizer(_reference(args)))
    return ds


def _training_config(args, n_domains: int) -> TR.TrainingConfig:
    kw = dict(seed=args.seed, color_augmentation=args.ca, stain_normalization=args.sn,
              domain_adversarial=args.dann, alpha_max=args.alpha_max,
              cycle_length=args.cycle_length, warmup_fraction=args.warmup_fraction,
              base_lr=args.lr, lr_domain=args.lr_d, batch_size=args.batch_size,
              domain_batch_size=args.domain_batch_size, total_iterations=args.iterations,
              shared_domain_pass=not args.separate_domain_pass)
    try:
        cfg = TR.TrainingConfig(**kw)
        cfg.check_domains(n_domains)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _read_hard_negatives(path, ds: D.Dataset) -> list[TR.HardNegative]:
    where = {(c.case_id, im.image_id): (ci, ii)
             for ci, c in enumerate(ds.cases) for ii, im in enumerate(c.images)}
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["case"], row["image"])
            if key not in where:
                raise D.DatasetError(f"{path}: hard negative refers to unknown image {key}")
            ci, ii = where[key]
            out.append(TR.HardNegative(ci, ii, int(row["row"]), int(row["col"]), float(row["score"])))
    return out


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = _out_dir(args)
    cfg = D.SyntheticConfig(domains=args.domains, heldout_domains=args.heldout_domains,
                            images_per_domain=args.images_per_domain)
    ds = D.generate_synthetic_dataset(cfg, args.seed)
    D.write_dataset(ds, out)
    _snapshot(out, args, synthetic=cfg.to_dict())
    log.info("wrote %d cases to %s", len(ds.cases), out)
    return 0


def cmd_normalize(args) -> int:
    src, out = Path(args.dataset), _out_dir(args)
    if src.resolve() == out.resolve():
        raise UsageError("--out must differ from --dataset")
    reference = _reference(args)
    failures = 0
    for path in sorted(p for p in src.rglob("*") if p.is_file()):
        rel = path.relative_to(src)
        target = out / rel
        target.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            shutil.copyfile(path, target)
            continue
        try:
            image = D.read_image(path)
            own = S.estimate_stain_matrix(image)
            D.write_image(target, S.normalize_image(image, reference))
            target.with_name(target.name + ".stain.json").write_text(json.dumps(own.to_dict(), indent=1))
        except (S.StainEstimationError, D.DatasetError) as exc:
            failures += 1
            log.warning("skipped %s: %s", rel, exc)
    _snapshot(out, args, reference=reference.to_dict())
    return 1 if failures else 0


def cmd_train(args) -> int:
    ds = _load(args)
    train = ds.split("train")
    if not train.cases:
        raise UsageError("dataset has no train split")
    cfg = _training_config(args, len(train.domains))
    out = _out_dir(args)
    hard = _read_hard_negatives(args.hard_negatives, train) if args.hard_negatives else None
    pool = TR.build_patch_pool(train, args.negatives_per_image, seed=args.seed, hard_negatives=hard)
    _snapshot(out, args, training=cfg.to_dict(), patches=len(pool))
    res = TR.run_training(cfg, pool)
    D.save_checkpoint(res.model, res.branch, out / "model.ckpt")
    TR.write_log(res.log, out / "log.csv")
    return 0


def cmd_mine(args) -> int:
    train = _load(args).split("train")
    out = _out_dir(args)
    model, _ = D.load_checkpoint(args.checkpoint)
    hard = TR.mine_hard_negatives(model, train, args.count, args.exclusion_radius, args.seed)
    with open(out / "hard_negatives.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "image", "row", "col", "score"])
        for h in hard:
            case = train.cases[h.case_index]
            w.writerow([case.case_id, case.images[h.image_index].image_id, h.row, h.col, repr(h.score)])
    _snapshot(out, args)
    return 0


def cmd_evaluate(args) -> int:
    if args.select_on and args.select_on != "validation":
        raise UsageError(f"operating point must come from the validation split, not {args.select_on!r}")
    if args.select_on is None and args.threshold is None:
        raise UsageError("give --threshold or --select-on validation")
    ds = _load(args)
    model, _ = D.load_checkpoint(args.checkpoint)
    threshold, extra = args.threshold, {}
    if args.select_on:
        op = E.select_operating_point(model, ds.split("validation"), args.radius, args.match)
        threshold = op.threshold
        extra = {"validation_f1": op.f1, "warning": op.warning}
    report = E.evaluate(model, ds.split(args.split), threshold, args.radius, args.match)
    body = E.report_json(report, threshold, args.radius, split=args.split, match=args.match, **extra)
    print(body)
    out = _out_dir(args)
    (out / "report.json").write_text(body)
    _snapshot(out, args)
    return 0


def cmd_infer(args) -> int:
    ds = _load(args)
    if args.split:
        ds = ds.split(args.split)
    model, _ = D.load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    for case in ds.cases:
        for rec in case.images:
            target = out / case.case_id / f"{rec.image_id}.pmap"
            target.parent.mkdir(parents=True, exist_ok=True)
            with open(target, "wb") as fh:
                E.write_pmap(E.dense_inference(model, rec.image), fh)
    _snapshot(out, args)
    return 0


def cmd_export_features(args) -> int:
    ds = _load(args)
    if args.split:
        ds = ds.split(args.split)
    model, _ = D.load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    table = E.export_features(model, *E.dataset_patches(ds, args.negatives_per_image, args.seed))
    with open(out / "features.csv", "w", newline="") as fh:
        table.write_csv(fh)
    _snapshot(out, args, rows=len(table))
    return 0


def cmd_experiment(args) -> int:
    from . import experiment as X

    out = _out_dir(args)
    cfg = X.desk_config(total_iterations=args.iterations, cycle_length=args.cycle_length,
                        alpha_max=args.alpha_max, lr_domain=args.lr_d)
    setup, results = X.run_experiment(seeds=args.seeds, config=cfg, data_seed=args.data_seed)
    summary = X.summarize(results)
    body = {"summary": summary, "orderings": X.orderings(summary),
            "runs": [{"method": r.method, "seed": r.seed, "threshold": r.threshold,
                      "in_domain": r.in_domain.to_dict(), "held_out": r.held_out.to_dict(),
                      "probe_accuracy": r.probe_accuracy, "seconds": r.seconds} for r in results]}
    (out / "experiment.json").write_text(json.dumps(body, indent=2))
    print(json.dumps(body["summary"], indent=2))
    _snapshot(out, args, training=cfg.to_dict())
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="astain", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, *, dataset=True, checkpoint=False):
        s = sub.add_parser(name)
        s.set_defaults(func=func)
        s.add_argument("--out", required=True, help="output directory (all files go here)")
        s.add_argument("--seed", type=int, default=0)
        if dataset:
            s.add_argument("--dataset", required=True, help="dataset root with manifest.json")
            s.add_argument("--sn", action="store_true", help="stain-normalize images first")
            s.add_argument("--reference", help="reference stain model JSON")
        if checkpoint:
            s.add_argument("--checkpoint", required=True)
        return s

    s = add("synth", cmd_synth, dataset=False)
    s.add_argument("--domains", type=int, default=8)
    s.add_argument("--heldout-domains", type=int, default=2)
    s.add_argument("--images-per-domain", type=int, default=8)

    s = sub.add_parser("normalize")
    s.set_defaults(func=cmd_normalize)
    s.add_argument("--dataset", required=True, help="input directory")
    s.add_argument("--out", required=True)
    s.add_argument("--reference", help="reference stain model JSON")

    s = add("train", cmd_train)
    s.add_argument("--iterations", type=int, default=40000)
    s.add_argument("--ca", action="store_true", help="color augmentation")
    s.add_argument("--dann", action="store_true", help="domain-adversarial training")
    s.add_argument("--alpha-max", type=float, default=1.0)
    s.add_argument("--cycle-length", type=int, default=2000)
    s.add_argument("--warmup-fraction", type=float, default=0.25)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--lr-d", type=float, default=0.0025)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--domain-batch-size", type=int, default=None)
    s.add_argument("--separate-domain-pass", action="store_true",
                   help="recompute domain gradients between the descent and ascent updates")
    s.add_argument("--negatives-per-image", type=int, default=24)
    s.add_argument("--hard-negatives", help="CSV written by `mine`")

    s = add("mine", cmd_mine, checkpoint=True)
    s.add_argument("--count", type=int, default=100)
    s.add_argument("--exclusion-radius", type=float, default=15.0)

    s = add("evaluate", cmd_evaluate, checkpoint=True)
    s.add_argument("--split", default="internal-test", choices=D.SPLITS)
    s.add_argument("--threshold", type=float)
    s.add_argument("--select-on", choices=D.SPLITS)
    s.add_argument("--radius", type=float, default=E.DEFAULT_RADIUS)
    s.add_argument("--match", choices=("optimal", "greedy"), default="optimal",
                   help="one-to-one pairing rule")

    s = add("infer", cmd_infer, checkpoint=True)
    s.add_argument("--split", choices=D.SPLITS)

    s = add("export-features", cmd_export_features, checkpoint=True)
    s.add_argument("--split", choices=D.SPLITS)
    s.add_argument("--negatives-per-image", type=int, default=8)

    s = add("experiment", cmd_experiment, dataset=False)
    s.add_argument("--iterations", type=int, default=1500)
    s.add_argument("--cycle-length", type=int, default=500)
    s.add_argument("--alpha-max", type=float, default=1.0)
    s.add_argument("--lr-d", type=float, default=0.0025)
    s.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    s.add_argument("--data-seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    level = os.environ.get("ASTAIN_LOG", "info").lower()
    logging.basicConfig(level={"error": logging.ERROR, "debug": logging.DEBUG}.get(level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (D.DatasetError, S.StainEstimationError, TR.TrainingDivergedError, CheckpointError,
            OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
