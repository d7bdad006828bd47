"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line."""
import itertools
import json
import time

import numpy as np
import pytest

from astain import data as D
from astain import evaluation as E
from astain import experiment as X
from astain import model as M
from astain import stain as S
from astain import tensor as T
from astain import trainer as TR


def verdict(n, ok, detail):
    print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def small_pool():
    cfg = D.SyntheticConfig(domains=4, heldout_domains=0, images_per_domain=2,
                            validation_images_per_domain=0, test_images_per_domain=0,
                            image_size=160, positives_per_image=2, distractors_per_image=8)
    return TR.build_patch_pool(D.generate_synthetic_dataset(cfg, 11), 6, seed=1)


# ---------------------------------------------------------------- 1

def _layer_checks():
    r = np.random.default_rng(0)
    out = {}

    x = r.normal(size=(2, 3, 8, 8))
    k = r.normal(size=(4, 3, 4, 4))
    b = r.normal(size=4)
    w = r.normal(size=(2, 4, 5, 5))
    _, c = T.conv2d(x, k, b)
    dx, dk, db = T.conv2d_backward(w, c)
    out["conv"] = T.gradient_check(lambda: float(np.sum(T.conv2d(x, k, b)[0] * w)),
                                   {"x": x, "k": k, "b": b}, {"x": dx, "k": dk, "b": db})

    x2 = r.normal(size=(4, 3, 4, 4))
    g, be = r.normal(size=3), r.normal(size=3)
    w2 = r.normal(size=x2.shape)
    rs = T.RunningStats(3, r.normal(size=3), r.uniform(0.5, 2, 3))
    for mode in ("train", "infer"):
        _, c = T.batchnorm(x2, g, be, mode, rs, False)
        d = T.batchnorm_backward(w2, c)
        out[f"bn-{mode}"] = T.gradient_check(
            lambda: float(np.sum(T.batchnorm(x2, g, be, mode, rs, False)[0] * w2)),
            {"x": x2, "g": g, "b": be}, dict(zip(("x", "g", "b"), d)))

    x3 = r.normal(size=(2, 3, 6, 6))
    w3 = r.normal(size=(2, 3, 3, 3))
    a, mask = T.relu(x3)
    y, pc = T.maxpool2x2(a)
    dx3 = T.relu_backward(T.maxpool2x2_backward(w3, pc), mask)
    out["relu+pool"] = T.gradient_check(
        lambda: float(np.sum(T.maxpool2x2(T.relu(x3)[0])[0] * w3)), {"x": x3}, {"x": dx3})

    x4 = r.normal(size=(5, 6))
    w4, b4 = r.normal(size=(3, 6)), r.normal(size=3)
    lab = np.array([0, 2, 1, 1, 0])
    z, c = T.fully_connected(x4, w4, b4)
    _, p = T.softmax_cross_entropy(z, lab)
    d = T.fully_connected_backward(T.softmax_cross_entropy_backward(p, lab), c)
    out["fc+softmax-ce"] = T.gradient_check(
        lambda: T.softmax_cross_entropy(T.fully_connected(x4, w4, b4)[0], lab)[0],
        {"x": x4, "w": w4, "b": b4}, dict(zip(("x", "w", "b"), d)))
    return out


def _network_check():
    net = M.MitosisClassifier(3)
    br = M.DomainBranch(4, 4)
    r = np.random.default_rng(1)
    x = r.normal(0, 0.3, size=(4, 3, 63, 63))
    y = np.array([0, 1, 1, 0])
    d = np.array([0, 1, 2, 3])

    def loss():
        tr = net.forward(x, "train", update_running=False, input_grad=True)
        lm = T.softmax_cross_entropy(tr.logits, y)[0]
        ld = T.softmax_cross_entropy(br.forward(tr.tap2, tr.tap4, "train"), d)[0]
        return lm + 0.5 * ld

    net.zero_grad()
    br.zero_grad()
    tr = net.forward(x, "train", update_running=False, input_grad=True)
    _, p = T.softmax_cross_entropy(tr.logits, y)
    _, q = T.softmax_cross_entropy(br.forward(tr.tap2, tr.tap4, "train"), d)
    d2, d4 = br.backward(0.5 * T.softmax_cross_entropy_backward(q, d))
    dx = net.backward(T.softmax_cross_entropy_backward(p, y), d2, d4)
    arrays = {p.name: p.value for n in (net, br) for p in n.parameters}
    analytic = {p.name: p.grad.copy() for n in (net, br) for p in n.parameters}
    arrays["input"], analytic["input"] = x, dx
    return T.gradient_check(loss, arrays, analytic, max_probes=6)


def test_1_gradient_integrity():
    t0 = time.perf_counter()
    reps = _layer_checks()
    reps["network"] = _network_check()
    worst = max(r.max_relative_error for r in reps.values())
    probes = sum(r.probes for r in reps.values())
    excluded = sum(r.excluded for r in reps.values())
    secs = time.perf_counter() - t0
    ok = worst < 1e-4 and secs < 60 and excluded < probes
    verdict(1, ok, f"max relative error {worst:.2e} over {probes} probes "
                   f"({excluded} kink probes excluded) in {secs:.1f}s")


# ---------------------------------------------------------------- 2

def test_2_dense_patch_equivalence():
    t0 = time.perf_counter()
    r = np.random.default_rng(2)
    net = M.MitosisClassifier(5)
    net.forward(r.normal(0, 0.3, (16, 3, 63, 63)))
    worst = 0.0
    for k in range(3):
        img = r.integers(0, 256, (r.integers(150, 260), r.integers(150, 260), 3)).astype(np.uint8)
        pm = E.dense_inference(net, img)
        cells = [(r.integers(pm.values.shape[0]), r.integers(pm.values.shape[1]))
                 for _ in range(7 if k < 2 else 6)]
        for i, j in cells:
            patch = img[16 * i:16 * i + 63, 16 * j:16 * j + 63][None]
            p = net.forward(D.to_network_input(patch), "infer").class_probabilities[0, 1]
            worst = max(worst, abs(pm.values[i, j] - p))
    secs = time.perf_counter() - t0
    verdict(2, worst < 1e-8 and secs < 60, f"20 cells, max |map - patch| {worst:.2e} in {secs:.1f}s")


# ---------------------------------------------------------------- 3

def _angle(u, v):
    return np.degrees(np.arccos(np.clip(u @ v / np.linalg.norm(u) / np.linalg.norm(v), -1, 1)))


def test_3_stain_oracle():
    t0 = time.perf_counter()
    r = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        h = np.abs(np.array(S.REFERENCE_HEMATOXYLIN) + r.normal(0, 0.08, 3))
        e = np.abs(np.array(S.REFERENCE_EOSIN) + r.normal(0, 0.08, 3))
        truth = S.StainModel(np.column_stack([h, e])).A
        img = S.compose_image(r.uniform(0, 2, (64, 64, 2)), truth)
        est = S.estimate_stain_matrix(img).A
        worst = max(worst, _angle(est[:, 0], truth[:, 0]), _angle(est[:, 1], truth[:, 1]))
    drift = 0
    for _ in range(5):
        img = S.compose_image(r.uniform(0, 2, (64, 64, 2)), truth)
        once = S.normalize_image(img)
        drift = max(drift, int(np.abs(S.normalize_image(once).astype(int) - once.astype(int)).max()))
    secs = time.perf_counter() - t0
    verdict(3, worst < 2.0 and drift <= 3 and secs < 60,
            f"worst column error {worst:.2f} deg over 100 images, re-normalization drift "
            f"{drift} levels, {secs:.1f}s")


# ---------------------------------------------------------------- 4

def _lm(model, b):
    return T.softmax_cross_entropy(model.forward(b.x, "train", update_running=False).logits, b.labels)[0]


def _ld(model, branch, b):
    tr = model.forward(b.x, "train", update_running=False)
    return T.softmax_cross_entropy(branch.forward(tr.tap2, tr.tap4, "train"), b.domains)[0]


def test_4_update_rule_semantics(small_pool):
    rng = np.random.default_rng(4)
    cfg = TR.TrainingConfig(batch_size=8, domain_batch_size=8)
    model = M.MitosisClassifier(6)
    branch = M.DomainBranch(small_pool.n_domains, 7)
    worst = {"eq1": -np.inf, "eq2": -np.inf, "eq3": -np.inf}
    alpha_zero_ok = True
    for _ in range(50):
        cb = TR.sample_class_balanced_batch(small_pool, 8, rng, cfg)
        db = TR.sample_domain_balanced_batch(small_pool, 8, rng, cfg)
        state = T.OptimizerState(1e-4, momentum=0.0, weight_decay=0.0)
        before = _lm(model, cb)
        TR.train_step_baseline(model, cb, state)
        worst["eq1"] = max(worst["eq1"], _lm(model, cb) - before)

        before = TR.domain_gradients(model, branch, db)
        TR.apply_domain_updates(model, branch, 1e-4, 1.0, adversarial_step=False)
        worst["eq2"] = max(worst["eq2"], _ld(model, branch, db) - before)

        before = TR.domain_gradients(model, branch, db)
        TR.apply_domain_updates(model, branch, 1e-4, 1.0, domain_step=False)
        worst["eq3"] = max(worst["eq3"], before - _ld(model, branch, db))

        snap = M.checkpoint_bytes(model)
        TR.domain_gradients(model, branch, db)
        TR.apply_domain_updates(model, branch, 1e-4, 0.0)
        alpha_zero_ok &= M.checkpoint_bytes(model) == snap
    ok = max(worst.values()) <= 1e-8 and alpha_zero_ok
    verdict(4, ok, f"50 batches; max L_M rise {worst['eq1']:.2e}, max L_D rise after Eq2 "
                   f"{worst['eq2']:.2e}, max L_D drop after Eq3 {worst['eq3']:.2e}; "
                   f"alpha=0 bitwise {alpha_zero_ok}")


# ---------------------------------------------------------------- 5

def _exhaustive_f1(maxima, gts, t, radius):
    tp = fp = fn = 0
    for dets, gt in zip(maxima, gts):
        kept = [d for d in dets if d.score >= t]
        m = E.brute_force_matches(kept, gt, radius)
        tp, fp, fn = tp + m, fp + len(kept) - m, fn + len(gt) - m
    return E.F1Report.from_counts(tp, fp, fn).f1


def test_5_evaluation_protocol_oracle():
    r = np.random.default_rng(5)
    radius = 30.0
    sweep_ok = True
    for _ in range(10):
        maxima, gts = [], []
        for _ in range(3):
            gt = r.uniform(0, 200, (r.integers(1, 6), 2))
            dets = [E.Detection(*(g + r.normal(0, 15, 2)), r.uniform(0.2, 1)) for g in gt
                    if r.random() < 0.8]
            dets += [E.Detection(*r.uniform(0, 200, 2), r.uniform(0, 1))
                     for _ in range(r.integers(0, 6 - len(dets) + 1))]
            maxima.append(dets[:6])
            gts.append(gt)
        op = E.best_threshold(maxima, gts, radius)
        candidates = sorted({d.score for m in maxima for d in m} | set(np.linspace(0, 1, 21)))
        best = max(_exhaustive_f1(maxima, gts, t, radius) for t in candidates)
        sweep_ok &= abs(op.f1 - best) < 1e-12
    match_ok, instances = True, 0
    for n, m in itertools.product(range(7), range(7)):
        for _ in range(8):
            det = [E.Detection(*r.uniform(0, 80, 2), r.uniform()) for _ in range(n)]
            gt = r.uniform(0, 80, (m, 2))
            rad = r.uniform(5, 40)
            match_ok &= E.match_detections(det, gt, rad).true_positives == \
                E.brute_force_matches(det, gt, rad)
            instances += 1
    verdict(5, sweep_ok and match_ok, f"sweep optimal on 10/10 sets: {sweep_ok}; matching equals "
                                      f"enumeration on {instances} instances: {match_ok}")


# ---------------------------------------------------------------- 6

def _random_detector_f1(ds, seed=0):
    """Uniform random maps, with the threshold chosen on validation like any model."""
    r = np.random.default_rng(seed)

    def maps(split):
        return [E.ProbabilityMap(r.random(E.map_extent(*rec.image.shape[:2]))) for rec in split.images]

    val, held = ds.split("validation"), ds.split("external-test")
    vm = maps(val)
    op = E.best_threshold([E.local_maxima(m, 0.0) for m in vm], [x.annotations for x in val.images])
    return E.evaluate_maps(maps(held), [x.annotations for x in held.images], op.threshold).f1


@pytest.mark.slow
def test_6_desk_scale_generalization():
    cfg = X.desk_config()
    setup = X.prepare()
    t0 = time.perf_counter()
    _, results = X.run_experiment(seeds=(1, 2, 3), config=cfg, setup=setup)
    summary = X.summarize(results)
    order = X.orderings(summary)
    for r in results:
        print(f"  run {r.method:8s} seed {r.seed}: threshold {r.threshold:.4f}  in-domain "
              f"{r.in_domain.f1:.3f}  held-out {r.held_out.f1:.3f}  probe {r.probe_accuracy:.3f}")
    for m, s in summary.items():
        print(f"  {m:8s} in-domain F1 {s['in_domain_f1']:.3f}  held-out F1 {s['held_out_f1']:.3f}"
              f" (sd {s['held_out_f1_std']:.3f})  probe {s['probe_accuracy']:.3f}"
              f"  slowest run {s['max_seconds']:.0f}s")
    floor = _random_detector_f1(setup.dataset)
    above_floor = all(s["held_out_f1"] > floor for s in summary.values())
    print(f"  random-detector held-out F1 {floor:.3f}, every method above it: {above_floor}")
    budget = cfg.total_iterations <= 5000 and max(r.seconds for r in results) <= 900
    print(f"  training patches {len(setup.pool)}, iterations {cfg.total_iterations}, "
          f"orderings {order}, total {time.perf_counter() - t0:.0f}s")
    assert above_floor
    verdict(6, all(order.values()) and budget,
            "orderings " + ", ".join(f"({k}) {'ok' if v else 'violated'}" for k, v in order.items())
            + f"; budget {'ok' if budget else 'exceeded'}")


# ---------------------------------------------------------------- 7

def test_7_reproducibility(tmp_path):
    ds = D.generate_synthetic_dataset(D.SyntheticConfig(domains=2, heldout_domains=1,
                                                        images_per_domain=2), 9)
    pool = TR.build_patch_pool(ds.split("train"), 8, seed=2)
    cfg = TR.TrainingConfig(batch_size=8, domain_batch_size=8, total_iterations=12,
                            cycle_length=4, color_augmentation=True, domain_adversarial=True, seed=3)
    blobs, reports = [], []
    for k in range(2):
        res = TR.run_training(cfg, pool)
        path = tmp_path / f"run{k}.ckpt"
        D.save_checkpoint(res.model, res.branch, path)
        blobs.append(path.read_bytes())
        op = E.select_operating_point(res.model, ds.split("validation"))
        rep = E.evaluate(res.model, ds.split("external-test"), op.threshold)
        reports.append(E.report_json(rep, op.threshold, E.DEFAULT_RADIUS))
    ok = blobs[0] == blobs[1] and reports[0] == reports[1]
    verdict(7, ok, f"checkpoints identical: {blobs[0] == blobs[1]}, "
                   f"reports identical: {reports[0] == reports[1]}")


# ---------------------------------------------------------------- 8

def test_8_hard_negative_sampling_distribution():
    rng = np.random.default_rng(8)
    draws = [TR.sample_map_locations(np.array([0.2, 0.3, 0.5]), 1, rng)[0] for _ in range(10_000)]
    freq = np.bincount(draws, minlength=3) / 10_000
    dev = np.abs(freq - [0.2, 0.3, 0.5]).max()
    verdict(8, dev <= 0.02, f"frequencies {np.round(freq, 4).tolist()}, max deviation {dev:.4f}")
