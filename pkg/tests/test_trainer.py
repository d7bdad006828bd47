import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from astain import data as D
from astain import model as M
from astain import tensor as T
from astain import trainer as TR


@pytest.fixture(scope="module")
def dataset():
    cfg = D.SyntheticConfig(domains=4, heldout_domains=0, images_per_domain=2,
                            validation_images_per_domain=0, test_images_per_domain=0,
                            image_size=160, positives_per_image=2, distractors_per_image=8)
    return D.generate_synthetic_dataset(cfg, seed=3)


@pytest.fixture(scope="module")
def pool(dataset):
    return TR.build_patch_pool(dataset, negatives_per_image=6, seed=0)


def cfg(**kw):
    base = dict(batch_size=8, domain_batch_size=8, total_iterations=3, cycle_length=2)
    base.update(kw)
    return TR.TrainingConfig(**base)


# ---------------------------------------------------------------- config and schedules

def test_config_validation():
    with pytest.raises(ValueError):
        TR.TrainingConfig(alpha_max=1.5)
    with pytest.raises(ValueError):
        TR.TrainingConfig(warmup_fraction=1.0)
    with pytest.raises(ValueError):
        TR.TrainingConfig(batch_size=7)
    with pytest.raises(ValueError):
        cfg(domain_adversarial=True, domain_batch_size=6).check_domains(4)
    with pytest.raises(ValueError):
        cfg(domain_adversarial=True).check_domains(1)


def test_alpha_schedule_points():
    c = TR.TrainingConfig()
    assert TR.alpha_at(0, c) == 0.0
    assert TR.alpha_at(500, c) == 0.0
    assert TR.alpha_at(1250, c) == pytest.approx(0.5)
    assert TR.alpha_at(1999, c) == pytest.approx(1999 / 2000 * 4 / 3 - 1 / 3)
    assert TR.alpha_at(2000, c) == 0.0


@given(st.integers(0, 100_000), st.floats(0, 1), st.integers(1, 5000))
def test_alpha_periodic_and_bounded(t, amax, length):
    c = TR.TrainingConfig(alpha_max=amax, cycle_length=length)
    a = TR.alpha_at(t, c)
    assert 0.0 <= a <= amax
    assert a == TR.alpha_at(t + length, c)


def test_lr_in_report():
    s = TR.TrainingConfig().optimizer()
    s.iteration = 5000
    assert s.lr_at() == pytest.approx(0.009)


# ---------------------------------------------------------------- pools and batches

def test_pool_contents(dataset, pool):
    assert (pool.labels == 1).sum() == dataset.n_annotations()
    assert pool.contexts.shape[1:] == (D.CONTEXT, D.CONTEXT, 3)
    assert pool.n_domains == 4 and set(pool.domains) == {0, 1, 2, 3}
    neg = pool.sources[pool.labels == 0]
    for ci, ii, r, c in neg:
        ann = dataset.cases[ci].images[ii].annotations
        assert np.hypot(ann[:, 0] - r, ann[:, 1] - c).min() >= 15


def test_class_balanced_batch(pool):
    b = TR.sample_class_balanced_batch(pool, 16, np.random.default_rng(0), cfg())
    assert b.x.shape == (16, 3, 63, 63)
    assert b.labels.sum() == 8
    assert all(0.8 <= a.scale <= 1.2 for a in b.augment)


def test_mined_fraction_mixes_negatives(dataset):
    hard = [TR.HardNegative(0, 0, 60, 60, 0.5)] * 3
    p = TR.build_patch_pool(dataset, 6, 0, hard_negatives=hard)
    b = TR.sample_class_balanced_batch(p, 4000, np.random.default_rng(1), cfg(mined_fraction=0.5))
    kinds = p.kinds[b.indices[b.labels == 0]]
    assert abs(np.mean(kinds == TR.MINED_NEGATIVE) - 0.5) < 0.05


def test_domain_balanced_batch(pool):
    b = TR.sample_domain_balanced_batch(pool, 8, np.random.default_rng(0), cfg())
    assert np.bincount(b.domains, minlength=4).tolist() == [2, 2, 2, 2]
    with pytest.raises(ValueError):
        TR.sample_domain_balanced_batch(pool, 6, np.random.default_rng(0), cfg())


def test_color_augmentation_changes_batch(pool):
    a = TR.sample_class_balanced_batch(pool, 8, np.random.default_rng(4), cfg())
    b = TR.sample_class_balanced_batch(pool, 8, np.random.default_rng(4), cfg(color_augmentation=True))
    np.testing.assert_array_equal(a.indices, b.indices)
    assert not np.allclose(a.x, b.x)


# ---------------------------------------------------------------- update rules

def _loss_m(model, batch):
    tr = model.forward(batch.x, "train", update_running=False)
    return T.softmax_cross_entropy(tr.logits, batch.labels)[0]


def _loss_d(model, branch, batch):
    tr = model.forward(batch.x, "train", update_running=False)
    return T.softmax_cross_entropy(branch.forward(tr.tap2, tr.tap4, "train"), batch.domains)[0]


def _snapshot(net):
    return [p.value.copy() for p in net.parameters]


def test_baseline_step_descends(pool):
    model = M.MitosisClassifier(0)
    batch = TR.sample_class_balanced_batch(pool, 8, np.random.default_rng(0), cfg())
    before = _loss_m(model, batch)
    state = T.OptimizerState(1e-4, momentum=0.0, weight_decay=0.0)
    rep = TR.train_step_baseline(model, batch, state)
    assert rep.L_M == pytest.approx(before)
    assert _loss_m(model, batch) <= before + 1e-8


def test_domain_step_descends_and_adversarial_step_ascends(pool):
    rng = np.random.default_rng(1)
    model = M.MitosisClassifier(1)
    branch = M.DomainBranch(4, 2)
    batch = TR.sample_domain_balanced_batch(pool, 8, rng, cfg())
    before = TR.domain_gradients(model, branch, batch)
    theta_m = _snapshot(model)
    TR.apply_domain_updates(model, branch, 1e-4, 1.0, adversarial_step=False)
    assert all(np.array_equal(a, p.value) for a, p in zip(theta_m, model.parameters))
    assert _loss_d(model, branch, batch) <= before + 1e-8

    before = TR.domain_gradients(model, branch, batch)
    theta_d = _snapshot(branch)
    TR.apply_domain_updates(model, branch, 1e-4, 1.0, domain_step=False)
    assert all(np.array_equal(a, p.value) for a, p in zip(theta_d, branch.parameters))
    assert _loss_d(model, branch, batch) >= before - 1e-8


def test_zero_alpha_leaves_classifier_in_pass_two(pool):
    rng = np.random.default_rng(2)
    model = M.MitosisClassifier(3)
    branch = M.DomainBranch(4, 4)
    cb = TR.sample_class_balanced_batch(pool, 8, rng, cfg())
    db = TR.sample_domain_balanced_batch(pool, 8, rng, cfg())
    state = T.OptimizerState(0.01)
    TR.train_step_baseline(model, cb, state)
    after_pass1 = M.checkpoint_bytes(model)
    theta_d = _snapshot(branch)
    TR.domain_gradients(model, branch, db)
    TR.apply_domain_updates(model, branch, 0.0025, 0.0)
    assert M.checkpoint_bytes(model) == after_pass1
    assert not all(np.array_equal(a, p.value) for a, p in zip(theta_d, branch.parameters))


def _dann_step(pool, alpha, shared):
    rng = np.random.default_rng(6)
    model, branch = M.MitosisClassifier(8), M.DomainBranch(4, 8)
    cb = TR.sample_class_balanced_batch(pool, 8, rng, cfg())
    db = TR.sample_domain_balanced_batch(pool, 8, rng, cfg())
    TR.train_step_dann(model, branch, cb, db, T.OptimizerState(0.01), alpha, 0.01, shared)
    return M.checkpoint_bytes(model, branch)


def test_separate_domain_pass_recomputes_ascent_gradients(pool):
    assert _dann_step(pool, 1.0, True) != _dann_step(pool, 1.0, False)
    assert _dann_step(pool, 0.0, True) == _dann_step(pool, 0.0, False)
    rng = np.random.default_rng(6)
    model, branch = M.MitosisClassifier(8), M.DomainBranch(4, 8)
    cb = TR.sample_class_balanced_batch(pool, 8, rng, cfg())
    db = TR.sample_domain_balanced_batch(pool, 8, rng, cfg())
    TR.train_step_baseline(model, cb, T.OptimizerState(0.01))
    TR.domain_gradients(model, branch, db)
    TR.apply_domain_updates(model, branch, 0.01, 1.0, adversarial_step=False)
    TR.domain_gradients(model, branch, db)
    TR.apply_domain_updates(model, branch, 0.01, 1.0, domain_step=False)
    assert M.checkpoint_bytes(model, branch) == _dann_step(pool, 1.0, False)


def test_domain_pass_keeps_classifier_running_stats(pool):
    model = M.MitosisClassifier(5)
    branch = M.DomainBranch(4, 5)
    b = TR.sample_domain_balanced_batch(pool, 8, np.random.default_rng(3), cfg())
    model.forward(b.x)
    rs = model.running_stats["conv2.bn"].mean.copy()
    TR.domain_gradients(model, branch, b)
    np.testing.assert_array_equal(model.running_stats["conv2.bn"].mean, rs)


def test_baseline_step_never_touches_branch(pool):
    branch = M.DomainBranch(4, 1)
    before = _snapshot(branch)
    b = TR.sample_class_balanced_batch(pool, 8, np.random.default_rng(0), cfg())
    TR.train_step_baseline(M.MitosisClassifier(0), b, T.OptimizerState(0.01))
    assert all(np.array_equal(a, p.value) for a, p in zip(before, branch.parameters))


def test_non_finite_loss_aborts(pool):
    model = M.MitosisClassifier(0)
    model.head.fc2_w.value[...] = np.nan
    b = TR.sample_class_balanced_batch(pool, 8, np.random.default_rng(0), cfg())
    with pytest.raises(TR.TrainingDivergedError, match="iteration 0"):
        TR.train_step_baseline(model, b, T.OptimizerState(0.01))


# ---------------------------------------------------------------- loop

def test_zero_iterations_returns_initialization(pool):
    res = TR.run_training(cfg(total_iterations=0), pool)
    assert res.log == []
    assert M.checkpoint_bytes(res.model) == M.checkpoint_bytes(M.MitosisClassifier(0))


def test_training_is_bitwise_reproducible(pool):
    c = cfg(domain_adversarial=True, color_augmentation=True, total_iterations=4)
    a = TR.run_training(c, pool)
    b = TR.run_training(c, pool)
    assert len(a.log) == 4
    assert M.checkpoint_bytes(a.model, a.branch) == M.checkpoint_bytes(b.model, b.branch)
    assert [r.L_D for r in a.log] == [r.L_D for r in b.log]
    assert all(np.isfinite(r.L_D) for r in a.log)


def test_branch_reinitialized_each_cycle(pool, monkeypatch):
    calls = []
    orig = M.DomainBranch.reinit

    def spy(self, seed):
        calls.append(seed)
        orig(self, seed)

    monkeypatch.setattr(M.DomainBranch, "reinit", spy)
    TR.run_training(cfg(domain_adversarial=True, total_iterations=5, cycle_length=2), pool)
    # construction, then iterations 0, 2 and 4
    assert len(calls) == 4 and calls[0] == calls[1] == TR.branch_seed(0, 0)
    assert len(set(calls[1:])) == 3


def test_log_csv(tmp_path, pool):
    res = TR.run_training(cfg(total_iterations=2), pool)
    TR.write_log(res.log, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "iteration,L_M,L_D,alpha,lr" and len(lines) == 3


# ---------------------------------------------------------------- mining

def test_single_cell_sampled_with_certainty():
    w = np.zeros(10)
    w[7] = 0.3
    assert TR.sample_map_locations(w, 1, np.random.default_rng(0)).tolist() == [7]


def test_sampling_proportions():
    rng = np.random.default_rng(0)
    hits = np.bincount([TR.sample_map_locations([0.2, 0.3, 0.5], 1, rng)[0] for _ in range(10_000)],
                       minlength=3) / 10_000
    np.testing.assert_allclose(hits, [0.2, 0.3, 0.5], atol=0.02)


def test_zero_map_rejected():
    with pytest.raises(ValueError):
        TR.sample_map_locations(np.zeros(4), 1, np.random.default_rng(0))


def test_mined_locations_avoid_ground_truth(dataset, pool):
    model = TR.run_training(cfg(total_iterations=2), pool).model
    hard = TR.mine_hard_negatives(model, dataset, 20, exclusion_radius=15, seed=1)
    assert len(hard) == 20 and len({(h.case_index, h.image_index, h.row, h.col) for h in hard}) == 20
    for h in hard:
        ann = dataset.cases[h.case_index].images[h.image_index].annotations
        assert np.hypot(ann[:, 0] - h.row, ann[:, 1] - h.col).min() >= 15
