import numpy as np
import pytest

from ttae import augment as A
from ttae import model as M
from ttae import train as TR


def toy_wave(n, label, t=16, seed=0):
    """Separable families: slow vs fast tones with per-sample amplitude."""
    rng = np.random.default_rng(seed)
    cycles = 1 if label == 0 else 5
    amp = rng.uniform(0.5, 1.0, size=(n, 1))
    k = np.arange(t)
    x = amp * np.sin(2 * np.pi * cycles * k / t)
    return (x[:, :, None] / 2.0 + 0.5).astype(np.float32)


def toy_dataset(n_neg, n_pos, seed=0, split="train"):
    x = np.concatenate([toy_wave(n_neg, 0, seed=seed),
                        toy_wave(n_pos, 1, seed=seed + 1)])
    y = np.concatenate([np.zeros(n_neg, dtype=np.int64),
                        np.ones(n_pos, dtype=np.int64)])
    return A.LabeledDataset(x, y, split)


def trained_stub(seed=0):
    """A bundle with the trained flag set; good enough to exercise the
    augmentation bookkeeping without a real fit."""
    bundle = M.build_model(M.ModelConfig(time_steps=16, channels=1, latent_dim=4,
                                         num_heads=1, head_size=4, seed=seed))
    bundle.config.trained = True
    return bundle


# --- jitter ---------------------------------------------------------------------

def test_jitter_sigma_zero_is_identity():
    batch = toy_wave(5, 0, seed=1)
    assert np.array_equal(A.jitter(batch, sigma=0.0, seed=2), batch)


def test_jitter_noise_scale():
    batch = np.full((50, 20, 10), 0.5, dtype=np.float32)  # far from the clamp
    noisy = A.jitter(batch, sigma=0.03, seed=3)
    measured = (noisy - batch).std()
    assert abs(measured - 0.03) < 0.05 * 0.03


def test_jitter_stays_in_unit_range():
    batch = toy_wave(20, 1, seed=4)
    noisy = A.jitter(batch, sigma=0.5, seed=5)
    assert noisy.min() >= 0.0 and noisy.max() <= 1.0


def test_jitter_rejects_negative_sigma():
    with pytest.raises(ValueError):
        A.jitter(np.zeros((1, 2, 1)), sigma=-0.1)


# --- replicate -------------------------------------------------------------------

def test_replicate_cyclic_pattern():
    minority = np.arange(3, dtype=np.float32).reshape(3, 1, 1)
    out = A.replicate(minority, 7)
    assert out[:, 0, 0].tolist() == [0, 1, 2, 0, 1, 2, 0]


def test_replicate_identity_when_target_equals_count():
    minority = np.random.default_rng(6).random((4, 3, 1), dtype=np.float32)
    assert np.array_equal(A.replicate(minority, 4), minority)


def test_replicate_outputs_are_copies_of_inputs():
    minority = np.random.default_rng(7).random((3, 5, 2), dtype=np.float32)
    out = A.replicate(minority, 10)
    for sample in out:
        assert any(np.array_equal(sample, orig) for orig in minority)


def test_replicate_rejects_shrinking():
    with pytest.raises(ValueError):
        A.replicate(np.zeros((5, 2, 1)), 3)


# --- model augmentation -------------------------------------------------------------

def test_balance_minority_equalizes_counts_and_labels():
    train = toy_dataset(40, 12, seed=8)
    out = A.augment_with_model(train, trained_stub(1), "balance_minority", seed=9)
    counts = np.bincount(out.labels)
    assert counts[0] == counts[1] == 40
    assert np.array_equal(out.batch[:52], train.batch)  # originals preserved
    assert np.all(out.labels[52:] == 1)


def test_balance_minority_ecochg_scale_counts():
    # 874 positives of 9787 -> 8039 generated to balance
    labels = np.concatenate([np.zeros(9787 - 874, dtype=np.int64),
                             np.ones(874, dtype=np.int64)])
    batch = np.zeros((9787, 16, 1), dtype=np.float32)
    train = A.LabeledDataset(batch, labels)
    out = A.augment_with_model(train, trained_stub(2), "balance_minority", seed=10)
    assert out.batch.shape[0] == 9787 + 8039
    assert (out.labels == 1).sum() == (out.labels == 0).sum() == 8913


def test_model_augmentation_leaves_test_split_untouched():
    train = toy_dataset(30, 10, seed=11)
    test = toy_dataset(20, 20, seed=12, split="test")
    before = (test.batch.tobytes(), test.labels.tobytes())
    A.augment_with_model(train, trained_stub(3), "balance_minority", seed=13)
    assert (test.batch.tobytes(), test.labels.tobytes()) == before


def test_grow_percent_sizes():
    x = toy_wave(500, 0, seed=14)
    train = A.LabeledDataset(x, np.zeros(500, dtype=np.int64))
    out = A.augment_with_model(train, trained_stub(4), "grow_percent",
                               amount=100, seed=15)
    assert out.batch.shape[0] == 1000

    out = A.augment_with_model(train, trained_stub(4), "grow_percent",
                               amount=25, seed=15)
    assert out.batch.shape[0] == 625


def test_grow_percent_class_proportional_with_mapping():
    train = toy_dataset(80, 40, seed=16)
    bundles = {0: trained_stub(5), 1: trained_stub(6)}
    out = A.augment_with_model(train, bundles, "grow_percent", amount=50, seed=17)
    counts = np.bincount(out.labels)
    assert counts[0] == 120 and counts[1] == 60


def test_grow_percent_rejects_bad_amount():
    train = toy_dataset(10, 10, seed=18)
    with pytest.raises(ValueError, match="amount"):
        A.augment_with_model(train, {0: trained_stub(), 1: trained_stub()},
                             "grow_percent", amount=33)


def test_untrained_bundle_rejected():
    bundle = M.build_model(M.ModelConfig(time_steps=16, channels=1, latent_dim=4,
                                         num_heads=1, head_size=4))
    train = toy_dataset(10, 4, seed=19)
    with pytest.raises(ValueError, match="not trained"):
        A.augment_with_model(train, bundle, "balance_minority", seed=20)


# --- AUC -----------------------------------------------------------------------------

def _auc_roc_pair_halfcount(labels, scores):
    """Twice the concordant-pair count (so ties stay integral), plus pair count."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    twice_total = 0
    for p in pos:
        for n in neg:
            if p > n:
                twice_total += 2
            elif p == n:
                twice_total += 1
    return twice_total, len(pos) * len(neg)


def _auc_prc_loop_oracle(labels, scores):
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    thresholds = sorted(set(scores), reverse=True)
    recalls, precisions = [0.0], [1.0]
    n_pos = labels.sum()
    for th in thresholds:
        predicted = scores >= th
        tp = int((predicted & labels).sum())
        precisions.append(tp / int(predicted.sum()))
        recalls.append(tp / n_pos)
    return float(np.trapezoid(precisions, recalls))


def test_auc_roc_matches_pairwise_oracle_exactly():
    rng = np.random.default_rng(21)
    for trial in range(10):
        n = int(rng.integers(6, 21))
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        scores = rng.integers(0, 6, n) / 5.0  # coarse grid forces ties
        twice_total, pairs = _auc_roc_pair_halfcount(labels, scores)
        # exact as the underlying half-integer pair statistic
        assert round(A.auc_roc(labels, scores) * 2 * pairs) == twice_total


def test_auc_prc_matches_loop_oracle_exactly():
    rng = np.random.default_rng(22)
    for trial in range(10):
        n = int(rng.integers(6, 21))
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        scores = rng.integers(0, 6, n) / 5.0
        assert A.auc_prc(labels, scores) == _auc_prc_loop_oracle(labels, scores)


def test_auc_roc_random_scores_near_half():
    rng = np.random.default_rng(23)
    labels = np.repeat([0, 1], 500)
    scores = rng.random(1000)
    assert abs(A.auc_roc(labels, scores) - 0.5) < 0.05


def test_auc_requires_both_classes():
    with pytest.raises(ValueError):
        A.auc_roc(np.ones(5), np.random.default_rng(0).random(5))


# --- classifier ----------------------------------------------------------------------

def test_classify_separable_toy_task():
    train = toy_dataset(60, 60, seed=24)
    test = toy_dataset(30, 30, seed=25, split="test")
    metrics = A.classify_and_report(train, test, seed=26, steps=300)
    for value in (metrics.accuracy, metrics.recall, metrics.precision,
                  metrics.auc_roc, metrics.auc_prc):
        assert value >= 0.95


def test_classify_rejects_single_class_test():
    train = toy_dataset(10, 10, seed=27)
    test = A.LabeledDataset(toy_wave(10, 0, seed=28),
                            np.zeros(10, dtype=np.int64), "test")
    with pytest.raises(ValueError, match="single class"):
        A.classify_and_report(train, test, seed=29)


def test_metrics_json_row_layout():
    import json

    metrics = A.ClassifierMetrics(0.9, 0.8, 0.7, 0.95, 0.85)
    row = json.loads(A.metrics_json_row(metrics, "jitter", 3))
    assert row == {"accuracy": 0.9, "recall": 0.8, "precision": 0.7,
                   "auc_roc": 0.95, "auc_prc": 0.85,
                   "augmentation": "jitter", "seed": 3}


def test_model_augmentation_never_lowers_recall_majority_vote():
    wins = 0
    for seed in range(5):
        train = toy_dataset(120, 12, seed=30 + seed)
        test = toy_dataset(40, 40, seed=60 + seed, split="test")

        minority = train.batch[train.labels == 1]
        cfg = TR.TrainConfig(epochs=25, batch_size=12, seed=seed)
        bundle, _ = TR.fit(minority, cfg,
                           model_config=M.ModelConfig(time_steps=16, channels=1,
                                                      latent_dim=4, num_heads=1,
                                                      head_size=4, seed=seed))
        augmented = A.augment_with_model(train, bundle, "balance_minority",
                                         seed=seed)
        base = A.classify_and_report(train, test, seed=90 + seed, steps=250)
        boosted = A.classify_and_report(augmented, test, seed=90 + seed, steps=250)
        if boosted.recall >= base.recall:
            wins += 1
    assert wins >= 3
