import numpy as np
import pytest

from tabkit.dataset import GroupWeights
from tabkit.metrics import (EvalRecord, GridResult, GridRow, MetricsError, mms, pou,
                            pou_unfiltered, rebalance_stats, wga)
from tabkit.tab import AugmentationManifest, ManifestEntry


def five_candidates():
    # (val_acc, val_wga, test_wga) chosen so the filter and the tie rule both matter
    spec = [(0.95, 0.30, 0.40), (0.97, 0.20, 0.35), (0.99, 0.00, 0.80),
            (0.97, 0.50, 0.70), (0.90, 0.60, 0.60)]
    return GridResult([GridRow("erm", i, f"wd={i}", 3, va, vw, tw, 0.9)
                       for i, (va, vw, tw) in enumerate(spec)])


def test_pou_hand_computed():
    g = five_candidates()
    # candidate 2 is dropped (val WGA 0); candidate 1 beats 3 on the tie by order
    assert pou(g) == 0.70 / 0.35
    assert pou_unfiltered(g) == 1.0
    assert mms(g) == (0.40 + 0.35 + 0.80 + 0.70 + 0.60) / 5


def test_pou_single_candidate_is_one():
    g = GridResult([GridRow("tab", 0, "", 3, 0.9, 0.4, 0.63, 0.9)])
    assert pou(g) == 1.0 and mms(g) == 0.63


def test_pou_edge_cases():
    zero = GridResult([GridRow("m", 0, "", 1, 0.9, 0.0, 0.5, 0.9)])
    with pytest.raises(MetricsError):
        pou(zero)
    g = GridResult([GridRow("m", 0, "", 1, 0.9, 0.1, 0.0, 0.9),
                    GridRow("m", 1, "", 1, 0.8, 0.1, 0.5, 0.9)])
    assert pou(g) == float("inf")
    g0 = GridResult([GridRow("m", 0, "", 1, 0.9, 0.1, 0.0, 0.9)])
    assert pou(g0) == 1.0
    with pytest.raises(MetricsError):
        GridResult([])


def test_grid_csv_roundtrip():
    rng = np.random.default_rng(0)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        rows = [GridRow(str(rng.choice(["erm", "jtt"])), i, f"a={rng.random()};b=x", 3,
                        *rng.random(4).tolist()) for i in range(int(rng.integers(1, 6)))]
        g = GridResult(rows)
        text = g.to_csv()
        back = GridResult.from_csv(text)
        assert back.rows == rows
        assert back.to_csv() == text


def test_eval_record_metrics():
    rec = EvalRecord(np.array([0, 1, 1, 1, 0, 0]), np.array([0, 1, 0, 1, 1, 0]),
                     np.array([0, 3, 1, 3, 2, 0]), 4)
    assert rec.group_acc().tolist() == [1.0, 0.0, 0.0, 1.0]
    assert rec.mean_acc == pytest.approx(4 / 6)
    assert rec.wga == 0.0 == wga(rec)
    # weights only on groups 0 and 3 give perfect weighted accuracy
    assert rec.weighted_mean_acc(GroupWeights(np.array([1.5, 0, 0, 1.5]))) == 1.0


def test_eval_record_skips_empty_groups():
    rec = EvalRecord(np.array([0, 1]), np.array([0, 1]), np.array([0, 3]), 4)
    assert np.isnan(rec.group_acc()[1]) and rec.wga == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_eval_record_csv_roundtrip(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 50))
    rec = EvalRecord(rng.integers(0, 3, n), rng.integers(0, 3, n), rng.integers(0, 6, n), 6)
    back = EvalRecord.from_csv(rec.to_csv(), 6)
    assert np.array_equal(back.predictions, rec.predictions)
    assert np.array_equal(back.labels, rec.labels)
    assert np.array_equal(back.groups, rec.groups)
    assert back.to_csv() == rec.to_csv()


def test_rebalance_hand_case():
    # ten samples, one bias-conflicting (group 1); four extra copies of it
    groups = np.array([0] * 9 + [1])
    manifest = AugmentationManifest([ManifestEntry(9, 4, 0)], [])
    s = rebalance_stats(manifest, groups, [1])
    assert s.bc_fraction_before == 0.1
    assert s.bc_fraction_after == pytest.approx(5 / 14)
    assert s.identified_fraction == 1.0
    assert s.gain == pytest.approx(50 / 14)


def test_rebalance_identified_uses_minority():
    groups = np.array([0, 0, 1, 1])
    manifest = AugmentationManifest([ManifestEntry(0, 2, 0)], [])
    s = rebalance_stats(manifest, groups, [1], minority_indices=[0, 2])
    assert s.identified_fraction == 0.5 and s.bc_fraction_after == pytest.approx(2 / 6)
    with pytest.raises(MetricsError):
        rebalance_stats(manifest, groups, [7], num_groups=2)


def test_wga_examples():
    rec = EvalRecord(np.array([1, 0, 1]), np.array([1, 0, 1]), np.array([0, 1, 2]), 3)
    assert rec.wga == 1.0
    # group accuracies 0.9, 0.4, 0.7 (ten samples each)
    correct = np.concatenate([np.arange(10) < 9, np.arange(10) < 4, np.arange(10) < 7])
    labels = np.zeros(30, np.int64)
    rec = EvalRecord(np.where(correct, 0, 1), labels, np.repeat([0, 1, 2], 10), 3)
    assert rec.group_acc() == pytest.approx([0.9, 0.4, 0.7]) and rec.wga == pytest.approx(0.4)


def test_wga_hand_tally():
    rng = np.random.default_rng(30)
    preds, labels, groups = rng.integers(0, 2, 30), rng.integers(0, 2, 30), rng.integers(0, 4, 30)
    tally = {}
    for p, l, g in zip(preds, labels, groups):
        hit, tot = tally.get(g, (0, 0))
        tally[g] = (hit + (p == l), tot + 1)
    assert wga(EvalRecord(preds, labels, groups, 4)) == min(h / t for h, t in tally.values())


def test_weighted_mean_examples():
    rec = EvalRecord(np.array([0] * 5 + [1] * 5), np.zeros(10, np.int64),
                     np.array([0] * 5 + [1] * 5), 2)
    assert rec.weighted_mean_acc(GroupWeights(np.ones(2))) == rec.mean_acc == 0.5
    assert rec.weighted_mean_acc(GroupWeights(np.array([1.8, 0.2]))) == pytest.approx(0.9)


def test_two_candidate_pou_and_mms():
    g = GridResult([GridRow("erm", 0, "", 1, 0.95, 0.2, 0.30, 0.9),
                    GridRow("erm", 1, "", 1, 0.90, 0.2, 0.60, 0.9)])
    assert pou(g) == pytest.approx(2.0)
    assert mms(GridResult([GridRow("m", i, "", 1, 0.9, 0.1, w, 0.9)
                           for i, w in enumerate([0.4, 0.6])])) == pytest.approx(0.5)


def test_rebalance_empty_manifest():
    s = rebalance_stats(AugmentationManifest([], []), np.array([0, 1, 0, 0]), [1])
    assert s.bc_fraction_before == s.bc_fraction_after == 0.25
