import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clpad.metrics import (
    MemoryReport,
    ResultMatrix,
    aupro,
    auroc,
    average_forgetting,
    average_over_tasks,
    average_so_far,
    evaluate_task,
    f1_max,
    format_seconds,
    memory_report,
    pixel_metrics,
    pr_auc,
    relative_gap,
    timing_report,
)
from clpad.replay import ReplayBuffer
from clpad.taskstream import Sample

from oracles import ap_enumerate, aupro_bruteforce, f1_enumerate, roc_trapezoid


def _instance(rng, n=50, ties=False):
    scores = rng.integers(0, 6, n).astype(float) if ties else rng.normal(size=n)
    labels = rng.random(n) < 0.4
    labels[0], labels[1] = True, False
    return scores, labels


# -- image / pixel scalar metrics -------------------------------------------


def test_auroc_trivial_cases():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 1])


@pytest.mark.parametrize("ties", [False, True])
def test_auroc_matches_threshold_sweep(ties):
    rng = np.random.default_rng(0)
    for _ in range(100):
        s, y = _instance(rng, ties=ties)
        assert abs(auroc(s, y) - roc_trapezoid(s, y)) < 1e-12


def test_f1_max_trivial_cases():
    assert f1_max([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == (1.0, 0.8)
    f1, thr = f1_max([0.3, 0.1, 0.7], [1, 1, 1])
    assert f1 == 1.0 and thr <= 0.1


def test_f1_max_lowest_threshold_on_ties():
    # thresholds 0.9 and 0.5 both give F1 = 2/3; the lower one is returned
    f1, thr = f1_max([0.9, 0.5, 0.4], [1, 0, 1])
    assert f1 == pytest.approx(0.8) and thr == 0.4
    f1, thr = f1_max([3.0, 2.0, 1.0, 0.0], [1, 0, 0, 1])
    assert (f1, thr) == f1_enumerate([3.0, 2.0, 1.0, 0.0], [1, 0, 0, 1])


def test_pr_auc_trivial_cases():
    assert pr_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert pr_auc([0.9, 0.1, 0.2, 0.3], [1, 0, 0, 0]) == 1.0


def test_pr_auc_random_scores_track_prevalence():
    rng = np.random.default_rng(1)
    prevalence = 0.3
    vals = []
    for _ in range(300):
        y = rng.random(400) < prevalence
        y[0] = True
        vals.append(pr_auc(rng.random(400), y))
    assert abs(np.mean(vals) - prevalence) < 0.02


@pytest.mark.parametrize("ties", [False, True])
def test_f1_and_pr_auc_match_enumeration(ties):
    rng = np.random.default_rng(2)
    for _ in range(100):
        s, y = _instance(rng, ties=ties)
        f1, thr = f1_max(s, y)
        ref_f1, ref_thr = f1_enumerate(s, y)
        assert abs(f1 - ref_f1) < 1e-12 and thr == ref_thr
        assert abs(pr_auc(s, y) - ap_enumerate(s, y)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=4, max_size=40), st.integers(0, 2**31 - 1))
def test_auroc_invariant_under_monotone_transform(scores, seed):
    rng = np.random.default_rng(seed)
    y = rng.random(len(scores)) < 0.5
    y[0], y[1] = True, False
    s = np.asarray(scores, float)
    assert auroc(s, y) == pytest.approx(auroc(3 * s - 7, y), abs=1e-12)
    assert auroc(s, y) == pytest.approx(auroc(np.exp(s / 10), y), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=40), st.integers(0, 2**31 - 1), st.floats(0, 1))
def test_f1_max_dominates_fixed_threshold(scores, seed, thr):
    rng = np.random.default_rng(seed)
    y = rng.random(len(scores)) < 0.5
    y[0] = True
    s = np.asarray(scores)
    pred = s >= thr
    tp, fp, fn = (pred & y).sum(), (pred & ~y).sum(), (~pred & y).sum()
    assert f1_max(s, y)[0] >= 2 * tp / (2 * tp + fp + fn) - 1e-12


# -- AUPRO -------------------------------------------------------------------


def test_aupro_perfect_map():
    mask = np.zeros((8, 8), int)
    mask[2:4, 2:5] = 1
    mask[6, 6:8] = 1
    assert aupro(mask.astype(float), mask) == 1.0


def test_aupro_constant_map_equals_oracle():
    mask = np.zeros((8, 8), int)
    mask[1:4, 1:4] = 1
    value = aupro(np.ones((8, 8)), mask)
    assert value == pytest.approx(aupro_bruteforce(np.ones((8, 8)), mask), abs=1e-12)
    # the single threshold jumps straight to (fpr, pro) = (1, 1): area 0.045 over 0.3
    assert value == pytest.approx(0.15, abs=1e-12)


def test_aupro_two_regions_one_detected():
    mask = np.zeros((8, 8), int)
    mask[0:2, 0:2] = 1  # region A: scored above every normal pixel
    mask[5:8, 5:8] = 1  # region B: scored below every normal pixel
    amap = np.ones((8, 8))
    amap[0:2, 0:2] = 2.0
    amap[5:8, 5:8] = 0.0
    assert aupro(amap, mask) == pytest.approx(0.5, abs=1e-12)
    assert aupro(amap, mask) == pytest.approx(aupro_bruteforce(amap, mask), abs=1e-12)


def test_aupro_regions_are_eight_connected():
    mask = np.zeros((8, 8), int)
    mask[2, 2] = mask[3, 3] = 1  # diagonal neighbours: one region
    amap = np.zeros((8, 8))
    amap[2, 2] = 1.0
    # eight-connected: one region half covered -> PRO 0.5 at FPR 0
    assert aupro(amap, mask, fpr_limit=1e-9) == pytest.approx(0.5)


def test_aupro_matches_bruteforce_on_random_8x8():
    rng = np.random.default_rng(3)
    for _ in range(60):
        n = int(rng.integers(1, 4))
        masks = (rng.random((n, 8, 8)) < 0.15).astype(int)
        masks[0, 0, 0] = 1
        masks[0, 7, 7] = 0
        maps = rng.integers(0, 5, (n, 8, 8)).astype(float) + masks * rng.integers(0, 3, (n, 8, 8))
        for limit in (0.3, 1.0):
            assert aupro(maps, masks, limit) == pytest.approx(aupro_bruteforce(maps, masks, limit), abs=1e-12)


def test_aupro_single_region_full_limit_is_roc_area():
    rng = np.random.default_rng(4)
    mask = np.zeros((8, 8), int)
    mask[2:5, 3:6] = 1
    for _ in range(20):
        amap = rng.normal(size=(8, 8)) + mask
        assert aupro(amap, mask, 1.0) == pytest.approx(auroc(amap, mask), abs=1e-12)


def test_aupro_errors():
    with pytest.raises(ValueError):
        aupro(np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        aupro(np.zeros((4, 4)), np.ones((4, 4)))


def test_pixel_metrics_pooling_modes():
    rng = np.random.default_rng(5)
    masks = np.zeros((3, 8, 8), int)
    masks[:, 2:4, 2:4] = 1
    maps = rng.normal(size=(3, 8, 8)) + 2 * masks
    task = pixel_metrics(maps, masks, "task")
    image = pixel_metrics(maps, masks, "image")
    assert task["pixel_auroc"] == auroc(maps.ravel(), masks.ravel())
    per_image = np.mean([auroc(m, k) for m, k in zip(maps, masks)])
    assert image["pixel_auroc"] == pytest.approx(per_image)
    with pytest.raises(ValueError):
        pixel_metrics(maps, masks, "bogus")


def test_evaluate_task_selects_metrics():
    masks = np.zeros((2, 8, 8), int)
    masks[0, 1:3, 1:3] = 1
    out = evaluate_task(masks.astype(float), np.array([1.0, 0.0]), masks, np.array([1, 0]),
                        ["image_auroc", "aupro"])
    assert out == {"image_auroc": 1.0, "aupro": 1.0}


# -- continual-learning metrics ---------------------------------------------


def test_average_over_tasks():
    assert average_over_tasks(ResultMatrix(1, "m", [[0.7]])) == 0.7
    assert average_over_tasks(np.full((3, 3), 0.4)) == pytest.approx(0.4)
    R = np.array([[0.9, np.nan, np.nan], [0.8, 0.7, np.nan], [0.6, 0.5, 0.4]])
    assert average_over_tasks(R) == pytest.approx(0.5)
    np.testing.assert_allclose(average_so_far(R), [0.9, 0.75, 0.5])


def test_average_forgetting_examples():
    R = np.array([[0.8, np.nan], [0.6, 0.9]])
    assert average_forgetting(R) == pytest.approx(25.0)
    R = np.array([[0.5, np.nan], [0.6, 0.9]])
    assert average_forgetting(R) == pytest.approx(-20.0)
    R = np.array([[0.5, np.nan, np.nan], [0.5, 0.7, np.nan], [0.5, 0.7, 0.2]])
    assert average_forgetting(R) == 0.0
    assert np.isnan(average_forgetting([[0.4]]))
    with pytest.raises(ValueError):
        average_forgetting([[0.0, np.nan], [0.1, 0.2]])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6))
def test_constant_columns_never_forget(column_values):
    T = len(column_values)
    R = np.tile(np.asarray(column_values), (T, 1))
    R[np.triu_indices(T, 1)] = np.nan
    assert average_forgetting(R) == 0.0


def test_relative_gap():
    assert relative_gap(0.5, 0.5) == 0.0
    assert relative_gap(0.54, 0.60) == pytest.approx(10.0)
    assert relative_gap(0.7, 0.6) < 0
    with pytest.raises(ValueError):
        relative_gap(0.5, 0.0)


def test_result_matrix_roundtrip(tmp_path):
    R = ResultMatrix(3, "pixel_f1", metadata={"method": "stfpm"})
    R[0, 0], R[1, 0], R[1, 1] = 0.5, 0.25, 1 / 3
    assert not R.is_complete()
    R[2, :] = [0.1, 0.2, 0.3]
    assert R.is_complete()
    assert ResultMatrix.from_csv(R.to_csv(), "pixel_f1") == R
    back = ResultMatrix.from_json(R.to_json())
    assert back == R and back.metadata == {"method": "stfpm"}
    R.save(tmp_path)
    assert (tmp_path / "R_pixel_f1.csv").read_text().splitlines()[0] == "after_task,task_0,task_1,task_2"


# -- memory and time ------------------------------------------------------------


class _Bank:
    def __init__(self, n_params, n_floats):
        self._p, self._f = n_params, n_floats

    def n_parameters(self):
        return self._p

    def additional_floats(self):
        return self._f


def test_memory_replay_anchor():
    buf = ReplayBuffer(300, 0)
    img = np.zeros((256, 256, 3), np.uint8)
    buf.update_after_task([Sample(img) for _ in range(300)], 0)
    rep = memory_report(None, buf)
    assert rep.additional_mb == pytest.approx(58.98, abs=0.01)
    assert round(rep.additional_mb, 1) == 59.0


def test_memory_bank_anchor():
    rep = memory_report(_Bank(0, 30000 * 1536), None)
    assert rep.additional_mb == pytest.approx(184.32)
    assert round(rep.additional_mb, 1) == 184.3


def test_memory_report_architecture_and_empty():
    rep = memory_report(_Bank(1_000_000, 0), None)
    assert rep.architecture_mb == 4.0 and rep.additional_mb == 0.0
    assert rep.total_mb == 4.0
    assert memory_report().as_dict() == {"architecture_mb": 0.0, "additional_mb": 0.0, "total_mb": 0.0}
    with pytest.raises(ValueError):
        MemoryReport(-1.0, 0.0)


def test_timing_report():
    assert timing_report([])["total"] == 0.0
    events = [
        {"task": 0, "phase": "train", "seconds": 2.0},
        {"task": 0, "phase": "eval", "seconds": 9.0},
        {"task": 1, "phase": "train", "seconds": 1.5},
        {"task": 1, "phase": "train", "seconds": 0.5},
        {"task": 2, "phase": "train", "seconds": 3.0},
    ]
    rep = timing_report(events)
    assert rep["per_task"] == [2.0, 2.0, 3.0]
    assert rep["total"] == sum(rep["per_task"])
    # replaying the log event by event never decreases the running total
    totals = [timing_report(events[: k + 1])["total"] for k in range(len(events))]
    assert all(b >= a for a, b in zip(totals, totals[1:]))
    assert rep["cumulative"] == [2.0, 4.0, 7.0]


def test_format_seconds():
    assert format_seconds(42) == "42s"
    assert format_seconds(8 * 60) == "8min 0s"
    assert format_seconds(11 * 3600 + 46 * 60) == "11h 46min"
