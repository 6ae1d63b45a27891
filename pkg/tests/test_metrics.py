import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays

from dcdg.errors import DataError, ShapeError, UndefinedMetric
from dcdg.metrics import MetricsReport, binarize, case_metrics, dice, extract_surface, iou, msd


def brute_surface(m):
    h, w = m.shape
    out = set()
    for y in range(h):
        for x in range(w):
            if not m[y, x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w) or not m[yy, xx]:
                    out.add((y, x))
                    break
    return out


def brute_msd(p, g):
    sp, sg = sorted(brute_surface(p)), sorted(brute_surface(g))

    def mean_nn(a, b):
        return sum(min(math.hypot(y - v, x - u) for v, u in b) for y, x in a) / len(a)

    return 0.5 * (mean_nn(sp, sg) + mean_nn(sg, sp))


def masks_from_pixels(shape, pixels):
    m = np.zeros(shape, dtype=np.uint8)
    for y, x in pixels:
        m[y, x] = 1
    return m


class TestBinarize:
    def test_boundary_is_foreground(self):
        assert binarize(np.full((2, 2), 0.5)).tolist() == [[1, 1], [1, 1]]

    def test_below(self):
        assert binarize(np.array([0.49])).tolist() == [0]

    def test_idempotent(self):
        m = (np.random.default_rng(0).random((8, 8)) > 0.5).astype(np.uint8)
        assert np.array_equal(binarize(m), m)
        assert np.array_equal(binarize(binarize(m)), binarize(m))


class TestRegionMetrics:
    def test_identity(self):
        m = np.zeros((6, 6), np.uint8)
        m[1:4, 2:5] = 1
        assert dice(m, m) == 1.0
        assert iou(m, m) == 1.0

    def test_dice_half(self):
        p = masks_from_pixels((4, 4), [(0, 0), (0, 1), (0, 2), (0, 3)])
        g = masks_from_pixels((4, 4), [(0, 0), (0, 1), (1, 0), (1, 1)])
        assert dice(p, g) == 0.5

    def test_iou_third(self):
        assert iou(masks_from_pixels((4, 4), [(0, 0), (0, 1), (0, 2), (0, 3)]),
                   masks_from_pixels((4, 4), [(0, 0), (0, 1), (1, 0), (1, 1)])) == pytest.approx(1 / 3)

    def test_empty_prediction(self):
        g = masks_from_pixels((4, 4), [(1, 1)])
        assert dice(np.zeros_like(g), g) == 0.0

    def test_disjoint(self):
        assert iou(masks_from_pixels((4, 4), [(0, 0)]), masks_from_pixels((4, 4), [(3, 3)])) == 0.0

    def test_both_empty(self):
        z = np.zeros((4, 4))
        assert dice(z, z) == 1.0 and iou(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice(np.zeros((4, 4)), np.zeros((4, 5)))
        with pytest.raises(ShapeError):
            iou(np.zeros((4, 4)), np.zeros((5, 4)))


class TestSurface:
    def test_square(self):
        m = np.zeros((5, 5), np.uint8)
        m[1:4, 1:4] = 1
        s = extract_surface(m)
        assert len(s) == 8
        assert (2, 2) not in {tuple(p) for p in s}
        assert {tuple(p) for p in s} == brute_surface(m)

    def test_single_pixel(self):
        m = masks_from_pixels((3, 3), [(1, 2)])
        assert [tuple(p) for p in extract_surface(m)] == [(1, 2)]

    def test_empty(self):
        assert len(extract_surface(np.zeros((4, 4)))) == 0

    def test_border_counts_as_background(self):
        assert len(extract_surface(np.ones((3, 3)))) == 8


class TestMSD:
    def test_identity(self):
        m = masks_from_pixels((6, 6), [(1, 1), (1, 2), (2, 1), (2, 2)])
        assert msd(m, m) == 0.0

    def test_single_pixels_three_apart(self):
        assert msd(masks_from_pixels((5, 8), [(2, 1)]), masks_from_pixels((5, 8), [(2, 4)])) == 3.0

    def test_hand_example(self):
        p = masks_from_pixels((3, 3), [(0, 0)])
        g = masks_from_pixels((3, 3), [(0, 2), (2, 0)])
        assert brute_msd(p, g) == 2.0
        assert msd(p, g) == 2.0

    def test_spacing(self):
        p = masks_from_pixels((5, 8), [(2, 1)])
        g = masks_from_pixels((5, 8), [(2, 4)])
        assert msd(p, g, spacing=(1.0, 0.5)) == pytest.approx(1.5)

    def test_empty_surface_is_error(self):
        with pytest.raises(UndefinedMetric):
            msd(np.zeros((4, 4)), masks_from_pixels((4, 4), [(1, 1)]))

    def test_case_metrics_records_missing_msd(self):
        c = case_metrics("a", np.zeros((4, 4)), masks_from_pixels((4, 4), [(1, 1)]))
        assert c.msd is None and c.dice == 0.0

    def test_brute_force_equivalence_random(self):
        rng = np.random.default_rng(1234)
        checked = 0
        while checked < 200:
            p = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
            g = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
            if not p.any() or not g.any():
                continue
            assert abs(msd(p, g) - brute_msd(p, g)) <= 1e-9
            assert abs(dice(p, g) - 2 * iou(p, g) / (1 + iou(p, g))) <= 1e-12
            checked += 1


mask16 = arrays(np.bool_, (16, 16))


@settings(max_examples=100, deadline=None)
@given(mask16, mask16)
def test_symmetry_and_algebraic_link(p, g):
    assert dice(p, g) == dice(g, p)
    assert iou(p, g) == iou(g, p)
    assert abs(dice(p, g) - 2 * iou(p, g) / (1 + iou(p, g))) <= 1e-12
    assert iou(p, g) <= dice(p, g)
    if p.any() and g.any():
        assert msd(p, g) == pytest.approx(msd(g, p), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(mask16)
def test_identity_property(m):
    if m.any():
        assert dice(m, m) == iou(m, m) == 1.0
        assert msd(m, m) == 0.0


class TestReport:
    def _report(self):
        return MetricsReport([case_metrics("a", np.eye(4), np.eye(4)),
                              case_metrics("b", np.eye(4), np.fliplr(np.eye(4)))])

    def test_sample_std(self):
        r = self._report()
        s = r.summary()
        d = [1.0, 0.0]
        assert s["dice"]["mean"] == pytest.approx(0.5)
        assert s["dice"]["std"] == pytest.approx(np.std(d, ddof=1))
        assert s["n_cases"] == 2

    def test_single_case_std_zero(self):
        s = MetricsReport([case_metrics("a", np.eye(4), np.eye(4))]).summary()
        assert s["dice"] == {"mean": 1.0, "std": 0.0, "n": 1}
        assert s["msd"]["mean"] == 0.0

    def test_csv_round_trip(self, tmp_path):
        r = self._report()
        r.write_csv(tmp_path / "cases.csv")
        back = MetricsReport.read_csv(tmp_path / "cases.csv")
        assert back.summary() == r.summary()

    def test_missing_msd_excluded(self):
        r = MetricsReport([case_metrics("a", np.zeros((4, 4)), np.eye(4)), case_metrics("b", np.eye(4), np.eye(4))])
        s = r.summary()
        assert s["msd"]["n"] == 1 and s["dice"]["n"] == 2


def test_evaluate_predictions_empty():
    from dcdg.data import Dataset
    from dcdg.metrics import evaluate_predictions

    with pytest.raises(DataError):
        evaluate_predictions(Dataset([]), [])
