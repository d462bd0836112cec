import math

import numpy as np
import pytest

from pyroadfuse import metrics


def _brute_force_ap(scores, positive):
    """Enumerates every threshold and integrates the precision envelope."""
    points = []
    for t in sorted(set(scores), reverse=True):
        predicted = [s >= t for s in scores]
        tp = sum(1 for p, y in zip(predicted, positive) if p and y)
        fp = sum(1 for p, y in zip(predicted, positive) if p and not y)
        points.append((tp / float(sum(positive)), tp / float(tp + fp)))
    ap, previous = 0., 0.
    for i, (recall, _) in enumerate(points):
        ap += (recall - previous) * max(p for _, p in points[i:])
        previous = recall
    return ap


@pytest.fixture(scope='module')
def random_case():
    rng = np.random.default_rng(42)
    gt = rng.integers(1, 3, size=(10, 10))
    prob = np.round(rng.random((10, 10)), 2)
    return prob, gt


class TestConfusion():
    def test_perfect(self):
        gt = np.array([[1, 2], [0, 1]])
        counts = metrics.confusion(gt, gt)
        assert(np.all(counts.fp == 0) and np.all(counts.fn == 0))
        assert(counts.n_pixels == 3)
        fsc, iou, undefined = metrics.fsc_iou(counts)
        assert(np.allclose(fsc, 1.) and np.allclose(iou, 1.))
        assert(not np.any(undefined))

    def test_half(self):
        gt = np.array([[1, 1], [2, 2]])
        pred = np.ones((2, 2), dtype=int)
        counts = metrics.confusion(pred, gt)
        precision, recall = metrics.precision_recall(counts)
        assert(precision[0] == 0.5 and recall[0] == 1.)
        fsc, iou, undefined = metrics.fsc_iou(counts)
        assert(abs(fsc[0] - 2. / 3.) < 1e-12 and abs(iou[0] - 0.5) < 1e-12)
        assert(fsc[1] == 0 and iou[1] == 0 and undefined[1])

    def test_totals(self, random_case):
        _, gt = random_case
        pred = np.random.default_rng(0).integers(0, 3, size=gt.shape)
        counts = metrics.confusion(pred, gt)
        assert(np.all(counts.tp + counts.fp + counts.fn + counts.tn == gt.size))
        fsc, iou, undefined = metrics.fsc_iou(counts)
        defined = ~undefined
        assert(np.all(fsc[defined] >= iou[defined]))
        assert(np.allclose(fsc[defined], 2. * iou[defined] / (1. + iou[defined])))

    def test_merge(self):
        gt = np.array([[1, 2]])
        merged = metrics.confusion(gt, gt) + metrics.confusion(np.array([[2, 2]]), gt)
        assert(list(merged.tp) == [1, 2] and list(merged.fn) == [1, 0])
        with pytest.raises(ValueError):
            merged + metrics.confusion(gt, gt, classes=(1,))

    def test_errors(self):
        with pytest.raises(ValueError):
            metrics.confusion(np.ones((2, 2)), np.ones((2, 3)))
        with pytest.raises(metrics.UndefinedMetricError):
            metrics.confusion(np.ones((2, 2)), np.zeros((2, 2)))


class TestPrCurve():
    def test_one_hot(self):
        gt = np.array([[1, 2, 2], [1, 1, 2]])
        curve = metrics.pr_curve((gt == 2).astype(float), gt, 2)
        assert(curve.ap == 1.)

    def test_adversarial(self):
        gt = np.array([[1, 2], [2, 1]])
        curve = metrics.pr_curve((gt != 2).astype(float), gt, 2)
        assert(abs(curve.ap - 0.5) < 1e-12)
        assert(abs(curve.ap - _brute_force_ap([1., 0., 0., 1.], [False, True, True, False])) < 1e-12)

    @pytest.mark.parametrize('cls', [1, 2])
    def test_brute_force(self, random_case, cls):
        prob, gt = random_case
        curve = metrics.pr_curve(prob, gt, cls)
        expected = _brute_force_ap(list(prob.ravel()), list(gt.ravel() == cls))
        assert(abs(curve.ap - expected) < 1e-12)
        assert(np.all(np.diff(curve.recall) >= 0))
        assert(np.all(np.diff(curve.thresholds) < 0))
        assert(0 <= curve.ap <= 1)

    def test_points_match_enumeration(self, random_case):
        prob, gt = random_case
        curve = metrics.pr_curve(prob, gt, 2)
        positive = gt == 2
        for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
            predicted = prob >= t
            tp = np.count_nonzero(predicted & positive)
            assert(abs(p - tp / float(np.count_nonzero(predicted))) < 1e-12)
            assert(abs(r - tp / float(np.count_nonzero(positive))) < 1e-12)
        assert(curve.recall[-1] == 1.)
        assert(curve.thresholds[0] == prob.max())

    def test_monotone_rescaling(self, random_case):
        prob, gt = random_case
        assert(abs(metrics.pr_curve(prob, gt, 2).ap - metrics.pr_curve(prob ** 3, gt, 2).ap) < 1e-12)

    def test_unlabeled_skipped(self):
        gt = np.array([[0, 2, 1]])
        curve = metrics.pr_curve(np.array([[1., 0.9, 0.1]]), gt, 2)
        assert(curve.ap == 1.)

    def test_errors(self):
        gt = np.array([[1, 1]])
        with pytest.raises(metrics.UndefinedMetricError):
            metrics.pr_curve(np.array([[0.2, 0.3]]), gt, 2)
        with pytest.raises(ValueError):
            metrics.pr_curve(np.array([[0.2, 1.3]]), gt, 1)
        with pytest.raises(ValueError):
            metrics.pr_curve(np.array([0.2, 0.3]), gt, 1)


class TestEta():
    @pytest.mark.parametrize('miou,runtime,expected', [(92.6, 28.1, '0.97'), (91.3, 31.2, '0.31'),
                                                       (88.6, 25.3, '-1.17')])
    def test_published_rows(self, miou, runtime, expected):
        assert(metrics.format_eta(metrics.eta(miou, runtime, 89.3, 24.7)) == expected)

    def test_antisymmetry(self):
        assert(math.isclose(metrics.eta(92.6, 28.1, 89.3, 24.7), -metrics.eta(89.3, 24.7, 92.6, 28.1)))

    def test_baseline_undefined(self):
        with pytest.raises(metrics.UndefinedMetricError):
            metrics.eta(89.3, 24.7, 89.3, 24.7)

    def test_table(self):
        values = [(row.setup, metrics.format_eta(value)) for row, value in metrics.eta_table()]
        assert(values == [('A', '--'), ('B', '-1.17'), ('C', '0.33'), ('D', '0.53'), ('E', '0.97'),
                          ('F', '0.52'), ('G', '0.31')])
        with pytest.raises(ValueError):
            metrics.eta_table(baseline='Z')


class TestCoeffVariation():
    def test_values(self):
        assert(metrics.coeff_variation([4., 4., 4.]) == 0.)
        assert(metrics.coeff_variation([1., 3.]) == 0.5)

    def test_uniform_below_bimodal(self):
        uniform = np.linspace(9., 11., 101)
        bimodal = np.r_[np.full(50, 5.), np.full(51, 14.9)]
        bimodal = bimodal - bimodal.mean() + 10.
        assert(metrics.coeff_variation(uniform) < metrics.coeff_variation(bimodal))

    def test_scale_not_shift(self):
        x = np.random.default_rng(1).random(50) + 1.
        assert(math.isclose(metrics.coeff_variation(3. * x), metrics.coeff_variation(x)))
        assert(not math.isclose(metrics.coeff_variation(x + 5.), metrics.coeff_variation(x)))

    def test_errors(self):
        with pytest.raises(metrics.UndefinedMetricError):
            metrics.coeff_variation([])
        with pytest.raises(metrics.UndefinedMetricError):
            metrics.coeff_variation([-1., 1.])


class TestReport():
    def test_means(self):
        gt = np.array([[1, 1, 2, 2]])
        pred = np.array([[1, 1, 2, 1]])
        rep = metrics.report(metrics.confusion(pred, gt))
        assert(rep.iou == {1: 2. / 3., 2: 0.5})
        assert(abs(rep.miou - (2. / 3. + 0.5) / 2.) < 1e-12)
        assert(math.isnan(rep.map))

    def test_csv_round_trip(self, tmp_path, random_case):
        prob, gt = random_case
        pred = np.where(prob > 0.5, 2, 1)
        curves = {c: metrics.pr_curve(prob if c == 2 else 1. - prob, gt, c) for c in (1, 2)}
        rep = metrics.report(metrics.confusion(pred, gt), curves, cv={'tdisp': 0.01}, etas={'E': 0.97, 'A': None})
        path = str(tmp_path / 'report.csv')
        metrics.write_report_csv(rep, path)
        back = metrics.read_report_csv(path)
        assert(back.classes == rep.classes)
        assert(back.fsc == rep.fsc and back.iou == rep.iou and back.ap == rep.ap)
        assert(back.miou == rep.miou and back.map == rep.map)
        assert(back.cv == {'tdisp': 0.01} and back.eta == {'E': 0.97, 'A': None})
        with open(path) as fh:
            first = [line.split(',')[0] for line in fh.read().splitlines()]
        assert(first[:6] == ['class', '1', '2', 'mFsc', 'mIoU', 'mAP'])

    def test_bad_columns(self, tmp_path):
        path = tmp_path / 'report.csv'
        path.write_text('name,value\nmIoU,0.5\n')
        with pytest.raises(ValueError):
            metrics.read_report_csv(str(path))

    def test_pr_csv(self, tmp_path, random_case):
        prob, gt = random_case
        curve = metrics.pr_curve(prob, gt, 2)
        path = tmp_path / 'pr.csv'
        metrics.write_pr_csv(curve, str(path))
        rows = path.read_text().splitlines()
        assert(rows[0] == 'threshold,precision,recall')
        assert(len(rows) == len(curve.thresholds) + 1)
