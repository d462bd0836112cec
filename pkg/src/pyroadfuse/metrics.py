# -*- coding: utf-8 -*-
"""
Evaluation metrics for drivable-area and road-anomaly segmentation: per-class
F-score and IoU, precision-recall curves with average precision, the
accuracy/runtime trade-off eta, and the coefficient of variation.
"""
import csv
import math
from collections import namedtuple
from dataclasses import dataclass
from dataclasses import field

import numpy as np
from sklearn.metrics import precision_recall_curve

EVAL_CLASSES = (1, 2)
CLASS_NAMES = {1: 'drivable', 2: 'anomaly'}
REPORT_COLUMNS = ('class', 'fsc', 'iou', 'ap', 'value')

AblationRow = namedtuple('AblationRow', ['setup', 'backbone', 'fusion', 'miou', 'runtime'])

# Published ablation results: mIoU in percent, runtime in milliseconds.
ABLATION_TABLE = (
    AblationRow('A', 'RTFNet50', 'addition', 89.3, 24.7),
    AblationRow('B', 'RTFNet50', 'concatenation', 88.6, 25.3),
    AblationRow('C', 'RTFNet50', 'dfm-first', 89.7, 25.9),
    AblationRow('D', 'RTFNet50', 'dfm-last', 90.2, 26.4),
    AblationRow('E', 'RTFNet50', 'dfm-all', 92.6, 28.1),
    AblationRow('F', 'RTFNet50', 'depth-aware operators', 90.8, 27.6),
    AblationRow('G', 'RTFNet101', 'addition', 91.3, 31.2),
)


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value for its input."""


@dataclass
class ConfusionCounts:
    """
    Per-class pixel counts over the labeled pixels of one or more images.

    ``tp[i]`` etc. refer to ``classes[i]``; for every class
    tp + fp + fn + tn equals the number of evaluated pixels.
    """
    classes: tuple
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    def __add__(self, other):
        if tuple(self.classes) != tuple(other.classes):
            raise ValueError('Cannot merge counts over classes %s and %s' % (self.classes, other.classes))
        return ConfusionCounts(self.classes, self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def n_pixels(self):
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])


@dataclass
class PrCurve:
    """
    Precision-recall curve of one class, ordered by decreasing threshold.
    """
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float


@dataclass
class EvalReport:
    """
    Per-class F-score, IoU and AP with their means.  ``cv`` and ``eta`` hold
    optional named extra values.
    """
    classes: tuple
    fsc: dict
    iou: dict
    ap: dict
    pr_curves: dict = field(default_factory=dict)
    cv: dict = field(default_factory=dict)
    eta: dict = field(default_factory=dict)

    @property
    def mfsc(self):
        return float(np.mean([self.fsc[c] for c in self.classes]))

    @property
    def miou(self):
        return float(np.mean([self.iou[c] for c in self.classes]))

    @property
    def map(self):
        return float(np.mean([self.ap[c] for c in self.classes]))


def _labels(img):
    return np.asarray(getattr(img, 'classes', img))


def confusion(pred, gt, classes=EVAL_CLASSES):
    """
    Per-class confusion counts of a prediction against ground truth.
    Unlabeled ground-truth pixels (class 0) are not evaluated.

    Parameters
    ----------
    pred, gt : LabelImage or array of int
        Predicted and ground-truth labels of the same size.
    classes : tuple of int, optional
        Classes to count.

    Returns
    -------
    counts : ConfusionCounts
    """
    pred = _labels(pred)
    gt = _labels(gt)
    if pred.shape != gt.shape:
        raise ValueError('Prediction %s and ground truth %s differ in size' % (pred.shape, gt.shape))
    evaluated = gt != 0
    if not np.any(evaluated):
        raise UndefinedMetricError('Ground truth has no labeled pixel')
    p = pred[evaluated]
    g = gt[evaluated]
    tp, fp, fn, tn = [], [], [], []
    for c in classes:
        tp.append(np.count_nonzero((p == c) & (g == c)))
        fp.append(np.count_nonzero((p == c) & (g != c)))
        fn.append(np.count_nonzero((p != c) & (g == c)))
        tn.append(np.count_nonzero((p != c) & (g != c)))
    return ConfusionCounts(tuple(classes), *[np.array(x, dtype=np.int64) for x in (tp, fp, fn, tn)])


def precision_recall(counts):
    """
    Per-class precision and recall; 0 where the denominator vanishes.
    """
    tp = counts.tp.astype(np.float64)
    with np.errstate(divide='ignore', invalid='ignore'):
        precision = np.where(tp + counts.fp > 0, tp / (tp + counts.fp), 0.)
        recall = np.where(tp + counts.fn > 0, tp / (tp + counts.fn), 0.)
    return precision, recall


def fsc_iou(counts):
    """
    Per-class F-score, 2PR / (P + R), and IoU, TP / (TP + FP + FN).

    A class without true positives has both metrics set to 0 and is flagged
    as undefined.

    Returns
    -------
    fsc, iou : numpy arrays
    undefined : numpy array of bool
    """
    tp = counts.tp.astype(np.float64)
    undefined = counts.tp == 0
    with np.errstate(divide='ignore', invalid='ignore'):
        fsc = np.where(undefined, 0., 2. * tp / (2. * tp + counts.fp + counts.fn))
        iou = np.where(undefined, 0., tp / (tp + counts.fp + counts.fn))
    return fsc, iou, undefined


def pr_curve(prob, gt, cls):
    """
    Pixel-pooled precision-recall curve of one class and its average
    precision.

    The sweep comes from ``sklearn.metrics.precision_recall_curve``: distinct
    scores are the thresholds (a pixel is predicted positive when its score is
    at least the threshold), in decreasing order.  AP is the area under the
    precision envelope, all points interpolated.

    Parameters
    ----------
    prob : array-like, shape (H, W)
        Score of class ``cls`` for every pixel, in [0, 1].
    gt : LabelImage or array of int
        Ground truth; unlabeled pixels are skipped.
    cls : int
        Class of interest.

    Returns
    -------
    curve : PrCurve
    """
    prob = np.asarray(prob, dtype=np.float64)
    gt = _labels(gt)
    if prob.shape != gt.shape:
        raise ValueError('Scores %s and ground truth %s differ in size' % (prob.shape, gt.shape))
    if np.any(prob < 0) or np.any(prob > 1) or not np.all(np.isfinite(prob)):
        raise ValueError('Scores must be probabilities in [0, 1]')
    evaluated = gt != 0
    scores = prob[evaluated]
    positive = gt[evaluated] == cls
    n_pos = np.count_nonzero(positive)
    if n_pos == 0:
        raise UndefinedMetricError('Class %d is absent from the ground truth; AP is undefined' % cls)

    precision, recall, thresholds = precision_recall_curve(positive.astype(np.int64), scores, pos_label=1)
    # ascending thresholds with a closing (recall 0, precision 1) point
    precision = precision[-2::-1]
    recall = recall[-2::-1]
    thresholds = thresholds[::-1]
    return PrCurve(thresholds, precision, recall, average_precision(precision, recall))


def average_precision(precision, recall):
    """
    All-points interpolated AP from a precision-recall sweep ordered by
    increasing recall.
    """
    mrec = np.concatenate(([0.], recall, [1.]))
    mpre = np.concatenate(([0.], precision, [0.]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def eta(miou_i, runtime_i, miou_base, runtime_base):
    """
    mIoU gain per millisecond of added runtime against a baseline, in %/ms.

    Raises
    ------
    UndefinedMetricError
        When both runtimes are equal (the baseline row itself).
    """
    denominator = runtime_i - runtime_base
    if denominator == 0:
        raise UndefinedMetricError('eta is undefined for equal runtimes')
    return (miou_i - miou_base) / denominator


def eta_table(rows=ABLATION_TABLE, baseline='A'):
    """
    eta of every row of an ablation table against its baseline row.

    Returns
    -------
    etas : list of (AblationRow, float or None)
        None for rows whose eta is undefined.
    """
    base = [row for row in rows if row.setup == baseline]
    if not base:
        raise ValueError('Baseline setup %r is not in the table' % baseline)
    base = base[0]
    out = []
    for row in rows:
        try:
            value = eta(row.miou, row.runtime, base.miou, base.runtime)
        except UndefinedMetricError:
            value = None
        out.append((row, value))
    return out


def coeff_variation(values):
    """
    Coefficient of variation sigma / mu with the population standard
    deviation.

    Raises
    ------
    UndefinedMetricError
        For an empty input or a zero mean.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise UndefinedMetricError('Coefficient of variation of an empty sample')
    mu = np.mean(values)
    if mu == 0:
        raise UndefinedMetricError('Coefficient of variation is undefined for a zero mean')
    return float(np.std(values) / mu)


def report(counts, pr_curves=None, cv=None, etas=None):
    """
    Assembles per-class and mean metrics.

    Parameters
    ----------
    counts : ConfusionCounts
        Pooled counts over the evaluated images.
    pr_curves : dict of int to PrCurve, optional
        Curves per class; AP is NaN for classes without one.
    cv, etas : dict of string to float, optional
        Extra named values carried into the report.

    Returns
    -------
    report : EvalReport
    """
    fsc, iou, _ = fsc_iou(counts)
    pr_curves = dict(pr_curves or {})
    classes = tuple(counts.classes)
    return EvalReport(classes=classes,
                      fsc={c: float(fsc[i]) for i, c in enumerate(classes)},
                      iou={c: float(iou[i]) for i, c in enumerate(classes)},
                      ap={c: pr_curves[c].ap if c in pr_curves else float('nan') for c in classes},
                      pr_curves=pr_curves, cv=dict(cv or {}), eta=dict(etas or {}))


def write_report_csv(rep, path):
    """
    Writes a report as CSV with columns class, fsc, iou, ap, value: one row
    per class, then the rows mFsc, mIoU and mAP, then ``cv:<name>`` and
    ``eta:<name>`` rows, the latter using only the value column.
    """
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for c in rep.classes:
            writer.writerow([c, repr(rep.fsc[c]), repr(rep.iou[c]), repr(rep.ap[c]), ''])
        writer.writerow(['mFsc', '', '', '', repr(rep.mfsc)])
        writer.writerow(['mIoU', '', '', '', repr(rep.miou)])
        writer.writerow(['mAP', '', '', '', repr(rep.map)])
        for name, value in sorted(rep.cv.items()):
            writer.writerow(['cv:%s' % name, '', '', '', repr(value)])
        for name, value in sorted(rep.eta.items()):
            writer.writerow(['eta:%s' % name, '', '', '', '' if value is None else repr(value)])


def read_report_csv(path):
    """
    Reads a report written by ``write_report_csv``.  PR curves are not part
    of the CSV and come back empty.
    """
    classes, fsc, iou, ap, cv, etas = [], {}, {}, {}, {}, {}
    with open(path, newline='') as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError('Report columns %s, expected %s' % (reader.fieldnames, REPORT_COLUMNS))
        for row in reader:
            name = row['class']
            if name.startswith('cv:'):
                cv[name[3:]] = float(row['value'])
            elif name.startswith('eta:'):
                etas[name[4:]] = float(row['value']) if row['value'] else None
            elif name not in ('mFsc', 'mIoU', 'mAP'):
                c = int(name)
                classes.append(c)
                fsc[c], iou[c], ap[c] = float(row['fsc']), float(row['iou']), float(row['ap'])
    return EvalReport(tuple(classes), fsc, iou, ap, cv=cv, eta=etas)


def write_pr_csv(curve, path):
    """Writes a PR curve as CSV with columns threshold, precision, recall."""
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(('threshold', 'precision', 'recall'))
        for row in zip(curve.thresholds, curve.precision, curve.recall):
            writer.writerow([repr(float(x)) for x in row])


def format_eta(value):
    """eta to two decimals, or '--' when undefined."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return '--'
    return '%.2f' % value
