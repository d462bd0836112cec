# -*- coding: utf-8 -*-
"""
A toy two-branch encoder-decoder for drivable-area and road-anomaly
segmentation, used to compare fusion strategies at desk scale.

The RGB branch and the feature branch each run two stages of 3 x 3 stride-2
convolution + ReLU.  After every stage the two features are fused
(element-wise addition, concatenation + 1 x 1 convolution, or dynamic
fusion) and the fused feature feeds the next RGB stage; the feature branch
continues on its own.  The decoder upsamples twice (nearest neighbour + 3 x 3
convolution + ReLU) and a 1 x 1 convolution produces the class logits.  Skip
connections concatenate the stage-1 fused feature onto the first upsampled
map and the two raw inputs onto the second, so boundaries are resolved at
full resolution.
"""
import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields

import numpy as np

from . import dfm
from . import disparity_transform as dt
from . import features
from . import io
from . import metrics
from . import synth
from . import tensorcore as tc

logger = logging.getLogger(__name__)

FUSION_VARIANTS = ('addition', 'concatenation', 'dfm-first', 'dfm-last', 'dfm-all')
MODALITY_CHANNELS = {'rgb': 3, 'disparity': 1, 'normal': 3, 'elevation': 1, 'hha': 3, 'tdisp': 1}
MODALITIES = tuple(MODALITY_CHANNELS)
N_CLASSES = 3


class ConfigError(ValueError):
    """Raised for an invalid network configuration."""


class DivergenceError(ValueError):
    """Raised when the training loss stops being finite."""

    def __init__(self, iteration, loss):
        super(DivergenceError, self).__init__('Training diverged at iteration %d (loss=%r)' % (iteration, loss))
        self.iteration = iteration


@dataclass
class NetConfig:
    """
    Network and training configuration.

    Parameters
    ----------
    height, width : int, optional
        Input size; both must be divisible by 4.
    channels : list of int, optional
        Channels of the two encoder stages.
    fusion : string, optional
        One of ``FUSION_VARIANTS``.
    modality : string, optional
        Input of the feature branch, one of ``MODALITIES``.
    classes : int, optional
        Number of output classes (3: unlabeled, drivable area, road anomaly).
    lr, momentum : float, optional
        SGD learning rate and momentum.
    iterations : int, optional
        Number of SGD steps, one scene per step.
    seed : int, optional
        Seed of the parameter initialization.
    k : int, optional
        Dynamic kernel size of the fusion modules.
    class_weighting : boolean, optional
        Inverse-frequency class weights in the loss.
    val_every : int, optional
        Validation period, in iterations.
    """
    height: int = 64
    width: int = 96
    channels: list = field(default_factory=lambda: [8, 16])
    fusion: str = 'dfm-all'
    modality: str = 'tdisp'
    classes: int = N_CLASSES
    lr: float = 0.05
    momentum: float = 0.9
    iterations: int = 300
    seed: int = 0
    k: int = 3
    class_weighting: bool = True
    val_every: int = 25

    def __post_init__(self):
        self.channels = list(self.channels)
        if self.fusion not in FUSION_VARIANTS:
            raise ConfigError('Unknown fusion %r, expected one of %s' % (self.fusion, FUSION_VARIANTS))
        if self.modality not in MODALITIES:
            raise ConfigError('Unknown modality %r, expected one of %s' % (self.modality, MODALITIES))
        if self.classes != N_CLASSES:
            raise ConfigError('The network predicts %d classes, got classes=%r' % (N_CLASSES, self.classes))
        if self.height <= 0 or self.width <= 0 or self.height % 4 or self.width % 4:
            raise ConfigError('Input size %dx%d must be positive and divisible by 4' % (self.height, self.width))
        if len(self.channels) != 2 or min(self.channels) <= 0:
            raise ConfigError('Expected two positive stage widths, got %s' % self.channels)
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError('Need lr >= 0 and 0 <= momentum < 1, got %r, %r' % (self.lr, self.momentum))
        if self.iterations < 0 or self.val_every <= 0:
            raise ConfigError('iterations must be >= 0 and val_every > 0')
        if self.k < 1 or self.k % 2 == 0:
            raise ConfigError('Dynamic kernel size must be odd, got %r' % self.k)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        known = set(f.name for f in fields(cls))
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError('Unknown configuration keys: %s' % ', '.join(unknown))
        try:
            return cls(**doc)
        except TypeError as err:
            raise ConfigError(str(err))

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except ValueError as err:
            raise ConfigError('Configuration is not valid JSON: %s' % err)
        if not isinstance(doc, dict):
            raise ConfigError('Configuration must be a JSON object')
        return cls.from_dict(doc)


def _he_normal(rng, shape, fan_in):
    return rng.normal(0., math.sqrt(2. / fan_in), size=shape)


class FusionNet(object):
    """
    Two-branch fusion network.

    Parameters
    ----------
    config : NetConfig
        Architecture; ``config.seed`` drives the initialization.  Parameters
        shared by every fusion variant are drawn from their own generator, so
        two variants built with the same seed start from the same encoder and
        decoder weights.  Dynamic fusions start at the identity
        initialization.
    """

    def __init__(self, config):
        self.config = config
        self.params = {}
        self.dfm_params = {}
        shared = np.random.default_rng([config.seed, 0])
        extra = np.random.default_rng([config.seed, 1])
        c0, c1 = config.channels
        c_feat = MODALITY_CHANNELS[config.modality]
        self._conv(shared, 'enc_rgb1', 3, 3, c0)
        self._conv(shared, 'enc_rgb2', 3, c0, c1)
        self._conv(shared, 'enc_feat1', 3, c_feat, c0)
        self._conv(shared, 'enc_feat2', 3, c0, c1)
        self._conv(shared, 'dec1', 3, c1 + c0, c0)
        self._conv(shared, 'dec2', 3, c0 + 3 + c_feat, c0)
        self._conv(shared, 'head', 1, c0, config.classes)
        for stage, width in ((1, c0), (2, c1)):
            if self.stage_fusion(stage) == 'concatenation':
                self._conv(extra, 'fuse%d' % stage, 1, 2 * width, width)
            elif self.stage_fusion(stage) == 'dfm':
                p = dfm.identity_params(width, k=config.k)
                self.dfm_params[stage] = p
                for name in ('omega1_w', 'omega1_b', 'omega2_w', 'omega2_b'):
                    self.params['dfm%d_%s' % (stage, name)] = getattr(p, name)

    def _conv(self, rng, name, k, cin, cout):
        self.params[name + '_w'] = tc.Tensor(_he_normal(rng, (k, k, cin, cout), k * k * cin),
                                             requires_grad=True, name=name + '_w')
        self.params[name + '_b'] = tc.Tensor(np.zeros(cout), requires_grad=True, name=name + '_b')

    def stage_fusion(self, stage):
        """Fusion applied after encoder stage 1 or 2: addition, concatenation or dfm."""
        fusion = self.config.fusion
        if fusion in ('addition', 'concatenation'):
            return fusion
        if fusion == 'dfm-all' or (fusion == 'dfm-first' and stage == 1) or (fusion == 'dfm-last' and stage == 2):
            return 'dfm'
        return 'addition'

    def parameters(self):
        return [self.params[name] for name in sorted(self.params)]

    def n_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def fuse(self, stage, r, t):
        """Fuses the stage features of the two branches."""
        kind = self.stage_fusion(stage)
        if kind == 'addition':
            return tc.add(r, t)
        if kind == 'concatenation':
            name = 'fuse%d' % stage
            return tc.conv2d(tc.concat([r, t]), self.params[name + '_w'], self.params[name + '_b'])
        return dfm.dfm_forward(r, t, self.dfm_params[stage])

    def _check_inputs(self, rgb, feat):
        h, w = self.config.height, self.config.width
        c_feat = MODALITY_CHANNELS[self.config.modality]
        if rgb.shape != (h, w, 3) or feat.shape != (h, w, c_feat):
            raise tc.ShapeError('Expected inputs (%d, %d, 3) and (%d, %d, %d), got %s and %s'
                                % (h, w, h, w, c_feat, rgb.shape, feat.shape))

    def forward(self, rgb, feat, return_stages=False):
        """
        Computes the class logits.

        Parameters
        ----------
        rgb : array-like, shape (H, W, 3)
        feat : array-like, shape (H, W, C_feat)
        return_stages : boolean, optional
            If True, also returns the (rgb, feature, fused) tensors of both
            encoder stages.

        Returns
        -------
        logits : Tensor, shape (H, W, classes)
        """
        rgb = tc.Tensor(rgb)
        t = tc.Tensor(feat)
        self._check_inputs(rgb, t)
        p = self.params
        x = rgb
        feat_in = t
        stages = []
        for s in (1, 2):
            r = tc.relu(tc.conv2d(x, p['enc_rgb%d_w' % s], p['enc_rgb%d_b' % s], stride=2))
            t = tc.relu(tc.conv2d(t, p['enc_feat%d_w' % s], p['enc_feat%d_b' % s], stride=2))
            x = self.fuse(s, r, t)
            stages.append((r, t, x))
        # skips: stage-1 fused feature at H/2, both raw inputs at full resolution
        y = tc.concat([tc.upsample_nearest(x), stages[0][2]])
        y = tc.relu(tc.conv2d(y, p['dec1_w'], p['dec1_b']))
        y = tc.concat([tc.upsample_nearest(y), rgb, feat_in])
        y = tc.relu(tc.conv2d(y, p['dec2_w'], p['dec2_b']))
        logits = tc.conv2d(y, p['head_w'], p['head_b'])
        if return_stages:
            return logits, stages
        return logits

    def get_state(self):
        return {name: t.data.copy() for name, t in self.params.items()}

    def set_state(self, state):
        for name, t in self.params.items():
            t.data[...] = state[name]


@dataclass
class TrainedModel:
    """
    A trained network with its training record.
    """
    net: FusionNet
    config: NetConfig
    losses: list
    val_miou: float = float('nan')
    best_iteration: int = -1
    class_weights: list = field(default_factory=list)


def build(config):
    """Builds the network described by a configuration."""
    if not isinstance(config, NetConfig):
        raise ConfigError('Expected a NetConfig, got %r' % (config,))
    return FusionNet(config)


def _standardize(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, np.newaxis]
    mean = x.mean(axis=(0, 1), keepdims=True)
    std = x.std(axis=(0, 1), keepdims=True)
    return (x - mean) / np.where(std > 0, std, 1.)


def derive_modality(modality, disparity, rgb, camera):
    """
    Second-branch input of a scene, before standardization.

    Returns
    -------
    feat : numpy array, shape (H, W, C_feat)
    """
    if modality == 'rgb':
        return np.asarray(rgb, dtype=np.float64) / 255.
    if modality == 'disparity':
        return disparity.data[:, :, np.newaxis]
    if modality == 'normal':
        return features.normal_rgb(features.normal_image(disparity, camera))
    if modality == 'tdisp':
        d_t, _, _ = dt.run_dt_pipeline(disparity)
        return d_t.data[:, :, np.newaxis]
    mask, _ = dt.coarse_road_mask(disparity)
    if modality == 'elevation':
        return features.elevation_map(disparity, camera, mask).map
    if modality == 'hha':
        return features.hha_image(disparity, camera, mask).map
    raise ConfigError('Unknown modality %r' % modality)


@dataclass
class SceneDataset:
    """
    Network inputs of a set of scenes: standardized RGB, standardized
    second-branch feature and labels.
    """
    modality: str
    rgb: list
    feat: list
    labels: list
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_split(cls, split_dir, modality, camera=None):
        """
        Loads every scene of a split directory written by ``synth.make_split``
        and derives the requested modality.  The camera defaults to
        ``camera.txt`` next to the split directory, then to the synthetic
        default camera.
        """
        if modality not in MODALITIES:
            raise ConfigError('Unknown modality %r, expected one of %s' % (modality, MODALITIES))
        disp_dir = os.path.join(split_dir, 'disp')
        ids = sorted(os.path.splitext(name)[0] for name in os.listdir(disp_dir) if name.endswith('.pgm'))
        if not ids:
            raise ValueError('No scenes found in %s' % split_dir)
        if camera is None:
            cam_path = os.path.join(os.path.dirname(os.path.normpath(split_dir)), 'camera.txt')
            camera = io.read_camera(cam_path) if os.path.exists(cam_path) else None
        rgbs, feats, labels = [], [], []
        for scene_id in ids:
            disparity, rgb, label = synth.load_scene(split_dir, scene_id)
            cam = camera or synth.default_camera(disparity.width, disparity.height)
            rgbs.append(_standardize(rgb / 255.))
            feats.append(_standardize(derive_modality(modality, disparity, rgb, cam)))
            labels.append(label.classes.copy())
        logger.info('Loaded %d scenes from %s with modality %s', len(ids), split_dir, modality)
        return cls(modality, rgbs, feats, labels, ids)

    @classmethod
    def from_scenes(cls, specs, modality):
        """Builds a dataset in memory from scene specs."""
        rgbs, feats, labels = [], [], []
        for spec in specs:
            disparity, label, cam, rgb = synth.generate(spec, return_rgb=True)
            rgbs.append(_standardize(rgb / 255.))
            feats.append(_standardize(derive_modality(modality, disparity, rgb, cam)))
            labels.append(label.classes.copy())
        return cls(modality, rgbs, feats, labels, ['scene_%04d' % i for i in range(len(labels))])


def class_weights(dataset, n_classes=N_CLASSES, ignore=0):
    """
    Inverse-frequency class weights, scaled so that the mean weight over the
    labeled pixels is 1.  The ignored class and absent classes get 0.
    """
    counts = np.zeros(n_classes)
    for labels in dataset.labels:
        counts += np.bincount(labels.ravel(), minlength=n_classes)[:n_classes]
    counts[ignore] = 0
    present = counts > 0
    weights = np.zeros(n_classes)
    weights[present] = counts.sum() / (np.count_nonzero(present) * counts[present])
    return weights


def infer(model, rgb, feat):
    """
    Class probabilities and arg-max labels of one scene.

    Parameters
    ----------
    model : TrainedModel or FusionNet
    rgb, feat : array-like
        Standardized inputs.

    Returns
    -------
    labels : LabelImage
    probs : numpy array, shape (H, W, classes)
    """
    net = getattr(model, 'net', model)
    probs = tc.softmax(net.forward(rgb, feat).data)
    labels = np.argmax(probs, axis=-1).astype(np.uint8)
    return io.LabelImage.from_array(labels), probs


def evaluate(model, dataset, classes=metrics.EVAL_CLASSES):
    """
    Pooled confusion counts, PR curves and AP over a dataset.

    Returns
    -------
    report : metrics.EvalReport
    """
    counts = None
    probs, gts = [], []
    for rgb, feat, labels in zip(dataset.rgb, dataset.feat, dataset.labels):
        pred, p = infer(model, rgb, feat)
        c = metrics.confusion(pred, labels, classes)
        counts = c if counts is None else counts + c
        probs.append(p)
        gts.append(labels)
    gt = np.concatenate(gts, axis=0)
    curves = {}
    for cls in classes:
        if np.any(gt == cls):
            curves[cls] = metrics.pr_curve(np.concatenate([p[:, :, cls] for p in probs], axis=0), gt, cls)
    return metrics.report(counts, curves)


def mean_iou(model, dataset):
    return metrics.report(sum_counts(model, dataset)).miou


def sum_counts(model, dataset, classes=metrics.EVAL_CLASSES):
    counts = None
    for rgb, feat, labels in zip(dataset.rgb, dataset.feat, dataset.labels):
        pred, _ = infer(model, rgb, feat)
        c = metrics.confusion(pred, labels, classes)
        counts = c if counts is None else counts + c
    return counts


def train(net, dataset, config=None, val_dataset=None):
    """
    Trains a network with SGD, one scene per iteration in a fixed cyclic
    order.

    When a validation set is given the parameters with the best validation
    mIoU (checked every ``config.val_every`` iterations and at the end) are
    restored at the end.

    Parameters
    ----------
    net : FusionNet
    dataset : SceneDataset
        Training scenes.
    config : NetConfig, optional
        Training settings; defaults to ``net.config``.
    val_dataset : SceneDataset, optional

    Returns
    -------
    model : TrainedModel

    Raises
    ------
    DivergenceError
        If the loss becomes NaN or infinite.
    """
    config = net.config if config is None else config
    if len(dataset) == 0:
        raise ValueError('Training set is empty')
    weights = class_weights(dataset) if config.class_weighting else None
    optimizer = tc.SGD(net.parameters(), lr=config.lr, momentum=config.momentum)
    losses = []
    best = (-1., -1, None)

    def validate(iteration):
        miou = mean_iou(net, val_dataset)
        logger.debug('iteration %d: val mIoU %.4f', iteration, miou)
        if miou > best[0]:
            return miou, iteration, net.get_state()
        return best

    for it in range(config.iterations):
        i = it % len(dataset)
        with tc.Tape() as tape:
            logits = net.forward(dataset.rgb[i], dataset.feat[i])
        loss, grad = tc.softmax_ce(logits, dataset.labels[i], class_weights=weights)
        if not np.isfinite(loss):
            raise DivergenceError(it, loss)
        losses.append(loss)
        optimizer.zero_grad()
        tape.backward(logits, grad)
        optimizer.step()
        if val_dataset is not None and (it + 1) % config.val_every == 0:
            best = validate(it + 1)
        if (it + 1) % 50 == 0:
            logger.info('iteration %d/%d: loss %.5f', it + 1, config.iterations, loss)
    if val_dataset is not None:
        if config.iterations % config.val_every or config.iterations == 0:
            best = validate(config.iterations)
        net.set_state(best[2])
        logger.info('Selected iteration %d with val mIoU %.4f', best[1], best[0])
    w = [] if weights is None else [float(x) for x in weights]
    val_miou = float(best[0]) if best[2] is not None else float('nan')
    return TrainedModel(net=net, config=config, losses=losses, val_miou=val_miou, best_iteration=best[1], class_weights=w)


def encoder_activations(model, rgb, feat):
    """
    Features after the last encoder stage.

    Returns
    -------
    activations : dict
        'rgb', 'feature' and 'fused' arrays of shape (H/4, W/4, C).
    """
    net = getattr(model, 'net', model)
    _, stages = net.forward(rgb, feat, return_stages=True)
    r, t, fused = stages[-1]
    return {'rgb': r.data, 'feature': t.data, 'fused': fused.data}


def save_model(model, path):
    """
    Writes the parameters as one TNSR vector (float32) and a JSON sidecar
    ``path + '.json'`` with the configuration, the parameter layout and the
    training record.
    """
    names = sorted(model.net.params)
    vector = np.concatenate([model.net.params[n].data.ravel() for n in names]) if names else np.zeros(0)
    io.write_tensor(vector, path)
    sidecar = {
        'config': asdict(model.config),
        'params': [[n, list(model.net.params[n].shape)] for n in names],
        'losses': [float(x) for x in model.losses],
        'val_miou': None if math.isnan(model.val_miou) else model.val_miou,
        'best_iteration': model.best_iteration,
        'class_weights': list(model.class_weights),
    }
    with open(path + '.json', 'w') as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_model(path):
    """
    Reads a model written by ``save_model``.  Parameters come back at float32
    precision.
    """
    with open(path + '.json') as fh:
        try:
            sidecar = json.load(fh)
        except ValueError as err:
            raise io.FormatError('Model sidecar is not valid JSON: %s' % err)
    config = NetConfig.from_dict(sidecar['config'])
    net = build(config)
    vector = io.read_tensor(path).astype(np.float64)
    stored = sorted(name for name, _ in sidecar['params'])
    if stored != sorted(net.params):
        raise io.FormatError('Stored parameters %s do not match the %s network' % (stored, config.fusion))
    offset = 0
    for name, shape in sidecar['params']:
        if name not in net.params or tuple(net.params[name].shape) != tuple(shape):
            raise io.FormatError('Parameter %s%s does not match the configured network' % (name, tuple(shape)))
        size = int(np.prod(shape))
        if offset + size > vector.size:
            raise io.FormatError('Parameter vector is too short for %s' % name)
        net.params[name].data[...] = vector[offset:offset + size].reshape(shape)
        offset += size
    if offset != vector.size:
        raise io.FormatError('Parameter vector has %d values, layout needs %d' % (vector.size, offset))
    val = sidecar.get('val_miou')
    return TrainedModel(net=net, config=config, losses=sidecar.get('losses', []),
                        val_miou=float('nan') if val is None else val,
                        best_iteration=sidecar.get('best_iteration', -1),
                        class_weights=sidecar.get('class_weights', []))


@dataclass
class AblationResult:
    """mIoU (fraction) and runtime statistics of one (fusion, modality) pair."""
    fusion: str
    modality: str
    mious: list
    runtime_ms: float
    eta: object = None

    @property
    def miou_mean(self):
        return float(np.mean(self.mious))

    @property
    def miou_std(self):
        return float(np.std(self.mious))


def _ablation_run(job):
    fusion, modality, seed, base, train_set, val_set = job
    doc = asdict(base)
    doc.update(fusion=fusion, modality=modality, seed=seed)
    config = NetConfig.from_dict(doc)
    model = train(build(config), train_set, config, val_set)
    start = time.perf_counter()
    miou = mean_iou(model, val_set)
    runtime = (time.perf_counter() - start) * 1000. / len(val_set)
    return fusion, modality, seed, miou, runtime


def ablation(datasets, seeds, base_config=None, fusions=FUSION_VARIANTS, workers=1):
    """
    Trains every (fusion, modality, seed) combination and tabulates the
    validation mIoU, the inference runtime per scene and eta against the
    addition baseline of the same modality.

    Parameters
    ----------
    datasets : dict
        Maps each modality to a (train, val) pair of SceneDataset.
    seeds : list of int
        At least three initialization seeds.
    base_config : NetConfig, optional
        Settings shared by every run.
    fusions : sequence of string, optional
        Fusion variants to compare.
    workers : int, optional
        Number of worker processes.

    Returns
    -------
    rows : list of AblationResult
        One row per (fusion, modality), in input order.
    """
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError('An ablation needs at least 3 seeds, got %d' % len(seeds))
    base = NetConfig() if base_config is None else base_config
    jobs = [(fusion, modality, seed, base, train_set, val_set)
            for modality, (train_set, val_set) in datasets.items()
            for fusion in fusions for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablation_run, jobs))
    else:
        results = [_ablation_run(job) for job in jobs]

    rows = []
    for modality in datasets:
        for fusion in fusions:
            runs = [r for r in results if r[0] == fusion and r[1] == modality]
            rows.append(AblationResult(fusion, modality, [r[3] for r in runs], float(np.mean([r[4] for r in runs]))))
    for row in rows:
        base_row = [r for r in rows if r.modality == row.modality and r.fusion == 'addition']
        if base_row and base_row[0] is not row:
            try:
                row.eta = metrics.eta(100. * row.miou_mean, row.runtime_ms,
                                      100. * base_row[0].miou_mean, base_row[0].runtime_ms)
            except metrics.UndefinedMetricError:
                row.eta = None
    return rows


def write_ablation_csv(rows, path):
    """
    Writes ablation rows with columns fusion, modality, miou_mean, miou_std,
    runtime_ms, eta and mious (per-seed values separated by ';').

    The mIoU columns are reproducible for fixed seeds; runtime_ms and eta are
    wall-clock measurements and differ between runs.
    """
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(('fusion', 'modality', 'miou_mean', 'miou_std', 'runtime_ms', 'eta', 'mious'))
        for row in rows:
            writer.writerow([row.fusion, row.modality, repr(row.miou_mean), repr(row.miou_std),
                             repr(row.runtime_ms), '' if row.eta is None else repr(row.eta),
                             ';'.join(repr(float(m)) for m in row.mious)])