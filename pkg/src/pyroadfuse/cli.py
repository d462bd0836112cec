# -*- coding: utf-8 -*-
"""
Command line interface: ``roadfuse <command> [<subcommand>] [options]``.

Diagnostics and the resolved configuration go to stderr; results go to files
or stdout.  Exit codes: 0 on success, 1 on a runtime error, 2 on a usage
error.

For a fixed seed every output file is bit-identical across runs, except for
measured wall-clock columns: the runtime_ms and eta columns written by
``ablate`` (and the runtime_ms column of ``fuse bench-cost``) vary between
runs.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

from . import disparity_transform as dt
from . import features
from . import fusionnet
from . import io
from . import metrics
from . import synth
from .dfm import bench_cost
from .dfm import gradcheck
from .utils import configure_logging

logger = logging.getLogger(__name__)

FEATURE_COMMANDS = {'depth': 'depth', 'normal': 'normal3', 'elevation': 'elevation', 'hha': 'hha3'}


def _int_list(text):
    try:
        return [int(x) for x in text.split(',') if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError('expected comma separated integers, got %r' % text)


def _name_list(choices):
    def parse(text):
        names = [x.strip() for x in text.split(',') if x.strip()]
        bad = [x for x in names if x not in choices]
        if bad or not names:
            raise argparse.ArgumentTypeError('expected names from %s, got %r' % (', '.join(choices), text))
        return names
    return parse


def _seed(args, default=0):
    return default if args.seed is None else args.seed


def cmd_synth_generate(args):
    synth.generate_scenes(args.n, _seed(args), args.out, threads=args.threads, width=args.width,
                          height=args.height, noise_sigma=args.noise)


def cmd_synth_split(args):
    synth.make_split(args.n, _seed(args), args.out, threads=args.threads, width=args.width,
                     height=args.height, noise_sigma=args.noise)


def cmd_dt_estimate(args):
    d = io.read_pgm16(args.disp)
    _, model, _ = dt.run_dt_pipeline(d, random_state=_seed(args))
    io.write_road_model(model, args.model)


def cmd_dt_transform(args):
    d = io.read_pgm16(args.disp)
    model = io.read_road_model(args.model)
    io.write_pgm16(dt.transform(d, model), args.out)


def cmd_dt_pipeline(args):
    results = dt.run_dt_batch(args.disp, args.out_dir, threads=args.threads, random_state=_seed(args))
    for path, (model, _) in zip(args.disp, results):
        print('%s a0=%r a1=%r theta_rad=%r delta=%r' % (path, float(model.a0), float(model.a1), float(model.theta),
                                                          float(model.delta)))


def cmd_features(args):
    d = io.read_pgm16(args.disp)
    cam = io.read_camera(args.cam)
    mask = io.read_mask(args.mask) if args.mask else None
    feature = features.derive(FEATURE_COMMANDS[args.kind], d, cam, mask=mask)
    io.write_tensor(feature.map, args.out)


def cmd_bench_cost(args):
    rows, ratio = bench_cost(args.h, args.w, args.c, args.cout, args.k, include_generation=args.include_generation,
                             seed=_seed(args), repeats=args.repeats)
    print('variant\tmacs\truntime_ms')
    for row in rows:
        print('%s\t%d\t%.3f' % (row['variant'], row['macs'], row['runtime_ms']))
    print('ratio\t%.6f' % ratio)


def cmd_gradcheck(args):
    errors = gradcheck(_seed(args))
    for group in sorted(errors):
        print('%s\t%.3e' % (group, errors[group]))


def cmd_eta_table(args):
    print('row\tfusion\tmiou\truntime_ms\teta')
    for row, value in metrics.eta_table():
        print('%s\t%s\t%.1f\t%.1f\t%s' % (row.setup, row.fusion, row.miou, row.runtime, metrics.format_eta(value)))


def _load_config(args):
    if args.config:
        with open(args.config) as fh:
            config = fusionnet.NetConfig.from_json(fh.read())
    else:
        config = fusionnet.NetConfig()
    if args.seed is not None:
        config = fusionnet.NetConfig.from_dict(dict(asdict(config), seed=args.seed))
    print(config.to_json(), file=sys.stderr)
    return config


def cmd_train(args):
    config = _load_config(args)
    train_set = fusionnet.SceneDataset.from_split(os.path.join(args.data, 'train'), config.modality)
    val_dir = os.path.join(args.data, 'val')
    val_set = fusionnet.SceneDataset.from_split(val_dir, config.modality) if os.path.isdir(val_dir) else None
    model = fusionnet.train(fusionnet.build(config), train_set, config, val_set)
    fusionnet.save_model(model, args.out)
    print('final loss %.6f, val mIoU %.4f' % (model.losses[-1] if model.losses else float('nan'), model.val_miou))


def cmd_eval(args):
    model = fusionnet.load_model(args.model)
    data = args.data
    if os.path.isdir(os.path.join(data, args.split)):
        data = os.path.join(data, args.split)
    dataset = fusionnet.SceneDataset.from_split(data, model.config.modality)
    rep = fusionnet.evaluate(model, dataset)
    metrics.write_report_csv(rep, args.out)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    for cls, curve in sorted(rep.pr_curves.items()):
        metrics.write_pr_csv(curve, os.path.join(out_dir, 'pr_%d.csv' % cls))
    print('mFsc %.4f mIoU %.4f mAP %.4f' % (rep.mfsc, rep.miou, rep.map))


def cmd_ablate(args):
    base = _load_config(args)
    if args.iterations is not None:
        base = fusionnet.NetConfig.from_dict(dict(asdict(base), iterations=args.iterations))
    datasets = {}
    for modality in args.modalities:
        datasets[modality] = (fusionnet.SceneDataset.from_split(os.path.join(args.data, 'train'), modality),
                              fusionnet.SceneDataset.from_split(os.path.join(args.data, 'val'), modality))
    rows = fusionnet.ablation(datasets, args.seeds, base, fusions=args.fusions, workers=args.threads)
    fusionnet.write_ablation_csv(rows, args.out)
    for row in rows:
        print('%s\t%s\t%.4f +- %.4f\t%.2f ms\t%s' % (row.fusion, row.modality, row.miou_mean, row.miou_std,
                                                    row.runtime_ms, metrics.format_eta(row.eta)))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=None, help='random seed (default 0)')
    common.add_argument('--threads', type=int, default=1, help='worker count for parallel stages')
    common.add_argument('--verbose', action='store_true', help='debug logging')

    parser = argparse.ArgumentParser(prog='roadfuse', description=__doc__.strip().splitlines()[0])
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    def leaf(group, name, func, help_text):
        p = group.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    def scene_size(p):
        p.add_argument('--width', type=int, default=synth.DEFAULT_WIDTH)
        p.add_argument('--height', type=int, default=synth.DEFAULT_HEIGHT)
        p.add_argument('--noise', type=float, default=synth.DEFAULT_NOISE, help='disparity noise sigma')

    synth_cmd = commands.add_parser('synth', help='synthetic road scenes').add_subparsers(dest='sub', metavar='sub')
    synth_cmd.required = True
    p = leaf(synth_cmd, 'generate', cmd_synth_generate, 'write n scenes into one directory')
    p.add_argument('--n', type=int, required=True)
    p.add_argument('--out', required=True)
    scene_size(p)
    p = leaf(synth_cmd, 'split', cmd_synth_split, 'write a train/val/test split')
    p.add_argument('--n', type=int, required=True)
    p.add_argument('--out', required=True)
    scene_size(p)

    dt_cmd = commands.add_parser('dt', help='disparity transformation').add_subparsers(dest='sub', metavar='sub')
    dt_cmd.required = True
    p = leaf(dt_cmd, 'estimate', cmd_dt_estimate, 'estimate the road model')
    p.add_argument('--disp', required=True)
    p.add_argument('--model', required=True)
    p = leaf(dt_cmd, 'transform', cmd_dt_transform, 'apply a road model')
    p.add_argument('--disp', required=True)
    p.add_argument('--model', required=True)
    p.add_argument('--out', required=True)
    p = leaf(dt_cmd, 'pipeline', cmd_dt_pipeline, 'estimate and transform, with all intermediate outputs')
    p.add_argument('--disp', nargs='+', required=True)
    p.add_argument('--out-dir', required=True)

    feat_cmd = commands.add_parser('features', help='derived features').add_subparsers(dest='kind', metavar='kind')
    feat_cmd.required = True
    for kind in FEATURE_COMMANDS:
        p = leaf(feat_cmd, kind, cmd_features, '%s feature as a TNSR file' % kind)
        p.add_argument('--disp', required=True)
        p.add_argument('--cam', required=True)
        p.add_argument('--out', required=True)
        p.add_argument('--mask', help='ground mask (default: coarse road mask)')

    fuse_cmd = commands.add_parser('fuse', help='dynamic fusion checks').add_subparsers(dest='sub', metavar='sub')
    fuse_cmd.required = True
    p = leaf(fuse_cmd, 'bench-cost', cmd_bench_cost, 'MAC counts of naive and factorized fusion')
    for name in ('h', 'w', 'c', 'cout', 'k'):
        p.add_argument('--' + name, type=int, required=True)
    p.add_argument('--include-generation', action='store_true')
    p.add_argument('--repeats', type=int, default=1)
    leaf(fuse_cmd, 'gradcheck', cmd_gradcheck, 'finite-difference gradient check')
    leaf(fuse_cmd, 'eta-table', cmd_eta_table, 'efficiency ratios of the published ablation')

    p = leaf(commands, 'train', cmd_train, 'train the toy fusion network')
    p.add_argument('--config')
    p.add_argument('--data', required=True, help='split directory with train/ and val/')
    p.add_argument('--out', required=True, help='model file (TNSR + .json sidecar)')

    p = leaf(commands, 'eval', cmd_eval, 'evaluate a trained model')
    p.add_argument('--model', required=True)
    p.add_argument('--data', required=True)
    p.add_argument('--split', default='test')
    p.add_argument('--out', required=True, help='report CSV; pr_<class>.csv are written next to it')

    p = leaf(commands, 'ablate', cmd_ablate, 'fusion x modality ablation')
    p.add_argument('--config')
    p.add_argument('--data', required=True)
    p.add_argument('--seeds', type=_int_list, default=[1, 2, 3, 4, 5])
    p.add_argument('--fusions', type=_name_list(fusionnet.FUSION_VARIANTS), default=list(fusionnet.FUSION_VARIANTS))
    p.add_argument('--modalities', type=_name_list(fusionnet.MODALITIES), default=['tdisp'])
    p.add_argument('--iterations', type=int)
    p.add_argument('--out', required=True)
    return parser


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    configure_logging('debug' if args.verbose else None)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != 'func'}
    print(json.dumps(resolved, sort_keys=True, default=str), file=sys.stderr)
    try:
        args.func(args)
    except (ValueError, RuntimeError, OSError) as err:
        logger.debug('command failed', exc_info=True)
        print('roadfuse: error: %s' % err, file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
