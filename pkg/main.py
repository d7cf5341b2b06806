"""
main.py
Command-line entry point: gen-data, train, eval, gradcheck, attn-dump, ablate.

    python main.py gen-data --seed 7 --out data/
    python main.py train --data data/ --block1 miba --fusion miba --out runs/miba
    python main.py eval --checkpoint runs/miba/model.ibac --domain target --mode single
"""
import argparse
import json
import logging
import os
import sys
import traceback
from dataclasses import dataclass

import numpy as np
import pandas as pd

import config
import tensor_core as tc
from attention import AttentionKind, AttentionParams, BatchFeatures, iba_block_forward
from data import (Domain, SceneConfig, augment_batch, generate_corpus, make_loader, read_corpus,
                  write_corpus)
from encoder import (ModelConfig, build_model, forward_with_maps, load_checkpoint, save_checkpoint,
                     set_inference_mode)
from exceptions import ConfigError, DataError, IBAError
from train import OptimConfig, evaluate, loss_trend_ok, segmentation_loss, train_loop
from utils import ensure_dir, parse_int_list, write_pgm

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    model: ModelConfig
    optim: OptimConfig
    data_dir: str = 'data'
    out_dir: str = 'runs/default'
    seed: int = config.SEED
    batch_size: int = config.BATCH_SIZE
    rica_strength: float = config.RICA_STRENGTH
    crop_pad: int = config.CROP_PAD
    eval_every: int = config.EVAL_EVERY
    log_every: int = config.LOG_EVERY

    def to_dict(self):
        return {'model': self.model.to_dict(), 'optim': self.optim.to_dict(), 'data_dir': self.data_dir,
                'out_dir': self.out_dir, 'seed': self.seed, 'batch_size': self.batch_size,
                'rica_strength': self.rica_strength, 'crop_pad': self.crop_pad,
                'eval_every': self.eval_every, 'log_every': self.log_every}

    def checkpoint_header(self):
        """Everything that determines the weights; the directories stay in run_config.json."""
        header = self.to_dict()
        del header['data_dir'], header['out_dir']
        header['steps'] = self.optim.total_steps
        return header

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        return cls(model=ModelConfig.from_dict(values.pop('model')),
                   optim=OptimConfig.from_dict(values.pop('optim')), **values)


def setup_logging(level=config.LOG_LEVEL, log_file=None):
    level = getattr(logging, str(level).upper(), logging.INFO)
    logging.basicConfig(level=level, format=config.LOG_FORMAT, handlers=[logging.StreamHandler()])
    root = logging.getLogger()
    root.setLevel(level)
    if log_file:
        handler = logging.FileHandler(log_file)
        handler.setFormatter(logging.Formatter(config.LOG_FORMAT))
        root.addHandler(handler)


def read_config_file(path):
    """`key = value` lines; `#` starts a comment. Keys may use '-' or '_'."""
    values = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from None
    for number, line in enumerate(lines, start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise UsageError(f"{path}:{number}: expected 'key = value'")
        key, value = (part.strip() for part in line.split('=', 1))
        values[key.replace('-', '_')] = value
    return values


def _as_bool(value):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ('1', 'true', 'yes', 'on'):
        return True
    if text in ('0', 'false', 'no', 'off'):
        return False
    raise UsageError(f"not a boolean: {value!r}")


# ------------------------------------------------------------------ parser

def _model_flags():
    p = ArgumentParser(add_help=False)
    g = p.add_argument_group('model')
    g.add_argument('--block1', default='self', choices=['self', 'miba', 'eiba'],
                   help='attention kind in stage-1 blocks (default: %(default)s)')
    g.add_argument('--block2', default='self', choices=['self', 'miba', 'eiba'],
                   help='attention kind in stage-2 blocks, ablation only (default: %(default)s)')
    g.add_argument('--fusion', default='none', choices=['none', 'miba', 'eiba'],
                   help='pre-decoder fusion layers (default: %(default)s)')
    g.add_argument('--fusion-sites', type=int, default=config.FUSION_SITE_COUNT,
                   help='number of fused pyramid levels (default: %(default)s)')
    g.add_argument('--widths', default=','.join(map(str, config.STAGE_WIDTHS)),
                   help='stage widths (default: %(default)s)')
    g.add_argument('--blocks', default=','.join(map(str, config.BLOCKS_PER_STAGE)),
                   help='blocks per stage (default: %(default)s)')
    g.add_argument('--heads', default=','.join(map(str, config.HEADS_PER_STAGE)),
                   help='heads per stage (default: %(default)s)')
    g.add_argument('--decoder-width', type=int, default=config.DECODER_WIDTH,
                   help='decoder embedding width (default: %(default)s)')
    g.add_argument('--scale-by-head-count', action='store_true',
                   help='scale MIBA/self logits by sqrt(heads) instead of sqrt(head width) (default: off)')
    return p


def _optim_flags():
    p = ArgumentParser(add_help=False)
    g = p.add_argument_group('optimisation')
    g.add_argument('--batch-size', type=int, default=config.BATCH_SIZE, help='(default: %(default)s)')
    g.add_argument('--steps', type=int, default=config.TRAIN_STEPS, help='(default: %(default)s)')
    g.add_argument('--warmup', type=int, default=config.WARMUP_STEPS, help='(default: %(default)s)')
    g.add_argument('--lr-backbone', type=float, default=config.LR_BACKBONE, help='(default: %(default)s)')
    g.add_argument('--lr-classifier', type=float, default=config.LR_CLASSIFIER, help='(default: %(default)s)')
    g.add_argument('--weight-decay', type=float, default=config.WEIGHT_DECAY, help='(default: %(default)s)')
    g.add_argument('--rica', type=float, default=config.RICA_STRENGTH,
                   help='RICA strength in [0, 1] (default: %(default)s)')
    g.add_argument('--crop-pad', type=int, default=config.CROP_PAD, help='(default: %(default)s)')
    g.add_argument('--log-every', type=int, default=config.LOG_EVERY, help='(default: %(default)s)')
    return p


def _common_flags():
    p = ArgumentParser(add_help=False)
    p.add_argument('--seed', type=int, default=config.SEED, help='(default: %(default)s)')
    p.add_argument('--config', default=None, help='file of `key = value` defaults (default: none)')
    p.add_argument('--log-file', default=None, help='also write logs here (default: none)')
    p.add_argument('--log-level', default=config.LOG_LEVEL, help='(default: %(default)s)')
    return p


def build_parser():
    parser = ArgumentParser(prog='ibaformer', description='Intra-batch attention at desk scale.')
    sub = parser.add_subparsers(dest='command', required=True, parser_class=ArgumentParser)
    common, model, optim = _common_flags(), _model_flags(), _optim_flags()

    p = sub.add_parser('gen-data', parents=[common], help='write source/target scene corpora')
    p.add_argument('--n', type=int, default=config.N_SOURCE, help='source scenes (default: %(default)s)')
    p.add_argument('--n-target', type=int, default=config.N_TARGET, help='target scenes (default: %(default)s)')
    p.add_argument('--classes', type=int, default=config.NUM_CLASSES, help='(default: %(default)s)')
    p.add_argument('--size', type=int, default=config.IMAGE_SIZE, help='image side (default: %(default)s)')
    p.add_argument('--out', default='data', help='(default: %(default)s)')
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser('train', parents=[common, model, optim], help='train one configuration')
    p.add_argument('--data', default=None, help='corpus directory (default: data)')
    p.add_argument('--out', default=None, help='run directory (default: runs/default)')
    p.add_argument('--eval-every', type=int, default=config.EVAL_EVERY, help='(default: %(default)s)')
    p.add_argument('--run-config', default=None,
                   help='re-run a saved run_config.json; only --data and --out still apply (default: none)')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('eval', parents=[common], help='evaluate a checkpoint')
    p.add_argument('--checkpoint', default=os.path.join('runs/default', config.CHECKPOINT_FILE),
                   help='(default: %(default)s)')
    p.add_argument('--data', default='data', help='(default: %(default)s)')
    p.add_argument('--domain', default='target', choices=['source', 'target'], help='(default: %(default)s)')
    p.add_argument('--mode', default='batch', choices=['single', 'batch'], help='(default: %(default)s)')
    p.add_argument('--batch-size', type=int, default=config.BATCH_SIZE, help='(default: %(default)s)')
    p.add_argument('--workers', type=int, default=1, help='(default: %(default)s)')
    p.add_argument('--out', default=None, help='directory for eval.csv (default: checkpoint directory)')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('gradcheck', parents=[common], help='finite-difference check of every layer kind')
    p.add_argument('--eps', type=float, default=config.FD_EPS, help='(default: %(default)s)')
    p.add_argument('--threshold', type=float, default=None,
                   help='layer tolerance (default: max(1e-5, eps))')
    p.add_argument('--model-threshold', type=float, default=None,
                   help='full-model tolerance (default: max(1e-4, eps))')
    p.add_argument('--entries', type=int, default=config.GRADCHECK_MODEL_ENTRIES,
                   help='random parameters checked in the full model (default: %(default)s)')
    p.add_argument('--model-block1', default='miba', choices=['self', 'miba', 'eiba'],
                   help='(default: %(default)s)')
    p.add_argument('--model-fusion', default='eiba', choices=['none', 'miba', 'eiba'],
                   help='(default: %(default)s)')
    p.add_argument('--model-size', type=int, default=config.IMAGE_SIZE, help='(default: %(default)s)')
    p.add_argument('--skip-model', action='store_true', help='only check individual layers (default: off)')
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser('attn-dump', parents=[common], help='write stage-1 attention maps as PGM files')
    p.add_argument('--checkpoint', default=os.path.join('runs/default', config.CHECKPOINT_FILE),
                   help='(default: %(default)s)')
    p.add_argument('--data', default='data', help='(default: %(default)s)')
    p.add_argument('--domain', default='target', choices=['source', 'target'], help='(default: %(default)s)')
    p.add_argument('--batch-size', type=int, default=config.BATCH_SIZE, help='(default: %(default)s)')
    p.add_argument('--out', default='attn', help='(default: %(default)s)')
    p.add_argument('--png', action='store_true', help='also write a contact sheet PNG (default: off)')
    p.set_defaults(handler=cmd_attn_dump)

    p = sub.add_parser('ablate', parents=[common, model, optim], help='architecture, batch-size and RICA sweeps')
    p.add_argument('--data', default='data', help='(default: %(default)s)')
    p.add_argument('--out', default='runs/ablation', help='(default: %(default)s)')
    p.add_argument('--kinds', default='miba,eiba', help='intra-batch kinds to sweep (default: %(default)s)')
    p.add_argument('--batch-sizes', default='2,4,8', help='batch-size sweep (default: %(default)s)')
    p.set_defaults(handler=cmd_ablate)
    return parser


def _apply_config_file(parser, argv):
    """Re-parse with `--config` values installed as defaults for the chosen subcommand."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument('--config', default=None)
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return parser.parse_args(argv)
    values = read_config_file(known.config)
    command = next((a for a in argv if not a.startswith('-')), None)
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    if command not in subparsers.choices:
        return parser.parse_args(argv)
    sub = subparsers.choices[command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        if key not in actions or key in ('config', 'help'):
            raise UsageError(f"{known.config}: unknown key {key!r} for {command}")
        if isinstance(actions[key], argparse._StoreTrueAction):
            value = _as_bool(value)
        defaults[key] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ------------------------------------------------------------ run helpers

def run_config_from_args(args):
    try:
        model = ModelConfig(stage_widths=parse_int_list(args.widths), blocks_per_stage=parse_int_list(args.blocks),
                            heads_per_stage=parse_int_list(args.heads), block1_kind=args.block1,
                            block2_kind=args.block2, fusion_kind=args.fusion,
                            fusion_site_count=args.fusion_sites, decoder_width=args.decoder_width,
                            scale_by_head_count=args.scale_by_head_count)
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None
    optim = OptimConfig(lr_backbone=args.lr_backbone, lr_classifier=args.lr_classifier,
                        weight_decay=args.weight_decay, warmup_steps=min(args.warmup, args.steps),
                        total_steps=args.steps)
    if args.batch_size < 1:
        raise ConfigError(f"batch size must be at least 1, got {args.batch_size}")
    return RunConfig(model=model, optim=optim, data_dir=args.data or 'data', out_dir=args.out or 'runs/default',
                     seed=args.seed, batch_size=args.batch_size, rica_strength=args.rica, crop_pad=args.crop_pad,
                     eval_every=getattr(args, 'eval_every', 0), log_every=args.log_every)


def load_corpora(data_dir):
    source_path = os.path.join(data_dir, config.SOURCE_FILE)
    if not os.path.exists(source_path):
        raise DataError(f"missing corpus: {source_path} (run gen-data first)")
    source = read_corpus(source_path)
    target_path = os.path.join(data_dir, config.TARGET_FILE)
    target = read_corpus(target_path) if os.path.exists(target_path) else None
    if target is not None and len(target) == 0:
        logging.warning(f"{target_path} holds no scenes; skipping target evaluation")
        target = None
    if len(source) == 0:
        raise DataError(f"{source_path} holds no scenes")
    return source, target


def load_run_config(path):
    try:
        with open(path) as fh:
            values = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"run config not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not a run config ({e})") from None
    try:
        return RunConfig.from_dict(values)
    except (KeyError, TypeError) as e:
        raise ConfigError(f"{path}: not a run config ({e})") from None


def run_training(run_cfg, source, target=None, eval_modes=(True, False)):
    """Trains one RunConfig; returns the TrainResult (evals in both inference modes)."""
    if source.num_classes != run_cfg.model.num_classes:
        run_cfg.model.num_classes = source.num_classes
        run_cfg.model.validate()
    rng = tc.Rng(run_cfg.seed)
    model = build_model(run_cfg.model, rng.spawn(0))
    strength, pad = run_cfg.rica_strength, run_cfg.crop_pad

    def augment(images, labels, batch_rng):
        return augment_batch(images, labels, batch_rng, strength=strength, crop_pad=pad)

    loader = make_loader(source.samples, run_cfg.batch_size, rng.spawn(1), augment=augment)

    def eval_fn(m, step):
        reports = []
        for corpus in (source, target):
            if corpus is None:
                continue
            for intra in eval_modes:
                reports.append(evaluate(m, corpus.samples, corpus.num_classes, run_cfg.batch_size,
                                        intra_batch=intra, domain=corpus.domain))
        return reports

    return train_loop(model, loader, run_cfg.optim, run_cfg.optim.total_steps, eval_fn=eval_fn,
                      eval_every=run_cfg.eval_every, log_every=run_cfg.log_every)


def _append_csv(path, frame):
    frame.to_csv(path, mode='a', header=not os.path.exists(path), index=False)


def print_report(report, title):
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    for c, iou in enumerate(report.per_class_iou):
        text = 'absent' if np.isnan(iou) else f"{iou:.4f}"
        print(f"  class {c}: IoU {text}")
    print(f"  mIoU: {report.miou:.4f}")
    print("=" * 60)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    if args.classes < 2:
        raise ConfigError(f"--classes must be at least 2, got {args.classes}")
    if args.n < 1 or args.n_target < 0:
        raise ConfigError("--n must be positive and --n-target non-negative")
    cfg = SceneConfig(args.size, args.size, args.classes)
    cfg.validate()
    ensure_dir(args.out)
    source = generate_corpus(args.seed, args.n, cfg, Domain.SOURCE)
    write_corpus(os.path.join(args.out, config.SOURCE_FILE), source, args.classes, Domain.SOURCE)
    target = generate_corpus(args.seed, args.n_target, cfg, Domain.TARGET)
    write_corpus(os.path.join(args.out, config.TARGET_FILE), target, args.classes, Domain.TARGET)
    print(f"✅ Wrote {len(source)} source and {len(target)} target scenes to {args.out}")
    return EXIT_OK


def cmd_train(args):
    if args.run_config:
        run_cfg = load_run_config(args.run_config)
        run_cfg.data_dir = args.data or run_cfg.data_dir
        run_cfg.out_dir = args.out or run_cfg.out_dir
    else:
        run_cfg = run_config_from_args(args)
    source, target = load_corpora(run_cfg.data_dir)
    ensure_dir(run_cfg.out_dir)
    result = run_training(run_cfg, source, target)
    save_checkpoint(os.path.join(run_cfg.out_dir, config.CHECKPOINT_FILE), result.model,
                    run_cfg.checkpoint_header())
    with open(os.path.join(run_cfg.out_dir, config.RUN_CONFIG_FILE), 'w') as fh:
        json.dump(run_cfg.to_dict(), fh, indent=2, sort_keys=True)
    result.log.to_csv(os.path.join(run_cfg.out_dir, config.METRICS_FILE), index=False)
    eval_path = os.path.join(run_cfg.out_dir, config.EVAL_FILE)
    if os.path.exists(eval_path):
        os.remove(eval_path)
    if not result.evals.empty:
        _append_csv(eval_path, result.evals)

    print("\n" + "=" * 60)
    print(f"TRAINING SUMMARY: {result.model}")
    print("=" * 60)
    if not result.log.empty:
        print(f"  Steps: {len(result.log)}  first loss {result.log['loss'].iloc[0]:.4f}  "
              f"last loss {result.log['loss'].iloc[-1]:.4f}")
        print(f"  Loss trend decreasing: {'✅' if loss_trend_ok(result.log) else '❌'}")
    if not result.evals.empty:
        last = result.evals[result.evals['step'] == result.evals['step'].max()]
        for _, row in last.iterrows():
            print(f"  {row['domain']:>6} / {row['mode']:<6} mIoU {row['miou']:.4f}")
    print(f"  Output: {run_cfg.out_dir}")
    print("=" * 60)
    return EXIT_OK


def _load_checkpoint_or_fail(path):
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args):
    model, header = _load_checkpoint_or_fail(args.checkpoint)
    path = os.path.join(args.data, config.SOURCE_FILE if args.domain == 'source' else config.TARGET_FILE)
    corpus = read_corpus(path)
    if len(corpus) == 0:
        raise DataError(f"{path} holds no scenes")
    if corpus.num_classes != model.cfg.num_classes:
        raise DataError(f"class-count mismatch: checkpoint has {model.cfg.num_classes} classes, "
                        f"corpus {path} has {corpus.num_classes}")
    intra = args.mode == 'batch'
    model = set_inference_mode(model, intra)
    report = evaluate(model, corpus.samples, corpus.num_classes, args.batch_size, intra_batch=intra,
                      domain=args.domain, workers=args.workers)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    ensure_dir(out_dir)
    _append_csv(os.path.join(out_dir, config.EVAL_FILE), pd.DataFrame([report.row(header.get('steps'))]))
    print_report(report, f"EVALUATION: {args.domain} domain, {args.mode} mode")
    return EXIT_OK


def _random_batch(rng, b, n, d):
    return BatchFeatures(tc.Tensor(rng.normal(0.0, 1.0, size=(b, n, d))))


def _weighted_sum(out, weights):
    return tc.sum(tc.mul(out, weights))


def check_layer(kind, eps, floor=config.GRADCHECK_FLOOR, rng=None, shape=(3, 4, 8), heads=2):
    """Max relative FD error of one residual attention block over its input and all parameters."""
    rng = rng or tc.Rng(config.SEED)
    b, n, d = shape
    f = _random_batch(rng, b, n, d)
    p = AttentionParams.init(d, heads, kind, rng, std=0.5)
    # biases start at zero; perturb them so their gradients are exercised
    tensors = [getattr(p, name) if name.startswith('w') else tc.Tensor(rng.normal(0.0, 0.1, size=(d,)))
               for name in ('w_q', 'b_q', 'w_k', 'b_k', 'w_v', 'b_v', 'w_out', 'b_out')]
    weights = tc.Tensor(rng.normal(0.0, 1.0, size=shape))

    def loss(x, *params):
        names = ('w_q', 'b_q', 'w_k', 'b_k', 'w_v', 'b_v', 'w_out', 'b_out')
        layer = AttentionParams(heads=heads, kind=AttentionKind.parse(kind), **dict(zip(names, params)))
        return _weighted_sum(iba_block_forward(BatchFeatures(x), layer).tensor, weights)

    return tc.fd_check(loss, [f.tensor] + tensors, eps=eps, floor=floor)


def check_model(block1, fusion, eps, entries, size=config.IMAGE_SIZE, floor=config.GRADCHECK_FLOOR, seed=config.SEED):
    rng = tc.Rng(seed)
    cfg = ModelConfig(block1_kind=block1, fusion_kind=fusion)
    model = build_model(cfg, rng.spawn(0))
    images = tc.Tensor(rng.spawn(1).uniform(0.0, 1.0, size=(2, 3, size, size)))
    label_rng = rng.spawn(2)
    labels = np.array([label_rng.integers(0, cfg.num_classes) for _ in range(2 * size * size)]).reshape(2, size, size)
    names = list(model.params)

    def loss(*params):
        return segmentation_loss(model.with_params(dict(zip(names, params))), images, labels)

    return tc.fd_check(loss, [model.params[k] for k in names], eps=eps, floor=floor,
                       max_entries=entries, rng=rng.spawn(3))


def cmd_gradcheck(args):
    layer_tol = args.threshold if args.threshold is not None else max(config.GRADCHECK_LAYER_TOL, args.eps)
    model_tol = args.model_threshold if args.model_threshold is not None else max(config.GRADCHECK_MODEL_TOL, args.eps)
    previous = tc.set_debug(True)
    results = []
    try:
        for kind in AttentionKind:
            err = check_layer(kind, args.eps, rng=tc.Rng(args.seed))
            results.append((f"{kind.value} block", err, layer_tol))
        if not args.skip_model:
            err = check_model(args.model_block1, args.model_fusion, args.eps, args.entries,
                              size=args.model_size, seed=args.seed)
            results.append((f"full model ({args.model_block1}/{args.model_fusion})", err, model_tol))
    finally:
        tc.set_debug(previous)

    print("\n" + "=" * 60)
    print(f"GRADIENT CHECK (eps={args.eps:g})")
    print("=" * 60)
    failed = 0
    for name, err, tol in results:
        ok = err < tol
        failed += not ok
        print(f"  {'✅' if ok else '❌'} {name:<28} max rel err {err:.3e} (tol {tol:g})")
        logging.info(f"gradcheck {name}: {err:.3e} vs {tol:g}")
    print("=" * 60)
    return EXIT_OK if failed == 0 else EXIT_VERIFY


def dump_layers(model):
    """First stage-1-resolution attention layer per kind present: block-1, then the level-1 fusion layer."""
    layers = {model.cfg.block1_kind: 'stage1.block0.attn'}
    if model.cfg.fusion_kind is not None and 1 in model.cfg.fusion_levels():
        layers.setdefault(model.cfg.fusion_kind, 'fusion1.attn')
    return layers


def cmd_attn_dump(args):
    model, _ = _load_checkpoint_or_fail(args.checkpoint)
    path = os.path.join(args.data, config.SOURCE_FILE if args.domain == 'source' else config.TARGET_FILE)
    corpus = read_corpus(path)
    if args.batch_size < 1 or args.batch_size > len(corpus):
        raise ConfigError(f"--batch-size must lie in [1, {len(corpus)}]")
    images = tc.Tensor(np.stack([s.image.data for s in corpus.samples[:args.batch_size]]))
    _, maps = forward_with_maps(model, images)
    ensure_dir(args.out)
    written = []
    for kind, layer in dump_layers(model).items():
        weights = maps[layer].numpy()
        for s in range(weights.shape[0]):
            for h in range(weights.shape[1]):
                name = os.path.join(args.out, f"attn_s{s}_h{h}_{kind.value}.pgm")
                written.append(write_pgm(name, weights[s, h]))
    if args.png:
        write_contact_sheet(os.path.join(args.out, 'attn_overview.png'), maps, dump_layers(model))
    logging.info(f"Wrote {len(written)} attention maps to {args.out}")
    print(f"✅ Wrote {len(written)} attention maps to {args.out}")
    return EXIT_OK


def write_contact_sheet(path, maps, layers):
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    panels = [(kind, s, h, maps[layer].numpy()[s, h]) for kind, layer in layers.items()
              for s in range(maps[layer].numpy().shape[0]) for h in range(maps[layer].numpy().shape[1])]
    cols = min(4, len(panels))
    rows = -(-len(panels) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis('off')
    for ax, (kind, s, h, weights) in zip(axes.ravel(), panels):
        ax.imshow(weights, cmap='viridis')
        ax.set_title(f"{kind.value} s{s} h{h}", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={'Software': None})
    plt.close(fig)
    return path


def ablation_cells(kinds, batch_sizes, base_batch):
    """Architecture grid per kind (block1 / block2 / decoder columns) plus the batch-size sweep."""
    cells = [('self', 'self', 'none', base_batch)]
    for kind in kinds:
        cells += [(kind, 'self', 'none', base_batch), ('self', kind, 'none', base_batch),
                  ('self', 'self', kind, base_batch), (kind, 'self', kind, base_batch)]
        cells += [(kind, 'self', kind, b) for b in batch_sizes if b != base_batch]
    return cells


def rica_cells(kinds, strength):
    """Baseline and full (block1 + fusion) cell per kind, each without and with RICA."""
    strengths = sorted({0.0, float(strength)})
    archs = [('self', 'self', 'none')] + [(kind, 'self', kind) for kind in kinds]
    return [(*arch, s) for arch in archs for s in strengths]


def cmd_ablate(args):
    kinds = [AttentionKind.parse(k).value for k in args.kinds.split(',') if k]
    if 'self' in kinds:
        raise ConfigError("--kinds lists intra-batch kinds only (miba, eiba)")
    batch_sizes = parse_int_list(args.batch_sizes)
    source, target = load_corpora(args.data)
    ensure_dir(args.out)
    scored = {}

    def score_cell(block1, block2, fusion, batch, rica):
        key = (block1, block2, fusion, batch, float(rica))
        if key not in scored:
            cell_args = argparse.Namespace(**vars(args))
            cell_args.block1, cell_args.block2, cell_args.fusion = block1, block2, fusion
            cell_args.batch_size, cell_args.rica, cell_args.eval_every = batch, rica, 0
            run_cfg = run_config_from_args(cell_args)
            logging.info(f"Ablation cell block1={block1} block2={block2} fusion={fusion} B={batch} rica={rica}")
            model = run_training(run_cfg, source, target, eval_modes=()).model
            results = []
            for mode, intra in (('single', False), ('batch', True)):
                src = evaluate(model, source.samples, source.num_classes, batch, intra_batch=intra,
                               domain='source')
                tgt = (evaluate(model, target.samples, target.num_classes, batch, intra_batch=intra,
                                domain='target').miou if target is not None else float('nan'))
                results.append({'mode': mode, 'source_miou': src.miou, 'target_miou': tgt})
            scored[key] = results
        return scored[key]

    rows = []
    for block1, block2, fusion, batch in ablation_cells(kinds, batch_sizes, args.batch_size):
        for result in score_cell(block1, block2, fusion, batch, args.rica):
            rows.append({'block1': block1, 'block2': block2, 'fusion': fusion, 'batch_size': batch, **result})
    frame = pd.DataFrame(rows, columns=['block1', 'block2', 'fusion', 'batch_size', 'mode',
                                        'source_miou', 'target_miou'])
    frame.to_csv(os.path.join(args.out, config.ABLATION_FILE), index=False)

    rica_rows = []
    for block1, block2, fusion, strength in rica_cells(kinds, args.rica):
        for result in score_cell(block1, block2, fusion, args.batch_size, strength):
            rica_rows.append({'block1': block1, 'block2': block2, 'fusion': fusion, 'rica': strength, **result})
    rica_frame = pd.DataFrame(rica_rows, columns=['block1', 'block2', 'fusion', 'rica', 'mode',
                                                  'source_miou', 'target_miou'])
    rica_frame.to_csv(os.path.join(args.out, config.RICA_ABLATION_FILE), index=False)

    print("\n" + "=" * 72)
    print("ABLATION SUMMARY (gap = source - target mIoU)")
    print("=" * 72)
    for _, row in frame.iterrows():
        print(f"  {row['block1']:>5} {row['block2']:>5} {row['fusion']:>5} B={row['batch_size']:<2} "
              f"{row['mode']:<6} src {row['source_miou']:.4f} tgt {row['target_miou']:.4f} "
              f"gap {row['source_miou'] - row['target_miou']:+.4f}")
    print("-" * 72)
    for _, row in rica_frame.iterrows():
        print(f"  {row['block1']:>5} {row['block2']:>5} {row['fusion']:>5} RICA={row['rica']:<4g} "
              f"{row['mode']:<6} src {row['source_miou']:.4f} tgt {row['target_miou']:.4f} "
              f"gap {row['source_miou'] - row['target_miou']:+.4f}")
    print("=" * 72)
    return EXIT_OK


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except UsageError as e:
        print(f"ibaformer: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    setup_logging(args.log_level, args.log_file)
    try:
        return args.handler(args)
    except (ConfigError, UsageError) as e:
        logging.error(f"{args.command}: {e}")
        return EXIT_USAGE
    except IBAError as e:
        logging.error(f"{args.command}: {e}")
        return EXIT_RUNTIME
    except OSError as e:
        logging.error(f"{args.command}: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        logging.error(f"{args.command} failed: {e}")
        logging.error(traceback.format_exc())
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
