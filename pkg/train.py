"""
train.py
Loss, AdamW with the two learning-rate groups and linear warmup/decay,
mIoU evaluation and the training loop.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

import config
import tensor_core as tc
from data import Domain
from encoder import forward, predict, upsample_logits
from exceptions import ConfigError, LabelError, ScheduleError, ShapeError, TrainingError

BACKBONE = 'backbone'
CLASSIFIER = 'classifier'


@dataclass
class OptimConfig:
    lr_backbone: float = config.LR_BACKBONE
    lr_classifier: float = config.LR_CLASSIFIER
    weight_decay: float = config.WEIGHT_DECAY
    betas: tuple = config.ADAM_BETAS
    eps: float = config.ADAM_EPS
    warmup_steps: int = config.WARMUP_STEPS
    total_steps: int = config.TRAIN_STEPS

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr_backbone < 0 or self.lr_classifier < 0 or self.weight_decay < 0:
            raise ConfigError("learning rates and weight decay must be non-negative")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.total_steps < 0 or not 0 <= self.warmup_steps <= max(self.total_steps, 0):
            raise ConfigError(f"need 0 <= warmup ({self.warmup_steps}) <= total ({self.total_steps})")

    def schedule(self):
        return LRSchedule({BACKBONE: self.lr_backbone, CLASSIFIER: self.lr_classifier},
                          self.warmup_steps, self.total_steps)

    def to_dict(self):
        return {'lr_backbone': self.lr_backbone, 'lr_classifier': self.lr_classifier,
                'weight_decay': self.weight_decay, 'betas': list(self.betas), 'eps': self.eps,
                'warmup_steps': self.warmup_steps, 'total_steps': self.total_steps}

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


@dataclass(frozen=True)
class LRSchedule:
    """Linear warmup from base/W over W steps, then linear decay reaching 0 at T."""
    base_lrs: dict
    warmup_steps: int
    total_steps: int

    def factor(self, step):
        if step < 0 or step >= self.total_steps:
            raise ScheduleError(f"step {step} lies outside the schedule [0, {self.total_steps})")
        if step < self.warmup_steps:
            return (step + 1) / self.warmup_steps
        return (self.total_steps - step) / (self.total_steps - self.warmup_steps)

    def lrs(self, step):
        f = self.factor(step)
        return {group: lr * f for group, lr in self.base_lrs.items()}


@dataclass
class OptState:
    m: dict
    v: dict
    step: int = 0
    weight_decay: float = config.WEIGHT_DECAY
    betas: tuple = config.ADAM_BETAS
    eps: float = config.ADAM_EPS
    last_lrs: dict = field(default_factory=dict)


@dataclass
class EvalReport:
    per_class_iou: np.ndarray    # NaN where a class is absent from prediction and truth
    miou: float
    confusion: np.ndarray        # [C, C], rows = truth, columns = prediction
    domain: str = 'source'
    mode: str = 'batch'

    def row(self, step=None):
        row = {'step': step, 'domain': self.domain, 'mode': self.mode, 'miou': self.miou}
        row.update({f"iou_{c}": v for c, v in enumerate(self.per_class_iou)})
        return row


def param_group(name):
    """Encoder stages train at the backbone rate; fusion layers and decoder at the classifier rate."""
    return BACKBONE if name.startswith('stage') else CLASSIFIER


def init_opt_state(params, opt_cfg):
    return OptState(m={k: np.zeros(t.shape) for k, t in params.items()},
                    v={k: np.zeros(t.shape) for k, t in params.items()},
                    step=0, weight_decay=opt_cfg.weight_decay, betas=opt_cfg.betas, eps=opt_cfg.eps)


def adamw_step(params, grads, state, schedule):
    """One decoupled-weight-decay Adam update. Returns (new params, new state).

    `params` and `grads` map names to Tensors/arrays; a missing gradient counts as zero.
    """
    lrs = schedule.lrs(state.step)
    beta1, beta2 = state.betas
    t = state.step + 1
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeError(f"adamw_step: gradient/moment shape mismatch for {name}", g.shape, p.shape)
        lr = lrs[param_group(name)]
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        value = p.data * (1.0 - lr * state.weight_decay) - lr * update
        new_params[name] = tc.Tensor(value, name=name)
        new_m[name], new_v[name] = m, v
    new_state = OptState(new_m, new_v, t, state.weight_decay, state.betas, state.eps, lrs)
    return new_params, new_state


def cross_entropy_loss(logits, labels):
    """Mean per-pixel cross-entropy of [B,C,H,W] logits against [B,H,W] class ids."""
    labels = np.asarray(labels)
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError("cross_entropy_loss: labels must be [B,H,W] matching logits [B,C,H,W]",
                         logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise LabelError(f"label ids must lie in [0, {logits.shape[1]}), found {labels.min()}..{labels.max()}")
    return tc.cross_entropy(logits, labels, axis=1)


def segmentation_loss(model, images, labels, intra_batch=True):
    logits = forward(model, images, intra_batch=intra_batch)
    full = upsample_logits(logits, images.shape[2], images.shape[3])
    return cross_entropy_loss(full, labels)


def _report(confusion, domain, mode):
    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1) + confusion.sum(axis=0)
    union = support - tp
    present = support > 0
    iou = np.full(confusion.shape[0], np.nan)
    iou[present] = tp[present] / union[present]
    miou = float(np.mean(iou[present])) if present.any() else float('nan')
    return EvalReport(iou, miou, confusion, domain, mode)


def confusion_for(pred, truth, num_classes):
    return confusion_matrix(np.asarray(truth).ravel(), np.asarray(pred).ravel(),
                            labels=np.arange(num_classes)).astype(np.int64)


def compute_miou(pred, truth, num_classes, domain='source', mode='batch'):
    """IoU_c = TP/(TP+FP+FN); classes absent from both prediction and truth are left out of the mean."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError("compute_miou: prediction and truth shapes differ", pred.shape, truth.shape)
    return _report(confusion_for(pred, truth, num_classes), domain, mode)


def compute_miou_setwise(pred, truth, num_classes):
    """Per-class mask intersection/union; independent of the confusion-matrix path."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    ious = []
    for c in range(num_classes):
        inter = np.logical_and(pred == c, truth == c).sum()
        union = np.logical_or(pred == c, truth == c).sum()
        if union:
            ious.append(inter / union)
    return float(np.mean(ious)) if ious else float('nan')


def evaluate(model, samples, num_classes, batch_size=config.BATCH_SIZE, intra_batch=True,
             domain='source', workers=1):
    """Scores samples in fixed-order batches; confusion matrices are summed in batch order."""
    chunks = [samples[i:i + batch_size] for i in range(0, len(samples), batch_size)]

    def score(chunk):
        images = tc.Tensor(np.stack([s.image.data for s in chunk]))
        truth = np.stack([s.labels for s in chunk])
        return confusion_for(predict(model, images, intra_batch=intra_batch), truth, num_classes)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(score, chunks))
    else:
        parts = [score(chunk) for chunk in chunks]
    total = np.zeros((num_classes, num_classes), dtype=np.int64)
    for part in parts:
        total += part
    mode = 'batch' if intra_batch else 'single'
    report = _report(total, Domain.parse(domain).name.lower(), mode)
    logging.info(f"Eval {report.domain}/{mode}: mIoU {report.miou:.4f} over {len(samples)} scenes")
    return report


@dataclass
class TrainResult:
    model: object
    log: pd.DataFrame
    evals: pd.DataFrame
    state: OptState = None


def train_loop(model, loader, opt_cfg, steps=None, eval_fn=None, eval_every=config.EVAL_EVERY,
               log_every=config.LOG_EVERY):
    """Runs `steps` AdamW updates with intra-batch semantics switched on.

    `eval_fn(model, step)` returns a list of EvalReports; it runs every
    `eval_every` steps and after the last step.
    """
    steps = opt_cfg.total_steps if steps is None else steps
    schedule = opt_cfg.schedule()
    state = init_opt_state(model.params, opt_cfg)
    rows, eval_rows = [], []
    for step, (images, labels) in enumerate(loader.batches(steps)):
        leaves = {name: tc.Tensor(t.data, requires_grad=True, name=name) for name, t in model.params.items()}
        traced = model.with_params(leaves)
        with tc.trace():
            loss = segmentation_loss(traced, images, labels, intra_batch=True)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError("non-finite loss", step)
        grads = tc.backward(loss)
        named = {name: grads.get(leaf) for name, leaf in leaves.items()}
        params, state = adamw_step(model.params, named, state, schedule)
        model = model.with_params(params)
        rows.append({'step': step, 'loss': value, 'lr_backbone': state.last_lrs[BACKBONE],
                     'lr_classifier': state.last_lrs[CLASSIFIER]})
        if log_every and (step % log_every == 0 or step == steps - 1):
            logging.info(f"step {step}/{steps} loss {value:.4f} lr {state.last_lrs[BACKBONE]:.2e}/"
                         f"{state.last_lrs[CLASSIFIER]:.2e}")
        if eval_fn is not None and ((eval_every and (step + 1) % eval_every == 0) or step == steps - 1):
            eval_rows += [r.row(step + 1) for r in eval_fn(model, step + 1)]
    log = pd.DataFrame(rows, columns=['step', 'loss', 'lr_backbone', 'lr_classifier'])
    evals = pd.DataFrame(eval_rows)
    return TrainResult(model, log, evals, state)


def loss_trend_ok(log, window=100):
    """Mean loss of the last `window` steps is below the mean of the first `window`."""
    losses = log['loss'].to_numpy()
    window = min(window, len(losses) // 2)
    if window == 0:
        return False
    return bool(losses[-window:].mean() < losses[:window].mean())
