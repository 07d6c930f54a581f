"""Training, evaluation and plug-location ablation."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .errors import ConfigError, NumericError
from .losses import downsample_labels, total_loss
from .metrics import (DEFAULT_SPACING, MetricsReport, dsc, evaluate_volume, fmt, precision)
from .morphology import binarize, erode
from .segnet import Network
from .synthdata import Sample, augment
from .tensor import GradTape, Tensor

log = logging.getLogger(__name__)


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.data
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.grad = None


def split(samples: list, val_fraction: float):
    """Last ``val_fraction`` of samples (by index, at least one) are validation."""
    n = len(samples)
    n_val = min(n - 1, max(1, int(round(n * val_fraction))))
    if n_val < 1:
        raise ConfigError("need at least two samples for a train/validation split")
    return samples[: n - n_val], samples[n - n_val:]


def folds(samples: list, k: int):
    """Contiguous k-fold partition: yields (train, validation) pairs."""
    bounds = np.linspace(0, len(samples), k + 1).astype(int)
    for i in range(k):
        lo, hi = bounds[i], bounds[i + 1]
        yield samples[:lo] + samples[hi:], samples[lo:hi]


def _batch(samples):
    x = np.stack([s.image for s in samples])[:, None]
    y = np.stack([s.label for s in samples]).astype(np.int64)
    return Tensor(x), y


def predict(net: Network, samples, use_pcam: bool = True, batch_size: int = 4):
    """Final foreground masks and (level, side probabilities) per sample, no tape."""
    preds, sides = [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x, _ = _batch(chunk)
        out = net.forward(x, use_pcam=use_pcam)
        arg = out.probs.data.argmax(axis=1)
        for b in range(len(chunk)):
            preds.append((arg[b] > 0).astype(np.uint8))
            if out.side_outputs:
                level, sp = out.side_outputs[0]
                sides.append((level, sp.data[b]))
            else:
                sides.append((0, out.probs.data[b]))
    return preds, sides


def validation_dsc(net, samples, use_pcam=True) -> float:
    preds, _ = predict(net, samples, use_pcam)
    return float(np.mean([dsc(p, s.label > 0) for p, s in zip(preds, samples)]))


def side_precisions(side_probs, gt_fg, element, iterations: int = 1, threshold: float = 0.5) -> dict:
    """Raw and eroded side-output precision, foreground and background."""
    p_fg = side_probs[1] if side_probs.shape[0] == 2 else np.clip(1.0 - side_probs[0], 0.0, 1.0)
    fg = binarize(p_fg, threshold)
    bg = (1 - fg).astype(np.uint8)
    fg_e, bg_e = fg, bg
    for _ in range(iterations):
        fg_e, bg_e = erode(fg_e, element), erode(bg_e, element)
    gt_bg = ~gt_fg
    return {
        "precision_fg": precision(fg, gt_fg),
        "precision_bg": precision(bg, gt_bg),
        "precision_fg_eroded": precision(fg_e, gt_fg),
        "precision_bg_eroded": precision(bg_e, gt_bg),
    }


def evaluate(net: Network, samples, use_pcam: bool = True, spacing=DEFAULT_SPACING) -> MetricsReport:
    cfg = net.config
    preds, sides = predict(net, samples, use_pcam)
    report = MetricsReport()
    for i, (pred, (level, sp), s) in enumerate(zip(preds, sides, samples)):
        gt = s.label > 0
        row = {"id": i}
        row.update(evaluate_volume(pred, gt, spacing))
        gt_side = downsample_labels(s.label, 2 ** level) > 0
        row.update(side_precisions(sp, gt_side, cfg.element, cfg.erosion_iterations, cfg.threshold))
        report.add(row)
    return report


@dataclass
class TrainResult:
    network: Network
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_dsc: float = float("nan")
    stopped_early: bool = False

    def history_csv(self) -> str:
        cols = ("epoch", "lr", "train_loss", "train_dice", "train_ce", "val_dsc", "pcam_skipped")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for row in self.history:
            w.writerow([row["epoch"]] + [fmt(row[c]) for c in cols[1:-1]] + [row["pcam_skipped"]])
        return buf.getvalue()


def train(cfg: RunConfig, train_set: list[Sample], val_set: list[Sample], use_pcam: bool = True,
          progress=None) -> TrainResult:
    """Adam with per-epoch lr decay and early stopping on validation DSC.

    The returned network carries the parameters of the best validation epoch
    (or the initialisation when ``epochs == 0``).
    """
    tc = cfg.training
    net = Network(cfg.network)
    opt = Adam(net.parameters(), cfg.optimizer.beta1, cfg.optimizer.beta2, cfg.optimizer.eps)
    result = TrainResult(net)
    best_state = [p.data.copy() for p in net.parameters().values()]
    best, stale = -math.inf, 0
    for epoch in range(tc.epochs):
        t0 = time.perf_counter()
        lr = tc.learning_rate * tc.lr_decay ** epoch
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        sums = np.zeros(3)
        skipped = 0
        for start in range(0, len(order), tc.batch_size):
            idx = order[start:start + tc.batch_size]
            batch = [augment(train_set[i], [cfg.seed, epoch, int(i)], tc.augment_noise)
                     if tc.augment else train_set[i] for i in idx]
            x, y = _batch(batch)
            with GradTape() as tape:
                out = net.forward(x, use_pcam=use_pcam)
                rep = total_loss(out, y, tc.side_weight)
            loss = rep.total.item()
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            tape.backward(rep.total)
            opt.step(lr)
            sums += np.array([loss, rep.dice.item(), rep.cross_entropy.item()]) * len(idx)
            skipped += out.pcam_status.count("skipped")
        sums /= max(1, len(order))
        val = validation_dsc(net, val_set, use_pcam)
        row = {"epoch": epoch, "lr": lr, "train_loss": sums[0], "train_dice": sums[1],
               "train_ce": sums[2], "val_dsc": val, "pcam_skipped": skipped}
        result.history.append(row)
        log.info("epoch %d loss %.4f val_dsc %.4f (%.1fs)", epoch, sums[0], val,
                 time.perf_counter() - t0)
        if progress:
            progress(row)
        if val > best + tc.early_stop.min_delta:
            best, stale = val, 0
            result.best_epoch, result.best_val_dsc = epoch, val
            best_state = [p.data.copy() for p in net.parameters().values()]
        else:
            stale += 1
            if stale >= tc.early_stop.patience:
                result.stopped_early = True
                break
    for p, saved in zip(net.parameters().values(), best_state):
        p.data = saved
    return result


ABLATION_COLUMNS = ("dsc", "voe", "assd", "betti0_error")


def ablate(cfg: RunConfig, train_set, val_set, progress=None) -> list[dict]:
    """Train one model per plug location (none, 1..stages) and compare on validation."""
    rows = []
    for loc in [None] + list(range(1, cfg.network.stages + 1)):
        run = cfg.replace(**{"network.pcam_location": loc})
        res = train(run, train_set, val_set, use_pcam=loc is not None, progress=progress)
        agg = evaluate(res.network, val_set, use_pcam=loc is not None).aggregate()
        row = {"pcam_location": "none" if loc is None else loc}
        for k in ABLATION_COLUMNS:
            row[k] = agg[k]["mean"]
            row[f"{k}_std"] = agg[k]["std"]
        row["best_epoch"] = res.best_epoch
        rows.append(row)
    return rows


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["pcam_location"] + [c for k in ABLATION_COLUMNS for c in (k, f"{k}_std")]
    w.writerow(cols)
    for r in rows:
        w.writerow([r["pcam_location"]] + [fmt(r[c]) for c in cols[1:]])
    return buf.getvalue()
