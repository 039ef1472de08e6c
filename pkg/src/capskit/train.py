"""Losses, SGD with a polynomial schedule, gradient checking and the fit loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError

log = logging.getLogger(__name__)

DICE_EPS = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    momentum: float = 0.9
    poly_power: float = 0.9
    batch_size: int = 8
    max_epochs: int = 40
    early_stop_patience: int = 10
    clip_norm: float = 0.0  # global gradient-norm cap inside fit(); 0 disables
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.early_stop_patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.clip_norm >= 0:
            raise ValueError("clip_norm must be >= 0")


def _softmax2(logits):
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True), m + np.log(e.sum(axis=1, keepdims=True))


def _check_target(logits, y):
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if logits.ndim != 4 or logits.shape[1] != 2 or y.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"logits {logits.shape} and mask {y.shape} do not agree")
    return y.astype(np.int64)


def ce_loss(logits, y) -> float:
    """Mean per-pixel cross-entropy, averaged over the batch."""
    logits = np.asarray(logits, dtype=np.float64)
    y = _check_target(logits, y)
    _, lse = _softmax2(logits)
    true = np.take_along_axis(logits, y[:, None], axis=1)
    return float(np.mean(lse - true))


def dice_loss(probs, y, eps: float = DICE_EPS) -> float:
    """Soft Dice on class-1 probabilities (or a hard 0/1 mask), averaged over the batch.

    ``probs`` may be (b, h, w) or (b, 1, h, w).
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 4:
        p = p[:, 0]
    if p.ndim == 2:
        p = p[None]
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    inter = (p * y).sum(axis=(1, 2))
    denom = p.sum(axis=(1, 2)) + y.sum(axis=(1, 2))
    return float(np.mean(1.0 - (2.0 * inter + eps) / (denom + eps)))


def loss_and_grad(logits, y, eps: float = DICE_EPS):
    """Combined CE + soft Dice loss and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    y = _check_target(logits, y)
    b, _, h, w = logits.shape
    probs, lse = _softmax2(logits)
    onehot = np.stack([1 - y, y], axis=1).astype(np.float64)
    ce = np.mean(lse - np.sum(logits * onehot, axis=1, keepdims=True))
    g_ce = (probs - onehot) / (b * h * w)

    p1 = probs[:, 1]
    yf = y.astype(np.float64)
    inter = (p1 * yf).sum(axis=(1, 2))
    denom = p1.sum(axis=(1, 2)) + yf.sum(axis=(1, 2))
    num = 2.0 * inter + eps
    dice = np.mean(1.0 - num / (denom + eps))
    # d(dice)/d(p1) per image, then through the two-class softmax
    g_p1 = -(2.0 * yf * (denom + eps)[:, None, None] - num[:, None, None]) \
        / ((denom + eps) ** 2)[:, None, None] / b
    s = probs[:, 0] * probs[:, 1]
    g_dice = np.stack([-g_p1 * s, g_p1 * s], axis=1)
    return float(ce + dice), g_ce + g_dice


def loss_delta(logits_a, logits_b, y, eps: float = DICE_EPS) -> float:
    """``loss(logits_a) - loss(logits_b)`` without subtracting two rounded totals.

    Differences are taken per pixel before any reduction, and the Dice ratio
    difference uses an exact cross-multiplied form, so the result does not
    inherit one ulp of the loss itself.  Finite differences on parameters with
    tiny gradients depend on this.
    """
    za = np.asarray(logits_a, dtype=np.float64)
    zb = np.asarray(logits_b, dtype=np.float64)
    y = _check_target(za, y)
    pa, lse_a = _softmax2(za)
    pb, lse_b = _softmax2(zb)
    dz = np.take_along_axis(za - zb, y[:, None], axis=1)
    d_ce = np.mean((lse_a - lse_b) - dz)

    yf = y.astype(np.float64)
    dp = pa[:, 1] - pb[:, 1]
    d_inter = (dp * yf).sum(axis=(1, 2))
    d_denom = dp.sum(axis=(1, 2))
    inter_b = (pb[:, 1] * yf).sum(axis=(1, 2))
    denom_b = pb[:, 1].sum(axis=(1, 2)) + yf.sum(axis=(1, 2))
    denom_a = denom_b + d_denom
    # (2Ia+e)/(Da+e) - (2Ib+e)/(Db+e) over a common denominator
    d_ratio = (2.0 * d_inter * (denom_b + eps) - (2.0 * inter_b + eps) * d_denom) \
        / ((denom_a + eps) * (denom_b + eps))
    return float(d_ce - np.mean(d_ratio))


def backward(net, x, y, caps_cfg=None):
    """Forward + loss + reverse pass; returns (loss, grads aligned with net.params())."""
    cfg = caps_cfg or net.cfg.sampler.caps
    if net.cfg.sampler.kind == "caps" and cfg.select_mode == "hard":
        raise RuntimeError("hard selection is inference-only; train in soft mode")
    logits = net.forward(x, caps_cfg)
    loss, g = loss_and_grad(logits, y)
    return loss, net.backward(g)


def poly_lr(cfg: TrainConfig, epoch: int) -> float:
    frac = min(max(epoch / cfg.max_epochs, 0.0), 1.0)
    return cfg.lr0 * (1.0 - frac) ** cfg.poly_power


class SGD:
    """Momentum SGD: ``v <- mu * v + g``, ``theta <- theta - lr * v``."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads, epoch: int) -> float:
        if len(grads) != len(self.params):
            raise ShapeError("gradient list does not match parameters")
        lr = poly_lr(self.cfg, epoch)
        for p, v, g in zip(self.params, self.velocity, grads):
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            v *= self.cfg.momentum
            v += g
            p -= lr * v
        return lr


def clip_by_norm(grads, max_norm: float):
    """Scale all gradients by one factor so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm <= max_norm:
        return grads
    return [g * (max_norm / norm) for g in grads]


def sgd_step(net, grads, epoch: int, cfg: TrainConfig, optimizer: SGD | None = None) -> SGD:
    """One update of ``net`` in place; pass the returned optimizer back in to keep momentum."""
    if optimizer is None:
        optimizer = SGD(net.params(), cfg)
    optimizer.step(grads, epoch)
    return optimizer


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: list  # (param index, flat index, analytic, numeric, rel error)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error <= tolerance


def rel_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(loss_fn, params, analytic, n_samples: int = 200, step: float = 1e-5,
               seed: int = 0, delta=None) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn()`` evaluates the loss at the current parameter values; ``params``
    are perturbed in place and restored.  When ``delta`` is given, ``loss_fn``
    may return any intermediate (e.g. logits) and ``delta(up, down)`` returns
    the loss difference between the two.
    """
    if delta is None:
        delta = lambda up, down: up - down  # noqa: E731
    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rows = []
    for flat in np.sort(picks):
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = int(flat - offsets[pi])
        view = params[pi].reshape(-1)
        orig = view[idx]
        view[idx] = orig + step
        up = loss_fn()
        view[idx] = orig - step
        down = loss_fn()
        view[idx] = orig
        num = delta(up, down) / (2 * step)
        a = float(analytic[pi].reshape(-1)[idx])
        rows.append((pi, idx, a, num, rel_error(a, num)))
    worst = max((r[4] for r in rows), default=0.0)
    return GradCheckReport(worst, rows)


def grad_check_net(net, x, y, n_samples=200, step=1e-5, seed=0, caps_cfg=None):
    _, grads = backward(net, x, y, caps_cfg)

    def logits():
        return net.forward(x, caps_cfg)

    def delta(up, down):
        return loss_delta(up, down, y)

    return grad_check(logits, net.params(), grads, n_samples, step, seed, delta)


def evaluate_loss(net, x, y, batch_size=16, caps_cfg=None) -> float:
    total = 0.0
    for s in range(0, len(x), batch_size):
        xb, yb = x[s:s + batch_size], y[s:s + batch_size]
        total += loss_and_grad(net.forward(xb, caps_cfg), yb)[0] * len(xb)
    return total / len(x)


@dataclass
class TrainResult:
    history: list  # (epoch, lr, train_loss, val_loss, wall_ms)
    best_epoch: int
    stopped_early: bool


class EarlyStopping:
    """Signals a stop once the monitored loss has not decreased for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def fit(net, x_train, y_train, x_val, y_val, cfg: TrainConfig, log_path=None) -> TrainResult:
    """Mini-batch SGD with early stopping; the best-validation weights are kept."""
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(net.params(), cfg)
    stopper = EarlyStopping(cfg.early_stop_patience)
    best = [p.copy() for p in net.params()]
    history = []
    stopped = False
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(x_train))
        running = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = backward(net, x_train[idx], y_train[idx])
            if cfg.clip_norm:
                grads = clip_by_norm(grads, cfg.clip_norm)
            lr = opt.step(grads, epoch)
            running += loss * len(idx)
        lr = poly_lr(cfg, epoch)
        val = evaluate_loss(net, x_val, y_val)
        wall = (time.perf_counter() - t0) * 1000.0
        history.append((epoch, lr, running / len(order), val, wall))
        log.info("epoch %d lr %.3g train %.4f val %.4f (%.0f ms)", epoch, lr,
                 running / len(order), val, wall)
        if not np.isfinite(val):
            raise FloatingPointError(f"validation loss diverged at epoch {epoch}")
        stop = stopper.update(val, epoch)
        if stopper.best_epoch == epoch:
            best = [p.copy() for p in net.params()]
        if stop:
            stopped = True
            break
    net.set_params(best)
    if log_path is not None:
        write_train_log(history, log_path)
    return TrainResult(history, stopper.best_epoch, stopped)


def write_train_log(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "val_loss", "wall_ms"])
        for epoch, lr, tr, va, ms in history:
            w.writerow([epoch, f"{lr:.6g}", f"{tr:.6g}", f"{va:.6g}", f"{ms:.1f}"])
