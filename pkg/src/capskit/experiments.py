"""Experiment drivers behind the ``capskit`` commands.

Each driver returns a :class:`RunRecord`; nothing here writes files except the
optional checkpoint directory, so the CLI decides where results land.
"""

from __future__ import annotations

import functools
import itertools
import logging
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import layers as L
from .config import ExperimentConfig
from .datagen import RawSpec, gen_raw, load_dataset, make_dataset, stack_samples
from .metrics import EquivReport, SubsetGroup, equiv_report
from .tensor import ShiftSpec, shift2d
from .train import fit
from .unet import NetConfig, SamplerKind, build_network, predict_mask, save_checkpoint

log = logging.getLogger(__name__)

MAXPOOL_DEMO_SIGNALS = (([1, 2, 3, 4, 3, 2], [2, 4, 3]), ([2, 3, 4, 3, 2, 5], [3, 4, 5]))


@dataclass
class RunRecord:
    command: str
    config: dict
    rows: list = field(default_factory=list)  # one dict per (method, set, seed)
    checks: list = field(default_factory=list)  # verify: name, passed, expected, detail
    timings: dict = field(default_factory=dict)
    stamp: dict = field(default_factory=dict)

    @property
    def failed(self) -> list:
        return [c for c in self.checks if c["passed"] != c["expected"]]

    def to_dict(self) -> dict:
        return {"command": self.command, "config": self.config, "rows": self.rows,
                "checks": self.checks, "timings": self.timings, "stamp": self.stamp}

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        return cls(d["command"], d.get("config", {}), d.get("rows", []), d.get("checks", []),
                   d.get("timings", {}), d.get("stamp", {}))


def build_stamp() -> dict:
    stamp = {"version": __version__, "numpy": np.__version__}
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        stamp["git"] = out.stdout.strip() if out.returncode == 0 else "unknown"
    except (OSError, subprocess.SubprocessError):
        stamp["git"] = "unknown"
    return stamp


def worker_count() -> int:
    raw = os.environ.get("CAPSKIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"CAPSKIT_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _pool_map(fn, jobs):
    n = min(worker_count(), len(jobs))
    if n <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        # map keeps submission order, so results stay deterministic
        return list(pool.map(fn, *zip(*jobs)))


# -- verify ------------------------------------------------------------------

def _check(record, name, passed, detail="", expected=True):
    record.checks.append({"name": name, "passed": bool(passed), "expected": bool(expected),
                          "detail": detail})


def maxpool_demo() -> list:
    """MaxPool over the two 1-D signals laid out as single-row images."""
    out = []
    for signal, want in MAXPOOL_DEMO_SIGNALS:
        row = np.array([signal, signal], dtype=np.float64)[None, None]
        got = L.maxpool_down(row)[0, 0, 0].astype(int).tolist()
        out.append((signal, got, want))
    return out


def parity_shifts(n: int, size: int, rng) -> list:
    """``n`` random shifts cycling through the four (row, col) parity patterns."""
    shifts = []
    for k in range(n):
        pr, pc = divmod(k % 4, 2)
        sx = 2 * int(rng.integers(-size // 2, size // 2)) + pr
        sy = 2 * int(rng.integers(-size // 2, size // 2)) + pc
        shifts.append((sx, sy))
    return shifts


def max_shift_error(net, x, shift, caps_cfg=None):
    base = net.forward(x, caps_cfg)
    spec = ShiftSpec(*shift)
    moved = net.forward(shift2d(x, spec), caps_cfg)
    want = shift2d(base, spec)
    same_mask = np.array_equal(predict_mask(moved), predict_mask(want))
    return float(np.abs(moved - want).max()), same_mask


def expected_gammas(gammas, shifted_gammas, shift):
    """Check every recorded index against the shift each level actually sees.

    A circular shift ``s`` at a level whose selected phase is ``m`` must select
    ``(m + s) mod 2`` in the shifted run; the next level then sees the shift
    ``(s + m - m_shifted) / 2``. Returns the first mismatch or None.
    """
    sx, sy = shift
    for level, (g, gs) in enumerate(zip(gammas, shifted_gammas)):
        m, n = np.asarray(g) >> 1, np.asarray(g) & 1
        ms, ns = np.asarray(gs) >> 1, np.asarray(gs) & 1
        if not (np.all(ms == (m + sx) % 2) and np.all(ns == (n + sy) % 2)):
            return level
        # the induced shift is per batch element since each picks its own phase
        sx = (sx + m - ms) // 2
        sy = (sy + n - ns) // 2
    return None


def common_shift_deviation(net, image, margin: int, caps_cfg=None) -> float:
    """Relative interior logit deviation under one-pixel common shifts.

    ``image`` is one pixel larger than the crop on each axis. The crop at
    (0, 0) is compared with the crops at (0, 1) and (1, 0) on the interior
    pixels both windows see; the mean absolute difference is divided by the
    spread of the reference logits so different nets are comparable.
    """
    s = image.shape[0] - 1
    ref = net.forward(image[None, None, :s, :s], caps_cfg)[0]
    inner = ref[:, margin:s - margin, margin:s - margin]
    scale = float(inner.std()) + 1e-12
    devs = []
    for dr, dc in ((0, 1), (1, 0)):
        out = net.forward(image[None, None, dr:dr + s, dc:dc + s], caps_cfg)[0]
        moved = out[:, margin - dr:s - margin - dr, margin - dc:s - margin - dc]
        devs.append(float(np.abs(moved - inner).mean()) / scale)
    return float(np.mean(devs))


def cmd_verify(cfg: ExperimentConfig) -> RunRecord:
    t0 = time.perf_counter()
    record = RunRecord("verify", cfg.to_dict(), stamp=build_stamp())
    v = cfg.verify
    seed = int(cfg.run.seeds[0])

    for signal, got, want in maxpool_demo():
        _check(record, f"maxpool demo {signal}", got == want, f"got {got}, want {want}")

    rng = np.random.default_rng(seed)
    shifts = parity_shifts(v.n_shifts, v.size, rng)
    x = rng.random((1, 1, v.size, v.size))
    hard = replace(cfg.caps, beta=0.0, select_mode="hard", use_ca=v.use_ca)
    for lpf in (False, True):
        caps = replace(hard, use_lpf=lpf)
        net = build_network(cfg.net_config("caps", caps), seed)
        worst, masks_ok = 0.0, True
        for s in shifts:
            err, same = max_shift_error(net, x, s)
            worst = max(worst, err)
            masks_ok &= same
        _check(record, f"circular equivalence caps lpf={int(lpf)}", worst <= 1e-9 and masks_ok,
               f"max |err| {worst:.3g} over {len(shifts)} shifts, masks equal: {masks_ok}")

        bad_level = None
        for s in shifts:
            net.forward(x)
            g0 = [g.copy() for g in net.gamma_log]
            net.forward(shift2d(x, ShiftSpec(*s)))
            bad_level = expected_gammas(g0, net.gamma_log, s)
            if bad_level is not None:
                break
        _check(record, f"gamma parity relation lpf={int(lpf)}", bad_level is None,
               "all levels consistent" if bad_level is None else f"mismatch at level {bad_level}")

    mp = build_network(cfg.net_config("maxpool"), seed)
    worst = max(max_shift_error(mp, x, s)[0] for s in shifts)
    # baseline non-equivalence is the expected outcome, not an error
    _check(record, "circular equivalence maxpool", worst <= 1e-9,
           f"max |err| {worst:.3g}", expected=False)

    size = cfg.protocol.crop_size
    spec = RawSpec(**{**cfg.raw.__dict__, "n_defects": (1, 1)})
    caps_dev, mp_dev = [], []
    for k in range(v.n_seeds):
        raw = gen_raw(10_000 + k, spec)
        r0 = (raw.image.shape[0] - size - 1) // 2
        image = raw.image[r0:r0 + size + 1, r0:r0 + size + 1]
        caps_dev.append(common_shift_deviation(
            build_network(cfg.net_config("caps"), k), image, v.interior_margin))
        mp_dev.append(common_shift_deviation(
            build_network(cfg.net_config("maxpool"), k), image, v.interior_margin))
    med_c, med_m = float(np.median(caps_dev)), float(np.median(mp_dev))
    record.timings["common_shift"] = {"caps": caps_dev, "maxpool": mp_dev}
    _check(record, "common-shift interior deviation caps < maxpool", med_c < med_m,
           f"median caps {med_c:.4g} vs maxpool {med_m:.4g} over {v.n_seeds} seeds")
    record.timings["total_s"] = time.perf_counter() - t0
    return record


# -- training and evaluation ---------------------------------------------------

@functools.lru_cache(maxsize=4)
def _dataset(cfg: ExperimentConfig, seed: int):
    if cfg.run.data:
        path = Path(cfg.run.data)
        if not (path / "manifest.csv").exists():
            raise FileNotFoundError(f"dataset directory {path} has no manifest.csv")
        return load_dataset(path)
    return make_dataset(cfg.run.n_raw, cfg.run.n_test_raw, seed, cfg.protocol, cfg.raw)


def evaluate(net, groups, caps_cfg=None, batch: int = 16) -> EquivReport:
    subsets = []
    for crops in groups:
        x, y = stack_samples(crops)
        preds = np.concatenate([predict_mask(net.forward(x[i:i + batch], caps_cfg))
                                for i in range(0, len(x), batch)])
        subsets.append(SubsetGroup(crops[0].raw_id,
                                   [(preds[i], y[i], crops[i].offset) for i in range(len(crops))]))
    return equiv_report(subsets)


def forward_ms(net, size: int, repeats: int = 3) -> float:
    x = np.zeros((1, 1, size, size))
    net.forward(x)
    t0 = time.perf_counter()
    for _ in range(repeats):
        net.forward(x)
    return (time.perf_counter() - t0) * 1000.0 / repeats


def _row(method, test_set, rep: EquivReport, seed, **extra) -> dict:
    return {"method": method, "set": test_set, **rep.row(), "seed": int(seed), **extra}


def train_and_eval(cfg: ExperimentConfig, net_cfg: NetConfig, seed: int, method: str,
                   sweep_temps=(), sweep_betas=()):
    """Train one network; return (rows, timings, params)."""
    ds = _dataset(cfg, seed)
    xt, yt = stack_samples(ds.train)
    xv, yv = stack_samples(ds.val)
    net = build_network(net_cfg, seed)
    t0 = time.perf_counter()
    result = fit(net, xt, yt, xv, yv, cfg.train_config(seed))
    train_s = time.perf_counter() - t0
    sets = {"mdt": ds.mdt, "bdt": ds.bdt}
    rows = []
    for name in cfg.run.sets:
        rows.append(_row(method, name, evaluate(net, sets[name]), seed))
    caps = net_cfg.sampler.caps
    if net_cfg.sampler.kind == "caps":
        for t in sweep_temps:
            over = replace(caps, temperature=float(t))
            for name in cfg.run.sets:
                rows.append(_row(f"{method}@T={t:g}", name, evaluate(net, sets[name], over), seed,
                                 sweep="T", x=float(t), default=float(t) == caps.temperature))
        for b in sweep_betas:
            over = replace(caps, beta=float(b))
            for name in cfg.run.sets:
                rows.append(_row(f"{method}@beta={b:g}", name, evaluate(net, sets[name], over),
                                 seed, sweep="beta", x=float(b), default=float(b) == caps.beta))
    timings = {"train_s": train_s, "epochs": len(result.history), "best_epoch": result.best_epoch,
               "forward_ms": forward_ms(net, cfg.protocol.crop_size)}
    return rows, timings, [p.copy() for p in net.params()]


def _save_params(path, net_cfg, seed, params):
    net = build_network(net_cfg, seed)
    net.set_params(params)
    save_checkpoint(net, path)


def _run_jobs(cfg, jobs, record, ckpt_dir):
    results = _pool_map(train_and_eval, [(cfg, *j) for j in jobs])
    for (net_cfg, seed, method, *_), (rows, timings, params) in zip(jobs, results):
        record.rows.extend(rows)
        record.timings[f"{method}/seed{seed}"] = timings
        if ckpt_dir is not None:
            Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
            _save_params(Path(ckpt_dir) / f"{method}_seed{seed}.ckpt", net_cfg, seed, params)


def cmd_train_eval(cfg: ExperimentConfig, ckpt_dir=None) -> RunRecord:
    t0 = time.perf_counter()
    record = RunRecord("train", cfg.to_dict(), stamp=build_stamp())
    jobs = []
    for seed in cfg.run.seeds:
        for kind in cfg.run.samplers:
            temps = cfg.run.eval_temperatures if kind == "caps" else ()
            jobs.append((cfg.net_config(kind), int(seed), kind, temps))
    _run_jobs(cfg, jobs, record, ckpt_dir)
    record.timings["total_s"] = time.perf_counter() - t0
    return record


def ablation_cells(cfg: ExperimentConfig) -> list:
    """(method label, CapsConfig) for the 2x2x2 component grid."""
    cells = []
    for aw, ca, lpf in itertools.product((True, False), repeat=3):
        label = f"caps[aw={int(aw)},ca={int(ca)},lpf={int(lpf)}]"
        cells.append((label, replace(cfg.caps, use_aw=aw, use_ca=ca, use_lpf=lpf)))
    return cells


def cmd_ablate(cfg: ExperimentConfig, ckpt_dir=None) -> RunRecord:
    """Component grid (one trained net per cell) plus beta and T sweeps.

    The sweeps vary the setting at inference time on the default-config model,
    so every sweep point shares one set of trained weights.
    """
    t0 = time.perf_counter()
    record = RunRecord("ablate", cfg.to_dict(), stamp=build_stamp())
    jobs = []
    for seed in cfg.run.seeds:
        jobs.append((cfg.net_config("caps"), int(seed), "caps", cfg.ablate.temperatures,
                     cfg.ablate.betas))
        if cfg.ablate.grid:
            for label, caps in ablation_cells(cfg):
                if caps == cfg.caps:
                    continue  # the default cell is the model trained above
                jobs.append((cfg.net_config("caps", caps), int(seed), label, ()))
    _run_jobs(cfg, jobs, record, ckpt_dir)
    default = ablation_cells(cfg)
    label = next((lab for lab, c in default if c == cfg.caps), None)
    if label is not None:
        extra = [dict(r, method=label) for r in record.rows if r["method"] == "caps"]
        record.rows.extend(extra)
    record.timings["total_s"] = time.perf_counter() - t0
    return record


def median_by(rows, method, test_set, key="mvda") -> float:
    vals = [r[key] for r in rows if r["method"] == method and r["set"] == test_set]
    if not vals:
        raise KeyError(f"no rows for {method}/{test_set}")
    return float(np.median(vals))
