"""Paired-data training: augmentation, Adam with cosine annealing, the loop itself."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .image_io import load_image
from .losses import LossWeights, loss_hybrid
from .nn import ModelParams, VariantConfig, init_params, predict
from .tensor import MODEL_DTYPE

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm", ".pnm")
TRACE_HEADER = ("iter", "lr", "total", "mse", "msssim", "perc")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch: int = 8
    patch: int = 64
    lr_start: float = 2e-4
    lr_end: float = 1e-6
    w_mse: float = 1.0
    w_msssim: float = 0.2
    w_perc: float = 0.01
    seed: int = 0
    random_crop: bool = True
    flip: bool = True
    rotate: bool = True
    log_every: int = 10
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.lr_start > self.lr_end > 0:
            raise ValueError("learning rates must satisfy lr_start > lr_end > 0")
        if self.iterations < 0 or self.batch < 1 or self.patch < 1:
            raise ValueError("iterations must be >= 0, batch and patch >= 1")
        LossWeights(self.w_mse, self.w_msssim, self.w_perc)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_mse, self.w_msssim, self.w_perc)

    @property
    def augment(self) -> bool:
        return self.random_crop or self.flip or self.rotate

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    def to_dict(self) -> dict:
        return asdict(self)


class DatasetLayoutError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def _image_files(folder):
    return sorted(f for f in os.listdir(folder) if f.lower().endswith(IMAGE_SUFFIXES))


@dataclass
class PairedDataset:
    """(low, ground-truth) pairs stored under ``root/low`` and ``root/high`` with matching names."""

    root: str
    pairs: list[tuple[str, str]]
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_root(cls, root) -> PairedDataset:
        root = os.fspath(root)
        low_dir, high_dir = os.path.join(root, "low"), os.path.join(root, "high")
        for d in (low_dir, high_dir):
            if not os.path.isdir(d):
                raise DatasetLayoutError(f"missing directory {d}")
        lows, highs = _image_files(low_dir), _image_files(high_dir)
        for name in lows:
            if name not in highs:
                raise DatasetLayoutError(f"low/{name} has no ground-truth partner in high/")
        for name in highs:
            if name not in lows:
                raise DatasetLayoutError(f"high/{name} has no low-light partner in low/")
        if not lows:
            raise DatasetLayoutError(f"dataset {root} is empty")
        return cls(root, [(os.path.join(low_dir, n), os.path.join(high_dir, n)) for n in lows])

    @classmethod
    def from_arrays(cls, pairs) -> PairedDataset:
        """In-memory dataset from (low, gt) arrays."""
        ds = cls("<memory>", [(f"<{i}:low>", f"<{i}:high>") for i in range(len(pairs))])
        for i, (low, gt) in enumerate(pairs):
            ds._cache[i] = _checked_pair(np.asarray(low, MODEL_DTYPE), np.asarray(gt, MODEL_DTYPE), str(i))
        return ds

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i) -> tuple[np.ndarray, np.ndarray]:
        if i not in self._cache:
            low_path, high_path = self.pairs[i]
            self._cache[i] = _checked_pair(load_image(low_path), load_image(high_path), low_path)
        return self._cache[i]


def _checked_pair(low, gt, label):
    if low.shape != gt.shape:
        raise DatasetLayoutError(f"{label}: low {low.shape} and ground truth {gt.shape} differ in size")
    return low, gt


def augment_pair(low, gt, top, left, patch, hflip, vflip, rot):
    """Crop, flip and rotate both images identically (rotation by ``rot`` quarter turns)."""
    out = []
    for img in (low, gt):
        img = img[top:top + patch, left:left + patch]
        if hflip:
            img = img[:, ::-1]
        if vflip:
            img = img[::-1]
        if rot:
            img = np.rot90(img, rot, axes=(0, 1))
        out.append(img)
    return out


def sample_batch(ds: PairedDataset, cfg: TrainConfig, rng: np.random.Generator):
    lows, gts = [], []
    for _ in range(cfg.batch):
        low, gt = ds[int(rng.integers(len(ds)))]
        H, W = low.shape[:2]
        if cfg.patch > min(H, W):
            raise ValueError(f"patch {cfg.patch} larger than image {H}x{W}")
        top = left = 0
        if cfg.random_crop:
            top = int(rng.integers(H - cfg.patch + 1))
            left = int(rng.integers(W - cfg.patch + 1))
        hflip = cfg.flip and bool(rng.integers(2))
        vflip = cfg.flip and bool(rng.integers(2))
        rot = int(rng.integers(4)) if cfg.rotate else 0
        a, b = augment_pair(low, gt, top, left, cfg.patch, hflip, vflip, rot)
        lows.append(a)
        gts.append(b)
    return np.stack(lows).astype(MODEL_DTYPE), np.stack(gts).astype(MODEL_DTYPE)


def cosine_lr(it: int, cfg: TrainConfig) -> float:
    if cfg.iterations == 0:
        return cfg.lr_start
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1 + math.cos(math.pi * it / cfg.iterations))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One Adam update, in place on ``params`` and ``state``."""
    if params.keys() != grads.keys():
        missing = sorted(set(params) ^ set(grads))
        raise KeyError(f"parameter/gradient key mismatch: {missing[:3]}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def train_step(params: ModelParams, low, gt, variant: VariantConfig, weights: LossWeights, hook=None):
    """Forward + backward on one batch; returns (loss parts as floats, gradients)."""
    tape = ad.Tape()
    p = {name: tape.param(name, arr) for name, arr in params.items()}
    pred, _, _ = predict(low, p, variant)
    parts = loss_hybrid(pred, gt, weights, hook)
    grads = ad.backward(tape, parts.total) if isinstance(parts.total, ad.Value) else {
        n: np.zeros_like(a) for n, a in params.items()
    }
    values = tuple(float(ad.data_of(x)) for x in parts)
    return values, grads


@dataclass
class TrainResult:
    params: ModelParams
    trace: list[tuple]

    def trace_csv(self, every: int = 1) -> str:
        return format_trace(self.trace, every)


def format_trace(trace, every: int = 1) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    last = len(trace) - 1
    for k, row in enumerate(trace):
        if k % every == 0 or k == last:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])
    return buf.getvalue()


def train(ds: PairedDataset, variant: VariantConfig, cfg: TrainConfig, out_dir=None,
          hook=None, params: ModelParams | None = None) -> TrainResult:
    if len(ds) == 0:
        raise DatasetLayoutError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(variant, seed=cfg.seed)
    else:
        params = params.copy()
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    state = AdamState()
    trace = []
    for it in range(cfg.iterations):
        lr = cosine_lr(it, cfg)
        low, gt = sample_batch(ds, cfg, rng)
        values, grads = train_step(params, low, gt, variant, cfg.weights, hook)
        if not all(math.isfinite(v) for v in values):
            total, mse, msssim, perc = values
            raise TrainingDiverged(
                f"non-finite loss at iteration {it}: total={total} mse={mse} msssim={msssim} perc={perc}"
            )
        trace.append((it, lr) + values)
        adam_step(params.tensors, grads, state, lr)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("iter %d lr %.3g loss %.6f (mse %.6f msssim %.6f perc %.6f)", it, lr, *values)
        if out_dir is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(params, os.path.join(out_dir, "checkpoints", f"iter_{it + 1:07d}.mnx"))
    result = TrainResult(params, trace)
    if out_dir is not None:
        save_checkpoint(params, os.path.join(out_dir, "final.mnx"))
        with open(os.path.join(out_dir, "trace.csv"), "w") as fh:
            fh.write(result.trace_csv(max(1, cfg.log_every)))
    return result
