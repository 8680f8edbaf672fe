"""Adam + triangular2 cyclic LR training, snapshot pool, weight-space
ensembling and k-fold orchestration."""
import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import AugmentPolicy, augment, build_batch, depth_range, fold_members, kfold_split
from .errors import ConfigurationError, DimensionError, NumericError, SaltSegError
from .losses import combined_loss, iou
from .model import build_model
from .rng import make_rng
from .serialization import save_checkpoint, write_weights


@dataclass
class TrainConfig:
    batch_size: int = 20
    phase1_epochs: int = 80
    early_stop_patience: int = 50
    max_epochs: int = None          # None: stop only on patience
    loss_weights_phase2: tuple = (0.1, 0.9)
    base_lr: float = 1e-4
    max_lr: float = 1e-2
    cycle_epochs: int = 8           # full triangle period
    folds: int = 5
    snapshots_kept: int = 10
    ensemble_alpha: float = 0.5
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        self.loss_weights_phase2 = tuple(float(w) for w in self.loss_weights_phase2)
        self.adam_betas = tuple(float(b) for b in self.adam_betas)

    def validate(self):
        def bad(name, msg):
            raise ConfigurationError(f"train.{name} = {getattr(self, name)!r}: {msg}")

        if self.batch_size < 1:
            bad("batch_size", "must be >= 1")
        if self.phase1_epochs < 0:
            bad("phase1_epochs", "must be >= 0")
        if self.early_stop_patience < 1:
            bad("early_stop_patience", "must be >= 1")
        if self.max_epochs is not None and self.max_epochs < 1:
            bad("max_epochs", "must be >= 1 or unset")
        if len(self.loss_weights_phase2) != 2 or min(self.loss_weights_phase2) < 0:
            bad("loss_weights_phase2", "needs two non-negative weights")
        if not 0 < self.base_lr <= self.max_lr:
            bad("base_lr", f"need 0 < base_lr <= max_lr ({self.max_lr})")
        if self.cycle_epochs < 1:
            bad("cycle_epochs", "must be >= 1")
        if self.folds < 2:
            bad("folds", "must be >= 2")
        if self.snapshots_kept < 1:
            bad("snapshots_kept", "must be >= 1")
        if not 0 < self.ensemble_alpha < 1:
            bad("ensemble_alpha", "must lie in (0, 1)")
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            bad("adam_betas", "each beta must lie in [0, 1)")
        if self.adam_eps <= 0:
            bad("adam_eps", "must be > 0")
        self.augment.validate()
        return self

    def to_dict(self):
        d = asdict(self)
        d["loss_weights_phase2"] = list(self.loss_weights_phase2)
        d["adam_betas"] = list(self.adam_betas)
        return d


# -- schedule & optimizer ----------------------------------------------------------

def cyclic_lr(iteration, base_lr, max_lr, step_size_iters):
    """triangular2: triangle wave of period 2*step whose amplitude halves every cycle."""
    if step_size_iters < 1:
        raise ValueError(f"step_size_iters must be >= 1, got {step_size_iters}")
    cycle = math.floor(1 + iteration / (2 * step_size_iters))
    x = abs(iteration / step_size_iters - 2 * cycle + 1)
    return base_lr + (max_lr - base_lr) * max(0.0, 1.0 - x) / 2 ** (cycle - 1)


@dataclass
class AdamState:
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """In-place bias-corrected Adam on a name -> Tensor map. Missing grads count as zero."""
    state.t += 1
    b1, b2 = state.betas
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise DimensionError(f"{name}: grad shape {g.shape} vs param {p.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.data.shape:
            raise DimensionError(f"{name}: moment shape {m.shape} vs param {p.data.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- snapshots & ensembling ------------------------------------------------------------

@dataclass
class Snapshot:
    weights: dict
    val_iou: float
    epoch: int

    def key(self):
        return self.val_iou, self.epoch


def update_snapshots(pool, candidate, keep):
    """Top-`keep` pool sorted ascending by (val_iou, epoch). A candidate that
    ties the current minimum replaces it, since later epochs win ties."""
    if keep < 1:
        raise ValueError("keep must be >= 1")
    pool = list(pool)
    if len(pool) >= keep and candidate.key() <= pool[0].key():
        return pool
    pool.append(candidate)
    pool.sort(key=Snapshot.key)
    return pool[-keep:]


def ensemble_coefficients(m, alpha):
    """Weights from best to worst snapshot."""
    if m < 1:
        raise ValueError("need at least one snapshot")
    out = [alpha * (1 - alpha) ** k for k in range(m - 1)]
    out.append((1 - alpha) ** (m - 1))
    return out


def ensemble_weights(pool, alpha):
    """Exponentially weighted average, best snapshot heaviest. Folded as a
    running lerp from worst to best, which expands to ensemble_coefficients and
    leaves identical inputs bitwise unchanged."""
    if not pool:
        raise ValueError("ensemble_weights needs a non-empty pool")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    out = {k: np.array(v, dtype=np.float64, copy=True) for k, v in pool[0].weights.items()}
    for snap in pool[1:]:
        for k, acc in out.items():
            acc += alpha * (snap.weights[k] - acc)
    return out


def recompute_bn_stats(model, samples, d_min, d_max, batch_size):
    """Reset running stats and re-estimate them as an equal-weight average over one pass."""
    if not model.buffers or not samples:
        return
    for k, buf in model.buffers.items():
        buf[...] = 0.0 if k.endswith("running_mean") else 1.0
    with T.no_grad():
        for b, start in enumerate(range(0, len(samples), batch_size)):
            model.bn_momentum = 1.0 / (b + 1)
            model(build_batch(samples[start:start + batch_size], d_min, d_max, model.config), training=True)
    del model.bn_momentum


# -- training ----------------------------------------------------------------------------

@dataclass
class History:
    rows: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)

    FIELDS = ("epoch", "phase", "lr", "train_loss", "val_iou", "snapshotted")

    def to_csv(self, path, fold=None):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            write_history_rows(fh, [(fold, self)] if fold is not None else [(None, self)])


def write_history_rows(fh, histories):
    wr = csv.writer(fh, lineterminator="\n")
    with_fold = any(f is not None for f, _ in histories)
    wr.writerow((["fold"] if with_fold else []) + list(History.FIELDS))
    for fold, h in histories:
        for r in h.rows:
            vals = [r["epoch"], r["phase"], repr(r["lr"]), repr(r["train_loss"]), repr(r["val_iou"]),
                    int(r["snapshotted"])]
            wr.writerow(([fold] if with_fold else []) + vals)


def _crop_target(samples):
    h, w = samples[0].image.shape
    if any(s.image.shape != (h, w) for s in samples):
        raise DimensionError("all samples in a batch must share one native size")
    return h, w


def batch_loss(model, batch, d_min, d_max, weights, training=True):
    """Loss on the native region only; reflected border pixels are cropped away."""
    h, w = _crop_target(batch)
    size = model.config.input_size
    top, left = (size - h) // 2, (size - w) // 2
    logits = model(build_batch(batch, d_min, d_max, model.config), training=training)
    logits = T.crop(logits, top, left, h, w)
    y = np.stack([s.mask for s in batch]).astype(np.float64)[:, None]
    return combined_loss(logits, y, *weights)


def predict_logits(model, samples, d_min, d_max, batch_size):
    """Eval-mode logits cropped to native size, shape N×H×W."""
    out = []
    with T.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            h, w = _crop_target(chunk)
            size = model.config.input_size
            top, left = (size - h) // 2, (size - w) // 2
            z = model(build_batch(chunk, d_min, d_max, model.config), training=False).data[:, 0]
            out.append(z[:, top:top + h, left:left + w])
    return np.concatenate(out)


def mean_iou(model, samples, d_min, d_max, batch_size):
    """Mean IoU at sigmoid > 0.5 (logit > 0)."""
    logits = predict_logits(model, samples, d_min, d_max, batch_size)
    return float(np.mean([iou(z > 0, s.mask) for z, s in zip(logits, samples)]))


def train_fold(model, train, val, config, depth_bounds=None, on_epoch=None):
    """Returns (model holding the best-val weights, snapshot pool, History)."""
    config.validate()
    if not train or not val:
        raise ValueError("train and val sets must be non-empty")
    if any(s.mask is None for s in train + val):
        raise ValueError("training and validation samples need masks")
    d_min, d_max = depth_bounds or depth_range(train)
    bs = config.batch_size
    iters_per_epoch = math.ceil(len(train) / bs)
    step = max(1, round(config.cycle_epochs * iters_per_epoch / 2))
    state = AdamState(betas=config.adam_betas, eps=config.adam_eps)
    hist = History()
    pool = []
    best_iou, best_weights, since_best = -1.0, model.state_dict(), 0
    it = 0
    epoch = 0
    while config.max_epochs is None or epoch < config.max_epochs:
        phase = 1 if epoch < config.phase1_epochs else 2
        weights = (1.0, 0.0) if phase == 1 else config.loss_weights_phase2
        order = make_rng(config.seed, "shuffle", epoch).permutation(len(train))
        epoch_lr = None
        total, seen = 0.0, 0
        for start in range(0, len(train), bs):
            idx = order[start:start + bs]
            batch = [augment(train[i], (config.seed, epoch, int(i)), config.augment) for i in idx]
            lr = cyclic_lr(it, config.base_lr, config.max_lr, step)
            epoch_lr = lr if epoch_lr is None else epoch_lr
            loss = batch_loss(model, batch, d_min, d_max, weights)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch + 1}, iteration {it}")
            model.zero_grad()
            T.backward(loss)
            adam_step(model.params, {k: p.grad for k, p in model.params.items()}, state, lr)
            hist.lr_trace.append(lr)
            total += value * len(idx)
            seen += len(idx)
            it += 1
        val_iou = mean_iou(model, val, d_min, d_max, bs)
        pool = update_snapshots(pool, Snapshot(model.state_dict(), val_iou, epoch + 1), config.snapshots_kept)
        entered = any(s.epoch == epoch + 1 for s in pool)
        hist.rows.append(dict(epoch=epoch + 1, phase=phase, lr=epoch_lr, train_loss=total / seen,
                              val_iou=val_iou, snapshotted=entered))
        if on_epoch is not None:
            on_epoch(hist.rows[-1])
        if val_iou > best_iou:
            best_iou, best_weights, since_best = val_iou, model.state_dict(), 0
        else:
            since_best += 1
        epoch += 1
        if phase == 2 and since_best >= config.early_stop_patience:
            break
    model.load_state_dict(best_weights)
    return model, pool, hist


@dataclass
class FoldArtifacts:
    fold: int
    checkpoint: Path
    ensemble_checkpoint: Path
    snapshot_dir: Path
    history: History
    val_ids: list
    best_val_iou: float


def snapshot_filename(snap):
    return f"snap_{snap.epoch:04d}_{snap.val_iou:.6f}.w"


def train_kfold(samples, k, config, model_config, out_dir, log=None):
    """Train one model per fold and write checkpoints, ensembles, snapshots and history."""
    config.validate()
    model_config.validate()
    if len(samples) < k:
        raise ValueError(f"need at least k={k} samples, got {len(samples)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {s.id: s for s in samples}
    split = kfold_split(sorted(by_id), k, config.seed)
    artifacts = []
    for fold in range(k):
        try:
            artifacts.append(_run_fold(fold, split, by_id, config, model_config, out_dir, log))
        except SaltSegError as e:
            raise type(e)(f"fold {fold}: {e}") from e
    with open(out_dir / "history.csv", "w", encoding="utf-8", newline="") as fh:
        write_history_rows(fh, [(a.fold, a.history) for a in artifacts])
    return artifacts


def _run_fold(fold, split, by_id, config, model_config, out_dir, log):
    train_ids, val_ids = fold_members(split, fold)
    train, val = [by_id[i] for i in train_ids], [by_id[i] for i in val_ids]
    seed = config.seed + fold
    fold_cfg = replace(config, seed=seed)
    d_min, d_max = depth_range(train)
    model = build_model(model_config, seed)

    def report(row):
        if log:
            log(f"fold {fold} epoch {row['epoch']} phase {row['phase']} loss {row['train_loss']:.5f} "
                f"val_iou {row['val_iou']:.4f}")

    model, pool, hist = train_fold(model, train, val, fold_cfg, (d_min, d_max), on_epoch=report)
    meta = {"fold": fold, "seed": seed, "d_min": d_min, "d_max": d_max, "train_config": fold_cfg.to_dict()}
    best_iou = max(r["val_iou"] for r in hist.rows)
    ckpt = out_dir / f"fold{fold}.w"
    save_checkpoint(ckpt, model, dict(meta, val_iou=best_iou))

    snap_dir = out_dir / f"fold{fold}_snapshots"
    snap_dir.mkdir(exist_ok=True)
    for snap in pool:
        write_weights(snap_dir / snapshot_filename(snap), snap.weights)
    (snap_dir / "model.json").write_text(ckpt.with_suffix(".json").read_text())

    ens = build_model(model_config, seed)
    ens.load_state_dict(ensemble_weights(pool, config.ensemble_alpha))
    recompute_bn_stats(ens, train, d_min, d_max, config.batch_size)
    ens_path = out_dir / f"fold{fold}.ens.w"
    save_checkpoint(ens_path, ens, dict(meta, ensemble_alpha=config.ensemble_alpha,
                                        snapshots=[snapshot_filename(s) for s in pool]))
    hist.to_csv(out_dir / f"fold{fold}_history.csv")
    return FoldArtifacts(fold, ckpt, ens_path, snap_dir, hist, val_ids, best_iou)
