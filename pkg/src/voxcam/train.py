"""Cross-validated training: folds, preprocessing, Adam, schedules.

Everything is deterministic given the config seed. Random streams are
derived from (seed, fold, purpose) tuples so folds decorrelate without
sharing state, and two identical runs produce byte-identical checkpoints
and epoch logs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .errors import (
    DegenerateBatch,
    DegenerateVolume,
    EmptyInput,
    InvalidSpec,
    LengthMismatch,
    TooFewFolds,
    TooFewSubjects,
)
from .manifest import ManifestRow
from .nifti import read_nifti
from .resnet import FREEZE_POLICIES, Model, ModelSpec, apply_freeze_policy, build_model
from .tensor import Tensor, backward, cross_entropy, no_grad
from .volume import Volume, rotate_volume


# -- preprocessing -----------------------------------------------------------

def zscore_normalize(v: Volume) -> Volume:
    """Center to zero mean, unit population std over the whole grid."""
    x = v.data.astype(np.float64)
    mean = x.mean()
    std = x.std()
    if std == 0.0:
        raise DegenerateVolume("volume intensity is constant, z-score undefined")
    return Volume(((x - mean) / std).astype(np.float32), v.spacing)


def random_rotation(v: Volume, rng: np.random.Generator, max_deg: float = 15.0) -> Volume:
    """Rotate by independent uniform angles in [-max_deg, max_deg] about
    the D, then H, then W axis, trilinear, zero fill."""
    angles = rng.uniform(-max_deg, max_deg, size=3)
    return rotate_volume(v, (angles[0], angles[1], angles[2]), ("d", "h", "w"))


# -- fold assignment ---------------------------------------------------------

@dataclass
class FoldSplit:
    fold: int
    train: list[str]
    val: list[str]
    test: list[str]


def _quota(total: int, counts: list[int]) -> list[int]:
    """Largest-remainder apportionment of `total` across class pools,
    ties toward the lower class index."""
    pool = sum(counts)
    raw = [total * c / pool for c in counts]
    out = [int(np.floor(r)) for r in raw]
    rem = total - sum(out)
    order = sorted(range(len(counts)), key=lambda i: (-(raw[i] - out[i]), i))
    for i in order[:rem]:
        out[i] += 1
    return out


def make_folds(
    ids: list[str],
    labels: list[int],
    n_folds: int = 5,
    val_fraction: float = 0.2,
    seed: int = 0,
) -> list[FoldSplit]:
    """Stratified k-fold test splits plus a stratified validation carve-out
    of round(val_fraction * non-test) subjects per fold."""
    if len(ids) != len(labels):
        raise LengthMismatch(f"{len(ids)} ids vs {len(labels)} labels")
    if n_folds < 2:
        raise TooFewFolds(f"need >= 2 folds, got {n_folds}")
    if not 0 < val_fraction < 1:
        raise InvalidSpec(f"val_fraction must be in (0, 1), got {val_fraction}")
    classes = sorted(set(labels))
    by_class: dict[int, list[str]] = {c: [] for c in classes}
    for sid, lab in zip(ids, labels):
        by_class[lab].append(sid)
    rng = np.random.default_rng([seed, 0xF01D])
    chunks: dict[int, list[list[str]]] = {}
    for c in classes:
        members = by_class[c]
        if len(members) < n_folds:
            raise TooFewSubjects(
                f"class {c} has {len(members)} subjects, fewer than {n_folds} folds"
            )
        perm = [members[i] for i in rng.permutation(len(members))]
        chunks[c] = [list(part) for part in np.array_split(perm, n_folds)]

    splits = []
    for f in range(n_folds):
        test: list[str] = []
        pool_by_class: dict[int, list[str]] = {}
        for c in classes:
            test.extend(chunks[c][f])
            pool_by_class[c] = [s for i, part in enumerate(chunks[c]) if i != f for s in part]
        pool_counts = [len(pool_by_class[c]) for c in classes]
        n_val = round(val_fraction * sum(pool_counts))
        quotas = _quota(n_val, pool_counts)
        rng_f = np.random.default_rng([seed, 0xA11, f])
        val: list[str] = []
        train: list[str] = []
        for c, q in zip(classes, quotas):
            pool = pool_by_class[c]
            order = rng_f.permutation(len(pool))
            val.extend(pool[i] for i in order[:q])
            train.extend(pool[i] for i in order[q:])
        splits.append(FoldSplit(fold=f, train=train, val=val, test=test))
    return splits


# -- cohort access -----------------------------------------------------------

class CohortData:
    """Manifest-backed volume access with cached z-scored intensities."""

    def __init__(self, rows: list[ManifestRow], root: str | Path):
        self.root = Path(root)
        self.rows = {r.subject_id: r for r in rows}
        self.ids = [r.subject_id for r in rows]
        self._cache: dict[str, Volume] = {}

    def label(self, sid: str) -> int:
        return self.rows[sid].label

    def labels(self, sids: list[str]) -> np.ndarray:
        return np.array([self.label(s) for s in sids], dtype=np.int64)

    def normalized(self, sid: str) -> Volume:
        if sid not in self._cache:
            self._cache[sid] = zscore_normalize(read_nifti(self.root / self.rows[sid].image))
        return self._cache[sid]

    def raw(self, sid: str) -> Volume:
        return read_nifti(self.root / self.rows[sid].image)

    def mask(self, sid: str) -> np.ndarray | None:
        row = self.rows[sid]
        if not row.mask:
            return None
        return read_nifti(self.root / row.mask).data > 0.5


# -- optimizer and schedules -------------------------------------------------

class Adam:
    """Bias-corrected Adam; moments held in float64, parameters float32.

    Frozen tensors (requires_grad False) are skipped entirely: no moment
    state, no update.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self._m.setdefault(name, np.zeros(p.data.shape, np.float64))
            v = self._v.setdefault(name, np.zeros(p.data.shape, np.float64))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data[...] = (p.data.astype(np.float64) - update).astype(np.float32)


class PlateauScheduler:
    """Cut the rate by `factor` once the no-improvement streak exceeds
    `patience` epochs; improvement means val_loss < best - min_improvement."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 5,
                 min_improvement: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_improvement = min_improvement
        self.best = np.inf
        self.stale = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.min_improvement:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale > self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr


class EarlyStopper:
    """Stop once the no-improvement streak exceeds `patience`; remembers
    the best epoch for snapshot restoration."""

    def __init__(self, patience: int = 10, min_improvement: float = 1e-4):
        self.patience = patience
        self.min_improvement = min_improvement
        self.best = np.inf
        self.best_epoch: int | None = None
        self.stale = 0

    def update(self, val_loss: float, epoch: int) -> bool:
        if val_loss < self.best - self.min_improvement:
            self.best = val_loss
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale > self.patience


# -- the fold trainer --------------------------------------------------------

@dataclass
class TrainConfig:
    depth: int = 18
    base_width: int = 8
    in_channels: int = 1
    num_classes: int = 2
    lr: float = 1e-3
    batch_size: int = 2
    max_epochs: int = 100
    folds: int = 5
    val_fraction: float = 0.2
    rotate_deg: float = 15.0
    augment: bool = True
    freeze: str = "none"
    init: str | None = None
    lr_factor: float = 0.1
    lr_patience: int = 5
    early_patience: int = 10
    min_improvement: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.freeze not in FREEZE_POLICIES:
            raise InvalidSpec(f"freeze must be one of {FREEZE_POLICIES}")
        if self.freeze != "none" and not self.init:
            raise InvalidSpec("freeze policies other than 'none' need an init checkpoint")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise InvalidSpec("batch_size and max_epochs must be >= 1")
        if self.seed < 0:
            raise InvalidSpec("seed must be >= 0")
        if self.lr <= 0:
            raise InvalidSpec("lr must be positive")

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.depth, self.base_width, self.in_channels, self.num_classes)


@dataclass
class TrainResult:
    model: Model
    log_lines: list[str] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0


def _batches(items: list[str], size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def _stack(vols: list[Volume]) -> Tensor:
    return Tensor(np.stack([v.data for v in vols])[:, None])


def mean_loss(m: Model, data: CohortData, sids: list[str], batch_size: int) -> float:
    """Mean cross-entropy over subjects, eval mode, no augmentation."""
    if not sids:
        raise EmptyInput("no subjects to score")
    m.eval()
    total = 0.0
    with no_grad():
        for chunk in _batches(sids, batch_size):
            x = _stack([data.normalized(s) for s in chunk])
            loss = cross_entropy(m.forward(x), data.labels(chunk))
            total += float(loss.data) * len(chunk)
    return total / len(sids)


def _stat_batches(sids: list[str], batch_size: int) -> list[list[str]]:
    chunks = [list(c) for c in _batches(sids, batch_size)]
    # a trailing singleton would starve batch statistics
    if len(chunks) >= 2 and len(chunks[-1]) == 1:
        chunks[-2].extend(chunks.pop())
    return chunks


def validation_loss(m: Model, data: CohortData, sids: list[str], batch_size: int) -> float:
    """Mean cross-entropy over subjects using batch statistics.

    Running-mean/var buffers are an exponential average taken while the
    weights themselves are moving, so early in a run the eval-mode
    network can differ wildly from the network being trained and its
    loss is useless for scheduling or model selection. Normalizing the
    validation batches by their own statistics scores the same network
    the optimizer sees. The running buffers are snapshotted and restored,
    and a validation set too small for batch statistics falls back to
    the eval-mode loss.
    """
    if not sids:
        raise EmptyInput("no subjects to score")
    bns = m.batchnorms()
    saved = {
        name: (bn.running_mean.copy(), bn.running_var.copy())
        for name, bn in bns.items()
    }

    def restore():
        for name, bn in bns.items():
            bn.running_mean[:], bn.running_var[:] = saved[name]

    was_training = m.training
    m.train()
    total = 0.0
    try:
        with no_grad():
            for chunk in _stat_batches(sids, batch_size):
                x = _stack([data.normalized(s) for s in chunk])
                loss = cross_entropy(m.forward(x), data.labels(chunk))
                total += float(loss.data) * len(chunk)
    except DegenerateBatch:
        # a partial forward already touched the early layers' buffers
        restore()
        return mean_loss(m, data, sids, batch_size)
    finally:
        restore()
        if was_training:
            m.train()
        else:
            m.eval()
    return total / len(sids)


def calibrate_running_stats(m: Model, data: CohortData, sids: list[str], batch_size: int) -> None:
    """Recompute batch-norm running stats for the current weights.

    During training the exponential buffers blend statistics from stale
    weights and, when augmentation is on, from rotated inputs that the
    model never sees at test time. One forward-only pass over the clean
    scans replaces each live layer's buffers with the mean of its
    per-batch statistics (momentum 1/k over batch index k), so the
    eval-mode network matches the weights it is saved with.
    """
    bns = m.batchnorms()
    saved = {
        name: (bn.running_mean.copy(), bn.running_var.copy())
        for name, bn in bns.items()
    }
    m.train()
    try:
        with no_grad():
            for k, chunk in enumerate(_stat_batches(sids, batch_size), start=1):
                for bn in bns.values():
                    bn.momentum = 1.0 / k
                m.forward(_stack([data.normalized(s) for s in chunk]))
    except DegenerateBatch:
        for name, bn in bns.items():
            bn.running_mean[:], bn.running_var[:] = saved[name]
    finally:
        for bn in bns.values():
            bn.momentum = 0.1
        m.eval()


def predict_logits(m: Model, data: CohortData, sids: list[str], batch_size: int) -> np.ndarray:
    m.eval()
    outs = []
    with no_grad():
        for chunk in _batches(sids, batch_size):
            x = _stack([data.normalized(s) for s in chunk])
            outs.append(m.forward(x).data)
    return np.concatenate(outs)


def train_fold(
    cfg: TrainConfig,
    data: CohortData,
    split: FoldSplit,
    progress=None,
) -> TrainResult:
    """Train one fold and return the best-validation-epoch model.

    Pipeline per the reference protocol: z-scored inputs, fresh random
    rotations on training samples each epoch, Adam with plateau decay,
    early stopping with best-epoch snapshot restore.
    """
    if not split.train or not split.val:
        raise EmptyInput(f"fold {split.fold} has an empty train or val list")
    m = build_model(cfg.model_spec(), cfg.seed)
    if cfg.init:
        m.load_state_dict(load_checkpoint(cfg.init))
    apply_freeze_policy(m, cfg.freeze)
    opt = Adam(m.parameters(), lr=cfg.lr)
    sched = PlateauScheduler(cfg.lr, cfg.lr_factor, cfg.lr_patience, cfg.min_improvement)
    stopper = EarlyStopper(cfg.early_patience, cfg.min_improvement)
    rng_shuffle = np.random.default_rng([cfg.seed, 0x5F0F, split.fold])
    rng_rot = np.random.default_rng([cfg.seed, 0x07A7, split.fold])

    result = TrainResult(model=m)
    best_state = m.state_dict()
    best_epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        m.train()
        order = rng_shuffle.permutation(len(split.train))
        train_ids = [split.train[i] for i in order]
        lr_used = sched.lr
        opt.lr = lr_used
        total = 0.0
        for chunk in _batches(train_ids, cfg.batch_size):
            vols = []
            for sid in chunk:
                v = data.normalized(sid)
                if cfg.augment:
                    v = random_rotation(v, rng_rot, cfg.rotate_deg)
                vols.append(v)
            x = _stack(vols)
            loss = cross_entropy(m.forward(x), data.labels(chunk))
            m.zero_grad()
            backward(loss)
            opt.step()
            total += float(loss.data) * len(chunk)
        train_loss = total / len(split.train)
        val_loss = validation_loss(m, data, split.val, cfg.batch_size)
        line = f"{epoch},{train_loss:.6f},{val_loss:.6f},{lr_used:.8g}"
        result.log_lines.append(line)
        if progress is not None:
            progress(line)
        sched.step(val_loss)
        stop = stopper.update(val_loss, epoch)
        if stopper.best_epoch == epoch:
            best_state = m.state_dict()
            best_epoch = epoch
        result.epochs_run = epoch
        if stop:
            break
    m.load_state_dict(best_state)
    calibrate_running_stats(m, data, split.train, cfg.batch_size)
    result.best_epoch = best_epoch
    return result
