"""Training loop: truncated BPTT over trajectory windows, Adam, early stopping."""
import copy
import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from endovo.errors import ConfigurationError, DegenerateCalibrationError, NumericError, ValidationError
from endovo.model import EndoVONet
from endovo.optim import AdamState, adam_step, pose_loss_terms

LOG_COLUMNS = ["epoch", "train_loss", "val_loss", "trans_loss", "rot_loss", "lr", "wall_seconds"]


@dataclass
class TrainConfig:
    max_epochs: int = 60
    initial_lr: float = 3e-4
    patience: int = 10
    min_improvement: float = 1e-6
    window: int = 10
    batch_trajectories: int = 1
    beta: float = 1.0
    seed: int = 0
    strict: bool = True
    adam_variant: str = "combined"

    def __post_init__(self):
        if self.max_epochs < 1 or self.patience < 1 or self.window < 1 or self.batch_trajectories < 1:
            raise ConfigurationError("max_epochs, patience, window and batch_trajectories must be >= 1")
        if not self.initial_lr > 0 or not self.beta > 0:
            raise ConfigurationError("initial_lr and beta must be positive")


@dataclass
class Sequence:
    """One trajectory prepared for training: pairs and relative targets."""

    name: str
    pairs: np.ndarray   # [F-1, 8, H, W]
    x: np.ndarray       # [F-1, 3]
    q: np.ndarray       # [F-1, 4]

    def __len__(self):
        return len(self.pairs)


def make_sequences(trajs, channel_means, dtype=np.float32):
    out = []
    for t in trajs:
        x, q = t.relative
        out.append(Sequence(t.name, t.pairs(channel_means, dtype), x, q))
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    trans_loss: float
    rot_loss: float
    lr: float
    wall_seconds: float


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)
    initial_train_loss: float = math.nan
    initial_val_loss: float = math.nan
    best_epoch: int = 0
    stopped_early: bool = False

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in LOG_COLUMNS[1:]])
        return buf.getvalue()

    def save(self, path):
        try:
            with open(path, "w", newline="") as fh:
                fh.write(self.to_csv())
        except OSError as exc:
            raise OSError(f"cannot write training log {path}: {exc}") from exc

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != LOG_COLUMNS:
            raise ValidationError("training log must start with header " + ",".join(LOG_COLUMNS))
        recs = [EpochRecord(int(r[0]), *(float(v) for v in r[1:])) for r in rows[1:]]
        log = cls(recs)
        if recs:
            log.best_epoch = min(recs, key=lambda r: (r.val_loss, r.epoch)).epoch
        return log

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_csv(fh.read())
        except OSError as exc:
            raise OSError(f"cannot read training log {path}: {exc}") from exc


def calibrate_beta(log: TrainingLog):
    """Ratio of final-epoch mean translation loss to mean orientation loss."""
    if not log.records:
        raise ConfigurationError("calibration needs a completed preliminary run")
    last = log.records[-1]
    if last.rot_loss < 1e-12:
        raise DegenerateCalibrationError(f"orientation loss {last.rot_loss:.3g} too small to calibrate")
    return last.trans_loss / last.rot_loss


def _batches(seqs, size):
    """Group sequences of equal length into batches of at most ``size``."""
    by_len = {}
    for s in seqs:
        by_len.setdefault(len(s), []).append(s)
    out = []
    for length in sorted(by_len):
        group = by_len[length]
        out.extend(group[i:i + size] for i in range(0, len(group), size))
    return out


class Trainer:
    """Owns the network, optimizer state and training log for one run."""

    def __init__(self, net: EndoVONet, train_seqs, val_seqs, cfg: TrainConfig, log_fn=None):
        if not train_seqs:
            raise ConfigurationError("train split is empty")
        if not val_seqs:
            raise ConfigurationError("validation split is empty")
        overlap = {s.name for s in train_seqs} & {s.name for s in val_seqs}
        if overlap:
            raise ConfigurationError(f"train and validation share trajectories {sorted(overlap)}")
        self.net = net
        self.train_seqs = train_seqs
        self.val_seqs = val_seqs
        self.cfg = cfg
        self.log_fn = log_fn
        self.rng = np.random.default_rng(cfg.seed)
        self.adam = AdamState.create(net.params, alpha=cfg.initial_lr, variant=cfg.adam_variant)
        self.log = TrainingLog()

    def _emit(self, stage, **kv):
        if self.log_fn:
            self.log_fn(stage, **kv)

    def _batch_arrays(self, batch, start, stop):
        pairs = np.stack([s.pairs[start:stop] for s in batch], axis=1)
        x = np.stack([s.x[start:stop] for s in batch], axis=1)
        q = np.stack([s.q[start:stop] for s in batch], axis=1)
        return pairs, x, q

    def evaluate(self, seqs, chunk=50):
        """Mean per-pair ``(loss, trans, rot)`` in eval mode, state carried."""
        tot = np.zeros(3)
        n = 0
        for batch in _batches(seqs, len(seqs)):
            states = None
            length = len(batch[0])
            for start in range(0, length, chunk):
                pairs, x, q = self._batch_arrays(batch, start, min(start + chunk, length))
                raw, states, _ = self.net.forward(pairs, states, train=False)
                loss, nt, nr, _ = pose_loss_terms(raw.astype(float), x, q, self.cfg.beta)
                tot += [loss.sum(), nt.sum(), nr.sum()]
                n += loss.size
        return tuple(tot / n)

    def validate(self):
        return self.evaluate(self.val_seqs)[0]

    def train_epoch(self):
        cfg = self.cfg
        order = self.rng.permutation(len(self.train_seqs))
        seqs = [self.train_seqs[i] for i in order]
        tot = np.zeros(3)
        n = 0
        for batch in _batches(seqs, cfg.batch_trajectories):
            states = None  # reset at trajectory boundaries
            length = len(batch[0])
            for start in range(0, length, cfg.window):
                pairs, x, q = self._batch_arrays(batch, start, min(start + cfg.window, length))
                raw, states, cache = self.net.forward(pairs, states, train=True, rng=self.rng)
                loss, nt, nr, grad = pose_loss_terms(raw.astype(float), x, q, cfg.beta)
                if not np.all(np.isfinite(loss)):
                    raise NumericError(f"non-finite loss at window starting {start} of {[s.name for s in batch]}")
                grads = self.net.backward(cache, grad / loss.size)
                adam_step(self.net.params, grads, self.adam)
                tot += [loss.sum(), nt.sum(), nr.sum()]
                n += loss.size
        return tuple(tot / n)

    def run(self):
        """Train until ``max_epochs`` or early stop; returns ``(best_params, log)``."""
        cfg = self.cfg
        log = self.log
        log.initial_train_loss = self.evaluate(self.train_seqs)[0]
        log.initial_val_loss = self.validate()
        self._emit("train", epoch=0, train_loss=log.initial_train_loss, val_loss=log.initial_val_loss)
        best_val = math.inf
        best_params = copy.deepcopy(self.net.params)
        wait = 0
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            train_loss, trans, rot = self.train_epoch()
            val = self.validate()
            if not math.isfinite(val):
                raise NumericError(f"validation loss became {val} at epoch {epoch}")
            wall = 0.0 if cfg.strict else time.perf_counter() - t0
            log.records.append(EpochRecord(epoch, train_loss, val, trans, rot, self.adam.alpha, wall))
            self._emit("train", epoch=epoch, train_loss=train_loss, val_loss=val, trans=trans, rot=rot)
            improved = val < best_val - cfg.min_improvement
            if val < best_val:
                # keep the lowest-val weights even when the gain is below the patience threshold
                best_val = val
                best_params = copy.deepcopy(self.net.params)
                log.best_epoch = epoch
            if improved:
                wait = 0
            else:
                wait += 1
                if wait >= cfg.patience:
                    log.stopped_early = True
                    break
        return best_params, log


def train(net, train_seqs, val_seqs, cfg: TrainConfig, log_fn=None):
    return Trainer(net, train_seqs, val_seqs, cfg, log_fn).run()
