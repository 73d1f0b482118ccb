"""Training loops for the embedding network.

Metric training composes class-balanced batches, mines triplets (or
quadruplets) online on the current signatures, and takes one SGD-with-momentum
step per batch on the summed tuple loss divided by the batch size. Batches
that yield no active tuple leave the parameters untouched.
"""
import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from ._io import atomic_write
from .embedder import EmbeddingNetwork, _activate, _activation_grad, backward, forward
from .errors import DimensionError, DivergenceError
from .losses import (QuadrupletMargins, autoencoder_loss, batch_quadruplet_loss,
                     batch_triplet_loss)
from .matcher import MAX_DISTANCE
from .metrics import benchmark
from .mining import MiningConfig, epoch_plans, mine_quadruplets, mine_semi_hard

log = logging.getLogger(__name__)

LOSS_KINDS = ("triplet", "quadruplet", "autoencoder")
HISTORY_COLUMNS = ("epoch", "loss", "active_triplets", "val_accuracy", "seconds")


@dataclass
class TrainConfig:
    margin: float = 1.75
    margin2: float | None = None
    batch_size: int = 1000
    per_class: int = 2
    loss_kind: str = "triplet"
    optimizer: str = "sgd_momentum"
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    seed: int = 0
    eval_every: int = 1
    negatives_per_anchor: int = 5
    positives_per_anchor: int = 1
    lr_decay: float = 0.1
    plateau_patience: int = 3
    enroll_fraction: float = 0.6
    stop_when_separated: bool = True

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.optimizer != "sgd_momentum":
            raise ValueError("only the 'sgd_momentum' optimizer is available")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.margin < 0 or (self.margin2 is not None and self.margin2 < 0):
            raise ValueError("margins must be non-negative")

    def mining(self) -> MiningConfig:
        return MiningConfig(negatives_per_anchor=self.negatives_per_anchor,
                            positives_per_anchor=self.positives_per_anchor,
                            margin=self.margin)

    def quadruplet_margins(self) -> QuadrupletMargins:
        return QuadrupletMargins(self.margin, self.margin if self.margin2 is None else self.margin2)


def _coerce(value: str, current):
    kind = type(current)
    if isinstance(current, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if current is None:
        return None if value.strip().lower() in ("", "none") else float(value)
    return kind(value.strip())


def parse_key_values(text: str) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def train_config_from_mapping(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown training config keys: {sorted(unknown)}")
    kwargs = {f.name: getattr(base, f.name) for f in fields(TrainConfig)}
    for key, raw in values.items():
        kwargs[key] = _coerce(raw, kwargs[key]) if isinstance(raw, str) else raw
    return TrainConfig(**kwargs)


def format_train_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name}={getattr(cfg, f.name)}\n" for f in fields(TrainConfig))


class SGDMomentum:
    """``v <- momentum * v + g``;  ``p <- p - lr * v`` (in place)."""

    def __init__(self, learning_rate: float, momentum: float = 0.9):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = {}

    def step(self, params: dict, grads: dict) -> None:
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=p.dtype)
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            p -= self.learning_rate * v


@dataclass
class TrainHistory:
    epoch: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    active_triplets: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)

    def __len__(self):
        return len(self.epoch)

    def append(self, epoch, loss, active, val_acc, seconds, lr):
        self.epoch.append(epoch)
        self.loss.append(loss)
        self.active_triplets.append(active)
        self.val_accuracy.append(val_acc)
        self.seconds.append(seconds)
        self.learning_rate.append(lr)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in zip(self.epoch, self.loss, self.active_triplets, self.val_accuracy, self.seconds):
            e, loss, active, acc, sec = row
            w.writerow([e, repr(loss), active, "" if acc is None else repr(acc), repr(sec)])
        return buf.getvalue()

    def save(self, path) -> None:
        with atomic_write(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def validate(net: EmbeddingNetwork, val_ds, enroll_fraction: float = 0.6, seed: int = 0):
    """Benchmark accuracy with rejection disabled (every query is labeled).

    Returns ``None`` when accuracy is undefined (no enrolled-class queries).
    """
    report = benchmark(net, val_ds, enroll_fraction, seed, thresholds=[MAX_DISTANCE])
    return report.curve.points[0].accuracy


def _check_finite_params(net, epoch, batch):
    for name, p in net.params().items():
        if not np.all(np.isfinite(p)):
            raise DivergenceError(epoch, batch, f"non-finite {name}")


def _check_inputs(net, ds):
    if ds.dimension != net.config.input_dim:
        raise DimensionError(f"dataset dimension {ds.dimension} != network input_dim {net.config.input_dim}")


class _Plateau:
    def __init__(self, patience, decay):
        self.patience, self.decay = patience, decay
        self.best, self.bad = None, 0

    def update(self, opt, value):
        if value is None:
            return
        if self.best is None or value > self.best:
            self.best, self.bad = value, 0
            return
        self.bad += 1
        if self.bad >= self.patience:
            opt.learning_rate *= self.decay
            self.bad = 0
            log.info("validation plateau: learning rate -> %g", opt.learning_rate)


def train(net: EmbeddingNetwork, train_ds, val_ds=None, cfg: TrainConfig = TrainConfig()):
    """Metric-learning training with online mining; returns ``(net, history)``.

    ``net`` is updated in place. Training stops early once a full epoch mines
    no active tuple (when ``cfg.stop_when_separated``).
    """
    if cfg.loss_kind == "autoencoder":
        return train_autoencoder(net, train_ds, cfg, val_ds=val_ds)
    _check_inputs(net, train_ds)
    if val_ds is not None and set(val_ds.class_index) & set(train_ds.class_index):
        raise ValueError("validation classes overlap the training classes")
    mcfg = cfg.mining()
    qmargins = cfg.quadruplet_margins()
    opt = SGDMomentum(cfg.learning_rate, cfg.momentum)
    plateau = _Plateau(cfg.plateau_patience, cfg.lr_decay)
    history = TrainHistory()
    features, labels = train_ds.features, train_ds.labels

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        total, active = 0.0, 0
        plans = epoch_plans(train_ds, cfg.batch_size, cfg.per_class, seed=(cfg.seed, epoch))
        for b, plan in enumerate(plans):
            idx = np.asarray(plan.indices)
            sig, cache = forward(net, features[idx], mode="train")
            if not np.all(np.isfinite(sig)):
                # NaN distances would silently mine nothing and look converged
                raise DivergenceError(epoch, b, "non-finite signatures")
            y = labels[idx]
            if cfg.loss_kind == "triplet":
                tuples = mine_semi_hard(sig, y, mcfg)
                report, grad = batch_triplet_loss(sig, tuples, cfg.margin)
            else:
                tuples = mine_quadruplets(sig, y, mcfg) if np.unique(y).size >= 3 else []
                report, grad = batch_quadruplet_loss(sig, tuples, qmargins)
            if not math.isfinite(report.total_loss):
                raise DivergenceError(epoch, b, report.total_loss)
            total += report.total_loss
            active += report.active_count
            if report.active_count == 0:
                continue
            grads = backward(net, cache, grad / idx.size)
            opt.step(net.params(), grads.params())
            net.mark_updated()
            _check_finite_params(net, epoch, b)

        val_acc = None
        if val_ds is not None and len(val_ds) and epoch % max(1, cfg.eval_every) == 0:
            val_acc = validate(net, val_ds, cfg.enroll_fraction, cfg.seed)
            plateau.update(opt, val_acc)
        history.append(epoch, total, active, val_acc, time.perf_counter() - start, opt.learning_rate)
        log.info("epoch %d: loss=%.6g active=%d val_acc=%s", epoch, total, active, val_acc)
        if cfg.stop_when_separated and active == 0:
            break
    return net, history


class Decoder:
    """Mirror of the encoder used only during autoencoder training:
    signature -> hidden (same activation) -> linear reconstruction."""

    def __init__(self, signature_dim, hidden_dim, output_dim, activation, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.activation = activation
        self.W1 = rng.normal(0, math.sqrt(2.0 / signature_dim), (hidden_dim, signature_dim)).astype(dtype)
        self.b1 = np.zeros(hidden_dim, dtype)
        self.W2 = rng.normal(0, math.sqrt(2.0 / hidden_dim), (output_dim, hidden_dim)).astype(dtype)
        self.b2 = np.zeros(output_dim, dtype)

    def params(self) -> dict:
        return {"dec_W1": self.W1, "dec_b1": self.b1, "dec_W2": self.W2, "dec_b2": self.b2}

    def forward(self, s):
        s = np.asarray(s, dtype=self.W1.dtype)
        z = s @ self.W1.T + self.b1
        h = _activate(self.activation, z)
        return h @ self.W2.T + self.b2, (s, z, h)

    def backward(self, cache, g):
        s, z, h = cache
        g = np.asarray(g, dtype=self.W1.dtype)
        g_h = g @ self.W2
        g_z = g_h * _activation_grad(self.activation, z, h)
        grads = {"dec_W2": g.T @ h, "dec_b2": g.sum(axis=0),
                 "dec_W1": g_z.T @ s, "dec_b1": g_z.sum(axis=0)}
        return grads, g_z @ self.W1


def _row_batches(n, batch_size, rng):
    perm = rng.permutation(n)
    chunks = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and chunks[-1].size < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return [c for c in chunks if c.size >= 2]


def train_autoencoder(net: EmbeddingNetwork, train_ds, cfg: TrainConfig = TrainConfig(), val_ds=None,
                      decoder_seed: int | None = None):
    """Pretrain the encoder by squared-error reconstruction through a mirrored
    decoder; the decoder is discarded. Returns ``(net, history)`` where the
    history loss is the mean per-example reconstruction error of each epoch."""
    _check_inputs(net, train_ds)
    c = net.config
    dec = Decoder(c.signature_dim, c.hidden_dim, c.input_dim, c.hidden_activation,
                  seed=cfg.seed + 1 if decoder_seed is None else decoder_seed, dtype=net.dtype)
    opt = SGDMomentum(cfg.learning_rate, cfg.momentum)
    history = TrainHistory()
    X_all = train_ds.features
    n = len(train_ds)
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        rng = np.random.default_rng((cfg.seed, epoch))
        weighted = 0.0
        for b, idx in enumerate(_row_batches(n, cfg.batch_size, rng)):
            x = X_all[idx]
            sig, cache = forward(net, x, mode="train")
            recon, dcache = dec.forward(sig)
            loss, g = autoencoder_loss(x, recon)
            if not math.isfinite(loss):
                raise DivergenceError(epoch, b, loss)
            weighted += loss * idx.size
            dgrads, g_sig = dec.backward(dcache, g)
            egrads = backward(net, cache, g_sig)
            opt.step({**net.params(), **dec.params()}, {**egrads.params(), **dgrads})
            net.mark_updated()
            _check_finite_params(net, epoch, b)
        val_acc = None
        if val_ds is not None and len(val_ds) and epoch % max(1, cfg.eval_every) == 0:
            val_acc = validate(net, val_ds, cfg.enroll_fraction, cfg.seed)
        history.append(epoch, weighted / max(n, 1), 0, val_acc, time.perf_counter() - start,
                       opt.learning_rate)
    return net, history
