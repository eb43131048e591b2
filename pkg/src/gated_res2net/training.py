"""Cross-entropy training with Adam, dev-EER model selection and scoring.

Class index 1 is bonafide, 0 is spoof.  The detection score of an utterance
is the log-softmax value of the bonafide logit, so ``score == -ce_loss``
for a bonafide label.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .metrics import eer_from_scores
from .tensor import DimensionError, Tensor

BONAFIDE = 1
SPOOF = 0


class TrainingError(RuntimeError):
    pass


def label_index(label: str) -> int:
    if label == "bonafide":
        return BONAFIDE
    if label == "spoof":
        return SPOOF
    raise ValueError(f"unknown label {label!r}")


def ce_loss(logits, labels) -> Tensor:
    """Mean two-class softmax cross-entropy, computed via log-softmax.

    ``logits`` is (2,) or (N, 2); ``labels`` an int or an (N,) int array.
    """
    if not isinstance(logits, Tensor):
        logits = Tensor(np.asarray(logits, dtype=np.float64))
    single = logits.ndim == 1
    if single:
        logits = T.reshape(logits, (1,) + logits.shape)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0]} labels for {n} logit rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label index out of range")
    pick = np.zeros((n, k), dtype=logits.dtype)
    pick[np.arange(n), labels] = -1.0 / n
    return T.sum_all(T.mul(T.log_softmax(logits, axis=-1), Tensor(pick)))


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8

    def validate(self) -> None:
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(cfg: AdamConfig, state: AdamState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam update of named arrays; moments kept in float64.

    Returns the updated parameters (new arrays) and advances ``state.step``.
    """
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        if np.shape(g) != p.shape:
            raise DimensionError(f"{name}: gradient {np.shape(g)} vs parameter {p.shape}")
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        out[name] = (p.astype(np.float64) - update).astype(p.dtype)
    return out


class Adam:
    """Adam over a model's named parameters."""

    def __init__(self, named_params, cfg: AdamConfig = AdamConfig()):
        cfg.validate()
        self.cfg = cfg
        self.params = dict(named_params)
        self.state = AdamState()

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        new = adam_step(self.cfg, self.state, {n: p.data for n, p in self.params.items()}, grads)
        for n, p in self.params.items():
            p.data = new[n]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {"config": asdict(self.cfg), "step": self.state.step, "m": dict(self.state.m), "v": dict(self.state.v)}

    def load_state_dict(self, state: dict) -> None:
        self.state = AdamState(int(state["step"]), dict(state["m"]), dict(state["v"]))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    checkpoint_dir: str | None = None
    eval_every: int = 1
    score_batch_size: int = 32

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1 or self.eval_every < 1 or self.score_batch_size < 1:
            raise ValueError("batch sizes and eval_every must be positive")


@dataclass
class TrainResult:
    best_epoch: int
    best_dev_eer: float
    log: list  # rows (epoch, train_loss, dev_eer)
    best_state: dict
    optimizer: Adam


def score_batch(model, x, batch_size: int = 32) -> np.ndarray:
    """Bonafide log-probabilities for a stack of (D, T) spectrograms, eval mode."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    d, t = model.cfg.input_shape
    if x.ndim != 3 or x.shape[1:] != (d, t):
        raise DimensionError(f"expected (N, {d}, {t}) spectrograms, got {x.shape}")
    was_training = model.training
    model.eval()
    out = []
    try:
        with T.no_grad():
            for i in range(0, x.shape[0], batch_size):
                logits = model(x[i : i + batch_size].astype(model.dtype, copy=False))
                out.append(T.log_softmax(logits, axis=-1).data[:, BONAFIDE].astype(np.float64))
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def score(model, spectrogram) -> float:
    """Log-probability of the bonafide class for one (D, T) spectrogram."""
    s = np.asarray(spectrogram)
    if s.ndim != 2:
        raise DimensionError(f"expected one (D, T) spectrogram, got shape {s.shape}")
    return float(score_batch(model, s)[0])


def dev_eer(model, x, labels, batch_size: int = 32) -> float:
    scores = score_batch(model, x, batch_size)
    labels = np.asarray(labels)
    return eer_from_scores(scores[labels == BONAFIDE], scores[labels == SPOOF])[0]


def train_step(model, opt: Adam, xb, yb) -> float:
    opt.zero_grad()
    loss = ce_loss(model(xb), yb)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at optimizer step {opt.state.step + 1}")
    loss.backward()
    opt.step()
    return value


def train(model, train_set, dev_set, tc: TrainConfig = TrainConfig(), ac: AdamConfig = AdamConfig(),
          log_path=None, on_epoch=None) -> TrainResult:
    """Shuffled mini-batch Adam; keeps the state with the lowest dev EER.

    ``train_set`` and ``dev_set`` are ``(spectrograms (N, D, T), labels (N,))``
    with labels 1 = bonafide, 0 = spoof.  Ties in dev EER keep the earlier
    epoch.  ``log_path`` receives the CSV log ``epoch,train_loss,dev_eer``.
    """
    tc.validate()
    x_tr, y_tr = train_set
    x_dev, y_dev = dev_set
    y_tr = np.asarray(y_tr, dtype=np.int64)
    y_dev = np.asarray(y_dev, dtype=np.int64)
    if len(x_tr) == 0 or len(x_dev) == 0:
        raise ValueError("training and development sets must be non-empty")
    if len(x_tr) != len(y_tr) or len(x_dev) != len(y_dev):
        raise DimensionError("feature and label counts differ")
    rng = np.random.default_rng(tc.seed)
    opt = Adam(model.named_parameters(), ac)
    best = (math.inf, 0, None)
    log = []
    ckpt_dir = Path(tc.checkpoint_dir) if tc.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    for epoch in range(1, tc.epochs + 1):
        model.train()
        order = rng.permutation(len(x_tr))
        total = 0.0
        for i in range(0, len(order), tc.batch_size):
            idx = np.sort(order[i : i + tc.batch_size])
            xb = np.asarray(x_tr[idx], dtype=model.dtype)
            total += train_step(model, opt, xb, y_tr[idx]) * len(idx)
        train_loss = total / len(order)
        if epoch % tc.eval_every and epoch != tc.epochs:
            continue
        d_eer = dev_eer(model, x_dev, y_dev, tc.score_batch_size)
        log.append((epoch, train_loss, d_eer))
        if d_eer < best[0]:
            best = (d_eer, epoch, copy.deepcopy(model.state_dict()))
            if ckpt_dir:
                from .corpus import save_checkpoint

                save_checkpoint(model, ckpt_dir / "best.ckpt", opt, {"epoch": epoch, "dev_eer": d_eer})
        if log_path is not None:
            write_train_log(log_path, log)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, d_eer)
    model.load_state_dict(best[2])
    return TrainResult(best[1], best[0], log, best[2], opt)


def write_train_log(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "dev_eer"])
        for epoch, loss, d in rows:
            w.writerow([epoch, repr(float(loss)), repr(float(d))])
