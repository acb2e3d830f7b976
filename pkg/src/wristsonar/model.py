"""Baseline learner, two-step training protocol, and evaluation reports.

The baseline maps each window tensor to pooled statistics (a fixed
8x8 grid of mean and max per channel over the early/mid/late thirds of
the window) and fits linear heads on top: closed-form ridge regression
for the pose and wrist heads, minibatch-Adam multinomial logistic
regression for the interaction classifier.  Fine-tuning warm-starts
from the pretrained weights — the regression heads solve a ridge
problem anchored at the pretrained weights, the classifier resumes
gradient descent — and never mutates the pretrained artifact.

Fitting is single-writer; prediction on a fitted model is read-only
and safe under arbitrary concurrency.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .audio_io import atomic_write_bytes
from .dataset import WindowSample
from .pose import HandPose, error_cdf, mjae, mjede, mwae

HEAD_POSE = "pose60"
HEAD_WRIST = "wrist3"
HEAD_CLASS = "class12"
HEAD_DIMS = {HEAD_POSE: 60, HEAD_WRIST: 3, HEAD_CLASS: 12}

DEFAULT_RIDGE = 1e-3
DEFAULT_FINETUNE_ANCHOR = 1.0


class NotFittedError(RuntimeError):
    pass


class EmptyDataError(ValueError):
    pass


class HeadMismatchError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TaskHead:
    """Output head: pose60 and wrist3 regress under MSE, class12
    classifies under cross-entropy."""

    kind: str

    def __post_init__(self):
        if self.kind not in HEAD_DIMS:
            raise HeadMismatchError(f"unknown head kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return HEAD_DIMS[self.kind]

    @property
    def is_classifier(self) -> bool:
        return self.kind == HEAD_CLASS


@dataclass(frozen=True)
class TrainSpec:
    pretrain_epochs: int = 10
    finetune_epochs: int = 5
    learning_rate: float = 0.0002
    batch_size: int = 30
    seed: int = 0

    def __post_init__(self):
        if min(self.pretrain_epochs, self.finetune_epochs, self.batch_size) < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class FeatureConfig:
    """Pooling layout: grid cells x {mean, max} x channels x window thirds."""

    grid_rows: int = 8
    grid_cols: int = 8
    thirds: int = 3

    def n_features(self, n_channels: int) -> int:
        return self.grid_rows * self.grid_cols * 2 * n_channels * self.thirds


@dataclass(frozen=True)
class ClassPrediction:
    class_id: int
    scores: np.ndarray  # softmax-normalized, length 12


def pooled_features(window: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Pool one window tensor [W x P x C] into a fixed-size feature vector."""
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeMismatchError(f"window must be 3-D, got shape {x.shape}")
    feats = []
    for part in np.array_split(x, cfg.thirds, axis=0):
        for rows in np.array_split(part, cfg.grid_rows, axis=0):
            for cell in np.array_split(rows, cfg.grid_cols, axis=1):
                flat = cell.reshape(-1, cell.shape[2])
                feats.append(flat.mean(axis=0))
                feats.append(flat.max(axis=0))
    return np.concatenate(feats)


@dataclass(frozen=True)
class BaselineModel:
    """Pooled-feature linear model; deterministic given (data, spec, seed)."""

    head: TaskHead
    features: FeatureConfig = field(default_factory=FeatureConfig)
    ridge: float = DEFAULT_RIDGE
    finetune_anchor: float = DEFAULT_FINETUNE_ANCHOR
    weights: np.ndarray | None = None  # (n_features + 1, head dim)
    scaler_mean: np.ndarray | None = None
    scaler_std: np.ndarray | None = None
    loss_history: tuple[float, ...] = ()
    train_sources: tuple = ()

    @property
    def fitted(self) -> bool:
        return self.weights is not None

    def design_row(self, window: np.ndarray) -> np.ndarray:
        f = pooled_features(window, self.features)
        if self.scaler_mean is not None and f.shape != self.scaler_mean.shape:
            raise ShapeMismatchError(
                f"window pools to {f.shape[0]} features, model expects {self.scaler_mean.shape[0]}"
            )
        return f


def _collect(model: BaselineModel, windows: Iterable[WindowSample]):
    feats, labels, sources = [], [], []
    for w in windows:
        feats.append(pooled_features(w.tensor, model.features))
        labels.append(w.label)
        sources.append(w.source)
    if not feats:
        raise EmptyDataError("no training windows")
    X = np.asarray(feats)
    if model.head.is_classifier:
        y = np.asarray(labels, dtype=np.intp)
        if y.ndim != 1 or y.min() < 0 or y.max() >= model.head.dim:
            raise ShapeMismatchError(f"class labels must be ids in 0..{model.head.dim - 1}")
        Y = y
    else:
        Y = np.asarray(labels, dtype=np.float64)
        if Y.ndim != 2 or Y.shape[1] != model.head.dim:
            raise ShapeMismatchError(
                f"labels of shape {Y.shape} do not match head dim {model.head.dim}"
            )
    return X, Y, tuple(sources)


def _standardize(X: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    Z = (X - mean) / std
    return np.concatenate([Z, np.ones((Z.shape[0], 1))], axis=1)


def _solve_ridge(Z: np.ndarray, Y: np.ndarray, lam: float,
                 anchor: np.ndarray | None = None) -> np.ndarray:
    """argmin ||Z W - Y||^2 + lam ||W - anchor||^2 (anchor 0 = plain ridge;
    the bias column is not penalized in the plain case)."""
    d = Z.shape[1]
    gram = Z.T @ Z
    reg = np.full(d, lam)
    if anchor is None:
        reg[-1] = 0.0  # leave the bias free
        rhs = Z.T @ Y
    else:
        rhs = Z.T @ Y + lam * anchor
    gram[np.diag_indices(d)] += reg
    return np.linalg.solve(gram, rhs)


def softmax_loss_grad(W: np.ndarray, Z: np.ndarray, y: np.ndarray):
    """Mean cross-entropy of a softmax linear classifier and its gradient.

    ``Z`` already carries the bias column; ``y`` holds class ids.
    """
    logits = Z @ W
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    probs = expl / expl.sum(axis=1, keepdims=True)
    n = Z.shape[0]
    loss = -np.log(probs[np.arange(n), y] + 1e-300).mean()
    delta = probs
    delta[np.arange(n), y] -= 1.0
    return loss, Z.T @ delta / n


def _adam_train(W0, Z, y, epochs, lr, batch, seed):
    """Minibatch Adam on the softmax head.

    After each epoch the full training loss is checked; an epoch that
    increases it is rolled back with a halved learning rate, which keeps
    the per-epoch loss non-increasing.
    """
    rng = np.random.default_rng(seed)
    W = W0.copy()
    m = np.zeros_like(W)
    v = np.zeros_like(W)
    t = 0
    losses = [softmax_loss_grad(W, Z, y)[0]]
    n = Z.shape[0]
    epoch = 0
    retries = 0
    while epoch < epochs:
        snapshot = (W.copy(), m.copy(), v.copy(), t)
        order = rng.permutation(n)
        for s in range(0, n, batch):
            sel = order[s : s + batch]
            _, g = softmax_loss_grad(W, Z[sel], y[sel])
            t += 1
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1.0 - 0.9**t)
            vh = v / (1.0 - 0.999**t)
            W -= lr * mh / (np.sqrt(vh) + 1e-8)
        loss = softmax_loss_grad(W, Z, y)[0]
        if loss > losses[-1]:
            W, m, v, t = snapshot
            if retries >= 8:
                break  # converged to rounding noise; keep the better weights
            lr *= 0.5
            retries += 1
            continue
        retries = 0
        losses.append(loss)
        epoch += 1
    return W, losses


def fit(model: BaselineModel, windows: Iterable[WindowSample], head: TaskHead,
        spec: TrainSpec) -> BaselineModel:
    """Fit from scratch; returns a new fitted model."""
    if head != model.head:
        raise HeadMismatchError(f"model head {model.head.kind} != requested {head.kind}")
    X, Y, sources = _collect(model, windows)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Z = _standardize(X, mean, std)
    if head.is_classifier:
        W0 = np.zeros((Z.shape[1], head.dim))
        W, losses = _adam_train(W0, Z, Y, spec.pretrain_epochs, spec.learning_rate,
                                spec.batch_size, spec.seed)
    else:
        W = _solve_ridge(Z, Y, model.ridge)
        losses = [float(np.mean((Z @ W - Y) ** 2))]
    return replace(model, weights=W, scaler_mean=mean, scaler_std=std,
                   loss_history=tuple(losses), train_sources=sources)


def finetune(pretrained: BaselineModel, windows: Iterable[WindowSample],
             spec: TrainSpec) -> BaselineModel:
    """Adapt a pretrained model to user data; the pretrained model is untouched.

    With no windows the pretrained model is returned unchanged (the
    zero-budget, user-independent condition).
    """
    if not pretrained.fitted:
        raise NotFittedError("finetune requires a fitted model")
    windows = list(windows)
    if not windows:
        return replace(pretrained)
    X, Y, sources = _collect(pretrained, windows)
    if X.shape[1] != pretrained.scaler_mean.shape[0]:
        raise HeadMismatchError(
            f"fine-tune windows pool to {X.shape[1]} features, model has "
            f"{pretrained.scaler_mean.shape[0]}"
        )
    Z = _standardize(X, pretrained.scaler_mean, pretrained.scaler_std)
    if pretrained.head.is_classifier:
        W, losses = _adam_train(pretrained.weights, Z, Y, spec.finetune_epochs,
                                spec.learning_rate, spec.batch_size, spec.seed)
    else:
        W = _solve_ridge(Z, Y, pretrained.finetune_anchor, anchor=pretrained.weights)
        losses = [float(np.mean((Z @ W - Y) ** 2))]
    return replace(pretrained, weights=W, loss_history=tuple(losses),
                   train_sources=pretrained.train_sources + sources)


def predict(model: BaselineModel, window: np.ndarray):
    """Predict one window.

    pose60 returns a (20, 3) array (wrist implicitly at the origin),
    wrist3 a 3-vector, class12 a :class:`ClassPrediction` whose class
    id is the argmax with lowest-index tie-break.
    """
    if not model.fitted:
        raise NotFittedError("model is not fitted")
    f = model.design_row(window)
    z = np.concatenate([(f - model.scaler_mean) / model.scaler_std, [1.0]])
    out = z @ model.weights
    if model.head.kind == HEAD_POSE:
        return out.reshape(20, 3)
    if model.head.kind == HEAD_WRIST:
        return out
    shifted = out - out.max()
    scores = np.exp(shifted)
    scores /= scores.sum()
    return ClassPrediction(class_id=int(np.argmax(out)), scores=scores)


@dataclass
class EvalReport:
    """Per-task metric report with a stable JSON schema."""

    task: str
    n_windows: int
    metrics: dict
    per_joint: list | None = None
    cdf: dict | None = None
    confusion: list | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "task": self.task,
            "n_windows": self.n_windows,
            "metrics": self.metrics,
            "per_joint": self.per_joint,
            "cdf": self.cdf,
            "confusion": self.confusion,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _pose_from_output(flat: np.ndarray) -> HandPose:
    return HandPose(joints=np.vstack([np.zeros(3), np.asarray(flat).reshape(20, 3)]))


def evaluate(model: BaselineModel, windows: Iterable[WindowSample], head: TaskHead) -> EvalReport:
    """Evaluate on labeled windows, reusing the pose-module metrics."""
    if head != model.head:
        raise HeadMismatchError(f"model head {model.head.kind} != evaluation head {head.kind}")
    if not model.fitted:
        raise NotFittedError("model is not fitted")
    if head.kind == HEAD_POSE:
        dist_errors, ang_errors = [], []
        per_joint = np.zeros(20)
        n = 0
        for w in windows:
            pred = _pose_from_output(predict(model, w.tensor).ravel())
            gt = _pose_from_output(w.label)
            dist_errors.append(mjede(pred, gt))
            ang_errors.append(mjae(pred, gt))
            per_joint += np.linalg.norm(pred.joints[1:] - gt.joints[1:], axis=1)
            n += 1
        if n == 0:
            raise EmptyDataError("no evaluation windows")
        return EvalReport(
            task=HEAD_POSE,
            n_windows=n,
            metrics={"mjede_m": float(np.mean(dist_errors)), "mjae_deg": float(np.mean(ang_errors))},
            per_joint=(per_joint / n).tolist(),
            cdf={
                "mjede_m": error_cdf(dist_errors),
                "mjae_deg": error_cdf(ang_errors),
            },
        )
    if head.kind == HEAD_WRIST:
        errors = [mwae(predict(model, w.tensor), w.label) for w in windows]
        if not errors:
            raise EmptyDataError("no evaluation windows")
        return EvalReport(
            task=HEAD_WRIST,
            n_windows=len(errors),
            metrics={"mwae_deg": float(np.mean(errors))},
            cdf={"mwae_deg": error_cdf(errors)},
        )
    confusion = np.zeros((head.dim, head.dim), dtype=int)
    n = 0
    for w in windows:
        pred = predict(model, w.tensor)
        confusion[int(w.label), pred.class_id] += 1
        n += 1
    if n == 0:
        raise EmptyDataError("no evaluation windows")
    acc = float(np.trace(confusion)) / n
    return EvalReport(
        task=HEAD_CLASS,
        n_windows=n,
        metrics={"accuracy": acc},
        confusion=confusion.tolist(),
    )


# -- model artifacts ----------------------------------------------------------

_ARTIFACT_MAGIC = b"WSMD"
_ARTIFACT_VERSION = 1


def save_model(path, model: BaselineModel, spec: TrainSpec | None = None) -> None:
    """Versioned binary container: JSON header + raw float64 arrays."""
    if not model.fitted:
        raise NotFittedError("cannot save an unfitted model")
    header = {
        "head": model.head.kind,
        "features": {
            "grid_rows": model.features.grid_rows,
            "grid_cols": model.features.grid_cols,
            "thirds": model.features.thirds,
        },
        "ridge": model.ridge,
        "finetune_anchor": model.finetune_anchor,
        "loss_history": list(model.loss_history),
        "train_spec": None if spec is None else {
            "pretrain_epochs": spec.pretrain_epochs,
            "finetune_epochs": spec.finetune_epochs,
            "learning_rate": spec.learning_rate,
            "batch_size": spec.batch_size,
            "seed": spec.seed,
        },
        "arrays": {
            "scaler_mean": list(model.scaler_mean.shape),
            "scaler_std": list(model.scaler_std.shape),
            "weights": list(model.weights.shape),
        },
    }
    hdr = json.dumps(header).encode()
    blob = _ARTIFACT_MAGIC + struct.pack("<HI", _ARTIFACT_VERSION, len(hdr)) + hdr
    for arr in (model.scaler_mean, model.scaler_std, model.weights):
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    atomic_write_bytes(path, blob)


def load_model(path) -> BaselineModel:
    raw = open(path, "rb").read()
    if raw[:4] != _ARTIFACT_MAGIC:
        raise IOError(f"{path}: not a model artifact")
    version, hdr_len = struct.unpack_from("<HI", raw, 4)
    if version != _ARTIFACT_VERSION:
        raise IOError(f"{path}: unsupported artifact version {version}")
    header = json.loads(raw[10 : 10 + hdr_len])
    offset = 10 + hdr_len
    arrays = {}
    for name, shape in header["arrays"].items():
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += count * 8
    return BaselineModel(
        head=TaskHead(header["head"]),
        features=FeatureConfig(**header["features"]),
        ridge=header["ridge"],
        finetune_anchor=header["finetune_anchor"],
        weights=arrays["weights"],
        scaler_mean=arrays["scaler_mean"],
        scaler_std=arrays["scaler_std"],
        loss_history=tuple(header["loss_history"]),
    )
