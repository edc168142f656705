"""Task heads, fine-tuning and evaluation metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .config import FinetuneConfig, ModelConfig
from .encoder import encode, linear
from .normalize import bin_edges, bin_labels
from .objective import OptimState, adamw_step, clip_grads, cosine_lr, prepare
from .tokenizer import tokenize


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics


def _check_labels(y_true, y_pred):
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("metrics need at least one sample")
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch {y_true.shape} vs {y_pred.shape}")
    return y_true.astype(np.int64).ravel(), y_pred.astype(np.int64).ravel()


def confusion_matrix(y_true, y_pred, n_classes: int | None = None) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    yt, yp = _check_labels(y_true, y_pred)
    k = n_classes or int(max(yt.max(), yp.max())) + 1
    return np.bincount(yt * k + yp, minlength=k * k).reshape(k, k)


def per_class_recall(y_true, y_pred) -> dict[int, float]:
    yt, yp = _check_labels(y_true, y_pred)
    cm = confusion_matrix(yt, yp)
    support = cm.sum(axis=1)
    return {c: int(cm[c, c]) / int(support[c]) for c in range(len(cm)) if support[c] > 0}


def balanced_accuracy(y_true, y_pred) -> float:
    """Unweighted mean recall over the classes present in ``y_true``."""
    rec = per_class_recall(y_true, y_pred)
    return math.fsum(rec.values()) / len(rec)


def weighted_f1(y_true, y_pred) -> float:
    """Support-weighted per-class F1; a class with no true positives scores 0."""
    yt, yp = _check_labels(y_true, y_pred)
    cm = confusion_matrix(yt, yp)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    total = int(support.sum())
    terms = []
    for c in range(len(cm)):
        if support[c] == 0:
            continue
        tp = int(cm[c, c])
        fp = int(predicted[c]) - tp
        fn = int(support[c]) - tp
        f1 = 2 * tp / (2 * tp + fp + fn)
        terms.append((int(support[c]) / total) * f1)
    return math.fsum(terms)


def r_squared(y_true, y_pred) -> float:
    """``1 - SS_res / SS_tot`` per output column, averaged uniformly."""
    yt = np.asarray(y_true, dtype=np.float64)
    yp = np.asarray(y_pred, dtype=np.float64)
    if yt.shape != yp.shape:
        raise ValueError(f"shape mismatch {yt.shape} vs {yp.shape}")
    if yt.ndim == 1:
        yt, yp = yt[:, None], yp[:, None]
    yt = yt.reshape(yt.shape[0], -1)
    yp = yp.reshape(yp.shape[0], -1)
    if yt.shape[0] < 2:
        raise ValueError("r_squared needs at least two samples")
    scores = []
    for j in range(yt.shape[1]):
        col = yt[:, j].tolist()
        mu = math.fsum(col) / len(col)
        ss_tot = math.fsum((v - mu) ** 2 for v in col)
        if ss_tot == 0.0:
            raise ValueError("r_squared is undefined for a constant target")
        ss_res = math.fsum((a - b) ** 2 for a, b in zip(col, yp[:, j].tolist()))
        scores.append(1.0 - ss_res / ss_tot)
    return math.fsum(scores) / len(scores)


@dataclass
class MetricReport:
    balanced_accuracy: float | None = None
    weighted_f1: float | None = None
    r_squared: float | None = None
    recalls: dict = field(default_factory=dict)
    confusion: np.ndarray | None = None

    def rows(self, split: str) -> list[tuple]:
        out = []
        for k in ("balanced_accuracy", "weighted_f1", "r_squared"):
            v = getattr(self, k)
            if v is not None:
                out.append((split, k, v))
        return out


def classification_report(y_true, y_pred, n_classes: int | None = None) -> MetricReport:
    return MetricReport(balanced_accuracy(y_true, y_pred), weighted_f1(y_true, y_pred),
                        recalls=per_class_recall(y_true, y_pred),
                        confusion=confusion_matrix(y_true, y_pred, n_classes))


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "metric", "value"])
        for split, metric, value in rows:
            w.writerow([split, metric, repr(float(value))])


def write_confusion_csv(path, cm: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + [str(j) for j in range(cm.shape[1])])
        for i, row in enumerate(cm):
            w.writerow([str(i)] + [str(int(v)) for v in row])


# ---------------------------------------------------------------------------
# heads


@dataclass(frozen=True)
class TaskSpec:
    """``kind`` is ``"classification"`` or ``"regression"``.

    Regression predicts the label sequence binned to ``T_norm`` steps, so the
    head width is ``k_outputs * T_norm`` (``horizon = T_norm``).
    """

    kind: str
    n_classes: int = 0
    k_outputs: int = 0

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.kind == "classification" and self.n_classes < 2:
            raise ConfigError("classification needs n_classes >= 2")
        if self.kind == "regression" and self.k_outputs < 1:
            raise ConfigError("regression needs k_outputs >= 1")

    def out_dim(self, cfg: ModelConfig) -> int:
        return self.n_classes if self.kind == "classification" else self.k_outputs * cfg.T_norm

    @classmethod
    def infer(cls, corpus, kind: str) -> "TaskSpec":
        if kind in ("cls", "classification"):
            labels = [r.label for r in corpus]
            if any(lab is None or isinstance(lab, np.ndarray) for lab in labels):
                raise ConfigError("classification needs integer labels on every trial")
            return cls("classification", n_classes=max(2, int(max(labels)) + 1))
        if kind in ("reg", "regression"):
            if not all(isinstance(r.label, np.ndarray) for r in corpus):
                raise ConfigError("regression needs sequence labels on every trial")
            return cls("regression", k_outputs=corpus[0].label.shape[1])
        raise ConfigError(f"unknown task {kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_classes": self.n_classes, "k_outputs": self.k_outputs}


def head_in_dim(cfg: ModelConfig) -> int:
    per = cfg.A * cfg.d if cfg.head_pool_t else cfg.A * cfg.t * cfg.d
    return cfg.N * per


def init_task_head(cfg: ModelConfig, task: TaskSpec, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 7])
    f, h, o = head_in_dim(cfg), cfg.head_hidden, task.out_dim(cfg)
    dt = nx.get_dtype()
    return {"head.W1": (rng.standard_normal((f, h)) / np.sqrt(f)).astype(dt),
            "head.b1": np.zeros(h, dt),
            "head.W2": (rng.standard_normal((h, o)) / np.sqrt(h)).astype(dt),
            "head.b2": np.zeros(o, dt)}


def task_forward(p, X, M, cfg: ModelConfig, training: bool = False,
                 rng: np.random.Generator | None = None) -> nx.Tensor:
    """tokens -> encoder -> flatten -> MLP head; returns ``[B, out_dim]``."""
    H = encode(tokenize(p, X, M, cfg), p, cfg, training, rng)
    if cfg.head_pool_t:
        H = nx.avgpool_axis(H, -2)
    flat = nx.reshape(H, (H.shape[0], -1))
    hidden = nx.dropout(nx.gelu(linear(flat, p["head.W1"], p["head.b1"])), cfg.dropout, rng, training)
    return linear(hidden, p["head.W2"], p["head.b2"])


def cross_entropy(logits, y: np.ndarray) -> nx.Tensor:
    logp = nx.log_softmax(logits)
    onehot = np.zeros(logits.shape, dtype=nx.get_dtype())
    onehot[np.arange(len(y)), y] = -1.0 / len(y)
    return nx.sum(nx.mul(logp, onehot))


def mse(pred, target: np.ndarray) -> nx.Tensor:
    diff = nx.sub(pred, target)
    return nx.mul(nx.sum(nx.mul(diff, diff)), 1.0 / target.size)


def task_targets(corpus, task: TaskSpec, cfg: ModelConfig) -> np.ndarray:
    if task.kind == "classification":
        return np.array([r.label for r in corpus], dtype=np.int64)
    ys = [bin_labels(r.label, bin_edges(r.T_raw, cfg.T_norm)).reshape(-1) for r in corpus]
    return np.stack(ys).astype(nx.get_dtype())


@dataclass
class FinetuneResult:
    params: dict
    task: TaskSpec
    losses: list = field(default_factory=list)


def check_compatible(params: dict, cfg: ModelConfig) -> None:
    W_e = params.get("tok.W_e")
    if W_e is None or W_e.shape != (cfg.C_norm, cfg.d):
        raise ConfigError("checkpoint tokenizer does not match the model config")
    if params["tok.T_pos"].shape[0] != cfg.T_norm or params["tok.A_pos"].shape[0] != cfg.A:
        raise ConfigError("checkpoint positional tables do not match the model config")


def finetune(params: dict, corpus, task: TaskSpec, cfg: ModelConfig, fcfg: FinetuneConfig,
             embedder=None, on_epoch=None) -> FinetuneResult:
    """Full-parameter fine-tuning; the reconstruction head is swapped for a task head."""
    if not corpus:
        raise ValueError("fine-tuning corpus is empty")
    check_compatible(params, cfg)
    dt = nx.get_dtype()
    p = {k: np.array(v, dtype=dt) for k, v in params.items() if not k.startswith(("recon.", "head."))}
    p.update(init_task_head(cfg, task, fcfg.seed))
    X, M = prepare(corpus, cfg, embedder)
    Y = task_targets(corpus, task, cfg)
    state = OptimState.for_params(p, beta1=fcfg.beta1, beta2=fcfg.beta2,
                                  eps=fcfg.adam_eps, weight_decay=fcfg.weight_decay)
    rng = np.random.default_rng([fcfg.seed, 2])
    res = FinetuneResult(p, task)
    n = len(X)
    for epoch in range(fcfg.epochs):
        lr = cosine_lr(epoch, fcfg.epochs, fcfg.lr, fcfg.lr_min)
        order = rng.permutation(n)
        losses = []
        for b0 in range(0, n, fcfg.batch_size):
            idx = order[b0:b0 + fcfg.batch_size]
            drop_rng = np.random.default_rng(rng.integers(0, 2**63 - 1))
            xb, mb, yb = X[idx], M[idx], Y[idx]

            def loss_fn(q):
                out = task_forward(q, xb, mb, cfg, True, drop_rng)
                return cross_entropy(out, yb) if task.kind == "classification" else mse(out, yb)

            loss, grads = nx.grad(loss_fn, p)
            if fcfg.clip_norm > 0:
                clip_grads(grads, fcfg.clip_norm)
            adamw_step(p, grads, state, lr)
            losses.append(loss)
        res.losses.append(float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch, res.losses[-1])
    return res


def predict(params: dict, corpus, task: TaskSpec, cfg: ModelConfig, embedder=None,
            batch_size: int = 64) -> np.ndarray:
    X, M = prepare(corpus, cfg, embedder)
    outs = [task_forward(params, X[i:i + batch_size], M[i:i + batch_size], cfg).data
            for i in range(0, len(X), batch_size)]
    out = np.concatenate(outs)
    if task.kind == "classification":
        return out.argmax(axis=1)
    return out.reshape(len(X), cfg.T_norm, task.k_outputs)


def evaluate(params: dict, corpus, task: TaskSpec, cfg: ModelConfig, embedder=None) -> MetricReport:
    pred = predict(params, corpus, task, cfg, embedder)
    if task.kind == "classification":
        y = np.array([r.label for r in corpus])
        return classification_report(y, pred, task.n_classes)
    y = task_targets(corpus, task, cfg).reshape(pred.shape)
    return MetricReport(r_squared=r_squared(y.reshape(-1, task.k_outputs),
                                            pred.reshape(-1, task.k_outputs)))
