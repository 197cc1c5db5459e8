"""
End-to-end optimisation: AdamW, the epoch loop with the GRL schedule and
dynamic-factor updates, WAR/UAR evaluation and representation probes.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.linear_model import LogisticRegression

from .config import TrainConfig
from .datasets import FeatureDataset, iter_batches, kfold_split
from .diffcore import Tensor
from .errors import ConfigError, DimensionError, NumericalError
from .model import FDRLModel, encode, fuse, save_checkpoint
from .objectives import TERMS, DynamicFactorState, compute_losses, report_row, write_loss_log

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
    """One in-place AdamW update with decoupled weight decay.

    ``params`` and ``grads`` map names to arrays; parameters whose gradient is
    ``None`` are left untouched. ``state`` holds ``step``, ``m`` and ``v``.
    """
    beta1, beta2 = betas
    state["step"] = state.get("step", 0) + 1
    t = state["step"]
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"{name}: grad {g.shape} vs param {p.shape}")
        if name not in m:
            m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        p -= lr * weight_decay * p
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
        m_hat = m[name] / bc1
        v_hat = v[name] / bc2
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class AdamW:
    def __init__(self, params, lr=1e-5, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state = {}

    def step(self):
        arrays = {k: t.data for k, t in self.params.items()}
        grads = {k: t.grad for k, t in self.params.items()}
        adamw_step(arrays, grads, self.state, self.lr, self.betas, self.eps, self.weight_decay)


def clip_grad_norm(params, max_norm):
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm > 0:
        factor = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    war: float
    uar: float
    confusion: np.ndarray
    excluded_classes: list = field(default_factory=list)

    @property
    def total(self):
        return int(self.confusion.sum())

    def to_dict(self):
        return {"WAR": self.war, "UAR": self.uar, "confusion": self.confusion.tolist(),
                "excluded_classes": list(self.excluded_classes)}

    def to_text(self, class_names=None):
        lines = [f"WAR = {self.war!r}", f"UAR = {self.uar!r}", f"samples = {self.total}"]
        if self.excluded_classes:
            lines.append(f"uar_excluded_classes = {','.join(map(str, self.excluded_classes))}")
        names = class_names or [str(c) for c in range(len(self.confusion))]
        for c, row in enumerate(self.confusion):
            lines.append(f"confusion.{names[c]} = {' '.join(str(int(v)) for v in row)}")
        return "\n".join(lines) + "\n"


def confusion_matrix(y_true, y_pred, classes):
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, int), np.asarray(y_pred, int)), 1)
    return cm


def metrics_from_confusion(cm):
    """WAR = overall accuracy; UAR = mean recall over classes with support."""
    cm = np.asarray(cm)
    total = cm.sum()
    war = float(np.trace(cm) / total) if total else float("nan")
    support = cm.sum(axis=1)
    seen = support > 0
    recall = np.diag(cm)[seen] / support[seen]
    uar = float(recall.mean()) if seen.any() else float("nan")
    excluded = [int(c) for c in np.flatnonzero(~seen)]
    return MetricsReport(war, uar, cm, excluded)


def compute_metrics(y_true, y_pred, classes):
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, classes))


def mean_metrics(reports):
    """Mean WAR/UAR over folds; confusions are summed."""
    cm = sum(r.confusion for r in reports)
    return {"WAR": float(np.mean([r.war for r in reports])),
            "UAR": float(np.mean([r.uar for r in reports])),
            "confusion": cm.tolist()}


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------

def latents(model, ds, batch_size=256):
    """Shared/private codes for every record as plain arrays (S_a, S_t, P_a, P_t)."""
    out = [[], [], [], []]
    for b in iter_batches(ds, np.arange(len(ds)), batch_size):
        pack = encode(Tensor(b.h_a), Tensor(b.h_t), model.shared, model.priv_a, model.priv_t)
        for acc, t in zip(out, (pack.S_a, pack.S_t, pack.P_a, pack.P_t)):
            acc.append(t.data)
    return tuple(np.concatenate(parts, axis=0) for parts in out)


def predict(model, ds, batch_size=256):
    preds = []
    for b in iter_batches(ds, np.arange(len(ds)), batch_size):
        pack = encode(Tensor(b.h_a), Tensor(b.h_t), model.shared, model.priv_a, model.priv_t)
        preds.append(np.argmax(fuse(pack, model.fusion)[1].data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(model, ds):
    if ds.h_a.shape[1] != model.d_in:
        raise DimensionError(f"data d_in={ds.h_a.shape[1]} but model expects {model.d_in}")
    if ds.manifest.classes != model.classes:
        raise DimensionError(f"data has {ds.manifest.classes} classes but model has {model.classes}")
    return compute_metrics(ds.y, predict(model, ds), model.classes)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: FDRLModel
    config: TrainConfig
    fold: int
    log_rows: list
    mu_history: list
    lambda_history: list
    metrics: MetricsReport
    best_epoch: Optional[int] = None
    seconds: float = 0.0

    def save(self, outdir, class_names=None):
        """Write checkpoint, loss log, metrics text and JSON summary into ``outdir``."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(outdir / "model.ckpt", self.model, self.config.to_dict(),
                        extra={"fold": self.fold, "mu": self.mu_history[-1] if self.mu_history else 0.5})
        write_loss_log(outdir / "loss_log.csv", self.log_rows, self.config.classes)
        (outdir / "metrics.txt").write_text(self.metrics.to_text(class_names), encoding="utf-8")
        summary = {"fold": self.fold, **self.metrics.to_dict(), "mu_history": self.mu_history,
                   "lambda_history": self.lambda_history, "best_epoch": self.best_epoch}
        (outdir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")


def resolve_config(cfg, ds):
    """Fill data-derived dimensions and check the rest against the data."""
    d_in, classes = ds.h_a.shape[1], ds.manifest.classes
    if cfg.d_in and cfg.d_in != d_in:
        raise ConfigError(f"config d_in={cfg.d_in} but data has d_in={d_in}")
    if cfg.classes and cfg.classes != classes:
        raise ConfigError(f"config classes={cfg.classes} but data has {classes} classes")
    cfg = dataclasses.replace(cfg, d_in=d_in, classes=classes, folds=ds.manifest.folds)
    return cfg.validate()


def _check_finite(report, step):
    for name in TERMS:
        value = getattr(report, name)
        if not math.isfinite(value):
            raise NumericalError(name, value, step)


def train(cfg, ds, fold=1, callback=None):
    """Train one fold and evaluate on its held-out split."""
    cfg = resolve_config(cfg, ds)
    started = time.perf_counter()
    train_idx, test_idx = kfold_split(ds, fold)
    test_ds = ds.subset(test_idx)
    model = FDRLModel.from_config(cfg)
    params = model.parameters()
    opt = AdamW(params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)
    factor = DynamicFactorState(cfg.classes)
    dual_alignment = cfg.term_active("alignment_global") and cfg.term_active("alignment_local")

    rows, mu_hist, lam_hist = [], [], []
    best = (-1.0, None, None)
    step = 0
    for epoch in range(cfg.epochs):
        lam = cfg.lambda_at(epoch / cfg.epochs)
        lam_hist.append(lam)
        mu_hist.append(factor.mu)
        rng = np.random.default_rng([cfg.seed, fold, epoch])
        for batch in iter_batches(ds, train_idx, cfg.batch_size, rng):
            model.zero_grad()
            total, report, _ = compute_losses(model, batch.h_a, batch.h_t, batch.y, cfg, factor.mu, lam)
            _check_finite(report, step)
            total.backward()
            if cfg.grad_clip > 0:
                clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            if dual_alignment:
                factor.accumulate(2 * len(batch.y), report.L_g, report.subdomain_sums, report.class_mass)
            rows.append(report_row(step, epoch, report))
            step += 1
        if dual_alignment:
            factor.update_mu()
        if cfg.select_best:
            war = evaluate(model, test_ds).war
            if war > best[0]:
                best = (war, epoch, {k: t.data.copy() for k, t in params.items()})
        if callback is not None:
            callback(epoch, model, factor)

    best_epoch = None
    if cfg.select_best and best[2] is not None:
        model.load_arrays(best[2])
        best_epoch = best[1]
    metrics = evaluate(model, test_ds)
    return TrainResult(model, cfg, fold, rows, mu_hist, lam_hist, metrics, best_epoch,
                       time.perf_counter() - started)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

@dataclass
class ProbeReport:
    modality_on_shared: float
    modality_on_private: float
    emotion_on_shared: float
    centroid_distance: list
    mean_centroid_distance: float

    def to_dict(self):
        return dataclasses.asdict(self)


def _probe_accuracy(X, y, groups, seed):
    """Held-out accuracy of a logistic-regression probe; split by sample id."""
    rng = np.random.default_rng(seed)
    ids = np.unique(groups)
    held = set(rng.permutation(ids)[: len(ids) // 2].tolist())
    test = np.array([g in held for g in groups])
    mu, sd = X[~test].mean(axis=0), X[~test].std(axis=0) + 1e-12
    clf = LogisticRegression(max_iter=2000)
    clf.fit((X[~test] - mu) / sd, y[~test])
    return float(clf.score((X[test] - mu) / sd, y[test]))


def centroid_distances(S_a, S_t, y, classes):
    """Per-class Euclidean distance between speech and text shared-code centroids."""
    out = []
    for c in range(classes):
        sel = y == c
        if not sel.any():
            out.append(float("nan"))
            continue
        out.append(float(np.linalg.norm(S_a[sel].mean(axis=0) - S_t[sel].mean(axis=0))))
    return out


def probe_disentanglement(model, ds, seed=0):
    """Linear probes on frozen codes plus the per-class centroid gap.

    Centroid distances are divided by the overall scale of the shared codes
    so that shrinking the codes does not count as alignment.
    """
    S_a, S_t, P_a, P_t = latents(model, ds)
    n = len(ds)
    ids = np.concatenate([np.arange(n), np.arange(n)])
    y_m = np.concatenate([np.zeros(n, int), np.ones(n, int)])
    S = np.concatenate([S_a, S_t])
    P = np.concatenate([P_a, P_t])
    y_e = np.concatenate([ds.y, ds.y])
    scale = float(np.sqrt(np.mean(np.sum((S - S.mean(axis=0)) ** 2, axis=1)))) or 1.0
    dist = [v / scale for v in centroid_distances(S_a, S_t, ds.y, model.classes)]
    return ProbeReport(
        modality_on_shared=_probe_accuracy(S, y_m, ids, seed),
        modality_on_private=_probe_accuracy(P, y_m, ids, seed),
        emotion_on_shared=_probe_accuracy(S, y_e, ids, seed),
        centroid_distance=dist,
        mean_centroid_distance=float(np.nanmean(dist)),
    )
