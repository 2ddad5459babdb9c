"""Linear-probe evaluation and gate diagnostics."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .diffnet import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class ProbeResult:
    accuracies: list
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        a = np.asarray(self.accuracies, dtype=np.float64)
        self.mean = float(a.mean()) if a.size else float("nan")
        self.std = float(a.std()) if a.size else float("nan")


@dataclass
class GateDiagnostics:
    m: np.ndarray
    h: np.ndarray
    spearman_rho: float
    bin_means: np.ndarray
    bin_stds: np.ndarray
    bin_sizes: np.ndarray
    mean_shift: float
    median_shift: float
    histogram: np.ndarray       # (50, 3): bin left edge, count clean, count attacked


def _standardize(Z, tr):
    mu = Z[tr].mean(axis=0)
    sd = Z[tr].std(axis=0)
    sd[sd < 1e-12] = 1.0
    return (Z - mu) / sd


def fit_softmax(Z, y, tr, n_classes, steps=1000, lr=0.01, weight_decay=1e-4):
    """Full-batch multinomial logistic regression (Adam). Returns (W, b)."""
    Zt, yt = Z[tr], y[tr]
    D = Z.shape[1]
    W = np.zeros((D, n_classes))
    b = np.zeros(n_classes)
    Y = np.eye(n_classes)[yt]
    state = AdamState()
    for _ in range(steps):
        logits = Zt @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        P = np.exp(logits)
        P /= P.sum(axis=1, keepdims=True)
        G = (P - Y) / len(yt)
        adam_step([W, b], [Zt.T @ G, G.sum(axis=0)], state, lr, 0.0)
        W -= lr * weight_decay * W
    return W, b


def probe_split(Z, y, tr, te, n_classes=None, steps=1000, lr=0.01, weight_decay=1e-4,
                return_loss=False):
    """Train on ``tr``, report accuracy (and mean cross-entropy) on ``te``."""
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y)
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    if np.unique(y[tr]).size < 2:
        log.warning("probe: training split holds a single class")
    Zs = _standardize(Z, tr)
    W, b = fit_softmax(Zs, y, tr, n_classes, steps, lr, weight_decay)
    logits = Zs[te] @ W + b
    acc = float(np.mean(np.argmax(logits, axis=1) == y[te]))
    if not return_loss:
        return acc
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return acc, float(-np.mean(logp[np.arange(len(te)), y[te]]))


def linear_probe(Z, labels, splits, steps=1000, lr=0.01, weight_decay=1e-4):
    """Frozen-embedding linear classifier per split; test accuracy per split."""
    Z = np.asarray(Z, dtype=np.float64)
    if not np.all(np.isfinite(Z)):
        raise ValueError("embeddings contain non-finite values")
    labels = np.asarray(labels)
    C = int(labels.max()) + 1
    accs = [probe_split(Z, labels, tr, te, C, steps, lr, weight_decay) for tr, _, te in splits]
    return ProbeResult(accs)


def drop_percent(clean, attacked):
    """Relative accuracy drop in percent."""
    c = clean.mean if isinstance(clean, ProbeResult) else float(clean)
    a = attacked.mean if isinstance(attacked, ProbeResult) else float(attacked)
    return (c - a) / c * 100.0


def evaluate_poisoned(config, poisoned_bundle, splits, clean_result=None):
    """Pretrain on the poisoned graph and probe on the same graph.

    Returns ``(ProbeResult, drop_percent or None)``.
    """
    from .trainer import build_model, train

    model = build_model(poisoned_bundle.features.shape[1], config)
    model, _ = train(model, poisoned_bundle, config, splits=splits)
    Z = model.embed(poisoned_bundle.graph, poisoned_bundle.features)["Z"]
    res = linear_probe(Z, poisoned_bundle.labels, splits)
    drop = None if clean_result is None else drop_percent(clean_result, res)
    return res, drop


def spearman(x, y):
    """Spearman rank correlation with average ranks for ties; 0 for constant input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 3:
        raise ValueError("need two aligned vectors of length >= 3")
    rx, ry = rankdata(x), rankdata(y)
    if np.ptp(rx) == 0 or np.ptp(ry) == 0:
        log.warning("spearman: constant input, returning 0")
        return 0.0
    rx -= rx.mean()
    ry -= ry.mean()
    return float(np.sum(rx * ry) / np.sqrt(np.sum(rx * rx) * np.sum(ry * ry)))


def quantile_bins(h, n_bins=5):
    """Node indices split into ``n_bins`` groups of near-equal size by ascending h."""
    order = np.argsort(h, kind="stable")
    return np.array_split(order, n_bins)


def gate_diagnostics(m_clean, m_attacked, h, n_bins=5, hist_bins=50):
    m_clean = np.asarray(m_clean, dtype=np.float64).ravel()
    m_attacked = np.asarray(m_attacked, dtype=np.float64).ravel()
    h = np.asarray(h, dtype=np.float64).ravel()
    if not (m_clean.shape == m_attacked.shape == h.shape):
        raise ValueError("gate and homophily vectors must be aligned")
    bins = quantile_bins(h, n_bins)
    means = np.array([m_clean[b].mean() if b.size else np.nan for b in bins])
    stds = np.array([m_clean[b].std() if b.size else np.nan for b in bins])
    edges = np.linspace(0.0, 1.0, hist_bins + 1)
    hc, _ = np.histogram(m_clean, bins=edges)
    ha, _ = np.histogram(m_attacked, bins=edges)
    hist = np.stack([edges[:-1], hc, ha], axis=1)
    return GateDiagnostics(
        m=m_clean, h=h, spearman_rho=spearman(m_clean, h),
        bin_means=means, bin_stds=stds, bin_sizes=np.array([b.size for b in bins]),
        mean_shift=float(m_attacked.mean() - m_clean.mean()),
        median_shift=float(np.median(m_attacked) - np.median(m_clean)),
        histogram=hist,
    )


# ---------------------------------------------------------------------------
# output files


def write_metrics(path, dataset, protocol, result, drop=None, extra=None):
    payload = {
        "dataset": dataset,
        "protocol": protocol,
        "accuracy_mean": result.mean,
        "accuracy_std": result.std,
        "per_split": list(map(float, result.accuracies)),
    }
    if drop is not None:
        payload["drop_percent"] = float(drop)
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
    return payload


def write_gates_csv(path, m_clean, m_attacked, h):
    with open(path, "w") as fh:
        fh.write("node,m_clean,m_attacked,homophily\n")
        for v, (a, b, c) in enumerate(zip(m_clean, m_attacked, h)):
            fh.write(f"{v},{float(a)!r},{float(b)!r},{float(c)!r}\n")


def write_histogram_csv(path, diag):
    with open(path, "w") as fh:
        fh.write("bin_left,bin_right,count_clean,count_attacked\n")
        width = diag.histogram[1, 0] - diag.histogram[0, 0] if len(diag.histogram) > 1 else 1.0
        for left, c, a in diag.histogram:
            fh.write(f"{left:.4f},{left + width:.4f},{int(c)},{int(a)}\n")
