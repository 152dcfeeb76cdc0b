"""Linear probes from token embeddings to token features.

Frequency is probed with ridge regression on log(count+1) and reported as
R-squared; boolean features are probed with L2-regularized logistic regression
and reported as ROC-AUC. All metrics come from a held-out 20% of the tokens.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.metrics import roc_auc_score

from .errors import ConfigurationError
from .textcorpus import FeatureTable

RIDGE_LAMBDA = 1.0
LOGISTIC_L2 = 1e-4
LOGISTIC_TOL = 1e-6
LOGISTIC_MAX_ITER = 5000


def split(n: int, fraction: float = 0.8, seed: int = 0, labels=None):
    """Disjoint exhaustive train/test index split, stratified when labels given."""
    if n < 10:
        raise ConfigurationError(f"need at least 10 rows to split, got {n}")
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"fraction must lie in (0,1), got {fraction}")
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    if labels is None:
        perm = rng.permutation(n)
        cut = int(round(fraction * n))
        return np.sort(perm[:cut]), np.sort(perm[cut:])
    labels = np.asarray(labels)
    train_parts, test_parts = [], []
    for value in np.unique(labels):
        idx = np.flatnonzero(labels == value)
        perm = idx[rng.permutation(len(idx))]
        cut = int(round(fraction * len(idx)))
        train_parts.append(perm[:cut])
        test_parts.append(perm[cut:])
    train = np.sort(np.concatenate(train_parts))
    test = np.sort(np.concatenate(test_parts))
    if len(train) == 0 or len(test) == 0:
        raise ConfigurationError("split produced an empty side")
    return train, test


def _standardize(train_X: np.ndarray, test_X: np.ndarray):
    mean = train_X.mean(axis=0)
    std = train_X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (train_X - mean) / std, (test_X - mean) / std


@dataclass
class ProbeFit:
    weights: np.ndarray
    bias: float
    metric: str
    value: float
    n_train: int
    n_test: int
    regularization: float


def fit_ridge(X: np.ndarray, y: np.ndarray, lam: float = RIDGE_LAMBDA, seed: int = 0,
              indices=None) -> ProbeFit:
    """Closed-form ridge on z-scored features; returns held-out R-squared."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if lam < 0:
        raise ConfigurationError("ridge lambda must be >= 0")
    train_idx, test_idx = indices if indices is not None else split(len(y), seed=seed)
    Xtr, Xte = _standardize(X[train_idx], X[test_idx])
    ytr, yte = y[train_idx], y[test_idx]
    y_mean = ytr.mean()
    d = Xtr.shape[1]
    w = np.linalg.solve(Xtr.T @ Xtr + lam * np.eye(d), Xtr.T @ (ytr - y_mean))
    pred = Xte @ w + y_mean
    ss_res = float(((yte - pred) ** 2).sum())
    ss_tot = float(((yte - yte.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return ProbeFit(
        weights=w, bias=float(y_mean), metric="r2", value=r2,
        n_train=len(train_idx), n_test=len(test_idx), regularization=lam,
    )


def _logistic_loss_grad(w, b, X, y, l2):
    z = X @ w + b
    # stable log(1+exp(-|z|)) formulation
    loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z))))
    loss += 0.5 * l2 * float(w @ w)
    p = 1.0 / (1.0 + np.exp(-z))
    gw = X.T @ (p - y) / len(y) + l2 * w
    gb = float(np.mean(p - y))
    return loss, gw, gb


def fit_logistic(X: np.ndarray, y: np.ndarray, l2: float = LOGISTIC_L2, seed: int = 0,
                 indices=None) -> ProbeFit | None:
    """Full-batch gradient descent with backtracking; stops when the loss delta
    falls below 1e-6. Returns None when the train split is single-class."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    train_idx, test_idx = (
        indices if indices is not None else split(len(y), seed=seed, labels=y)
    )
    ytr, yte = y[train_idx], y[test_idx]
    if len(np.unique(ytr)) < 2:
        return None
    Xtr, Xte = _standardize(X[train_idx], X[test_idx])

    w = np.zeros(Xtr.shape[1])
    b = 0.0
    lr = 1.0
    loss, gw, gb = _logistic_loss_grad(w, b, Xtr, ytr, l2)
    for _ in range(LOGISTIC_MAX_ITER):
        improved = False
        while lr > 1e-12:
            w_new = w - lr * gw
            b_new = b - lr * gb
            new_loss, new_gw, new_gb = _logistic_loss_grad(w_new, b_new, Xtr, ytr, l2)
            if new_loss <= loss:
                improved = True
                break
            lr *= 0.5
        if not improved:
            break
        delta = loss - new_loss
        w, b, loss, gw, gb = w_new, b_new, new_loss, new_gw, new_gb
        lr *= 1.2
        if delta < LOGISTIC_TOL:
            break
    scores = Xte @ w + b
    if len(np.unique(yte)) < 2:
        return None
    auc = float(roc_auc_score(yte, scores))
    return ProbeFit(
        weights=w, bias=b, metric="roc_auc", value=auc,
        n_train=len(train_idx), n_test=len(test_idx), regularization=l2,
    )


@dataclass
class ProbeResult:
    feature: str
    metric: str
    value: float
    n_train: int
    n_test: int
    regularization: float
    note: str = ""


def probe_suite(
    embeddings: np.ndarray,
    table: FeatureTable,
    seed: int = 0,
    ridge_lambda: float = RIDGE_LAMBDA,
    logistic_l2: float = LOGISTIC_L2,
) -> list[ProbeResult]:
    """One probe per feature: ridge for frequency, logistic for booleans.

    Ends with an "average" row, the arithmetic mean of the feature rows.
    Rows stay ordered: frequency first, then boolean features by name.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if table.token_ids.max() >= embeddings.shape[0]:
        raise ConfigurationError(
            f"feature table references token id {int(table.token_ids.max())} "
            f"outside embedding matrix of {embeddings.shape[0]} rows"
        )
    X = embeddings[table.token_ids]
    results: list[ProbeResult] = []

    y_freq = np.log1p(table.frequency.astype(np.float64))
    y_freq = (y_freq - y_freq.mean()) / (y_freq.std() or 1.0)
    fit = fit_ridge(X, y_freq, lam=ridge_lambda, seed=seed)
    results.append(
        ProbeResult("frequency", fit.metric, fit.value, fit.n_train, fit.n_test,
                    fit.regularization)
    )

    for name in sorted(table.booleans):
        y = table.booleans[name].astype(np.float64)
        if len(np.unique(y)) < 2:
            results.append(ProbeResult(name, "roc_auc", float("nan"), 0, 0,
                                       logistic_l2, note="skipped: single class"))
            continue
        fit = fit_logistic(X, y, l2=logistic_l2, seed=seed)
        if fit is None:
            results.append(ProbeResult(name, "roc_auc", float("nan"), 0, 0,
                                       logistic_l2, note="skipped: single-class split"))
            continue
        results.append(
            ProbeResult(name, fit.metric, fit.value, fit.n_train, fit.n_test,
                        fit.regularization)
        )

    scored = [r for r in results if not r.note]
    if scored:
        results.append(
            ProbeResult("average", "mean", float(np.mean([r.value for r in scored])),
                        0, 0, 0.0)
        )
    return results


def save_results_csv(results: list[ProbeResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "metric", "value", "n_train", "n_test", "note"])
        for r in results:
            writer.writerow([r.feature, r.metric, f"{r.value:.6g}", r.n_train, r.n_test, r.note])
    return path


def render_results(results: list[ProbeResult]) -> str:
    lines = [f"{'feature':24} {'metric':8} {'value':>8}  note"]
    for r in results:
        value = f"{r.value:.3f}" if np.isfinite(r.value) else "-"
        lines.append(f"{r.feature:24} {r.metric:8} {value:>8}  {r.note}")
    return "\n".join(lines)
