"""Embedding geometry: mean-centered singular spectra and k-means variance curves.

The spectrum of the column-centered embedding matrix measures effective
dimensionality; the k-means unexplained-variance curve measures how clustered
the embeddings are as the number of clusters grows.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.cluster import KMeans

from .errors import ConfigurationError
from .model import TransformerLM, load_checkpoint

FROBENIUS_RTOL = 1e-5


def extract_embeddings(source, which: str = "input") -> np.ndarray:
    """Embedding matrix (n_tokens x d) from a model or checkpoint directory."""
    if not isinstance(source, TransformerLM):
        source = load_checkpoint(source)
    if which == "input":
        weight = source.input_embedding.weight
    elif which == "output":
        weight = source.output_embedding.weight
    else:
        raise ConfigurationError(f"unknown embedding matrix {which!r}")
    return weight.detach().cpu().numpy().astype(np.float64)


@dataclass
class SpectrumReport:
    singular_values: np.ndarray  # descending
    cumulative_explained: np.ndarray  # fraction of centered variance per rank
    matrix_label: str = "input"

    def explained_at(self, rank: int) -> float:
        return float(self.cumulative_explained[rank - 1])


def spectrum(embeddings: np.ndarray, matrix_label: str = "input") -> SpectrumReport:
    """Singular values of the column-centered matrix, largest first."""
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 2:
        raise ConfigurationError(f"need an (n>=2, d) matrix, got shape {E.shape}")
    if not np.isfinite(E).all():
        raise ConfigurationError("embedding matrix contains non-finite entries")
    centered = E - E.mean(axis=0, keepdims=True)
    sigma = np.linalg.svd(centered, compute_uv=False)
    total = float((sigma**2).sum())
    frob = float((centered**2).sum())
    if abs(total - frob) > FROBENIUS_RTOL * max(frob, 1.0):
        raise ConfigurationError("spectrum failed the Frobenius identity")
    if total > 0:
        cum = np.cumsum(sigma**2) / total
    else:
        cum = np.zeros_like(sigma)
    return SpectrumReport(
        singular_values=sigma, cumulative_explained=cum, matrix_label=matrix_label
    )


@dataclass
class ClusterCurve:
    k_values: list[int]
    unexplained: list[float]  # within-cluster SS / total SS


def _lloyd_refine(X: np.ndarray, centers: np.ndarray, iters: int = 100) -> float:
    """Lloyd iterations from explicit centers; returns final within-cluster SS."""
    for _ in range(iters):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(centers.shape[0]):
            members = X[assign == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
        if np.allclose(new_centers, centers):
            centers = new_centers
            break
        centers = new_centers
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return float(d2.min(axis=1).sum())


def cluster_curve(
    embeddings: np.ndarray,
    k_values,
    seed: int = 0,
    restarts: int = 10,
) -> ClusterCurve:
    """Best-of-restarts k-means curve, guaranteed non-increasing in k.

    Each k runs `restarts` k-means++ starts; additionally the previous k's
    best centers, augmented with the points farthest from their assigned
    center, seed one warm start. Warm starts can only improve on the previous
    within-cluster SS, which makes the curve monotone by construction.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    n = X.shape[0]
    k_values = sorted(int(k) for k in k_values)
    if not k_values:
        raise ConfigurationError("k_values is empty")
    if k_values[0] < 1 or k_values[-1] > n:
        raise ConfigurationError(f"k_values must lie in [1, {n}]")
    mean = X.mean(axis=0, keepdims=True)
    total_ss = float(((X - mean) ** 2).sum())
    if total_ss == 0.0:
        return ClusterCurve(k_values=k_values, unexplained=[0.0] * len(k_values))

    result: list[float] = []
    prev_centers = None
    prev_wcss = None
    for idx, k in enumerate(k_values):
        if k == 1:
            # optimal single cluster is the mean
            wcss = total_ss
            centers = mean.copy()
        elif k == n:
            wcss = 0.0
            centers = X.copy()
        else:
            km = KMeans(
                n_clusters=k,
                init="k-means++",
                n_init=restarts,
                random_state=(seed + idx) % (2**32),
            ).fit(X)
            wcss = float(km.inertia_)
            centers = km.cluster_centers_
            if prev_centers is not None and prev_centers.shape[0] < k:
                warm = _warm_start_centers(X, prev_centers, k)
                warm_wcss = _lloyd_refine(X, warm)
                if warm_wcss < wcss:
                    wcss = warm_wcss
                    centers = warm
        if prev_wcss is not None and wcss > prev_wcss:
            # warm start guarantees this only when computed; guard regardless
            wcss, centers = prev_wcss, prev_centers
        result.append(wcss / total_ss if k > 1 else 1.0)
        prev_centers, prev_wcss = centers, wcss
    return ClusterCurve(k_values=k_values, unexplained=result)


def _warm_start_centers(X: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Augment centers to k by repeatedly adding the worst-fit data point."""
    centers = centers.copy()
    while centers.shape[0] < k:
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2).min(axis=1)
        centers = np.vstack([centers, X[int(d2.argmax())]])
    return centers


def save_spectrum_csv(report: SpectrumReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "sigma", "cum_var"])
        for i, (s, c) in enumerate(
            zip(report.singular_values, report.cumulative_explained), start=1
        ):
            writer.writerow([i, f"{s:.10g}", f"{c:.10g}"])
    return path


def save_cluster_csv(curve: ClusterCurve, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "unexplained"])
        for k, u in zip(curve.k_values, curve.unexplained):
            writer.writerow([k, f"{u:.10g}"])
    return path


def compare_models(
    checkpoints: dict[str, object],
    analysis: str = "spectrum",
    which: str = "input",
    k_values=None,
    seed: int = 0,
    out_csv=None,
    out_png=None,
) -> dict[str, object]:
    """Aligned analysis series for several checkpoints, with CSV and plot emission.

    `checkpoints` maps label -> model or checkpoint dir. All matrices must
    share the embedding dimension d.
    """
    matrices = {label: extract_embeddings(src, which) for label, src in checkpoints.items()}
    dims = {m.shape[1] for m in matrices.values()}
    if len(dims) > 1:
        raise ConfigurationError(f"embedding dimensions differ across checkpoints: {dims}")

    series: dict[str, object] = {}
    if analysis == "spectrum":
        for label, E in matrices.items():
            series[label] = spectrum(E, matrix_label=which)
        x_label, y_label = "rank", "singular value"
        rows = {
            label: list(zip(range(1, len(rep.singular_values) + 1), rep.singular_values))
            for label, rep in series.items()
        }
    elif analysis == "clusters":
        if k_values is None:
            n_min = min(m.shape[0] for m in matrices.values())
            k_values = [k for k in (1, 2, 4, 8, 16, 32, 64, 128, 256) if k <= n_min]
        for label, E in matrices.items():
            series[label] = cluster_curve(E, k_values, seed=seed)
        x_label, y_label = "k", "unexplained variance"
        rows = {
            label: list(zip(curve.k_values, curve.unexplained))
            for label, curve in series.items()
        }
    else:
        raise ConfigurationError(f"unknown analysis {analysis!r}")

    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label", x_label, y_label.replace(" ", "_")])
            for label in sorted(rows):
                for x, y in rows[label]:
                    writer.writerow([label, x, f"{y:.10g}"])
    if out_png is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(7, 4.5))
        for label in sorted(rows):
            xs, ys = zip(*rows[label])
            ax.plot(xs, ys, marker=".", label=label)
        ax.set_xlabel(x_label)
        ax.set_ylabel(y_label)
        ax.set_yscale("log" if analysis == "spectrum" else "linear")
        ax.legend()
        fig.tight_layout()
        out_png = Path(out_png)
        out_png.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_png, dpi=120)
        plt.close(fig)
    return series
