"""Principal component analysis for embedding reduction.

Plain eigendecomposition of the sample covariance; components are
sign-fixed so the largest-magnitude coordinate of each is positive, making
fits reproducible across runs.  No whitening.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # (d,)
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance: np.ndarray  # (k,), non-increasing


def fit_pca(embeddings: np.ndarray, n_components: int = 5) -> PcaModel:
    """Top-k eigenvectors of the sample covariance of the rows.

    Requires n >= max(d, n_components) rows with finite entries.
    """
    x = np.asarray(embeddings, dtype=float)
    if x.ndim != 2:
        raise ValidationError("embeddings must be a 2-D array")
    n, d = x.shape
    if n < n_components:
        raise ValidationError(f"need at least {n_components} rows, got {n}")
    if n < d:
        raise ValidationError(f"need n >= d for a full-rank covariance (n={n}, d={d})")
    if not np.all(np.isfinite(x)):
        raise ValidationError("embeddings contain non-finite entries")
    if n_components > d:
        raise ValidationError(f"cannot keep {n_components} components of dimension {d}")

    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1) if n > 1 else np.zeros((d, d))
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:n_components]
    components = eigvecs[:, order].T.copy()
    variances = np.maximum(eigvals[order], 0.0)
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(mean=mean, components=components, explained_variance=variances)


def project(model: PcaModel, embedding: np.ndarray) -> np.ndarray:
    """Center then rotate onto the retained components. Accepts (d,) or (n, d)."""
    x = np.asarray(embedding, dtype=float)
    return (x - model.mean) @ model.components.T


def pca_to_csv_lines(model: PcaModel) -> list[str]:
    lines = ["mean," + ",".join(repr(float(v)) for v in model.mean)]
    for row in model.components:
        lines.append("component," + ",".join(repr(float(v)) for v in row))
    lines.append(
        "variance," + ",".join(repr(float(v)) for v in model.explained_variance)
    )
    return lines


def pca_from_csv_lines(lines: list[str]) -> PcaModel:
    mean = None
    components = []
    variance = None
    for line in lines:
        tag, _, rest = line.strip().partition(",")
        values = np.array(rest.split(","), dtype=float)
        if tag == "mean":
            mean = values
        elif tag == "component":
            components.append(values)
        elif tag == "variance":
            variance = values
        elif tag:
            raise ValidationError(f"unknown PCA csv row tag {tag!r}")
    if mean is None or variance is None or not components:
        raise ValidationError("PCA csv is missing mean/component/variance rows")
    return PcaModel(
        mean=mean, components=np.vstack(components), explained_variance=variance
    )
