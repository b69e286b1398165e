"""Log-Euclidean statistics over deformation fields and their latents.

Once fields are mapped to a linear space, either the velocity vectors of
their principal logarithms or the autoencoder latents, ordinary vector-space
statistics apply: PCA for modes of variation, arithmetic means pushed back
through the exponential map, least-squares regression of scalar covariates,
and straight-line walks through latent space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import DeformationField, VectorField
from .groupmaps import ExpConfig, exp_scaling_squaring
from .model import ModelParams, decode_root


@dataclass(frozen=True)
class PcaModel:
    """Mean, orthonormal components (eigenvalue-descending), eigenvalues."""

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    explained_fraction: np.ndarray

    def to_json_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "explained_fraction": self.explained_fraction.tolist(),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PcaModel":
        return cls(
            mean=np.asarray(doc["mean"], dtype=np.float64),
            components=np.asarray(doc["components"], dtype=np.float64),
            eigenvalues=np.asarray(doc["eigenvalues"], dtype=np.float64),
            explained_fraction=np.asarray(doc["explained_fraction"], dtype=np.float64),
        )


def pca_fit(samples, k: int) -> PcaModel:
    """Thin-SVD PCA of row-vector samples, eigenvalues = sing**2 / (n - 1)."""
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("pca_fit needs at least 2 sample vectors")
    n, p = X.shape
    if not 1 <= k <= min(n - 1, p):
        raise ValueError(f"k={k} out of range [1, {min(n - 1, p)}]")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    ev_all = np.maximum((s * s) / (n - 1), 0.0)
    total = float(ev_all.sum())
    ev = ev_all[:k]
    frac = ev / total if total > 0.0 else np.zeros(k)
    return PcaModel(mean=mean, components=vt[:k], eigenvalues=ev, explained_fraction=frac)


def pca_project(model: PcaModel, vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != model.mean.shape:
        raise ValueError("vector length does not match the PCA model")
    return model.components @ (vec - model.mean)


def pca_reconstruct(model: PcaModel, coords) -> np.ndarray:
    """mean + sum_j coords_j * component_j."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape != (model.components.shape[0],):
        raise ValueError(
            f"need {model.components.shape[0]} mode coordinates, got {coords.shape}"
        )
    return model.mean + coords @ model.components


def log_euclidean_mean(fields, log_fn, exp_cfg: ExpConfig = ExpConfig()) -> DeformationField:
    """Exponential of the arithmetic mean of the fields' logarithms.

    log_fn maps a DeformationField to its velocity (e.g. the iterative
    optimization log or the amortized model log); its warnings propagate.
    The mean is anchored at the first log so duplicated inputs reproduce the
    singleton result bitwise.
    """
    fields = list(fields)
    if not fields:
        raise ValueError("log_euclidean_mean needs at least one field")
    grid = fields[0].grid
    logs = []
    for f in fields:
        if f.grid != grid:
            raise ValueError("fields must share a grid")
        logs.append(log_fn(f).data)
    anchor = logs[0]
    mean = anchor + np.mean([l - anchor for l in logs], axis=0)
    return exp_scaling_squaring(VectorField(grid, mean), exp_cfg)


@dataclass(frozen=True)
class RegressionModel:
    """Ridge-stabilized least squares on standardized latents.

    weights act on standardized features; feature_mean / feature_scale hold
    the training standardization.  r values are Pearson correlations between
    predictions and targets (train split and held-out split).
    """

    weights: np.ndarray
    intercept: float
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    train_r: float
    test_r: float
    constant_target: bool = False
    r_definition: str = field(default="pearson_heldout")

    def to_json_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "intercept": self.intercept,
            "train_r": self.train_r,
            "test_r": self.test_r,
            "feature_mean": self.feature_mean.tolist(),
            "feature_scale": self.feature_scale.tolist(),
            "constant_target": self.constant_target,
            "r_definition": self.r_definition,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "RegressionModel":
        return cls(
            weights=np.asarray(doc["weights"], dtype=np.float64),
            intercept=float(doc["intercept"]),
            feature_mean=np.asarray(doc["feature_mean"], dtype=np.float64),
            feature_scale=np.asarray(doc["feature_scale"], dtype=np.float64),
            train_r=float(doc["train_r"]),
            test_r=float(doc["test_r"]),
            constant_target=bool(doc.get("constant_target", False)),
            r_definition=doc.get("r_definition", "pearson_heldout"),
        )


def pearson_r(a, b) -> float:
    """Pearson correlation; 0 when either side has no variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sa = a - a.mean()
    sb = b - b.mean()
    denom = float(np.linalg.norm(sa) * np.linalg.norm(sb))
    if denom == 0.0:
        return 0.0
    return float(np.clip(sa @ sb / denom, -1.0, 1.0))


def predict(model: RegressionModel, latents) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    X = (Z - model.feature_mean) / model.feature_scale
    return X @ model.weights + model.intercept


_RIDGE = 1e-8


def ols_fit(latents, targets, test_fraction: float = 0.2, seed: int = 0) -> RegressionModel:
    """Least squares of a scalar target on latent vectors.

    Latents are standardized with training-split statistics; the normal
    equations carry a small ridge for conditioning.  The held-out split is a
    seeded random fraction.  A constant target flags the model and reports
    r = 0 rather than failing.
    """
    Z = np.asarray(latents, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if Z.ndim != 2 or y.shape != (Z.shape[0],):
        raise ValueError("latents must be (n, L) with one target per row")
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    n, L = Z.shape
    n_test = int(round(n * test_fraction))
    perm = np.random.default_rng(seed).permutation(n)
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    if len(train_idx) < L + 2:
        raise ValueError(f"need at least {L + 2} training samples, have {len(train_idx)}")
    Ztr, ytr = Z[train_idx], y[train_idx]
    mu = Ztr.mean(axis=0)
    sd = Ztr.std(axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    Xtr = (Ztr - mu) / sd
    constant = bool(ytr.std() < 1e-15)
    intercept = float(ytr.mean())
    if constant:
        w = np.zeros(L)
    else:
        A = Xtr.T @ Xtr + _RIDGE * np.eye(L)
        w = np.linalg.solve(A, Xtr.T @ (ytr - intercept))
    model = RegressionModel(
        weights=w,
        intercept=intercept,
        feature_mean=mu,
        feature_scale=sd,
        train_r=0.0,
        test_r=0.0,
        constant_target=constant,
    )
    train_r = 0.0 if constant else pearson_r(predict(model, Ztr), ytr)
    if constant or n_test == 0:
        test_r = 0.0
    else:
        test_r = pearson_r(predict(model, Z[test_idx]), y[test_idx])
    return RegressionModel(
        weights=w,
        intercept=intercept,
        feature_mean=mu,
        feature_scale=sd,
        train_r=train_r,
        test_r=test_r,
        constant_target=constant,
    )


def latent_walk(
    params: ModelParams, z_start, direction, steps: int, scale: float
) -> list[DeformationField]:
    """Decode z_start + i * scale * direction for i = 0 .. steps-1 (stage 0)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z0 = np.asarray(z_start, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    return [decode_root(params, z0 + i * scale * d, 0) for i in range(steps)]


def top_regression_directions(model: RegressionModel, k: int) -> list[np.ndarray]:
    """Unit axis directions of the k largest |standardized coefficient|.

    Per-axis standardization scaling does not change an axis direction, so
    the directions come back as unit basis vectors; ties break toward the
    lower index.
    """
    L = model.weights.shape[0]
    if not 1 <= k <= L:
        raise ValueError(f"k must lie in [1, {L}]")
    order = np.argsort(-np.abs(model.weights), kind="stable")[:k]
    out = []
    for j in order:
        e = np.zeros(L)
        e[j] = 1.0
        out.append(e)
    return out
