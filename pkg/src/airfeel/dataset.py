"""Synthetic regression data and the constants that drive the convergence analysis.

The learning task is ridge regression on synthetic features: samples are
i.i.d. standard normal vectors, labels are a fixed sparse linear function of
two coordinates plus observation noise.  All losses and gradients use the
convention

    F(w) = (1/D_tot) * sum_i 0.5*(x_i^T w - tau_i)^2 + rho*||w||^2
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dataset",
    "LearningConstants",
    "OptimalModel",
    "generate_dataset",
    "global_loss",
    "full_gradient",
    "per_sample_gradients",
    "local_gradient",
    "draw_batch",
    "optimal_model",
    "learning_constants",
    "save_dataset",
    "load_dataset",
]

# 0-based feature indices and weights of the label rule tau = x(2) + 3*x(5)
_LABEL_IDX = (1, 4)
_LABEL_COEF = (1.0, 3.0)


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, labels and an even partition across devices."""

    samples: np.ndarray   # (D_tot, q)
    labels: np.ndarray    # (D_tot,)
    device_of: np.ndarray  # (D_tot,) device id in 0..K-1
    ridge_weight: float

    def __post_init__(self):
        X = np.ascontiguousarray(np.asarray(self.samples, dtype=float))
        y = np.ascontiguousarray(np.asarray(self.labels, dtype=float))
        dev = np.ascontiguousarray(np.asarray(self.device_of, dtype=int))
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValueError("samples must be a nonempty 2-D array")
        if y.shape != (X.shape[0],):
            raise ValueError("labels must be 1-D and match the sample count")
        if dev.shape != (X.shape[0],):
            raise ValueError("device_of must match the sample count")
        counts = np.bincount(dev)
        if dev.min() < 0 or np.any(counts == 0) or counts.min() != counts.max():
            raise ValueError("every device must hold the same number of samples")
        if self.ridge_weight < 0:
            raise ValueError("ridge_weight must be >= 0")
        for arr in (X, y, dev):
            arr.flags.writeable = False
        object.__setattr__(self, "samples", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "device_of", dev)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def q(self) -> int:
        return self.samples.shape[1]

    @property
    def n_devices(self) -> int:
        return int(self.device_of.max()) + 1

    @property
    def samples_per_device(self) -> int:
        return self.n_samples // self.n_devices

    def device_indices(self, device: int) -> np.ndarray:
        if not 0 <= device < self.n_devices:
            raise ValueError(f"device {device} out of range")
        return np.flatnonzero(self.device_of == device)


@dataclass(frozen=True)
class OptimalModel:
    w_star: np.ndarray
    F_star: float
    convention: str  # "literal" or "rescaled"
    grad_norm: float


@dataclass(frozen=True)
class LearningConstants:
    """Smoothness/PL constants and gradient bounds of the regression task.

    L and delta are the extreme eigenvalues of the regularized data Gramian,
    W bounds the parameter norm over the visited region, sigma bounds the
    per-coordinate dispersion of per-sample gradients.
    """

    L: float
    delta: float
    w_star: np.ndarray
    F_star: float
    W: float
    sigma: np.ndarray
    convention: str


def generate_dataset(seed: int, K: int, D: int, q: int, noise_std: float,
                     ridge_weight: float) -> Dataset:
    """Draw K*D samples of i.i.d. N(0, I_q) features with the sparse linear label."""
    if K < 1 or D < 1 or q < 1:
        raise ValueError("K, D and q must be >= 1")
    if q < 5:
        raise ValueError("q must be >= 5: the label rule reads feature coordinate 5")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((K * D, q))
    z = rng.standard_normal(K * D)
    labels = X[:, _LABEL_IDX[0]] * _LABEL_COEF[0] + X[:, _LABEL_IDX[1]] * _LABEL_COEF[1]
    labels = labels + noise_std * z
    device_of = np.repeat(np.arange(K), D)
    return Dataset(X, labels, device_of, ridge_weight)


def _check_dim(w: np.ndarray, ds: Dataset) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (ds.q,):
        raise ValueError(f"parameter vector must have shape ({ds.q},), got {w.shape}")
    return w


def global_loss(w: np.ndarray, ds: Dataset) -> float:
    w = _check_dim(w, ds)
    r = ds.samples @ w - ds.labels
    return 0.5 * float(np.mean(r * r)) + ds.ridge_weight * float(w @ w)


def full_gradient(w: np.ndarray, ds: Dataset) -> np.ndarray:
    w = _check_dim(w, ds)
    r = ds.samples @ w - ds.labels
    return ds.samples.T @ r / ds.n_samples + 2.0 * ds.ridge_weight * w


def per_sample_gradients(w: np.ndarray, ds: Dataset,
                         idx: np.ndarray | None = None) -> np.ndarray:
    """Gradient of every sample-wise loss at w, one row per sample."""
    w = _check_dim(w, ds)
    X = ds.samples if idx is None else ds.samples[idx]
    y = ds.labels if idx is None else ds.labels[idx]
    r = X @ w - y
    return X * r[:, None] + 2.0 * ds.ridge_weight * w


def local_gradient(w: np.ndarray, ds: Dataset, device: int,
                   batch: np.ndarray) -> np.ndarray:
    """Mini-batch gradient at one device: mean of per-sample gradients over batch."""
    batch = np.asarray(batch, dtype=int)
    if batch.size == 0:
        raise ValueError("batch must be nonempty")
    if not np.all(ds.device_of[batch] == device):
        raise ValueError("batch contains samples outside the device partition")
    return per_sample_gradients(w, ds, batch).mean(axis=0)


def draw_batch(ds: Dataset, device: int, m_b: int,
               rng: np.random.Generator) -> np.ndarray:
    """Uniform without-replacement mini-batch from one device's partition."""
    part = ds.device_indices(device)
    if not 1 <= m_b <= part.size:
        raise ValueError(f"m_b must be in [1, {part.size}]")
    return rng.choice(part, size=m_b, replace=False)


def optimal_model(ds: Dataset) -> OptimalModel:
    """Closed-form ridge solution with a stationarity self-check.

    Solves the unscaled normal equations first; if the resulting gradient of
    global_loss is not numerically zero (the two conventions disagree by a
    1/D_tot scaling), falls back to the stationarity-consistent system
    (X^T X / D_tot + 2 rho I) w = X^T y / D_tot.
    """
    X, y, rho = ds.samples, ds.labels, ds.ridge_weight
    gram = X.T @ X
    A = gram + rho * np.eye(ds.q)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e12:
        raise ValueError(f"normal equations are ill-conditioned (cond={cond:.3e})")
    w = np.linalg.solve(A, X.T @ y)
    gnorm = float(np.linalg.norm(full_gradient(w, ds)))
    convention = "literal"
    if gnorm >= 1e-8:
        A2 = gram / ds.n_samples + 2.0 * rho * np.eye(ds.q)
        cond = np.linalg.cond(A2)
        if not np.isfinite(cond) or cond > 1e12:
            raise ValueError(f"normal equations are ill-conditioned (cond={cond:.3e})")
        w = np.linalg.solve(A2, X.T @ y / ds.n_samples)
        gnorm = float(np.linalg.norm(full_gradient(w, ds)))
        convention = "rescaled"
    return OptimalModel(w, global_loss(w, ds), convention, gnorm)


# Offset added to the normalized Gramian before taking its eigenvalue range.
# Matches the Hessian's ridge contribution at the default ridge weight 5e-5.
GRAMIAN_OFFSET = 1e-4


def learning_constants(ds: Dataset, *, w_init: np.ndarray | None = None,
                       W: float | None = None) -> LearningConstants:
    """Compute L, delta, W, sigma and the optimal model for a dataset.

    sigma is estimated once from the per-sample gradient dispersion at the
    initial parameter vector (all-zero by default); W defaults to twice the
    optimal parameter norm.
    """
    opt = optimal_model(ds)
    gram = ds.samples.T @ ds.samples / ds.n_samples + GRAMIAN_OFFSET * np.eye(ds.q)
    eig = np.linalg.eigvalsh(gram)
    L, delta = float(eig[-1]), float(eig[0])
    if w_init is None:
        w_init = np.zeros(ds.q)
    grads = per_sample_gradients(w_init, ds)
    mean_grad = grads.mean(axis=0)
    sigma = np.sqrt(np.mean((grads - mean_grad) ** 2, axis=0))
    if W is None:
        W = 2.0 * float(np.linalg.norm(opt.w_star))
    return LearningConstants(L=L, delta=delta, w_star=opt.w_star,
                             F_star=opt.F_star, W=W, sigma=sigma,
                             convention=opt.convention)


def save_dataset(ds: Dataset, path) -> None:
    """Columnar text export: one sample per row (features, label, device id)."""
    header = (f"ridge_weight={float(ds.ridge_weight)!r}\n"
              + " ".join(f"x{i+1}" for i in range(ds.q)) + " label device")
    table = np.column_stack([ds.samples, ds.labels, ds.device_of.astype(float)])
    np.savetxt(path, table, header=header)


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith("# ridge_weight="):
        raise ValueError("missing ridge_weight header line")
    rho = float(first.split("=", 1)[1])
    table = np.loadtxt(path)
    table = np.atleast_2d(table)
    return Dataset(table[:, :-2], table[:, -2], table[:, -1].astype(int), rho)
