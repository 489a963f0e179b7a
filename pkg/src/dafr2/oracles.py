"""Independent closed-form / brute-force oracles.

Everything here runs in float64 and shares no numerical kernels with the
model or analysis code beyond basic linear algebra, so these functions can
serve as ground truth in tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DecompositionSpec",
    "whitening_oracle",
    "regression_recovery_oracle",
    "gaussian_mi_oracle",
    "fd_diagonal_oracle",
    "linear_lipschitz_oracle",
]


# ---------------------------------------------------------------------------
# Whitening: per-feature standardization turns the covariance matrix into the
# correlation matrix, which is the identity exactly when features are
# uncorrelated.  The "gap" reports how far from identity an arbitrary input
# lands.
# ---------------------------------------------------------------------------


def _build_covariance(d: int, correlation_structure) -> np.ndarray:
    """Resolve a covariance spec into a dense [d, d] matrix.

    Accepts a ready matrix, or one of the string forms
    ``"identity"``, ``"diagonal:v1,v2,..."``, ``"equicorrelated:rho"``.
    """
    if isinstance(correlation_structure, np.ndarray):
        sigma = np.asarray(correlation_structure, dtype=np.float64)
        if sigma.shape != (d, d):
            raise ValueError(f"covariance shape {sigma.shape} does not match d={d}")
        return sigma
    if correlation_structure == "identity":
        return np.eye(d)
    if isinstance(correlation_structure, str) and correlation_structure.startswith("diagonal:"):
        vals = [float(v) for v in correlation_structure.split(":", 1)[1].split(",")]
        if len(vals) != d:
            raise ValueError(f"diagonal spec has {len(vals)} entries, expected {d}")
        return np.diag(np.asarray(vals, dtype=np.float64))
    if isinstance(correlation_structure, str) and correlation_structure.startswith("equicorrelated:"):
        rho = float(correlation_structure.split(":", 1)[1])
        return np.full((d, d), rho, dtype=np.float64) + (1.0 - rho) * np.eye(d)
    raise ValueError(f"unknown correlation structure: {correlation_structure!r}")


def whitening_oracle(d: int, m: int, correlation_structure, seed: int) -> dict:
    """Measure how close per-feature standardization gets to full whitening.

    Draws ``m`` samples with the prescribed covariance, standardizes each
    feature exactly (batch mean/std, no epsilon), and returns the resulting
    covariance ``sigma_bn`` together with ``gap = ||sigma_bn - I||_F``.
    """
    if m < 2:
        raise ValueError("m must be >= 2")
    sigma = _build_covariance(d, correlation_structure)
    try:
        chol = np.linalg.cholesky(sigma + 1e-12 * np.eye(d))
    except np.linalg.LinAlgError as exc:
        raise ValueError("requested covariance is not positive semi-definite") from exc

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((m, d)) @ chol.T

    centered = x - x.mean(axis=0)
    std = centered.std(axis=0)  # population std, matching the 1/m covariance
    if np.any(std == 0.0):
        raise ValueError("degenerate sample: a feature has zero variance")
    xhat = centered / std
    sigma_bn = (xhat.T @ xhat) / m
    gap = float(np.linalg.norm(sigma_bn - np.eye(d), ord="fro"))
    return {"sigma_bn": sigma_bn, "gap": gap}


# ---------------------------------------------------------------------------
# Optimal-regressor recovery: the MSE-optimal regressor is the conditional
# mean, so fitting noisy targets h(x) + noise recovers h when the noise has
# zero conditional mean.  The regressor is a brute-force binned conditional
# mean, deliberately unrelated to any network code.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecompositionSpec:
    """Target function + noise recipe for the recovery experiment.

    ``h`` is one of ``"sin"``, ``"poly3"``, ``"mlp:<seed>"``; ``noise`` is
    ``"gaussian:<sigma>"`` or ``"biased:<sigma>,<offset>"`` (nonzero offset
    deliberately violates the zero-conditional-mean assumption).
    """

    h: str
    noise: str
    n_train: int
    n_test: int


def _target_fn(descriptor: str):
    if descriptor == "sin":
        return np.sin
    if descriptor == "poly3":
        return lambda x: 0.5 * x**3 - x
    if descriptor.startswith("mlp:"):
        rng = np.random.default_rng(int(descriptor.split(":", 1)[1]))
        w1 = rng.standard_normal((1, 16))
        b1 = rng.standard_normal(16)
        w2 = rng.standard_normal((16, 1))
        return lambda x: (np.tanh(x[:, None] @ w1 + b1) @ w2)[:, 0]
    raise ValueError(f"unknown target descriptor: {descriptor!r}")


def _noise_params(descriptor: str) -> tuple[float, float]:
    if descriptor.startswith("gaussian:"):
        return float(descriptor.split(":", 1)[1]), 0.0
    if descriptor.startswith("biased:"):
        sigma, offset = descriptor.split(":", 1)[1].split(",")
        return float(sigma), float(offset)
    raise ValueError(f"unknown noise descriptor: {descriptor!r}")


def regression_recovery_oracle(
    spec: DecompositionSpec, regressor_capacity: int = 128, seed: int = 0
) -> dict:
    """Fit a binned conditional-mean regressor on noisy targets and report
    how well it recovers the clean target function.

    Returns test MSE against the clean target, the analytic noise floor
    Var(noise), the mean offset of the fit (nonzero when the noise is
    biased), and flags for success / insufficient capacity.
    """
    if regressor_capacity < 2:
        raise ValueError("regressor_capacity must be >= 2")
    rng = np.random.default_rng(seed)
    h = _target_fn(spec.h)
    sigma, offset = _noise_params(spec.noise)

    lo, hi = -math.pi, math.pi
    x_train = rng.uniform(lo, hi, spec.n_train)
    y_train = h(x_train) + sigma * rng.standard_normal(spec.n_train) + offset
    x_test = rng.uniform(lo, hi, spec.n_test)

    edges = np.linspace(lo, hi, regressor_capacity + 1)
    idx_train = np.clip(np.digitize(x_train, edges) - 1, 0, regressor_capacity - 1)
    sums = np.bincount(idx_train, weights=y_train, minlength=regressor_capacity)
    counts = np.bincount(idx_train, minlength=regressor_capacity)
    bin_means = np.where(counts > 0, sums / np.maximum(counts, 1), y_train.mean())

    def predict(x):
        return bin_means[np.clip(np.digitize(x, edges) - 1, 0, regressor_capacity - 1)]

    noise_floor = sigma**2
    test_err = predict(x_test) - h(x_test)
    train_mse = float(np.mean((predict(x_train) - y_train) ** 2))
    test_mse_vs_h = float(np.mean(test_err**2))
    fit_offset = float(np.mean(test_err))
    # Slack covers per-bin estimation noise and bin-width discretization.
    slack = 3.0 * noise_floor * regressor_capacity / max(spec.n_train, 1) + 1e-4
    underfit = train_mse > 4.0 * noise_floor + 0.05
    return {
        "test_mse_vs_h": test_mse_vs_h,
        "noise_floor": noise_floor,
        "offset": fit_offset,
        "train_mse": train_mse,
        "underfit": bool(underfit),
        "biased": bool(abs(fit_offset) > 0.1),
        "success": bool(test_mse_vs_h <= 0.1 * noise_floor + slack and not underfit),
    }


# ---------------------------------------------------------------------------
# Closed forms for the analysis metrics.
# ---------------------------------------------------------------------------


def gaussian_mi_oracle(rho: float) -> float:
    """Mutual information of a 1-D jointly Gaussian pair: -0.5*ln(1 - rho^2)."""
    if abs(rho) >= 1.0:
        raise ValueError("|rho| must be < 1")
    return -0.5 * math.log(1.0 - rho * rho)


def fd_diagonal_oracle(mu1, var1, mu2, var2) -> float:
    """Frechet distance between diagonal Gaussians: ||dmu||^2 + sum (sqrt(v1) - sqrt(v2))^2."""
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    var1, var2 = np.asarray(var1, dtype=np.float64), np.asarray(var2, dtype=np.float64)
    if np.any(var1 < 0) or np.any(var2 < 0):
        raise ValueError("variances must be nonnegative")
    return float(np.sum((mu1 - mu2) ** 2) + np.sum((np.sqrt(var1) - np.sqrt(var2)) ** 2))


def linear_lipschitz_oracle(w, tol: float = 1e-8, max_iter: int = 10_000) -> float:
    """Largest singular value of a matrix via power iteration on W^T W."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("matrix must be finite")
    gram = w.T @ w
    rng = np.random.default_rng(0)
    v = rng.standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        v_new = gram @ v
        lam_new = float(np.linalg.norm(v_new))
        if lam_new == 0.0:
            return 0.0
        v = v_new / lam_new
        if abs(lam_new - lam) <= tol * max(lam_new, 1e-300):
            lam = lam_new
            break
        lam = lam_new
    return math.sqrt(lam)
