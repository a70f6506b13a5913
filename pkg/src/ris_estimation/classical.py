from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ris_estimation.errors import InputError

NMSE_DB_FLOOR = -300.0


@dataclass
class CovarianceModel:
    matrix: np.ndarray
    sample_count: int
    loading: float

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[0])


@dataclass
class IdentifiabilityReport:
    rows: int
    cols: int
    rank: int
    tolerance: float
    gram_condition: float

    @property
    def full_column_rank(self) -> bool:
        return self.rank == self.cols

    @property
    def underdetermined(self) -> bool:
        return self.rows < self.cols


def rank_tolerance(singular_values: np.ndarray, shape: tuple[int, int]) -> float:
    """Numerical-rank threshold: s_max * max(Q, D) * machine epsilon."""
    if singular_values.size == 0:
        return 0.0
    return float(singular_values.max() * max(shape) * np.finfo(float).eps)


def ls_operator(psi: np.ndarray) -> np.ndarray:
    """
    Minimum-norm least-squares operator (Moore-Penrose pseudoinverse, D x Q)
    from the SVD of Psi, discarding singular values below `rank_tolerance`.
    Equals (Psi^H Psi)^-1 Psi^H whenever Psi has full column rank.
    """
    u, s, vh = scipy.linalg.svd(psi, full_matrices=False, lapack_driver="gesdd")
    keep = s > rank_tolerance(s, psi.shape)
    return (vh[keep].conj().T / s[keep]) @ u[:, keep].conj().T


def ls_estimate(y: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """LS estimate for y of shape (Q,) or stacked observations (S, Q)."""
    if y.shape[-1] != psi.shape[0]:
        raise InputError(f"Observation length {y.shape[-1]} does not match Psi rows {psi.shape[0]}")
    return y @ ls_operator(psi).T


def fit_covariance(channels: np.ndarray, loading_rel: float = 1e-6) -> CovarianceModel:
    """
    Zero-mean sample covariance C = (1/K) sum h h^H of channels (K, D), plus
    diagonal loading `loading_rel * trace(C) / D`.
    """
    channels = np.atleast_2d(channels)
    if channels.shape[0] < 2:
        raise InputError(f"Covariance fitting needs at least 2 samples, got {channels.shape[0]}")
    if loading_rel < 0:
        raise InputError("Covariance loading must be non-negative")

    k, d = channels.shape
    matrix = channels.T @ channels.conj() / k
    matrix = (matrix + matrix.conj().T) / 2.0
    loading = loading_rel * float(np.real(np.trace(matrix))) / d
    matrix = matrix + loading * np.eye(d)
    return CovarianceModel(matrix=matrix, sample_count=k, loading=loading)


def mmse_operator(psi: np.ndarray, cov: CovarianceModel, noise_var: float) -> np.ndarray:
    """
    Linear MMSE operator C Psi^H (Psi C Psi^H + sigma^2 I)^-1 (D x Q), computed
    with a Cholesky solve. A singular inner matrix (sigma^2 = 0 with
    rank-deficient Psi C Psi^H) falls back to a pseudoinverse solve.
    """
    if cov.dim != psi.shape[1]:
        raise InputError(f"Covariance is {cov.dim}x{cov.dim}, Psi has {psi.shape[1]} columns")
    if noise_var < 0:
        raise InputError("Noise variance must be non-negative")

    c_psi_h = cov.matrix @ psi.conj().T
    inner = psi @ c_psi_h + noise_var * np.eye(psi.shape[0])
    inner = (inner + inner.conj().T) / 2.0
    try:
        factor = scipy.linalg.cho_factor(inner, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(factor, c_psi_h.conj().T, check_finite=False).conj().T
    except scipy.linalg.LinAlgError:
        return c_psi_h @ ls_operator(inner)


def mmse_estimate(
    y: np.ndarray, psi: np.ndarray, cov: CovarianceModel, noise_var: float
) -> np.ndarray:
    if y.shape[-1] != psi.shape[0]:
        raise InputError(f"Observation length {y.shape[-1]} does not match Psi rows {psi.shape[0]}")
    return y @ mmse_operator(psi, cov, noise_var).T


def nmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """
    ||h_hat - h||^2 / ||h||^2, averaged over samples when given stacks (S, D);
    the expectation sits outside the ratio.
    """
    return float(np.mean(nmse_per_sample(estimate, truth)))


def nmse_per_sample(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    if estimate.shape != truth.shape:
        raise InputError(f"Estimate shape {estimate.shape} does not match truth {truth.shape}")
    energy = np.sum(np.abs(np.atleast_2d(truth)) ** 2, axis=-1)
    if np.any(energy == 0):
        raise InputError("NMSE is undefined for a zero truth vector")
    error = np.sum(np.abs(np.atleast_2d(estimate - truth)) ** 2, axis=-1)
    return error / energy


def nmse_db(value) -> float | np.ndarray:
    """10 log10(value), floored at -300 dB for exact estimates."""
    value = np.asarray(value, dtype=float)
    with np.errstate(divide="ignore"):
        db = np.maximum(10.0 * np.log10(value), NMSE_DB_FLOOR)
    return float(db) if db.ndim == 0 else db


def identifiability_report(psi: np.ndarray) -> IdentifiabilityReport:
    """Numerical rank of Psi and the 2-norm condition number of its Gram."""
    s = scipy.linalg.svdvals(psi) if psi.size else np.zeros(0)
    tolerance = rank_tolerance(s, psi.shape)
    rank = int(np.sum(s > tolerance)) if s.size and s.max() > 0 else 0

    condition = float("inf")
    if rank == psi.shape[1] and rank > 0:
        condition = float((s[0] / s[rank - 1]) ** 2)

    return IdentifiabilityReport(
        rows=psi.shape[0],
        cols=psi.shape[1],
        rank=rank,
        tolerance=tolerance,
        gram_condition=condition,
    )


def ls_noise_law(psi: np.ndarray, noise_var: float) -> float:
    """Expected LS error energy sigma^2 trace((Psi^H Psi)^-1) for full column rank."""
    s = scipy.linalg.svdvals(psi)
    return float(noise_var * np.sum(1.0 / s**2))
