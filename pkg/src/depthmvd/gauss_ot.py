"""Gaussian optimal-transport numerics.

PSD square roots, squared 2-Wasserstein distance, transport-geodesic
interpolation, barycenters (analytic for two inputs, fixed-point for more),
Bhattacharyya overlap, and density evaluation. Everything operates on small
(2x2 / 3x3) symmetric matrices via eigendecomposition, which is unconditionally
stable at these sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DepthMVDError, NotConverged, NotPSD, SingularCovariance

# Eigenvalue floor applied at every Gaussian construction. Depth maps of flat
# surfaces produce rank-deficient covariances; the floor keeps every matrix
# invertible for W2 and density evaluation.
EPS_PSD = 1e-9

# |negative W2^2| below this is round-off and clamps to zero; anything larger
# indicates an internal inconsistency and raises.
_W2_NEG_TOL = 1e-10


def floor_spd(cov: np.ndarray, floor: float = EPS_PSD) -> np.ndarray:
    """Symmetrize and raise eigenvalues of a covariance to at least `floor`."""
    cov = np.asarray(cov, dtype=np.float64)
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    if w[0] >= floor:
        return cov
    w = np.maximum(w, floor)
    return (v * w) @ v.T


@dataclass
class Gaussian3:
    """A weighted 3D Gaussian carrying geometry and a disagreement attribute.

    `weight` is unnormalized mass (pixel support in the pipeline). `m` is the
    accumulated multiview-disagreement estimate in meters^2; `m_count` counts
    the disagreement measurements folded into `m` — zero means `m` is still
    the unmeasured placeholder rather than an observed value.
    """

    mean: np.ndarray  # (3,), meters
    cov: np.ndarray  # (3, 3), meters^2
    weight: float = 1.0
    m: float = 0.0
    m_count: int = field(default=0, compare=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.cov = floor_spd(np.asarray(self.cov, dtype=np.float64))
        if self.weight <= 0:
            raise ValueError(f"weight must be positive, got {self.weight}")
        if self.m < 0:
            raise ValueError(f"disagreement must be nonnegative, got {self.m}")


@dataclass
class Gaussian2:
    """A 2D image-plane Gaussian with a back-reference to its 3D source."""

    mean: np.ndarray  # (2,), pixels
    cov: np.ndarray  # (2, 2), pixels^2
    source_index: int = -1

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(2)
        self.cov = floor_spd(np.asarray(self.cov, dtype=np.float64))


def psd_sqrt(s: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition."""
    s = np.asarray(s, dtype=np.float64)
    asym = np.linalg.norm(s - s.T)
    if asym > 1e-9:
        raise ValueError(f"matrix not symmetric (||S - S^T|| = {asym:.3e})")
    w, v = np.linalg.eigh(0.5 * (s + s.T))
    scale = max(abs(w[0]), abs(w[-1]))
    if w[0] < -1e-7 * scale:
        raise NotPSD(f"eigenvalue {w[0]:.3e} below -1e-7 * ||S||")
    # Round-off negatives clamp to the floor; small positives pass untouched.
    w = np.where(w < 0, EPS_PSD, w)
    return (v * np.sqrt(w)) @ v.T


def _sqrt_and_invsqrt(s: np.ndarray):
    """(S^{1/2}, S^{-1/2}) for a symmetric matrix with floored eigenvalues."""
    w, v = np.linalg.eigh(0.5 * (s + s.T))
    if w[0] <= 0:
        if w[0] < -1e-7 * max(abs(w[0]), abs(w[-1])):
            raise NotPSD(f"eigenvalue {w[0]:.3e} is not merely round-off")
        w = np.maximum(w, EPS_PSD)
    if w[0] < 1e-300:
        raise SingularCovariance("covariance square root is not invertible")
    rw = np.sqrt(w)
    return (v * rw) @ v.T, (v / rw) @ v.T


def w2_squared_mc(mean_a, cov_a, mean_b, cov_b) -> float:
    """Squared 2-Wasserstein distance between raw (mean, cov) pairs."""
    mean_a = np.asarray(mean_a, dtype=np.float64)
    mean_b = np.asarray(mean_b, dtype=np.float64)
    cov_a = np.asarray(cov_a, dtype=np.float64)
    cov_b = np.asarray(cov_b, dtype=np.float64)
    if np.array_equal(mean_a, mean_b) and np.array_equal(cov_a, cov_b):
        return 0.0
    root_a = psd_sqrt(cov_a)
    q = root_a @ cov_b @ root_a
    cross = np.trace(psd_sqrt(0.5 * (q + q.T)))
    val = float(
        np.sum((mean_a - mean_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross
    )
    if val < 0:
        if val < -_W2_NEG_TOL:
            raise DepthMVDError(f"W2^2 came out {val:.3e} < -{_W2_NEG_TOL:g}; inputs inconsistent")
        val = 0.0
    return val


def w2_squared(a: Gaussian3, b: Gaussian3) -> float:
    """Squared 2-Wasserstein distance between two Gaussians, in meters^2."""
    return w2_squared_mc(a.mean, a.cov, b.mean, b.cov)


def geodesic_interpolate_mc(mean_a, cov_a, mean_b, cov_b, lam: float):
    """Point at fraction `lam` along the W2 geodesic, on raw (mean, cov)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    mean_a = np.asarray(mean_a, dtype=np.float64)
    mean_b = np.asarray(mean_b, dtype=np.float64)
    cov_a = np.asarray(cov_a, dtype=np.float64)
    cov_b = np.asarray(cov_b, dtype=np.float64)
    mean = (1.0 - lam) * mean_a + lam * mean_b
    root_a, inv_root_a = _sqrt_and_invsqrt(cov_a)
    q = root_a @ cov_b @ root_a
    z = inv_root_a @ psd_sqrt(0.5 * (q + q.T)) @ inv_root_a
    mix = (1.0 - lam) * np.eye(cov_a.shape[0]) + lam * z
    cov = mix @ cov_a @ mix.T
    return mean, 0.5 * (cov + cov.T)


def geodesic_interpolate(a: Gaussian3, b: Gaussian3, lam: float):
    """Geometry (mean, cov) at fraction `lam` along the geodesic from a to b."""
    return geodesic_interpolate_mc(a.mean, a.cov, b.mean, b.cov, lam)


def barycenter_two(a: Gaussian3, b: Gaussian3):
    """Analytic W2 barycenter of two Gaussians: the geodesic midpoint."""
    return geodesic_interpolate(a, b, 0.5)


@dataclass
class BarycenterResult:
    mean: np.ndarray
    cov: np.ndarray
    converged: bool
    iterations: int


def barycenter_n(
    gs: list[Gaussian3],
    weights=None,
    tol: float | None = None,
    max_iter: int = 100,
) -> BarycenterResult:
    """W2 barycenter of n Gaussians via the covariance fixed-point iteration.

    The mean is the weighted average of input means. The covariance iterates
    S <- S^{-1/2} (sum_j w_j (S^{1/2} S_j S^{1/2})^{1/2})^2 S^{-1/2} from the
    weighted arithmetic covariance mean until the Frobenius step falls under
    `tol` (default 1e-8 times the trace of the initial covariance).
    """
    if not gs:
        raise ValueError("need at least one Gaussian")
    n = len(gs)
    if weights is None:
        weights = np.full(n, 1.0 / n)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n,) or np.any(weights < 0):
            raise ValueError("weights must be nonnegative, one per Gaussian")
        total = weights.sum()
        if abs(total - 1.0) > 1e-8:
            raise ValueError(f"weights must sum to 1, got {total}")
    mean = sum(w * g.mean for w, g in zip(weights, gs))
    covs = [g.cov for g in gs]
    cov = sum(w * c for w, c in zip(weights, covs))
    if n == 1:
        return BarycenterResult(mean, cov, True, 0)
    if tol is None:
        tol = 1e-8 * np.trace(cov)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        root, inv_root = _sqrt_and_invsqrt(cov)
        inner = np.zeros_like(cov)
        for w, c in zip(weights, covs):
            if w == 0.0:
                continue
            q = root @ c @ root
            inner += w * psd_sqrt(0.5 * (q + q.T))
        nxt = inv_root @ (inner @ inner) @ inv_root
        nxt = 0.5 * (nxt + nxt.T)
        step = np.linalg.norm(nxt - cov)
        cov = nxt
        if step <= tol:
            converged = True
            break
    return BarycenterResult(mean, cov, converged, it)


def wasserstein_variance(gs: list[Gaussian3]) -> float:
    """Mean squared W2 distance from each Gaussian to their barycenter."""
    if not gs:
        raise ValueError("need at least one Gaussian")
    if len(gs) == 1:
        return 0.0
    bary = barycenter_n(gs)
    if not bary.converged:
        raise NotConverged(f"barycenter fixed point did not converge in {bary.iterations} iterations")
    return float(
        np.mean([w2_squared_mc(bary.mean, bary.cov, g.mean, g.cov) for g in gs])
    )


def bhattacharyya_2d(a: Gaussian2, b: Gaussian2) -> float:
    """Bhattacharyya overlap coefficient between two image-plane Gaussians.

    Returns a value in (0, 1]; equals 1 iff the Gaussians are identical.
    """
    mixed = 0.5 * (a.cov + b.cov)
    det_mixed = np.linalg.det(mixed)
    det_a = np.linalg.det(a.cov)
    det_b = np.linalg.det(b.cov)
    if det_mixed <= 0 or det_a <= 0 or det_b <= 0:
        raise SingularCovariance("bhattacharyya needs strictly positive-definite covariances")
    try:
        sol = np.linalg.solve(mixed, a.mean - b.mean)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(str(exc)) from exc
    dist = 0.125 * float((a.mean - b.mean) @ sol) + 0.5 * np.log(
        det_mixed / np.sqrt(det_a * det_b)
    )
    return float(min(np.exp(-dist), 1.0))


def gaussian_density(x, g: Gaussian3) -> float:
    """Multivariate normal density of g evaluated at x."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    det = np.linalg.det(g.cov)
    if det <= 0:
        raise SingularCovariance("covariance is not invertible")
    try:
        sol = np.linalg.solve(g.cov, x - g.mean)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance(str(exc)) from exc
    quad = float((x - g.mean) @ sol)
    return float(np.exp(-0.5 * quad) / np.sqrt((2.0 * np.pi) ** 3 * det))
