"""Global-mixture maintenance: correspondence, fusion, and uncertainty maps.

Per frame: segment the depth map into Gaussians, match them against the
projected global mixture in the image plane, move matched components along
the transport geodesic while folding the squared W2 distance into each
component's disagreement attribute, then regress a dense disagreement map
from the mixture and compose total variance.

The mixture lives in the world frame. Correspondence projects it through the
current pose; fusion updates use world-frame geometry directly, which is
equivalent under rigid invariance of W2 and of the geodesic and avoids
re-transform drift.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from shapely import STRtree, box

from .errors import ConfigError, DepthMVDError, NotPSD, ShapeMismatch, SingularCovariance
from .gauss_ot import (
    EPS_PSD,
    Gaussian2,
    Gaussian3,
    bhattacharyya_2d,
    gaussian_density,
    geodesic_interpolate_mc,
    w2_squared_mc,
)
from .geometry import (
    Z_MIN,
    CameraIntrinsics,
    Pose,
    backproject_many,
    project_many,
    projection_jacobian_many,
)
from .segmentation import FrameMixture, SegmentationConfig, segment_frame

# 3D Mahalanobis radius beyond which a component's density is treated as zero
# during dense regression; exp(-36/2) keeps the relative error below 1e-7.
_GMR_MAHAL = 6.0


def select_model(frame_index: int, n_models: int) -> int:
    """Round-robin model alternation schedule; 1-based model ids."""
    if n_models < 1:
        raise ConfigError(f"n_models must be >= 1, got {n_models}")
    return frame_index % n_models + 1


@dataclass
class EngineConfig:
    eta: float = 0.3  # Bhattacharyya threshold for keeping a correspondence
    occlusion_overlap: float = 0.6  # overlap above which a farther candidate drops
    alpha: float = 0.3  # EMA coefficient on the dense disagreement map
    mu0: float = 0.0  # prior disagreement mean, meters^2
    pi0: float = 1.0  # prior mass in the regression denominator
    sigma0: float = 1.0  # prior spread; accepted but unused (see gmr_query)
    n_models: int = 1
    gmr_stride: int = 1
    overlap_weighting: bool = True
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)

    def __post_init__(self):
        checks = [
            ("eta", 0.0 < self.eta < 1.0),
            ("occlusion_overlap", 0.0 < self.occlusion_overlap < 1.0),
            ("alpha", 0.0 < self.alpha <= 1.0),
            ("mu0", self.mu0 >= 0.0),
            ("pi0", self.pi0 > 0.0),
            ("n_models", self.n_models >= 1),
            ("gmr_stride", self.gmr_stride >= 1),
        ]
        for key, ok in checks:
            if not ok:
                raise ConfigError(f"config value out of range: {key} = {getattr(self, key)}")


class GlobalMixture:
    """Accumulated unnormalized mixture over (position, disagreement)."""

    def __init__(self):
        self.means = np.zeros((0, 3))
        self.covs = np.zeros((0, 3, 3))
        self.weights = np.zeros(0)
        self.ms = np.zeros(0)
        self.m_counts = np.zeros(0, dtype=np.int64)
        self.created_frame = np.zeros(0, dtype=np.int64)
        self.spatial_index = None  # rebuilt per frame during correspondence

    @property
    def count(self) -> int:
        return self.means.shape[0]

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def component(self, k: int) -> Gaussian3:
        return Gaussian3(
            self.means[k].copy(),
            self.covs[k].copy(),
            weight=float(self.weights[k]),
            m=float(self.ms[k]),
            m_count=int(self.m_counts[k]),
        )

    def append(self, mean, cov, weight, m, frame_index, m_count=0):
        self.means = np.vstack([self.means, np.asarray(mean)[None]])
        self.covs = np.concatenate([self.covs, np.asarray(cov)[None]])
        self.weights = np.append(self.weights, weight)
        self.ms = np.append(self.ms, m)
        self.m_counts = np.append(self.m_counts, m_count)
        self.created_frame = np.append(self.created_frame, frame_index)

    def copy(self) -> "GlobalMixture":
        out = GlobalMixture()
        out.means = self.means.copy()
        out.covs = self.covs.copy()
        out.weights = self.weights.copy()
        out.ms = self.ms.copy()
        out.m_counts = self.m_counts.copy()
        out.created_frame = self.created_frame.copy()
        return out

    def to_text(self) -> str:
        """Self-describing snapshot, one component per line."""
        header = (
            "# mean_x mean_y mean_z cov_xx cov_xy cov_xz cov_yx cov_yy cov_yz "
            "cov_zx cov_zy cov_zz weight m created_frame"
        )
        lines = [header]
        for k in range(self.count):
            vals = [*self.means[k], *self.covs[k].ravel(), self.weights[k], self.ms[k]]
            lines.append(
                " ".join(f"{v:.17g}" for v in vals) + f" {int(self.created_frame[k])}"
            )
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "GlobalMixture":
        out = GlobalMixture()
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 15:
                raise DepthMVDError(f"snapshot record has {len(vals)} fields, expected 15")
            out.append(
                vals[0:3],
                np.array(vals[3:12]).reshape(3, 3),
                vals[12],
                vals[13],
                int(vals[14]),
                m_count=1 if vals[13] > 0 else 0,
            )
        return out


@dataclass
class Correspondence:
    """Matches of one current component against the global mixture."""

    current_index: int
    matched: list[tuple[int, float]]  # (global index, overlap score beta)


@dataclass
class UncertaintyMap:
    """Dense per-pixel variance in meters^2; NaN marks invalid pixels."""

    total: np.ndarray
    mvd: np.ndarray
    aleatoric: np.ndarray | None = None
    epistemic: np.ndarray | None = None


def _project_components(means_cam, covs_cam, intrinsics):
    """Image-plane means, covariances, and 3-sigma boxes; None entries for
    components behind the near plane or projecting outside image bounds."""
    n = means_cam.shape[0]
    ok = means_cam[:, 2] > Z_MIN
    means2 = np.full((n, 2), np.nan)
    covs2 = np.zeros((n, 2, 2))
    if np.any(ok):
        means2[ok] = project_many(means_cam[ok], intrinsics)
        jac = projection_jacobian_many(means_cam[ok], intrinsics)
        c2 = np.einsum("nij,njk,nlk->nil", jac, covs_cam[ok], jac)
        covs2[ok] = 0.5 * (c2 + np.transpose(c2, (0, 2, 1)))
    ok &= intrinsics.contains(np.nan_to_num(means2, nan=-1.0))
    return means2, covs2, ok


def find_correspondences(
    mixture: GlobalMixture,
    frame: FrameMixture,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    cfg: EngineConfig,
) -> list[Correspondence]:
    """Image-plane overlap matching of current components to the mixture.

    Correspondences may be many-to-one in either direction. Among one current
    component's candidates, a farther candidate is dropped when it overlaps a
    nearer one by more than `occlusion_overlap` (the nearer surface occludes).
    """
    n_curr = len(frame.components)
    if mixture.count == 0 or n_curr == 0:
        return [Correspondence(c, []) for c in range(n_curr)]

    r, t = pose.rotation, pose.translation
    prev_means_cam = (mixture.means - t) @ r
    prev_covs_cam = np.einsum("ji,njk,kl->nil", r, mixture.covs, r)
    prev_mean2, prev_cov2, prev_ok = _project_components(
        prev_means_cam, prev_covs_cam, intrinsics
    )

    curr_means = np.stack([g.mean for g in frame.components])
    curr_covs = np.stack([g.cov for g in frame.components])
    curr_mean2, curr_cov2, curr_ok = _project_components(curr_means, curr_covs, intrinsics)

    prev_idx = np.flatnonzero(prev_ok)
    if prev_idx.size == 0:
        return [Correspondence(c, []) for c in range(n_curr)]
    half = 3.0 * np.sqrt(np.maximum(prev_cov2[prev_idx][:, [0, 1], [0, 1]], 0.0))
    boxes = [
        box(
            prev_mean2[k, 0] - half[i, 0],
            prev_mean2[k, 1] - half[i, 1],
            prev_mean2[k, 0] + half[i, 0],
            prev_mean2[k, 1] + half[i, 1],
        )
        for i, k in enumerate(prev_idx)
    ]
    tree = STRtree(boxes)
    mixture.spatial_index = tree

    out = []
    for c in range(n_curr):
        if not curr_ok[c]:
            out.append(Correspondence(c, []))
            continue
        cg = Gaussian2(curr_mean2[c], curr_cov2[c])
        hx = 3.0 * math.sqrt(max(curr_cov2[c, 0, 0], 0.0))
        hy = 3.0 * math.sqrt(max(curr_cov2[c, 1, 1], 0.0))
        hits = tree.query(
            box(cg.mean[0] - hx, cg.mean[1] - hy, cg.mean[0] + hx, cg.mean[1] + hy)
        )
        cands = []
        for i in sorted(int(h) for h in hits):
            k = int(prev_idx[i])
            beta = bhattacharyya_2d(cg, Gaussian2(prev_mean2[k], prev_cov2[k]))
            if beta >= cfg.eta:
                cands.append((k, beta))
        # Occlusion: sort by camera depth; drop a farther candidate when it
        # overlaps a nearer kept one beyond the threshold.
        cands.sort(key=lambda kb: (prev_means_cam[kb[0], 2], kb[0]))
        kept: list[tuple[int, float]] = []
        for k, beta in cands:
            occluded = False
            for k2, _ in kept:
                mutual = bhattacharyya_2d(
                    Gaussian2(prev_mean2[k], prev_cov2[k]),
                    Gaussian2(prev_mean2[k2], prev_cov2[k2]),
                )
                if mutual > cfg.occlusion_overlap:
                    occluded = True
                    break
            if not occluded:
                kept.append((k, beta))
        kept.sort(key=lambda kb: kb[0])
        out.append(Correspondence(c, kept))
    return out


@dataclass
class FusionStats:
    matched_pairs: int = 0
    appended: int = 0
    skipped_pairs: int = 0


def fuse(
    mixture: GlobalMixture,
    frame: FrameMixture,
    correspondences: list[Correspondence],
    cfg: EngineConfig,
    pose: Pose,
) -> tuple[GlobalMixture, FusionStats]:
    """Fold one frame's components into the mixture.

    Matched pairs are processed in ascending (current index, global index)
    order; the fusion weight lambda is the current share of mass (optionally
    scaled by the overlap score), the geometry moves along the W2 geodesic,
    and the squared W2 distance measured on pre-update geometry becomes the
    next disagreement measurement. A current component matched to several
    global ones contributes its mass in equal shares so total mass is
    conserved. Numerical failures skip the pair, never the frame.
    """
    out = mixture.copy()
    stats = FusionStats()
    r, t = pose.rotation, pose.translation
    for corr in sorted(correspondences, key=lambda c: c.current_index):
        g_c = frame.components[corr.current_index]
        mean_w = r @ g_c.mean + t
        cov_w = r @ g_c.cov @ r.T
        if not corr.matched:
            out.append(mean_w, cov_w, g_c.weight, 0.0, frame.frame_index)
            stats.appended += 1
            continue
        share = g_c.weight / len(corr.matched)
        for k, beta in sorted(corr.matched, key=lambda kb: kb[0]):
            pi_eff = share * beta if cfg.overlap_weighting else share
            lam = pi_eff / (out.weights[k] + pi_eff)
            try:
                w2 = w2_squared_mc(out.means[k], out.covs[k], mean_w, cov_w)
                mean_new, cov_new = geodesic_interpolate_mc(
                    out.means[k], out.covs[k], mean_w, cov_w, lam
                )
            except (NotPSD, SingularCovariance, DepthMVDError):
                stats.skipped_pairs += 1
                continue
            out.means[k] = mean_new
            out.covs[k] = cov_new
            if out.m_counts[k] == 0:
                # First disagreement measurement: the running average of one
                # sample is the sample itself; the initial zero is a
                # placeholder, not an observation.
                out.ms[k] = w2
            else:
                out.ms[k] = (1.0 - lam) * out.ms[k] + lam * w2
            out.m_counts[k] += 1
            out.weights[k] += share
            stats.matched_pairs += 1
    return out, stats


def gmr_query(mixture: GlobalMixture, x, cfg: EngineConfig) -> float:
    """Conditional disagreement at a 3D point under the mixture.

    A weak prior (mass pi0, mean mu0) keeps the answer finite everywhere. The
    prior spread sigma0 never enters: with the disagreement attribute constant
    per component and zero cross-covariance, the conditional mean is a plain
    density-weighted average of component attributes.
    """
    x = np.asarray(x, dtype=np.float64).reshape(3)
    num = cfg.pi0 * cfg.mu0
    den = cfg.pi0
    for k in range(mixture.count):
        dens = gaussian_density(x, mixture.component(k))
        num += mixture.weights[k] * dens * mixture.ms[k]
        den += mixture.weights[k] * dens
    return float(num / den)


def regress_frame(
    mixture: GlobalMixture,
    depth: np.ndarray,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    cfg: EngineConfig,
    prev_smoothed: np.ndarray | None = None,
) -> UncertaintyMap:
    """Dense multiview-disagreement map for one frame.

    Pixels on the stride grid are evaluated exactly (component densities
    truncated at Mahalanobis 6); skipped pixels copy their nearest evaluated
    neighbor. With a previous smoothed map present the result is blended
    pixelwise by the EMA coefficient.
    """
    h, w = depth.shape
    s = cfg.gmr_stride
    with np.errstate(invalid="ignore"):
        valid = np.isfinite(depth) & (depth > 0)

    vs = np.arange(0, h, s)
    us = np.arange(0, w, s)
    sub_depth = depth[np.ix_(vs, us)]
    sub_valid = valid[np.ix_(vs, us)]
    uu, vv = np.meshgrid(us, vs, indexing="xy")
    flat_idx = np.flatnonzero(sub_valid.ravel())
    mvd_sub = np.full(sub_depth.size, np.nan)

    if flat_idx.size:
        pts = backproject_many(
            uu.ravel()[flat_idx], vv.ravel()[flat_idx], sub_depth.ravel()[flat_idx], intrinsics
        )
        num = np.full(flat_idx.size, cfg.pi0 * cfg.mu0)
        den = np.full(flat_idx.size, cfg.pi0)
        if mixture.count:
            r, t = pose.rotation, pose.translation
            means_cam = (mixture.means - t) @ r
            covs_cam = np.einsum("ji,njk,kl->nil", r, mixture.covs, r)
            # Scatter each component into the pixel window covering its 6-sigma
            # ellipsoid (7-sigma padding); the exact Mahalanobis cut inside the
            # window makes the result independent of the window bounds.
            grid_pos = np.full(sub_depth.size, -1, dtype=np.int64)
            grid_pos[flat_idx] = np.arange(flat_idx.size)
            grid_pos = grid_pos.reshape(sub_depth.shape)
            for k in range(mixture.count):
                mz = means_cam[k, 2]
                sig3 = math.sqrt(max(np.linalg.eigvalsh(covs_cam[k])[-1], EPS_PSD))
                if mz <= Z_MIN:
                    continue
                cx = intrinsics.fx * means_cam[k, 0] / mz + intrinsics.cx
                cy = intrinsics.fy * means_cam[k, 1] / mz + intrinsics.cy
                rad = 7.0 * sig3 * max(intrinsics.fx, intrinsics.fy) / max(mz - 7.0 * sig3, Z_MIN)
                u_lo = max(int((cx - rad) // s), 0)
                u_hi = min(int((cx + rad) // s) + 1, us.size)
                v_lo = max(int((cy - rad) // s), 0)
                v_hi = min(int((cy + rad) // s) + 1, vs.size)
                if u_lo >= u_hi or v_lo >= v_hi:
                    continue
                window = grid_pos[v_lo:v_hi, u_lo:u_hi].ravel()
                window = window[window >= 0]
                if window.size == 0:
                    continue
                diff = pts[window] - means_cam[k]
                det = np.linalg.det(covs_cam[k])
                if det <= 0:
                    continue
                quad = np.einsum("ni,ij,nj->n", diff, np.linalg.inv(covs_cam[k]), diff)
                inside = quad <= _GMR_MAHAL**2
                if not np.any(inside):
                    continue
                dens = np.exp(-0.5 * quad[inside]) / math.sqrt((2 * math.pi) ** 3 * det)
                sel = window[inside]
                num[sel] += mixture.weights[k] * dens * mixture.ms[k]
                den[sel] += mixture.weights[k] * dens
        mvd_sub[flat_idx] = num / den

    mvd_sub = mvd_sub.reshape(sub_depth.shape)
    if s == 1:
        mvd = mvd_sub
    else:
        # Nearest evaluated neighbor on the stride grid.
        row_src = np.clip(np.round(np.arange(h) / s).astype(int), 0, vs.size - 1)
        col_src = np.clip(np.round(np.arange(w) / s).astype(int), 0, us.size - 1)
        mvd = mvd_sub[np.ix_(row_src, col_src)]
        mvd = np.where(valid, mvd, np.nan)

    if prev_smoothed is not None:
        if prev_smoothed.shape != mvd.shape:
            raise ShapeMismatch(
                f"previous map shape {prev_smoothed.shape} != {mvd.shape}"
            )
        blend_ok = np.isfinite(prev_smoothed) & np.isfinite(mvd)
        mvd = np.where(
            blend_ok, (1.0 - cfg.alpha) * prev_smoothed + cfg.alpha * mvd, mvd
        )
    return UncertaintyMap(total=mvd.copy(), mvd=mvd)


def compose_total(
    mvd_map: UncertaintyMap,
    aleatoric: np.ndarray | None = None,
    epistemic: np.ndarray | None = None,
) -> UncertaintyMap:
    """Total variance = disagreement + aleatoric + epistemic, pointwise."""
    total = mvd_map.mvd.copy()
    for arr in (aleatoric, epistemic):
        if arr is not None:
            if arr.shape != total.shape:
                raise ShapeMismatch(f"variance map shape {arr.shape} != {total.shape}")
            total = total + arr
    return UncertaintyMap(
        total=total, mvd=mvd_map.mvd, aleatoric=aleatoric, epistemic=epistemic
    )


@dataclass
class FrameResult:
    uncertainty: UncertaintyMap
    frame_mixture: FrameMixture
    correspondences: list[Correspondence]
    fusion: FusionStats
    timings: dict


class Engine:
    """Sequential per-frame processor holding the global mixture state."""

    def __init__(self, intrinsics: CameraIntrinsics, cfg: EngineConfig | None = None):
        self.intrinsics = intrinsics
        self.cfg = cfg or EngineConfig()
        self.mixture = GlobalMixture()
        self.prev_smoothed: np.ndarray | None = None
        self.last_frame_index = -1
        self.stage_seconds = {"segment": 0.0, "correspond": 0.0, "fuse": 0.0, "regress": 0.0}
        self.frames_processed = 0

    def process_frame(self, obs) -> FrameResult:
        """Run the five per-frame stages; returns the frame's outputs.

        Frame indices must be non-decreasing; repeating an index feeds several
        observations of the same frame (multi-inference mode).
        """
        if obs.frame_index < self.last_frame_index:
            raise DepthMVDError(
                f"frame indices must be non-decreasing, got {obs.frame_index} "
                f"after {self.last_frame_index}"
            )
        t0 = time.perf_counter()
        frame_mix = segment_frame(
            obs.depth,
            self.intrinsics,
            self.cfg.segmentation,
            frame_index=obs.frame_index,
            model_id=obs.model_id,
        )
        t1 = time.perf_counter()
        corr = find_correspondences(
            self.mixture, frame_mix, obs.pose, self.intrinsics, self.cfg
        )
        t2 = time.perf_counter()
        self.mixture, stats = fuse(self.mixture, frame_mix, corr, self.cfg, obs.pose)
        t3 = time.perf_counter()
        mvd_map = regress_frame(
            self.mixture, obs.depth, obs.pose, self.intrinsics, self.cfg, self.prev_smoothed
        )
        t4 = time.perf_counter()
        self.prev_smoothed = mvd_map.mvd
        self.last_frame_index = obs.frame_index
        self.frames_processed += 1
        result = compose_total(mvd_map, obs.aleatoric, obs.epistemic)
        timings = {
            "segment": t1 - t0,
            "correspond": t2 - t1,
            "fuse": t3 - t2,
            "regress": t4 - t3,
        }
        for key, val in timings.items():
            self.stage_seconds[key] += val
        return FrameResult(result, frame_mix, corr, stats, timings)
