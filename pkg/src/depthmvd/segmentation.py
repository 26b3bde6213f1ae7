"""Single-pass depth-adaptive segmentation of a depth map into 3D Gaussians.

One scanline at a time, consecutive valid pixels group into runs while the
depth step stays under an adaptive threshold tau0 + tau1 * d^2 (monocular and
stereo depth noise grows roughly quadratically with depth). Runs merge into
growing clusters from the previous scanline when they overlap horizontally,
are depth-consistent under the same threshold, and continue the surface
without bending more than `merge_angle` between scanlines. Each surviving
cluster becomes one moment-matched Gaussian whose weight is its pixel count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyFrame
from .gauss_ot import EPS_PSD, Gaussian3, floor_spd
from .geometry import CameraIntrinsics


@dataclass
class SegmentationConfig:
    tau0: float = 0.02  # base depth-discontinuity threshold, meters
    tau1: float = 0.005  # quadratic depth coefficient, 1/meters
    min_support: int = 12  # pixels per surviving cluster
    max_components: int = 4096
    merge_angle: float = 30.0  # degrees, scanline-to-scanline bend tolerance
    thickness_floor: float = 1e-6  # m^2, thin-axis covariance floor

    def __post_init__(self):
        if self.tau0 <= 0:
            raise ValueError("tau0 must be positive")
        if self.tau1 < 0:
            raise ValueError("tau1 must be nonnegative")
        if self.min_support < 3:
            raise ValueError("min_support must be at least 3")


@dataclass
class FrameMixture:
    """Per-frame mixture of camera-frame Gaussians from one depth map."""

    components: list[Gaussian3]
    frame_index: int
    model_id: int
    support: np.ndarray  # pixel count per component
    labels: np.ndarray  # (H, W) uint16 component index + 1, 0 = unassigned
    discarded_support: int = 0  # pixels in dropped clusters
    discarded_clusters: int = 0


class MomentAccumulator:
    """Incremental 3D mean/covariance (Welford with batched merges)."""

    __slots__ = ("count", "mean", "_m2")

    def __init__(self):
        self.count = 0
        self.mean = np.zeros(3)
        self._m2 = np.zeros((3, 3))

    def add(self, point) -> "MomentAccumulator":
        point = np.asarray(point, dtype=np.float64)
        self.count += 1
        delta = point - self.mean
        self.mean = self.mean + delta / self.count
        self._m2 = self._m2 + np.outer(delta, point - self.mean)
        return self

    def add_batch(self, points: np.ndarray) -> "MomentAccumulator":
        points = np.asarray(points, dtype=np.float64)
        n_b = points.shape[0]
        if n_b == 0:
            return self
        mean_b = points.mean(axis=0)
        centered = points - mean_b
        self._merge_raw(n_b, mean_b, centered.T @ centered)
        return self

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        self._merge_raw(other.count, other.mean, other._m2)
        return self

    def _merge_raw(self, n_b: int, mean_b: np.ndarray, m2_b: np.ndarray):
        if n_b == 0:
            return
        n_a = self.count
        n = n_a + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self._m2 = self._m2 + m2_b + np.outer(delta, delta) * (n_a * n_b / n)
        self.count = n

    def covariance(self, ddof: int = 0) -> np.ndarray:
        if self.count <= ddof:
            return np.zeros((3, 3))
        return self._m2 / (self.count - ddof)


def moment_update(state: MomentAccumulator, point) -> MomentAccumulator:
    """Fold one 3D point into a running-moments state."""
    return state.add(point)


def _find(parent: np.ndarray, i: int) -> int:
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:  # path compression
        parent[i], i = root, parent[i]
    return root


def segment_frame(
    depth: np.ndarray,
    intrinsics: CameraIntrinsics,
    cfg: SegmentationConfig,
    frame_index: int = 0,
    model_id: int = 1,
) -> FrameMixture:
    """Segment a depth map into a per-frame mixture of 3D Gaussians."""
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    if (h, w) != (intrinsics.height, intrinsics.width):
        raise ValueError(
            f"depth shape {depth.shape} does not match intrinsics "
            f"{(intrinsics.height, intrinsics.width)}"
        )
    valid = np.isfinite(depth) & (depth > 0)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyFrame("depth map has no valid pixels")
    if n_valid < cfg.min_support:
        raise EmptyFrame(f"only {n_valid} valid pixels, need at least {cfg.min_support}")

    d = np.where(valid, depth, np.inf)
    with np.errstate(invalid="ignore"):
        # Horizontal discontinuity between (v,u) and (v,u+1), depth-adaptive.
        hjump = np.abs(d[:, 1:] - d[:, :-1]) > cfg.tau0 + cfg.tau1 * d[:, :-1] ** 2
        # Vertical consistency between (v,u) and (v+1,u); row v of vok gates
        # the merge of scanline v+1 into a cluster owning (v,u).
        vok = (
            np.abs(d[1:] - d[:-1]) <= cfg.tau0 + cfg.tau1 * d[:-1] ** 2
        ) & valid[1:] & valid[:-1]
        vslope = d[1:] - d[:-1]  # meaningful only where vok holds
    bend_tol = math.tan(math.radians(cfg.merge_angle)) / intrinsics.fy

    parents: list[int] = [0]  # union-find; index 0 unused (label 0 = unassigned)
    label_map = np.zeros((h, w), dtype=np.int32)
    prev_ids = np.zeros(w, dtype=np.int32)
    prev2_ids = np.zeros(w, dtype=np.int32)
    n_clusters = 0

    for v in range(h):
        row_ids = np.zeros(w, dtype=np.int32)
        idx = np.flatnonzero(valid[v])
        if idx.size:
            step_break = (np.diff(idx) > 1) | hjump[v, idx[:-1]]
            breaks = np.flatnonzero(step_break)
            starts = np.concatenate([[0], breaks + 1])
            stops = np.concatenate([breaks + 1, [idx.size]])
            for a, b in zip(starts, stops):
                u0, u1 = int(idx[a]), int(idx[b - 1]) + 1
                target = 0
                if v > 0:
                    seg_prev = prev_ids[u0:u1]
                    seg_vok = vok[v - 1, u0:u1]
                    lo, hi = int(seg_prev.min()), int(seg_prev.max())
                    cand_ids = (hi,) if lo == hi else np.unique(seg_prev)
                    for cand_id in cand_ids:
                        if cand_id == 0:
                            continue
                        cand_root = _find(parents, cand_id)
                        if target and cand_root == target:
                            continue
                        overlap = seg_prev == cand_id
                        n_overlap = int(overlap.sum())
                        if 2 * int((seg_vok & overlap).sum()) < n_overlap:
                            continue
                        # Surface-bend gate on segment-mean vertical slopes;
                        # means, not per-pixel slopes, so noise averages out.
                        two_rows = overlap & (prev2_ids[u0:u1] == cand_id)
                        n_two = int(two_rows.sum())
                        if v > 1 and n_two:
                            cols2 = np.flatnonzero(two_rows) + u0
                            slope_prev = vslope[v - 2, cols2].sum() / n_two
                            slope_here = vslope[v - 1, cols2].sum() / n_two
                            if abs(slope_here - slope_prev) > bend_tol * (
                                depth[v - 1, cols2].sum() / n_two
                            ):
                                continue
                        if target == 0:
                            target = cand_root
                        else:  # run bridges two clusters: union them
                            parents[cand_root] = target
                if target == 0:
                    n_clusters += 1
                    parents.append(n_clusters)
                    target = n_clusters
                row_ids[u0:u1] = target
        label_map[v] = row_ids
        prev2_ids, prev_ids = prev_ids, row_ids

    # Resolve unions and compute per-cluster moments in one vectorized pass.
    parents = np.asarray(parents, dtype=np.int32)
    roots = parents.copy()
    for i in range(1, len(parents)):
        roots[i] = _find(parents, i)
    merged = roots[label_map]

    vs, us = np.nonzero(valid)
    ids = merged[vs, us]
    dd = depth[vs, us]
    x = (us - intrinsics.cx) / intrinsics.fx * dd
    y = (vs - intrinsics.cy) / intrinsics.fy * dd
    nbins = n_clusters + 1
    counts = np.bincount(ids, minlength=nbins)
    sums = np.stack(
        [np.bincount(ids, weights=c, minlength=nbins) for c in (x, y, dd)], axis=1
    )
    prods = np.stack(
        [
            np.bincount(ids, weights=a * b, minlength=nbins)
            for a, b in ((x, x), (x, y), (x, dd), (y, y), (y, dd), (dd, dd))
        ],
        axis=1,
    )

    live = np.flatnonzero(counts[1:] >= cfg.min_support) + 1
    order = live[np.lexsort((live, -counts[live]))]
    kept = np.sort(order[: cfg.max_components])
    n_roots = int(np.count_nonzero(roots[1:] == np.arange(1, nbins)))
    discarded = n_roots - kept.size
    discarded_support = int(n_valid - counts[kept].sum())

    floor = max(cfg.thickness_floor, EPS_PSD)
    components = []
    for cid in kept:
        n = counts[cid]
        mean = sums[cid] / n
        sxx, sxy, sxz, syy, syz, szz = prods[cid]
        second = np.array([[sxx, sxy, sxz], [sxy, syy, syz], [sxz, syz, szz]]) / n
        cov = floor_spd(second - np.outer(mean, mean), floor=floor)
        components.append(Gaussian3(mean, cov, weight=float(n), m=0.0))

    final_index = np.zeros(nbins, dtype=np.int32)
    final_index[kept] = np.arange(1, kept.size + 1)
    labels = final_index[merged].astype(np.uint16)

    return FrameMixture(
        components=components,
        frame_index=frame_index,
        model_id=model_id,
        support=counts[kept].astype(np.int64),
        labels=labels,
        discarded_support=discarded_support,
        discarded_clusters=discarded,
    )
