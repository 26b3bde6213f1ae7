"""Sequence ingestion, on-disk encodings, and ablation stream transforms.

Directory layout for a sequence root:

    root/intrinsics.txt            "fx fy cx cy width height"
    root/poses.txt                 one line per frame: "index tx ty tz qx qy qz qw"
                                   (camera-to-world, quaternion x y z w)
    root/model_1/NNNNNN.png|.f32   depth maps, one or more model directories
    root/aleatoric/NNNNNN.f32      optional variance maps, meters^2
    root/epistemic/NNNNNN.f32      optional variance maps, meters^2
    root/gt/NNNNNN.png|.f32        optional ground-truth depth

Two depth encodings: 16-bit PNG in millimeters with 0 = invalid, and raw
little-endian float32 `.f32` (row-major, meters, NaN = invalid) paired with a
one-line `<name>.shape` sidecar holding "H W".
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .engine import select_model
from .errors import (
    CorruptDepthFile,
    IngestionError,
    MissingIntrinsics,
    PoseCountMismatch,
)
from .geometry import CameraIntrinsics, Pose

D_MAX_DEFAULT = 20.0  # meters; deeper readings are marked invalid


@dataclass
class FrameObservation:
    """One ingested view: pose, depth, and optional auxiliary maps."""

    frame_index: int
    pose: Pose
    depth: np.ndarray  # (H, W) meters, NaN = invalid
    aleatoric: Optional[np.ndarray] = None  # (H, W) meters^2
    epistemic: Optional[np.ndarray] = None  # (H, W) meters^2
    ground_truth: Optional[np.ndarray] = None  # (H, W) meters
    model_id: int = 1

    def __post_init__(self):
        shape = self.depth.shape
        for name in ("aleatoric", "epistemic", "ground_truth"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != shape:
                raise ValueError(f"{name} shape {arr.shape} != depth shape {shape}")
            if name != "ground_truth" and arr is not None and np.nanmin(arr) < 0:
                raise ValueError(f"{name} must be nonnegative")


def read_depth_png(path) -> np.ndarray:
    """16-bit PNG millimeters -> float64 meters with NaN invalid."""
    try:
        raw = np.asarray(Image.open(path), dtype=np.float64)
    except Exception as exc:
        raise CorruptDepthFile(f"{path}: {exc}") from exc
    if raw.ndim != 2:
        raise CorruptDepthFile(f"{path}: expected single-channel image")
    depth = raw / 1000.0
    depth[raw == 0] = np.nan
    return depth


def write_depth_png(path, depth: np.ndarray):
    """float meters -> 16-bit PNG millimeters, invalid/nonpositive -> 0."""
    mm = np.where(np.isfinite(depth) & (depth > 0), np.round(depth * 1000.0), 0.0)
    Image.fromarray(np.clip(mm, 0, 65535).astype(np.uint16)).save(path)


def read_f32(path) -> np.ndarray:
    """Raw little-endian float32 with a 'H W' sidecar; returns float64."""
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".shape")
    try:
        h, w = (int(t) for t in sidecar.read_text().split())
        data = np.fromfile(path, dtype="<f4")
        return data.reshape(h, w).astype(np.float64)
    except Exception as exc:
        raise CorruptDepthFile(f"{path}: {exc}") from exc


def write_f32(path, arr: np.ndarray):
    path = Path(path)
    arr = np.asarray(arr)
    path.with_suffix(path.suffix + ".shape").write_text(f"{arr.shape[0]} {arr.shape[1]}\n")
    arr.astype("<f4").tofile(path)


def _read_map(path: Path) -> np.ndarray:
    return read_depth_png(path) if path.suffix == ".png" else read_f32(path)


def read_intrinsics(path) -> CameraIntrinsics:
    path = Path(path)
    if not path.is_file():
        raise MissingIntrinsics(f"no intrinsics file at {path}")
    vals = path.read_text().split()
    if len(vals) != 6:
        raise IngestionError(f"{path}: expected 'fx fy cx cy width height'")
    fx, fy, cx, cy = (float(v) for v in vals[:4])
    return CameraIntrinsics(fx, fy, cx, cy, int(vals[4]), int(vals[5]))


def write_intrinsics(path, k: CameraIntrinsics):
    Path(path).write_text(f"{k.fx} {k.fy} {k.cx} {k.cy} {k.width} {k.height}\n")


def quat_to_rotation(qx, qy, qz, qw) -> np.ndarray:
    return Rotation.from_quat([qx, qy, qz, qw]).as_matrix()


def rotation_to_quat(r: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(r).as_quat()


def read_poses(path) -> list[Pose]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = line.split()
        if len(vals) != 8:
            raise IngestionError(f"{path}:{lineno}: expected 'index tx ty tz qx qy qz qw'")
        t = np.array([float(v) for v in vals[1:4]])
        q = np.array([float(v) for v in vals[4:8]])
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-3:
            raise IngestionError(f"{path}:{lineno}: quaternion norm {norm:.6f} off by > 1e-3")
        poses.append(Pose(quat_to_rotation(*(q / norm)), t))
    return poses


def write_poses(path, poses: list[Pose]):
    lines = []
    for i, p in enumerate(poses):
        q = rotation_to_quat(p.rotation)
        t = p.translation
        lines.append(
            f"{i} {t[0]:.17g} {t[1]:.17g} {t[2]:.17g} "
            f"{q[0]:.17g} {q[1]:.17g} {q[2]:.17g} {q[3]:.17g}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def _frame_files(directory: Path) -> list[Path]:
    files = [
        p
        for p in directory.iterdir()
        if p.suffix in (".png", ".f32") and re.fullmatch(r"\d+", p.stem)
    ]
    return sorted(files, key=lambda p: int(p.stem))


def _mark_invalid(depth: np.ndarray, d_max: float) -> np.ndarray:
    out = depth.copy()
    with np.errstate(invalid="ignore"):
        out[~np.isfinite(out) | (out <= 0) | (out > d_max)] = np.nan
    return out


def load_sequence(
    root,
    mode: str = "alternate",
    d_max: float = D_MAX_DEFAULT,
) -> Iterator[FrameObservation]:
    """Yield frames in ascending index.

    With several model_* directories, `alternate` mode yields the one selected
    by the model-alternation schedule for each frame; `multi` mode yields one
    observation per model (ascending model id) for every frame index.
    """
    root = Path(root)
    if mode not in ("alternate", "multi"):
        raise ValueError(f"mode must be 'alternate' or 'multi', got {mode!r}")
    read_intrinsics(root / "intrinsics.txt")  # existence + format check
    poses = read_poses(root / "poses.txt")

    model_dirs = sorted(
        (p for p in root.iterdir() if p.is_dir() and re.fullmatch(r"model_\d+", p.name)),
        key=lambda p: int(p.name.split("_")[1]),
    )
    if not model_dirs:
        raise IngestionError(f"{root}: no model_* depth directory")
    per_model_files = [_frame_files(d) for d in model_dirs]
    n_frames = len(per_model_files[0])
    for d, files in zip(model_dirs, per_model_files):
        if len(files) != n_frames:
            raise PoseCountMismatch(
                f"{d.name} has {len(files)} frames, {model_dirs[0].name} has {n_frames}"
            )
    if len(poses) != n_frames:
        raise PoseCountMismatch(f"poses.txt has {len(poses)} lines for {n_frames} depth frames")

    n_models = len(model_dirs)

    def _optional(sub: str, stem: str) -> Optional[np.ndarray]:
        for ext in (".f32", ".png"):
            p = root / sub / (stem + ext)
            if p.is_file():
                return _read_map(p)
        return None

    for i in range(n_frames):
        model_ids = range(1, n_models + 1) if mode == "multi" else (select_model(i, n_models),)
        for mid in model_ids:
            f = per_model_files[mid - 1][i]
            yield FrameObservation(
                frame_index=i,
                pose=poses[i],
                depth=_mark_invalid(_read_map(f), d_max),
                aleatoric=_optional("aleatoric", f.stem),
                epistemic=_optional("epistemic", f.stem),
                ground_truth=_optional("gt", f.stem),
                model_id=mid,
            )


def write_sequence(root, observations: list[FrameObservation], k: CameraIntrinsics,
                   encoding: str = "f32", n_models: int = 1):
    """Write the standard directory layout (used by the synthetic generator).

    Observations are written round-robin into model_1..model_N according to
    their model_id; ground truth goes to gt/ when present.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_intrinsics(root / "intrinsics.txt", k)
    for m in range(1, n_models + 1):
        (root / f"model_{m}").mkdir(exist_ok=True)
    poses = []
    wrote_gt = False
    for obs in observations:
        stem = f"{obs.frame_index:06d}"
        if len(poses) == obs.frame_index:
            poses.append(obs.pose)
        target = root / f"model_{obs.model_id}" / (stem + (".png" if encoding == "png" else ".f32"))
        if encoding == "png":
            write_depth_png(target, obs.depth)
        else:
            write_f32(target, obs.depth)
        if obs.ground_truth is not None:
            (root / "gt").mkdir(exist_ok=True)
            write_f32(root / "gt" / (stem + ".f32"), obs.ground_truth)
            wrote_gt = True
        for sub, arr in (("aleatoric", obs.aleatoric), ("epistemic", obs.epistemic)):
            if arr is not None:
                (root / sub).mkdir(exist_ok=True)
                write_f32(root / sub / (stem + ".f32"), arr)
    write_poses(root / "poses.txt", poses)
    return wrote_gt


def perturb_poses(
    stream: Iterator[FrameObservation],
    rot_sigma_deg: float,
    trans_sigma: float,
    seed: int = 0,
) -> Iterator[FrameObservation]:
    """Compose each pose with independent rotation/translation noise.

    Rotation axis is uniform on the sphere, angle |N(0, rot_sigma)|; the
    translation perturbation is N(0, trans_sigma^2 I). Ground truth and depth
    are untouched; deterministic given the seed.
    """
    if rot_sigma_deg < 0 or trans_sigma < 0:
        raise ValueError("noise sigmas must be nonnegative")
    for obs in stream:
        if rot_sigma_deg == 0 and trans_sigma == 0:
            yield obs
            continue
        rng = np.random.default_rng([seed, obs.frame_index])
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = abs(rng.normal(scale=np.radians(rot_sigma_deg)))
        delta_r = Rotation.from_rotvec(axis * angle).as_matrix()
        delta_t = rng.normal(scale=trans_sigma, size=3) if trans_sigma > 0 else np.zeros(3)
        pose = Pose(delta_r @ obs.pose.rotation, obs.pose.translation + delta_t)
        yield FrameObservation(
            frame_index=obs.frame_index,
            pose=pose,
            depth=obs.depth,
            aleatoric=obs.aleatoric,
            epistemic=obs.epistemic,
            ground_truth=obs.ground_truth,
            model_id=obs.model_id,
        )


def skip_frames(stream: Iterator[FrameObservation], interval: int) -> Iterator[FrameObservation]:
    """Keep frames whose index is 0 mod (interval + 1); 0 keeps everything."""
    if interval < 0:
        raise ValueError("interval must be nonnegative")
    for obs in stream:
        if obs.frame_index % (interval + 1) == 0:
            yield obs
