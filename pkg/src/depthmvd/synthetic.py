"""Synthetic scenes: axis-aligned primitives, analytic ray casting, noise.

A scene is a set of axis-aligned plane patches and boxes plus a camera
trajectory and a noise regime. Rendering casts one ray per pixel and returns
exact ground-truth depth; the observed depth adds iid per-pixel noise,
constant per-primitive biases (consistent error), and an optional per-frame
scalar bias (inconsistent error).

Scene files are flat text, one directive per line:

    intrinsics fx fy cx cy width height
    plane axis=z offset=4.0 id=wall [xmin= xmax= ymin= ymax= zmin= zmax=]
    box id=crate xmin=-0.3 xmax=0.3 ymin=0.2 ymax=0.8 zmin=2.0 zmax=2.6
    pose tx ty tz qx qy qz qw
    linear_path n=30 from=x,y,z to=x,y,z target=x,y,z
    noise iid_sigma=0.03 [depth_scaled=0] [frame_bias_sigma=0] [seed=0]
    bias id=crate value=0.25

World frame: x right, y down, z forward (gravity along +y), matching the
camera convention so an identity pose looks down +z.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_io import FrameObservation, quat_to_rotation
from .errors import NoVisibleGeometry, SceneParseError
from .geometry import CameraIntrinsics, Pose

_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass
class Plane:
    """Axis-aligned plane patch <axis> = offset, clipped by optional bounds."""

    axis: str
    offset: float
    bounds: dict = field(default_factory=dict)  # e.g. {"xmin": -1, "xmax": 1}
    id: str = ""


@dataclass
class Box:
    """Axis-aligned box; rays hit its nearest face from outside."""

    lo: np.ndarray  # (3,)
    hi: np.ndarray  # (3,)
    id: str = ""

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise ValueError(f"degenerate box {self.id!r}")


@dataclass
class NoiseRegime:
    iid_sigma: float = 0.0  # meters
    depth_scaled: bool = False  # multiply iid sigma by depth
    region_bias: dict = field(default_factory=dict)  # primitive id -> meters
    frame_bias_sigma: float = 0.0  # meters, one draw per frame
    seed: int = 0

    def __post_init__(self):
        if self.iid_sigma < 0 or self.frame_bias_sigma < 0:
            raise ValueError("noise sigmas must be nonnegative")


@dataclass
class SceneSpec:
    primitives: list
    trajectory: list[Pose]
    intrinsics: CameraIntrinsics
    noise: NoiseRegime = field(default_factory=NoiseRegime)


def look_at_pose(eye, target) -> Pose:
    """Camera-to-world pose at `eye` looking toward `target`, y-down world."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    down = np.array([0.0, 1.0, 0.0])
    right = np.cross(down, forward)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight along gravity; pick an arbitrary right
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    cam_down = np.cross(forward, right)
    return Pose(np.stack([right, cam_down, forward], axis=1), eye)


def _ray_depths(prim, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Per-pixel ray parameter t for one primitive (NaN where missed).

    `dirs` are world-frame ray directions scaled so camera-frame z equals 1,
    making t the pinhole z-depth directly.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        if isinstance(prim, Plane):
            k = _AXES[prim.axis]
            t = (prim.offset - origin[k]) / dirs[..., k]
            hit = np.isfinite(t) & (t > 0)
            point = origin + t[..., None] * dirs
            for key, val in prim.bounds.items():
                ax = _AXES[key[0]]
                if key.endswith("min"):
                    hit &= point[..., ax] >= val
                else:
                    hit &= point[..., ax] <= val
            return np.where(hit, t, np.nan)
        if isinstance(prim, Box):
            t1 = (prim.lo - origin) / dirs
            t2 = (prim.hi - origin) / dirs
            t_near = np.nanmax(np.minimum(t1, t2), axis=-1)
            t_far = np.nanmin(np.maximum(t1, t2), axis=-1)
            hit = (t_near <= t_far) & (t_near > 0)
            return np.where(hit, t_near, np.nan)
    raise TypeError(f"unknown primitive {type(prim)!r}")


def render_frame(spec: SceneSpec, frame_index: int) -> FrameObservation:
    """Ray-cast one frame; observed depth is ground truth plus regime noise."""
    k = spec.intrinsics
    pose = spec.trajectory[frame_index]
    us, vs = np.meshgrid(np.arange(k.width), np.arange(k.height), indexing="xy")
    dirs_cam = np.stack(
        [(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us, dtype=np.float64)],
        axis=-1,
    )
    dirs_world = dirs_cam @ pose.rotation.T

    depth = np.full((k.height, k.width), np.inf)
    hit_id = np.full((k.height, k.width), -1, dtype=np.int32)
    for idx, prim in enumerate(spec.primitives):
        t = _ray_depths(prim, pose.translation, dirs_world)
        closer = np.isfinite(t) & (t < depth)
        depth[closer] = t[closer]
        hit_id[closer] = idx
    if not np.any(np.isfinite(depth)):
        raise NoVisibleGeometry(f"frame {frame_index} sees no primitive")
    gt = np.where(np.isfinite(depth), depth, np.nan)

    rng = np.random.default_rng([spec.noise.seed, frame_index])
    observed = gt.copy()
    if spec.noise.iid_sigma > 0:
        sigma = spec.noise.iid_sigma * (gt if spec.noise.depth_scaled else 1.0)
        observed = observed + rng.normal(size=gt.shape) * sigma
    for idx, prim in enumerate(spec.primitives):
        bias = spec.noise.region_bias.get(prim.id)
        if bias:
            observed = np.where(hit_id == idx, observed + bias, observed)
    if spec.noise.frame_bias_sigma > 0:
        observed = observed + rng.normal(scale=spec.noise.frame_bias_sigma)
    with np.errstate(invalid="ignore"):
        observed = np.where(np.isnan(observed), np.nan, np.maximum(observed, 1e-3))

    return FrameObservation(
        frame_index=frame_index, pose=pose, depth=observed, ground_truth=gt
    )


def render_synthetic(spec: SceneSpec):
    """Render the full trajectory; deterministic given the regime seed."""
    for i in range(len(spec.trajectory)):
        yield render_frame(spec, i)


def make_room_scene(
    n_frames: int = 30,
    size: int = 224,
    focal: float = 300.0,
    iid_sigma: float = 0.0,
    region_bias: dict | None = None,
    frame_bias_sigma: float = 0.0,
    seed: int = 0,
) -> SceneSpec:
    """Desk-scale room: four walls, floor, ceiling, two crates, lateral sweep."""
    k = CameraIntrinsics(focal, focal, size / 2, size / 2, size, size)
    primitives = [
        Plane("z", 4.0, {"xmin": -2.0, "xmax": 2.0, "ymin": -1.3, "ymax": 1.0}, id="backwall"),
        Plane("y", 1.0, {"zmin": 0.0, "zmax": 4.0, "xmin": -2.0, "xmax": 2.0}, id="floor"),
        Plane("y", -1.3, {"zmin": 0.0, "zmax": 4.0, "xmin": -2.0, "xmax": 2.0}, id="ceiling"),
        Plane("x", -2.0, {"zmin": 0.0, "zmax": 4.0, "ymin": -1.3, "ymax": 1.0}, id="leftwall"),
        Plane("x", 2.0, {"zmin": 0.0, "zmax": 4.0, "ymin": -1.3, "ymax": 1.0}, id="rightwall"),
        Box([-0.75, 0.4, 2.2], [-0.15, 1.0, 2.8], id="crate_a"),
        Box([0.35, 0.55, 2.6], [0.95, 1.0, 3.2], id="crate_b"),
    ]
    span = 0.5
    trajectory = [
        look_at_pose(
            [-span / 2 + span * i / max(n_frames - 1, 1), -0.15, 0.0],
            [0.0, 0.0, 3.0],
        )
        for i in range(n_frames)
    ]
    noise = NoiseRegime(
        iid_sigma=iid_sigma,
        region_bias=dict(region_bias or {}),
        frame_bias_sigma=frame_bias_sigma,
        seed=seed,
    )
    return SceneSpec(primitives, trajectory, k, noise)


def _room_builtin(**kwargs) -> SceneSpec:
    kwargs.setdefault("iid_sigma", 0.02)
    return make_room_scene(**kwargs)


BUILTIN_SCENES = {"room": _room_builtin}


def _kv_args(tokens: list[str], lineno: int) -> dict:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise SceneParseError(f"line {lineno}: expected key=value, got {tok!r}")
        key, val = tok.split("=", 1)
        out[key] = val
    return out


def parse_scene_file(path) -> SceneSpec:
    """Parse the flat-text scene grammar; errors carry the line number."""
    primitives: list = []
    trajectory: list[Pose] = []
    intrinsics = None
    noise_kwargs: dict = {}
    region_bias: dict = {}

    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        kind, *rest = line.split()
        try:
            if kind == "intrinsics":
                fx, fy, cx, cy, w, h = rest
                intrinsics = CameraIntrinsics(
                    float(fx), float(fy), float(cx), float(cy), int(w), int(h)
                )
            elif kind == "plane":
                kv = _kv_args(rest, lineno)
                axis = kv.pop("axis")
                offset = float(kv.pop("offset"))
                pid = kv.pop("id", "")
                bounds = {key: float(val) for key, val in kv.items()}
                if axis not in _AXES:
                    raise ValueError(f"bad axis {axis!r}")
                primitives.append(Plane(axis, offset, bounds, id=pid))
            elif kind == "box":
                kv = _kv_args(rest, lineno)
                pid = kv.pop("id", "")
                lo = [float(kv[f"{a}min"]) for a in "xyz"]
                hi = [float(kv[f"{a}max"]) for a in "xyz"]
                primitives.append(Box(lo, hi, id=pid))
            elif kind == "pose":
                tx, ty, tz, qx, qy, qz, qw = (float(v) for v in rest)
                trajectory.append(Pose(quat_to_rotation(qx, qy, qz, qw), [tx, ty, tz]))
            elif kind == "linear_path":
                kv = _kv_args(rest, lineno)
                n = int(kv["n"])
                start = np.array([float(v) for v in kv["from"].split(",")])
                end = np.array([float(v) for v in kv["to"].split(",")])
                target = np.array([float(v) for v in kv["target"].split(",")])
                for i in range(n):
                    alpha = i / max(n - 1, 1)
                    trajectory.append(look_at_pose(start + alpha * (end - start), target))
            elif kind == "noise":
                kv = _kv_args(rest, lineno)
                noise_kwargs = {
                    "iid_sigma": float(kv.get("iid_sigma", 0.0)),
                    "depth_scaled": bool(int(kv.get("depth_scaled", 0))),
                    "frame_bias_sigma": float(kv.get("frame_bias_sigma", 0.0)),
                    "seed": int(kv.get("seed", 0)),
                }
            elif kind == "bias":
                kv = _kv_args(rest, lineno)
                region_bias[kv["id"]] = float(kv["value"])
            else:
                raise ValueError(f"unknown directive {kind!r}")
        except SceneParseError:
            raise
        except Exception as exc:
            raise SceneParseError(f"line {lineno}: {exc}") from exc

    if intrinsics is None:
        raise SceneParseError("scene file has no intrinsics line")
    if not trajectory:
        raise SceneParseError("scene file has no trajectory")
    noise = NoiseRegime(region_bias=region_bias, **noise_kwargs)
    return SceneSpec(primitives, trajectory, intrinsics, noise)


def write_scene_file(path, spec: SceneSpec):
    """Serialize a SceneSpec back to the flat-text grammar."""
    from .data_io import rotation_to_quat

    k = spec.intrinsics
    lines = [f"intrinsics {k.fx} {k.fy} {k.cx} {k.cy} {k.width} {k.height}"]
    for prim in spec.primitives:
        if isinstance(prim, Plane):
            bounds = " ".join(f"{key}={val}" for key, val in sorted(prim.bounds.items()))
            lines.append(f"plane axis={prim.axis} offset={prim.offset} id={prim.id} {bounds}".strip())
        else:
            lo, hi = prim.lo, prim.hi
            lines.append(
                f"box id={prim.id} xmin={lo[0]} xmax={hi[0]} "
                f"ymin={lo[1]} ymax={hi[1]} zmin={lo[2]} zmax={hi[2]}"
            )
    n = spec.noise
    lines.append(
        f"noise iid_sigma={n.iid_sigma} depth_scaled={int(n.depth_scaled)} "
        f"frame_bias_sigma={n.frame_bias_sigma} seed={n.seed}"
    )
    for pid, val in sorted(n.region_bias.items()):
        lines.append(f"bias id={pid} value={val}")
    for pose in spec.trajectory:
        q = rotation_to_quat(pose.rotation)
        t = pose.translation
        lines.append(
            f"pose {t[0]:.17g} {t[1]:.17g} {t[2]:.17g} "
            f"{q[0]:.17g} {q[1]:.17g} {q[2]:.17g} {q[3]:.17g}"
        )
    Path(path).write_text("\n".join(lines) + "\n")
