"""Synthetic scenes, analytic raycasting, trajectories, and dataset I/O.

Scenes are unions of spheres, boxes, and planes, each carrying a semantic
class. Ground truth is produced by exact closed-form intersection per
pixel. Generated sequences are written with explicit little-endian binary
formats plus a JSON manifest so round-trips are bitwise checkable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .features import FeatureMap, FeatureOracleSpec, load_feature_map, make_oracle_spec, \
    oracle_features, sample_class_embeddings, save_feature_map
from .renderer import Camera, Pose, generate_rays

DEPTH_MAGIC = b"DPTH1"
LABEL_MAGIC = b"LBL1"

_HIT_EPS = 1e-6


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float


@dataclass(frozen=True)
class BoxShape:
    bmin: np.ndarray
    bmax: np.ndarray


@dataclass(frozen=True)
class PlaneShape:
    normal: np.ndarray  # unit
    offset: float       # plane is {p : normal . p = offset}


@dataclass(frozen=True)
class ScenePrimitive:
    shape: object
    class_id: int


@dataclass
class Scene:
    primitives: list[ScenePrimitive]
    bounds: tuple[np.ndarray, np.ndarray]  # (min, max) axis-aligned box

    @property
    def n_classes(self) -> int:
        return max((p.class_id for p in self.primitives), default=-1) + 1

    @property
    def background_label(self) -> int:
        return self.n_classes

    def validate(self) -> None:
        """Bounded primitives must sit inside the scene box; class ids contiguous."""
        lo, hi = self.bounds
        for p in self.primitives:
            s = p.shape
            if isinstance(s, Sphere):
                ok = np.all(s.center - s.radius >= lo - 1e-9) and np.all(s.center + s.radius <= hi + 1e-9)
            elif isinstance(s, BoxShape):
                ok = np.all(s.bmin >= lo - 1e-9) and np.all(s.bmax <= hi + 1e-9)
            else:
                ok = True  # planes are unbounded; exempt from containment
            if not ok:
                raise ConfigError(f"primitive {s} escapes scene bounds")
        ids = sorted({p.class_id for p in self.primitives})
        if ids != list(range(len(ids))):
            raise ConfigError(f"class ids must be contiguous from 0, got {ids}")


def _intersect_sphere(sph: Sphere, origins, dirs):
    oc = origins - sph.center.astype(origins.dtype)
    b = np.einsum("ni,ni->n", dirs, oc)
    c = np.einsum("ni,ni->n", oc, oc) - sph.radius ** 2
    disc = b * b - c
    t = np.full(origins.shape[0], np.inf)
    ok = disc >= 0
    root = np.sqrt(np.where(ok, disc, 0.0))
    t_near = -b - root
    t_far = -b + root
    near_ok = ok & (t_near > _HIT_EPS)
    far_ok = ok & ~near_ok & (t_far > _HIT_EPS)
    t[near_ok] = t_near[near_ok]
    t[far_ok] = t_far[far_ok]
    return t


def _intersect_box(box: BoxShape, origins, dirs):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (box.bmin - origins) * inv
        t2 = (box.bmax - origins) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.max(np.minimum(t1, t2), axis=1)
    tmax = np.min(np.maximum(t1, t2), axis=1)
    t = np.full(origins.shape[0], np.inf)
    hit = tmax >= np.maximum(tmin, _HIT_EPS)
    use_near = hit & (tmin > _HIT_EPS)
    use_far = hit & ~use_near
    t[use_near] = tmin[use_near]
    t[use_far] = tmax[use_far]
    return t


def _intersect_plane(pl: PlaneShape, origins, dirs):
    n = pl.normal
    denom = dirs @ n
    t = np.full(origins.shape[0], np.inf)
    ok = np.abs(denom) > 1e-12
    tt = (pl.offset - origins @ n) / np.where(ok, denom, 1.0)
    ok &= tt > _HIT_EPS
    t[ok] = tt[ok]
    return t


def raycast_batch(scene: Scene, origins: np.ndarray, dirs: np.ndarray):
    """Nearest-hit depth, class label, and primitive index for each ray.

    Misses get depth 0.0, the scene background label, and instance -1.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    labels = np.full(n, scene.background_label, dtype=np.int64)
    instances = np.full(n, -1, dtype=np.int64)
    for idx, prim in enumerate(scene.primitives):
        s = prim.shape
        if isinstance(s, Sphere):
            t = _intersect_sphere(s, origins, dirs)
        elif isinstance(s, BoxShape):
            t = _intersect_box(s, origins, dirs)
        elif isinstance(s, PlaneShape):
            t = _intersect_plane(s, origins, dirs)
        else:
            raise ConfigError(f"unknown primitive {type(s).__name__}")
        closer = t < best_t
        best_t[closer] = t[closer]
        labels[closer] = prim.class_id
        instances[closer] = idx
    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    labels[~np.isfinite(best_t)] = scene.background_label
    instances[~np.isfinite(best_t)] = -1
    return depth, labels, instances


def raycast(scene: Scene, origin, direction):
    """Single-ray form: (depth or 0.0 on miss, class_id or background)."""
    d, lab, _ = raycast_batch(scene, np.asarray(origin, float)[None], np.asarray(direction, float)[None])
    return float(d[0]), int(lab[0])


@dataclass
class GroundTruth:
    depth: np.ndarray      # (H, W) float32, 0 where invalid
    labels: np.ndarray     # (H, W) uint16, background where no hit
    instances: np.ndarray  # (H, W) int32, -1 where no hit


def render_ground_truth(scene: Scene, pose: Pose, cam: Camera) -> GroundTruth:
    """Per-pixel raycast; hits outside [near, far] are invalidated."""
    uu, vv = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    origins, dirs = generate_rays(cam, pose, uu.ravel(), vv.ravel())
    depth, labels, instances = raycast_batch(scene, origins, dirs)
    out_of_range = (depth < cam.near) | (depth > cam.far)
    depth = np.where(out_of_range, 0.0, depth)
    labels = np.where(depth > 0, labels, scene.background_label)
    instances = np.where(depth > 0, instances, -1)
    return GroundTruth(
        depth=depth.reshape(cam.height, cam.width).astype(np.float32),
        labels=labels.reshape(cam.height, cam.width).astype(np.uint16),
        instances=instances.reshape(cam.height, cam.width).astype(np.int32),
    )


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose with +z forward, +x right, +y down in image space."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight along up; pick an arbitrary horizontal
        right = np.cross(fwd, (0.0, 1.0, 0.0))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    return Pose(rotation=rot, translation=eye)


def orbit_trajectory(center, radius, height, n_frames, start_angle=0.0, sweep=2 * np.pi):
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for i in range(n_frames):
        ang = start_angle + sweep * i / max(n_frames, 1)
        eye = center + np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        poses.append(look_at_pose(eye, center))
    return poses


def pan_trajectory(start_eye, end_eye, target_offset, n_frames):
    """Linear camera slide; the look target tracks the eye by a fixed offset."""
    start_eye = np.asarray(start_eye, dtype=np.float64)
    end_eye = np.asarray(end_eye, dtype=np.float64)
    target_offset = np.asarray(target_offset, dtype=np.float64)
    poses = []
    for i in range(n_frames):
        a = i / max(n_frames - 1, 1)
        eye = (1 - a) * start_eye + a * end_eye
        poses.append(look_at_pose(eye, eye + target_offset))
    return poses


@dataclass
class SequenceSpec:
    trajectory: list[Pose]
    cam: Camera
    n_frames: int
    oracle: FeatureOracleSpec
    seed: int
    fixture: str = ""

    def __post_init__(self):
        if self.n_frames != len(self.trajectory):
            raise ConfigError("n_frames must equal the trajectory length")


# ---------------------------------------------------------------------------
# standard fixtures
# ---------------------------------------------------------------------------

DEFAULT_CAMERA = Camera(fx=120.0, fy=120.0, cx=79.5, cy=59.5,
                        width=160, height=120, near=0.2, far=6.0)

FIXTURE_NAMES = ("single_frame", "tabletop5", "exploration", "specialization")


def _table_scene(objects: list[ScenePrimitive], half_xy=2.6, z_hi=2.4) -> Scene:
    table = ScenePrimitive(
        BoxShape(np.array([-1.6, -1.2, -0.25]), np.array([1.6, 1.2, 0.0])),
        class_id=max(p.class_id for p in objects) + 1 if objects else 0,
    )
    floor = ScenePrimitive(
        BoxShape(np.array([-half_xy, -half_xy, -0.7]), np.array([half_xy, half_xy, -0.55])),
        class_id=table.class_id,
    )
    bounds = (np.array([-half_xy, -half_xy, -0.8]), np.array([half_xy, half_xy, z_hi]))
    return Scene(primitives=objects + [table, floor], bounds=bounds)


def _sphere_on_table(x, y, r, cls):
    return ScenePrimitive(Sphere(np.array([x, y, r]), r), cls)


def _box_on_table(x, y, sx, sy, sz, cls):
    return ScenePrimitive(
        BoxShape(np.array([x - sx / 2, y - sy / 2, 0.0]), np.array([x + sx / 2, y + sy / 2, sz])), cls
    )


def standard_fixtures(name: str, seed: int = 0) -> tuple[Scene, SequenceSpec]:
    """Deterministic named scene + capture setups used by tests and the CLI."""
    cam = DEFAULT_CAMERA
    if name == "single_frame":
        objects = [
            _sphere_on_table(-0.45, 0.1, 0.28, 0),
            _box_on_table(0.45, -0.15, 0.5, 0.4, 0.42, 1),
            _sphere_on_table(0.15, 0.55, 0.2, 2),
        ]
        scene = _table_scene(objects)
        scene.validate()
        traj = [look_at_pose((0.0, -2.05, 1.45), (0.0, 0.1, 0.12))]
        oracle = make_oracle_spec(scene.n_classes, 1536, seed=seed + 101, noise_sigma=0.1)
        return scene, SequenceSpec(traj, cam, 1, oracle, seed, fixture=name)

    if name == "tabletop5":
        objects = [
            # two instances per class, spread over the table
            _sphere_on_table(-1.05, -0.55, 0.26, 0),
            _sphere_on_table(0.95, 0.62, 0.24, 0),
            _box_on_table(-0.15, -0.62, 0.46, 0.4, 0.46, 1),
            _box_on_table(1.1, -0.35, 0.42, 0.44, 0.4, 1),
            _sphere_on_table(-1.0, 0.58, 0.21, 2),
            _sphere_on_table(0.12, 0.7, 0.19, 2),
            _box_on_table(-0.52, 0.12, 0.34, 0.3, 0.6, 3),
            _box_on_table(0.5, 0.1, 0.3, 0.34, 0.55, 3),
            _sphere_on_table(-0.35, -1.35, 0.3, 4),  # flatter, off-table side sphere
            _sphere_on_table(0.42, -1.0, 0.27, 4),
        ]
        scene = _table_scene(objects)
        scene.validate()
        traj = orbit_trajectory((0.0, 0.0, 0.1), radius=2.3, height=1.75,
                                n_frames=30, start_angle=-np.pi / 2)
        oracle = make_oracle_spec(scene.n_classes, 1536, seed=seed + 101, noise_sigma=0.1)
        return scene, SequenceSpec(traj, cam, 30, oracle, seed, fixture=name)

    if name == "exploration":
        # long table; the right-hand duplicates are outside the frustum for
        # the whole hold phase and only appear once the camera pans right
        objects = [
            _sphere_on_table(-1.15, -0.25, 0.26, 0),
            _box_on_table(-0.7, 0.45, 0.44, 0.4, 0.46, 1),
            _sphere_on_table(-0.25, -0.4, 0.2, 2),
            # held-out duplicates
            _sphere_on_table(1.0, 0.35, 0.26, 0),
            _box_on_table(1.35, -0.3, 0.44, 0.4, 0.46, 1),
            _sphere_on_table(0.85, 0.55, 0.2, 2),
        ]
        table = ScenePrimitive(
            BoxShape(np.array([-1.9, -1.0, -0.25]), np.array([1.9, 1.0, 0.0])), class_id=3
        )
        bounds = (np.array([-2.6, -2.6, -0.4]), np.array([2.6, 2.6, 2.2]))
        scene = Scene(primitives=objects + [table], bounds=bounds)
        scene.validate()
        traj = []
        hold_frames, pan_frames = 18, 12
        for i in range(hold_frames):  # bob around the left cluster for parallax
            ang = 2 * np.pi * i / hold_frames
            eye = np.array([-1.15 + 0.12 * np.sin(ang), -1.75 + 0.1 * np.cos(ang),
                            1.15 + 0.06 * np.sin(2 * ang)])
            traj.append(look_at_pose(eye, (eye[0], 0.0, 0.1)))
        for i in range(pan_frames):
            a = (i + 1) / pan_frames
            eye = np.array([-1.15 + 2.3 * a, -1.75, 1.15])
            traj.append(look_at_pose(eye, (eye[0], 0.0, 0.1)))
        oracle = make_oracle_spec(scene.n_classes, 1536, seed=seed + 101, noise_sigma=0.1)
        return scene, SequenceSpec(traj, cam, 30, oracle, seed, fixture=name)

    if name == "specialization":
        # compound objects: body (class 0) + cap (class 1); unrelated class 2
        objects = [
            _box_on_table(-0.8, -0.1, 0.44, 0.44, 0.4, 0),
            _sphere_on_table(-0.8, -0.1, 0.16, 1),
            _box_on_table(0.55, 0.35, 0.44, 0.44, 0.4, 0),
            _sphere_on_table(0.55, 0.35, 0.16, 1),
            _sphere_on_table(0.25, -0.75, 0.24, 2),
        ]
        # lift caps onto their bodies
        for i in (1, 3):
            s = objects[i].shape
            objects[i] = ScenePrimitive(
                Sphere(s.center + np.array([0.0, 0.0, 0.4]), s.radius), objects[i].class_id
            )
        scene = _table_scene(objects)
        scene.validate()
        traj = orbit_trajectory((0.0, 0.0, 0.1), radius=2.3, height=1.7,
                                n_frames=30, start_angle=-np.pi / 2)
        base = sample_class_embeddings(scene.n_classes + 1, 1536, seed=seed + 101)
        rng = np.random.default_rng(seed + 757)
        u = rng.standard_normal(1536)
        u -= (u @ base[0]) * base[0]
        u /= np.linalg.norm(u)
        base[1] = 0.7 * base[0] + np.sqrt(1.0 - 0.49) * u  # cap embedding correlates with body
        oracle = FeatureOracleSpec(class_embeddings=base.astype(np.float32), noise_sigma=0.1,
                                   coarse_h=22, coarse_w=38)
        return scene, SequenceSpec(traj, cam, 30, oracle, seed, fixture=name)

    raise ConfigError(f"unknown fixture {name!r}; choose from {FIXTURE_NAMES}")


# ---------------------------------------------------------------------------
# binary raster formats and pose files
# ---------------------------------------------------------------------------

def write_depth(path, depth: np.ndarray) -> None:
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(DEPTH_MAGIC)] != DEPTH_MAGIC:
        raise FormatError("bad depth magic", offset=0)
    if len(data) < len(DEPTH_MAGIC) + 8:
        raise FormatError("truncated depth header", offset=len(data))
    h, w = struct.unpack_from("<II", data, len(DEPTH_MAGIC))
    start = len(DEPTH_MAGIC) + 8
    expect = start + 4 * h * w
    if len(data) != expect:
        raise FormatError(f"depth payload is {len(data) - start} bytes, expected {4 * h * w}",
                          offset=min(len(data), expect))
    return np.frombuffer(data, dtype="<f4", offset=start).reshape(h, w).astype(np.float32)


def write_labels(path, labels: np.ndarray) -> None:
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(labels, dtype="<u2").tobytes())


def read_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(LABEL_MAGIC)] != LABEL_MAGIC:
        raise FormatError("bad label magic", offset=0)
    if len(data) < len(LABEL_MAGIC) + 8:
        raise FormatError("truncated label header", offset=len(data))
    h, w = struct.unpack_from("<II", data, len(LABEL_MAGIC))
    start = len(LABEL_MAGIC) + 8
    expect = start + 2 * h * w
    if len(data) != expect:
        raise FormatError(f"label payload is {len(data) - start} bytes, expected {2 * h * w}",
                          offset=min(len(data), expect))
    return np.frombuffer(data, dtype="<u2", offset=start).reshape(h, w).astype(np.uint16)


def write_pose(path, pose: Pose) -> None:
    m = pose.matrix()
    Path(path).write_text(" ".join(f"{x:.17g}" for x in m.ravel()) + "\n")


def read_pose(path) -> Pose:
    text = Path(path).read_text().split()
    if len(text) != 16:
        raise FormatError(f"pose file has {len(text)} values, expected 16")
    try:
        vals = np.array([float(x) for x in text]).reshape(4, 4)
    except ValueError as e:
        raise FormatError(f"pose file has a non-numeric value: {e}") from e
    return Pose.from_matrix(vals)


# ---------------------------------------------------------------------------
# dataset generation and loading
# ---------------------------------------------------------------------------

@dataclass
class DatasetFrame:
    frame_id: int
    pose: Pose
    depth: np.ndarray
    features: FeatureMap
    labels: np.ndarray


@dataclass
class Dataset:
    root: Path
    cam: Camera
    bounds: tuple[np.ndarray, np.ndarray]
    manifest: dict
    n_frames: int = field(init=False)

    def __post_init__(self):
        self.n_frames = len(self.manifest["frames"])

    def frame(self, i: int) -> DatasetFrame:
        rec = self.manifest["frames"][i]
        return DatasetFrame(
            frame_id=rec["frame_id"],
            pose=read_pose(self.root / rec["pose"]),
            depth=read_depth(self.root / rec["depth"]),
            features=load_feature_map(self.root / rec["features"]),
            labels=read_labels(self.root / rec["labels"]),
        )


def generate_sequence(spec: SequenceSpec, scene: Scene, out_dir) -> dict:
    """Write per-frame depth/pose/features/labels plus a manifest; returns it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    for i, pose in enumerate(spec.trajectory):
        gt = render_ground_truth(scene, pose, spec.cam)
        fmap_seed = int(np.random.SeedSequence([spec.seed, i]).generate_state(1)[0])
        fmap = oracle_features(scene, pose, spec.cam, spec.oracle, seed=fmap_seed)
        fmap.source_frame = i
        names = {
            "frame_id": i,
            "depth": f"frame_{i:06d}.depth",
            "pose": f"frame_{i:06d}.pose.txt",
            "features": f"frame_{i:06d}.fmap",
            "labels": f"frame_{i:06d}.labels",
        }
        write_depth(out / names["depth"], gt.depth)
        write_pose(out / names["pose"], pose)
        save_feature_map(out / names["features"], fmap)
        write_labels(out / names["labels"], gt.labels)
        frames.append(names)
    cam = spec.cam
    manifest = {
        "format_version": 1,
        "seed": spec.seed,
        "fixture": spec.fixture,
        "n_frames": spec.n_frames,
        "camera": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                   "width": cam.width, "height": cam.height,
                   "near": cam.near, "far": cam.far},
        "scene_bounds": {"min": [float(x) for x in scene.bounds[0]],
                         "max": [float(x) for x in scene.bounds[1]]},
        "oracle": {"dim": spec.oracle.dim, "coarse_h": spec.oracle.coarse_h,
                   "coarse_w": spec.oracle.coarse_w,
                   "noise_sigma": spec.oracle.noise_sigma,
                   "n_embeddings": int(spec.oracle.class_embeddings.shape[0])},
        "n_classes": scene.n_classes,
        "background_label": scene.background_label,
        "frames": frames,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest is not valid JSON: {e}") from e
    for key in ("camera", "scene_bounds", "frames"):
        if key not in manifest:
            raise FormatError(f"manifest missing key {key!r}")
    c = manifest["camera"]
    cam = Camera(fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
                 width=c["width"], height=c["height"], near=c["near"], far=c["far"])
    b = manifest["scene_bounds"]
    bounds = (np.asarray(b["min"], dtype=np.float64), np.asarray(b["max"], dtype=np.float64))
    return Dataset(root=root, cam=cam, bounds=bounds, manifest=manifest)


def default_clicks(scene: Scene, spec: SequenceSpec, gt0: GroundTruth) -> list[dict]:
    """One click per surface class on frame 0.

    Each click lands on the interior-most pixel of the largest instance of
    its class, so click order matches ground-truth label order. The last
    scene class is the supporting surface and doubles as the background
    click; sky pixels (no geometry) are never clicked and are the mIoU
    ignore label.
    """
    from scipy import ndimage

    clicks = []
    labels = gt0.labels
    names = [f"class_{c}" for c in range(scene.n_classes - 1)] + ["background"]
    for c in range(scene.n_classes):
        class_mask = labels == c
        if not class_mask.any():
            raise ConfigError(f"fixture class {c} is not visible in frame 0")
        insts, counts = np.unique(gt0.instances[class_mask], return_counts=True)
        inst_mask = (gt0.instances == insts[np.argmax(counts)]) & class_mask
        dist = ndimage.distance_transform_edt(inst_mask)
        v, u = np.unravel_index(int(np.argmax(dist)), dist.shape)
        clicks.append({"at_frame": 0, "keyframe_id": 0, "u": int(u), "v": int(v),
                       "name": names[c]})
    return clicks
