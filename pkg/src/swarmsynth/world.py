"""Synthetic voxel scenes, zone partitions and an oracle object detector.

Scenes hold axis-aligned boxes and spheres rasterized onto a dense voxel
grid (one world unit per voxel edge). Each object carries a small-integer
class id; class colors come from a fixed palette so appearance is a pure
function of semantics. The oracle detector stands in for a learned model:
it reports every object whose centroid is inside the camera frustum and not
occluded past a transmittance threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import radiance
from .geometry import CameraIntrinsics, Pose
from .seeds import rng_for

EMPTY_DENSITY_THRESHOLD = 1e-6
OBJECT_DENSITY = 12.0
OCCLUSION_THRESHOLD = 0.5
_PLACEMENT_ATTEMPTS = 200


@dataclass(frozen=True)
class SceneSpec:
    """Generator parameters for a synthetic scene.

    placement "stratified" constrains object k's centre to stripe
    (k mod stripes) along the longest axis, which matches the slab zone
    partition and guarantees spread-out content; "uniform" places centres
    anywhere the object fits.
    """

    dims: tuple[int, int, int] = (32, 32, 32)
    n_objects: int = 4
    min_extent: float = 3.0
    max_extent: float = 8.0
    placement: str = "stratified"
    stripes: int = 4

    def __post_init__(self) -> None:
        if len(self.dims) != 3 or any(d < 4 for d in self.dims):
            raise ValueError("scene dims must be at least 4 per axis")
        if self.n_objects < 0:
            raise ValueError("object count must be >= 0")
        if not (0 < self.min_extent <= self.max_extent):
            raise ValueError("need 0 < min_extent <= max_extent")
        if self.max_extent >= min(self.dims):
            raise ValueError("objects this large cannot fit in the grid")
        if self.placement not in ("stratified", "uniform"):
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.stripes < 1:
            raise ValueError("stripes must be >= 1")


@dataclass
class Scene:
    dims: tuple[int, int, int]
    density: np.ndarray  # (X, Y, Z) sigma >= 0
    color: np.ndarray  # (X, Y, Z, 3) in [0, 1]
    class_id: np.ndarray  # (X, Y, Z) int, 0 = empty
    seed: int


@dataclass(frozen=True)
class Zone:
    id: int
    bounds: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]  # half-open
    owner: int

    def contains(self, voxel: tuple[int, int, int]) -> bool:
        return all(lo <= v < hi for (lo, hi), v in zip(self.bounds, voxel))

    def center(self) -> np.ndarray:
        return np.array([(lo + hi) / 2.0 for lo, hi in self.bounds])

    def voxel_count(self) -> int:
        return int(np.prod([hi - lo for lo, hi in self.bounds]))


@dataclass(frozen=True)
class Detection:
    class_id: int
    centroid: tuple[float, float, float]
    extent: tuple[float, float, float]
    confidence: float

    def __post_init__(self) -> None:
        if any(e <= 0 for e in self.extent):
            raise ValueError("detection extent components must be positive")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError("confidence must lie in [0, 1]")


def class_color(class_id: int) -> tuple[float, float, float]:
    """Fixed palette: evenly spread hues, full value. class 0 is black."""
    if class_id == 0:
        return (0.0, 0.0, 0.0)
    hue = (class_id * 0.6180339887498949) % 1.0
    return _hsv_to_rgb(hue, 0.75, 0.9)


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return rgb


def _voxel_centers(dims: tuple[int, int, int]) -> tuple[np.ndarray, ...]:
    axes = [np.arange(d) + 0.5 for d in dims]
    return tuple(np.meshgrid(*axes, indexing="ij"))


def build_scene(spec: SceneSpec, seed: int) -> Scene:
    """Deterministic scene with spec.n_objects non-overlapping primitives."""
    rng = rng_for(seed, "scene")
    dims = spec.dims
    density = np.zeros(dims, dtype=np.float64)
    color = np.zeros(dims + (3,), dtype=np.float64)
    class_grid = np.zeros(dims, dtype=np.int16)
    cx, cy, cz = _voxel_centers(dims)

    long_axis = int(np.argmax(dims))
    stripe_edges = np.linspace(0, dims[long_axis], spec.stripes + 1)

    placed: list[tuple[np.ndarray, np.ndarray]] = []  # (center, half extent)
    for k in range(spec.n_objects):
        class_id = k + 1
        shape = "box" if rng.random() < 0.5 else "sphere"
        for attempt in range(_PLACEMENT_ATTEMPTS):
            if shape == "box":
                half = rng.uniform(spec.min_extent, spec.max_extent, size=3) / 2.0
            else:
                r = rng.uniform(spec.min_extent, spec.max_extent) / 2.0
                half = np.full(3, r)
            lo = half.copy()
            hi = np.asarray(dims, dtype=np.float64) - half
            if spec.placement == "stratified":
                s = k % spec.stripes
                lo[long_axis] = max(lo[long_axis], stripe_edges[s])
                hi[long_axis] = min(hi[long_axis], stripe_edges[s + 1])
            if np.any(lo >= hi):
                continue
            center = rng.uniform(lo, hi)
            gap = 0.5
            if any(
                np.all(np.abs(center - c2) < half + h2 + gap)
                for c2, h2 in placed
            ):
                continue
            placed.append((center, half))
            if shape == "box":
                mask = (
                    (np.abs(cx - center[0]) <= half[0])
                    & (np.abs(cy - center[1]) <= half[1])
                    & (np.abs(cz - center[2]) <= half[2])
                )
            else:
                mask = (
                    (cx - center[0]) ** 2
                    + (cy - center[1]) ** 2
                    + (cz - center[2]) ** 2
                ) <= half[0] ** 2
            density[mask] = OBJECT_DENSITY
            color[mask] = class_color(class_id)
            class_grid[mask] = class_id
            break
        else:
            raise ValueError(
                f"could not place object {class_id} after "
                f"{_PLACEMENT_ATTEMPTS} attempts"
            )
    return Scene(dims, density, color, class_grid, seed)


def _apportion(total: int, weights: list[int]) -> list[int]:
    """Integer split of `total` proportional to weights, every part >= 1.

    Requires len(weights) <= total; uses largest-remainder rounding.
    """
    k = len(weights)
    n = sum(weights)
    parts = [max(1, int(total * w / n)) for w in weights]
    rem = [(total * w / n) - p for w, p in zip(weights, parts)]
    order = sorted(range(k), key=lambda i: (-rem[i], i))
    s = sum(parts)
    i = 0
    while s < total:
        parts[order[i % k]] += 1
        s += 1
        i += 1
    i = 0
    while s > total:  # terminates: k <= total so some part exceeds 1
        j = order[-(i % k) - 1]
        if parts[j] > 1:
            parts[j] -= 1
            s -= 1
        i += 1
    return parts


def _split_box(
    bounds: tuple[tuple[int, int], ...], n: int
) -> list[tuple[tuple[int, int], ...]]:
    """Recursively split an integer box into n boxes of near-equal volume,
    slicing along the box's longest axis first."""
    if n == 1:
        return [bounds]
    lengths = [hi - lo for lo, hi in bounds]
    axis = int(np.argmax(lengths))
    k = min(n, lengths[axis])
    counts = [n // k + (1 if i < n % k else 0) for i in range(k)]
    thick = _apportion(lengths[axis], counts)
    out: list[tuple[tuple[int, int], ...]] = []
    pos = bounds[axis][0]
    for c, t in zip(counts, thick):
        child = list(bounds)
        child[axis] = (pos, pos + t)
        out.extend(_split_box(tuple(child), c))
        pos += t
    return out


def zone_partition(scene: Scene, n_drones: int) -> list[Zone]:
    """Disjoint cover of the grid by axis-aligned boxes, one owner each.

    Slabs along the longest axis for the usual case; when n_drones exceeds
    that axis length the split recurses into the slabs.
    """
    total = int(np.prod(scene.dims))
    if not (1 <= n_drones <= total):
        raise ValueError(f"n_drones must be in [1, {total}]")
    bounds = tuple((0, d) for d in scene.dims)
    boxes = _split_box(bounds, n_drones)
    return [Zone(id=i, bounds=b, owner=i) for i, b in enumerate(boxes)]


def ground_truth_render(
    scene: Scene, pose: Pose, cam: CameraIntrinsics, samples_per_ray: int = 64
) -> np.ndarray:
    """Render the ground-truth grids with the shared volume renderer."""
    field = radiance.GridField(scene.density, scene.color)
    cfg = radiance.RenderConfig(samples_per_ray=samples_per_ray)
    return radiance.render_image(field, pose, cam, cfg)


def scene_objects(scene: Scene) -> list[Detection]:
    """Ground-truth object list recovered from the class grid."""
    out = []
    for cid in np.unique(scene.class_id):
        if cid == 0:
            continue
        vox = np.argwhere(scene.class_id == cid)
        centers = vox + 0.5
        centroid = centers.mean(axis=0)
        extent = vox.max(axis=0) - vox.min(axis=0) + 1.0
        out.append(
            Detection(
                class_id=int(cid),
                centroid=tuple(centroid.tolist()),
                extent=tuple(extent.tolist()),
                confidence=1.0,
            )
        )
    return out


def _transmittance_to(
    scene: Scene, origin: np.ndarray, target: np.ndarray, skip_class: int,
    step: float = 0.25,
) -> float:
    """Transmittance along origin->target, ignoring the object's own voxels."""
    seg = target - origin
    dist = float(np.linalg.norm(seg))
    if dist < 1e-9:
        return 1.0
    n = max(int(math.ceil(dist / step)), 1)
    ts = (np.arange(n) + 0.5) / n * dist
    pts = origin[None, :] + ts[:, None] * (seg / dist)[None, :]
    ij = np.floor(pts).astype(np.int64)
    inside = np.all((ij >= 0) & (ij < np.asarray(scene.dims)), axis=1)
    ij = ij[inside]
    if ij.size == 0:
        return 1.0
    cls = scene.class_id[ij[:, 0], ij[:, 1], ij[:, 2]]
    dens = scene.density[ij[:, 0], ij[:, 1], ij[:, 2]]
    dens = np.where(cls == skip_class, 0.0, dens)
    return float(np.exp(-np.sum(dens) * dist / n))


def oracle_detect(
    scene: Scene, pose: Pose, cam: CameraIntrinsics
) -> list[Detection]:
    """Objects whose centroid is in the frustum and visible past occluders.

    Confidence is the transmittance from the camera to the centroid through
    everything except the object itself; objects with transmittance at or
    below the occlusion threshold are dropped.
    """
    rot = pose.rotation_matrix()
    origin = np.asarray(pose.position, dtype=np.float64)
    tan_half = math.tan(cam.fov / 2.0)
    tan_v = tan_half * (cam.height / cam.width)
    out = []
    for obj in scene_objects(scene):
        p = np.asarray(obj.centroid) - origin
        p_cam = rot.T @ p
        z = p_cam[2]
        if not (cam.near <= z <= cam.far):
            continue
        if abs(p_cam[0] / z) > tan_half or abs(p_cam[1] / z) > tan_v:
            continue
        trans = _transmittance_to(
            scene, origin, np.asarray(obj.centroid), obj.class_id
        )
        if trans <= OCCLUSION_THRESHOLD:
            continue
        out.append(
            Detection(
                class_id=obj.class_id,
                centroid=obj.centroid,
                extent=obj.extent,
                confidence=min(trans, 1.0),
            )
        )
    out.sort(key=lambda d: d.class_id)
    return out
