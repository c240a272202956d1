"""Synthetic multi-object scenes with exact rigid-motion ground truth."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import FramePair, PointCloud

SHAPES = ("sphere", "box", "plane")
NOISE_CLIP = 3.0  # per-component clip in units of sigma; keeps |noise| <= 3*sqrt(3)*sigma


@dataclass(frozen=True)
class SceneSpec:
    n_points: int = 512
    n_objects: int = 3
    shapes: tuple[str, ...] = SHAPES
    max_rotation: float = 0.3  # radians
    max_translation: float = 0.5  # metres, per axis
    noise_sigma: float = 0.005  # metres
    occlusion: float = 0.0
    feat_channels: int = 3
    extent: float = 1.5  # object centres lie in [-extent, extent]^3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        if self.n_points < 1 or self.n_objects < 1 or self.n_points < self.n_objects:
            raise ValueError(
                f"SceneSpec: need n_points >= n_objects >= 1, got {self.n_points}, {self.n_objects}"
            )
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ValueError(f"SceneSpec: shapes must be drawn from {SHAPES}, got {self.shapes}")
        for name in ("max_rotation", "max_translation", "noise_sigma", "extent"):
            if getattr(self, name) < 0:
                raise ValueError(f"SceneSpec: {name} must be non-negative")
        if not 0.0 <= self.occlusion < 1.0:
            raise ValueError(f"SceneSpec: occlusion fraction {self.occlusion} not in [0, 1)")
        if self.feat_channels < 1:
            raise ValueError("SceneSpec: feat_channels must be positive")


@dataclass(frozen=True)
class SceneObject:
    kind: str
    center: np.ndarray
    size: np.ndarray  # radius (sphere), half extents (box), half side (plane)
    orientation: np.ndarray  # body frame -> world
    rotation: np.ndarray  # applied about ``center``
    translation: np.ndarray

    def move(self, x: np.ndarray) -> np.ndarray:
        return (x - self.center) @ self.rotation.T + self.center + self.translation

    def unmove(self, x: np.ndarray) -> np.ndarray:
        return (x - self.center - self.translation) @ self.rotation + self.center

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "sphere":
            v = rng.normal(size=(n, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            local = v * self.size[0]
        elif self.kind == "box":
            h = self.size
            areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
            axis = rng.choice(3, size=n, p=areas / areas.sum())
            local = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
            sign = rng.choice([-1.0, 1.0], size=n)
            local[np.arange(n), axis] = sign * h[axis]
        else:
            local = np.zeros((n, 3))
            local[:, :2] = rng.uniform(-1.0, 1.0, size=(n, 2)) * self.size[0]
        return local @ self.orientation.T + self.center

    def surface_distance(self, x: np.ndarray) -> np.ndarray:
        """Distance from world points to this object's rest-pose surface."""
        local = (x - self.center) @ self.orientation
        if self.kind == "sphere":
            return np.abs(np.linalg.norm(local, axis=1) - self.size[0])
        if self.kind == "box":
            q = np.abs(local) - self.size
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            return np.abs(outside + inside)
        s = self.size[0]
        dx = np.maximum(np.abs(local[:, :2]) - s, 0.0)
        return np.sqrt(np.sum(dx * dx, axis=1) + local[:, 2] ** 2)


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    counts: tuple[int, ...]  # points per object


def rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def _random_rotation(rng: np.random.Generator, max_angle: float) -> np.ndarray:
    axis = rng.normal(size=3)
    angle = rng.uniform(-max_angle, max_angle) if max_angle > 0 else 0.0
    return rotation_matrix(axis, angle)


def sample_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng([spec.seed, 0])
    objects = []
    for i in range(spec.n_objects):
        kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
        center = rng.uniform(-spec.extent, spec.extent, size=3)
        if kind == "sphere":
            size = np.full(3, rng.uniform(0.2, 0.4))
        elif kind == "box":
            size = rng.uniform(0.12, 0.36, size=3)
        else:
            size = np.full(3, rng.uniform(0.25, 0.5))
        orientation = _random_rotation(rng, np.pi)
        rot = _random_rotation(rng, spec.max_rotation)
        trans = rng.uniform(-spec.max_translation, spec.max_translation, size=3)
        objects.append(SceneObject(kind, center, size, orientation, rot, trans))
    base, extra = divmod(spec.n_points, spec.n_objects)
    counts = tuple(base + (1 if i < extra else 0) for i in range(spec.n_objects))
    return Scene(tuple(objects), counts)


def _noise(rng: np.random.Generator, n: int, sigma: float) -> np.ndarray:
    if sigma == 0:
        return np.zeros((n, 3))
    return np.clip(rng.normal(scale=sigma, size=(n, 3)), -NOISE_CLIP * sigma, NOISE_CLIP * sigma)


def draw_frame(scene: Scene, spec: SceneSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Noisy surface samples in rest pose and the owning object index of each point."""
    rng = np.random.default_rng([seed, 1])
    pts, owner = [], []
    for i, (obj, n) in enumerate(zip(scene.objects, scene.counts)):
        pts.append(obj.sample_surface(n, rng))
        owner.append(np.full(n, i))
    x = np.concatenate(pts)
    return x + _noise(rng, len(x), spec.noise_sigma), np.concatenate(owner)


def move_points(scene: Scene, x: np.ndarray, owner: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    for i, obj in enumerate(scene.objects):
        sel = owner == i
        out[sel] = obj.move(x[sel])
    return out


def _cloud(coords: np.ndarray, spec: SceneSpec) -> PointCloud:
    return PointCloud(coords, np.ones((len(coords), spec.feat_channels)))


def generate_pair(spec: SceneSpec) -> tuple[FramePair, np.ndarray, np.ndarray]:
    """Index-corresponding pair: target = moved source + fresh noise.

    Returns (pair, ground-truth flow, non-occluded mask); occlusion is applied
    when ``spec.occlusion > 0``.
    """
    scene = sample_scene(spec)
    src, owner = draw_frame(scene, spec, spec.seed)
    moved = move_points(scene, src, owner)
    gt = moved - src
    tgt = moved + _noise(np.random.default_rng([spec.seed, 2]), len(moved), spec.noise_sigma)
    pair = FramePair(_cloud(src, spec), _cloud(tgt, spec))
    mask = np.ones(len(src), dtype=bool)
    if spec.occlusion > 0:
        return occlude(pair, gt, spec)
    return pair, gt, mask


def resample_noncorresponding(pair: FramePair, spec: SceneSpec, target_seed: int | None = None) -> FramePair:
    """Redraw the target from the moved surfaces with its own seed.

    With ``target_seed == spec.seed`` the target is exactly the moved source.
    """
    scene = sample_scene(spec)
    seed = spec.seed + 7919 if target_seed is None else target_seed
    x, owner = draw_frame(scene, spec, seed)
    return FramePair(pair.source, _cloud(move_points(scene, x, owner), spec))


def occlude(pair: FramePair, gt: np.ndarray, spec: SceneSpec, fraction: float | None = None):
    """Remove target points beyond a seeded plane; flag source points that move there.

    The plane is placed so that ``fraction`` of the moved source points lie
    beyond it.  Ground-truth rows are kept for every source point.
    """
    f = spec.occlusion if fraction is None else fraction
    if not 0.0 <= f < 1.0:
        raise ValueError(f"occlude: fraction {f} not in [0, 1)")
    src = np.asarray(pair.source.coords)
    tgt = np.asarray(pair.target.coords)
    if f == 0:
        return pair, gt, np.ones(len(src), dtype=bool)
    rng = np.random.default_rng([spec.seed, 3])
    u = rng.normal(size=3)
    u /= np.linalg.norm(u)
    proj = (src + gt) @ u
    thr = np.quantile(proj, 1.0 - f)
    mask = proj <= thr
    keep = tgt @ u <= thr
    if not keep.any():
        raise ValueError("occlude: every target point was removed")
    target = PointCloud(tgt[keep], np.asarray(pair.target.feats)[keep])
    return FramePair(pair.source, target), gt, mask


def make_dataset(spec: SceneSpec, count: int, noncorresponding: bool = True):
    """``count`` scenes with seeds spec.seed, spec.seed + 1, ...; items are (pair, gt, mask)."""
    out = []
    for i in range(count):
        s = replace(spec, seed=spec.seed + i, occlusion=0.0)
        pair, gt, mask = generate_pair(s)
        if noncorresponding:
            pair = resample_noncorresponding(pair, s)
        if spec.occlusion > 0:
            pair, gt, mask = occlude(pair, gt, replace(s, occlusion=spec.occlusion))
        out.append((pair, gt, mask))
    return out
