"""Synthetic scene generation, scene file I/O, and the checkpoint container.

Scenes realize the thing-vs-stuff scale disparity: ground and wall planes
stretch tens of meters while compact object shells stay under a few meters,
so every stuff instance's bounding-box diagonal is at least 10x the median
thing diagonal. Coordinates and colors are snapped to their file precision
(float32 / 8-bit) at generation time so scene files round-trip bitwise.
"""

import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import FormatError, InputError
from .geom import PointCloud

THING_SHAPES = ("box", "cylinder", "sphere")
STUFF_CATEGORIES = ("ground", "wall")


@dataclass
class Scene:
    cloud: PointCloud
    instance_ids: np.ndarray  # (N,) int
    categories: dict  # instance id -> category label
    kinds: dict  # category -> "thing" | "stuff"

    def __post_init__(self):
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64)
        if self.instance_ids.shape[0] != self.cloud.n_points:
            raise InputError("instance_ids length must match point count")
        present = set(np.unique(self.instance_ids).tolist())
        missing = present - set(self.categories)
        if missing:
            raise InputError(f"instances without category: {sorted(missing)}")


@dataclass
class SceneConfig:
    ground_extent: tuple = (10.0, 20.0)  # meters, per horizontal axis
    n_walls: tuple = (1, 2)
    wall_height: tuple = (2.5, 4.0)
    n_things: tuple = (3, 10)
    thing_extent: tuple = (0.3, 3.0)
    noise_sigma: float = 0.02
    n_points: tuple = (2000, 3500)
    thing_density_boost: float = 10.0
    thing_min_points: int = 40

    def __post_init__(self):
        if self.ground_extent[0] <= 0 or self.thing_extent[0] <= 0:
            raise InputError("extents must be positive")
        if self.n_points[0] < 1:
            raise InputError("n_points must be positive")


def _unit_sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _box_shell(rng, n, w, d, h):
    """Points on the 6 faces of a w*d*h box centered at origin (z in [0, h])."""
    areas = np.array([w * d, w * d, w * h, w * h, d * h, d * h], dtype=float)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    pts = np.zeros((n, 3))
    for f in range(6):
        m = face == f
        if f < 2:  # bottom/top
            pts[m] = np.c_[u[m] * w, v[m] * d, np.full(m.sum(), 0.0 if f == 0 else h)]
        elif f < 4:  # y = +-d/2
            pts[m] = np.c_[u[m] * w, np.full(m.sum(), -d / 2 if f == 2 else d / 2),
                           (v[m] + 0.5) * h]
        else:  # x = +-w/2
            pts[m] = np.c_[np.full(m.sum(), -w / 2 if f == 4 else w / 2), u[m] * d,
                           (v[m] + 0.5) * h]
    return pts


def _cylinder_shell(rng, n, radius, h):
    side_area = 2 * np.pi * radius * h
    cap_area = np.pi * radius**2
    n_cap = int(round(n * cap_area / (side_area + cap_area)))
    theta = rng.uniform(0, 2 * np.pi, size=n - n_cap)
    z = rng.uniform(0, h, size=n - n_cap)
    side = np.c_[radius * np.cos(theta), radius * np.sin(theta), z]
    r = radius * np.sqrt(rng.uniform(0, 1, size=n_cap))
    theta = rng.uniform(0, 2 * np.pi, size=n_cap)
    cap = np.c_[r * np.cos(theta), r * np.sin(theta), np.full(n_cap, h)]
    return np.vstack([side, cap])


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """Deterministic scale-disparate scene: stuff planes plus thing shells."""
    rng = np.random.default_rng(seed)
    width = rng.uniform(*config.ground_extent)
    length = rng.uniform(*config.ground_extent)
    n_walls = int(rng.integers(config.n_walls[0], config.n_walls[1] + 1))
    n_things = int(rng.integers(config.n_things[0], config.n_things[1] + 1))

    # every stuff diagonal is >= sqrt(width^2+length^2) or wall length; cap the
    # median thing so the 10x disparity ratio holds per scene
    min_stuff_diag = min(np.hypot(width, length),
                         np.hypot(min(width, length), config.wall_height[0]))
    median_cap = min_stuff_diag / 10.0 / np.sqrt(3.0)
    small_hi = max(config.thing_extent[0] * 1.05, min(median_cap, config.thing_extent[1]))
    extents = np.empty(n_things)
    if n_things:
        n_small = n_things // 2 + 1
        extents[:n_small] = rng.uniform(config.thing_extent[0], small_hi, size=n_small)
        extents[n_small:] = rng.uniform(config.thing_extent[0], config.thing_extent[1],
                                        size=n_things - n_small)

    # surfaces: (category, kind, sampler, area, base position)
    instances = []
    instances.append(("ground", width * length,
                      lambda n, r: np.c_[r.uniform(0, width, n), r.uniform(0, length, n),
                                         np.zeros(n)]))
    wall_h = rng.uniform(*config.wall_height)
    if n_walls >= 1:
        instances.append(("wall", length * wall_h,
                          lambda n, r: np.c_[np.zeros(n), r.uniform(0, length, n),
                                             r.uniform(0, wall_h, n)]))
    if n_walls >= 2:
        instances.append(("wall", width * wall_h,
                          lambda n, r: np.c_[r.uniform(0, width, n), np.zeros(n),
                                             r.uniform(0, wall_h, n)]))

    placed = []
    for t in range(n_things):
        e = extents[t]
        shape = THING_SHAPES[int(rng.integers(0, len(THING_SHAPES)))]
        for _ in range(40):  # rejection-sample a clear spot
            cx = rng.uniform(1.0 + e, width - 1.0 - e) if width > 2 * (1 + e) else width / 2
            cy = rng.uniform(1.0 + e, length - 1.0 - e) if length > 2 * (1 + e) else length / 2
            if all(np.hypot(cx - px, cy - py) > (e + pe) / 2 + 0.4
                   for px, py, pe in placed):
                break
        placed.append((cx, cy, e))

        def sampler(n, r, shape=shape, e=e, cx=cx, cy=cy):
            if shape == "box":
                pts = _box_shell(r, n, e, e * r.uniform(0.6, 1.0), e * r.uniform(0.5, 1.0))
            elif shape == "cylinder":
                pts = _cylinder_shell(r, n, e / 2, e * r.uniform(0.8, 1.4))
            else:
                pts = _unit_sphere(r, n) * (e / 2) + np.array([0, 0, e / 2])
            return pts + np.array([cx, cy, 0.0])

        area = 4 * e * e  # rough shell area; only drives point allocation
        instances.append((shape, area * config.thing_density_boost, sampler))

    total_points = int(rng.integers(config.n_points[0], config.n_points[1] + 1))
    weights = np.array([inst[1] for inst in instances])
    counts = np.maximum(np.round(total_points * weights / weights.sum()).astype(int), 8)
    for i, inst in enumerate(instances):
        if inst[0] in THING_SHAPES:
            counts[i] = max(counts[i], config.thing_min_points)

    all_pts, all_rgb, all_ids = [], [], []
    categories, kinds = {}, {}
    for i, (cat, _, sampler) in enumerate(instances):
        n = int(counts[i])
        pts = sampler(n, rng) + rng.normal(0, config.noise_sigma, size=(n, 3))
        if cat == "ground":
            base = rng.uniform(0.35, 0.55)
            gx, gy = rng.uniform(-0.15, 0.15, size=2)
            lum = base + gx * (pts[:, 0] / max(width, 1)) + gy * (pts[:, 1] / max(length, 1))
            rgb = np.repeat(lum[:, None], 3, axis=1)
        elif cat == "wall":
            base = rng.uniform(0.55, 0.75)
            lum = base + rng.uniform(-0.1, 0.1) * (pts[:, 2] / max(wall_h, 1))
            rgb = np.repeat(lum[:, None], 3, axis=1)
        else:
            rgb = np.tile(rng.uniform(0.1, 0.9, size=3), (n, 1))
        rgb = rgb + rng.normal(0, 0.02, size=rgb.shape)
        all_pts.append(pts)
        all_rgb.append(rgb)
        all_ids.append(np.full(n, i, dtype=np.int64))
        categories[i] = cat
        kinds[cat] = "thing" if cat in THING_SHAPES else "stuff"

    pts = np.vstack(all_pts).astype(np.float32).astype(np.float64)  # file precision
    rgb = np.clip(np.vstack(all_rgb), 0, 1)
    rgb = np.round(rgb * 255.0) / 255.0  # 8-bit color grid
    cloud = PointCloud(pts, rgb)
    return Scene(cloud=cloud, instance_ids=np.concatenate(all_ids),
                 categories=categories, kinds=kinds)


def scale_disparity_ratio(scene: Scene) -> float:
    """min stuff bbox diagonal / median thing bbox diagonal (inf if no things)."""
    diags = {"thing": [], "stuff": []}
    for inst, cat in scene.categories.items():
        pts = scene.cloud.positions[scene.instance_ids == inst]
        if len(pts) == 0:
            continue
        diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
        diags[scene.kinds[cat]].append(diag)
    if not diags["thing"]:
        return float("inf")
    if not diags["stuff"]:
        return 0.0
    return min(diags["stuff"]) / float(np.median(diags["thing"]))


# ---------------------------------------------------------------------------
# scene files: binary little-endian PLY + JSON manifest
# ---------------------------------------------------------------------------

_PLY_PROPS_RGB = ["x", "y", "z", "red", "green", "blue", "instance_id"]
_PLY_PROPS_BARE = ["x", "y", "z", "instance_id"]


def manifest_path(ply_path: str) -> str:
    return os.path.splitext(ply_path)[0] + ".json"


def save_scene(path: str, scene: Scene):
    """Write <path>.ply (points) and sibling .json manifest."""
    n = scene.cloud.n_points
    has_rgb = scene.cloud.channels.shape[1] == 3
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in ("x", "y", "z")]
    if has_rgb:
        header += [f"property uchar {p}" for p in ("red", "green", "blue")]
    header += ["property int instance_id", "end_header", ""]
    with open(path, "wb") as fh:
        fh.write("\n".join(header).encode("ascii"))
        xyz = scene.cloud.positions.astype("<f4")
        ids = scene.instance_ids.astype("<i4")
        if has_rgb:
            rgb = np.round(scene.cloud.channels * 255.0).astype(np.uint8)
            rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3), ("id", "<i4")])
            rec["rgb"] = rgb
        else:
            rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("id", "<i4")])
        rec["xyz"] = xyz
        rec["id"] = ids
        fh.write(rec.tobytes())
    manifest = {
        "version": 1,
        "instances": {str(i): {"category": c, "kind": scene.kinds[c]}
                      for i, c in scene.categories.items()},
    }
    with open(manifest_path(path), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_scene(path: str) -> Scene:
    """Parse the PLY + manifest pair back into a Scene; strict validation."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply\n"):
        raise FormatError("not a PLY file: bad magic at byte 0")
    if end < 0:
        raise FormatError("missing end_header")
    header_lines = blob[:end].decode("ascii", errors="replace").split("\n")
    if header_lines[1] != "format binary_little_endian 1.0":
        raise FormatError(f"unsupported format line {header_lines[1]!r} at byte 4")
    n = None
    props = []
    for line in header_lines[2:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            if parts[1] != "vertex":
                raise FormatError(f"unsupported element {parts[1]!r}")
            n = int(parts[2])
        elif parts[0] == "property":
            props.append((parts[1], parts[2]))
    if n is None:
        raise FormatError("missing vertex element declaration")
    names = [p[1] for p in props]
    if names not in (_PLY_PROPS_RGB, _PLY_PROPS_BARE):
        raise FormatError(f"unexpected property layout {names}")
    for typ, name in props:
        expected = "float" if name in ("x", "y", "z") else (
            "uchar" if name in ("red", "green", "blue") else "int")
        if typ != expected:
            raise FormatError(f"property {name} has type {typ}, expected {expected}")
    has_rgb = len(names) == 7
    body = blob[end + len(b"end_header\n"):]
    stride = 12 + (3 if has_rgb else 0) + 4
    if len(body) != n * stride:
        raise FormatError(
            f"payload length {len(body)} != {n} vertices * {stride} bytes "
            f"(body starts at byte {end + 11})"
        )
    if has_rgb:
        rec = np.frombuffer(body, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3), ("id", "<i4")])
        channels = rec["rgb"].astype(np.float64) / 255.0
    else:
        rec = np.frombuffer(body, dtype=[("xyz", "<f4", 3), ("id", "<i4")])
        channels = None
    cloud = PointCloud(rec["xyz"].astype(np.float64), channels)
    ids = rec["id"].astype(np.int64)

    mpath = manifest_path(path)
    if not os.path.exists(mpath):
        raise FormatError(f"missing manifest {mpath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != 1:
        raise FormatError(f"unsupported manifest version {manifest.get('version')}")
    categories, kinds = {}, {}
    for key, val in manifest["instances"].items():
        categories[int(key)] = val["category"]
        kinds[val["category"]] = val["kind"]
    present = set(np.unique(ids).tolist())
    declared = set(categories)
    if present - declared:
        raise FormatError(f"point file references undeclared instances {sorted(present - declared)}")
    if declared - present:
        raise FormatError(f"manifest declares absent instances {sorted(declared - present)}")
    return Scene(cloud=cloud, instance_ids=ids, categories=categories, kinds=kinds)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"CKFM"
CKPT_VERSION = 1


def save_checkpoint(path: str, arrays: dict, config_json: str = "{}"):
    """Binary container: magic, version, entry count, config blob, entries.

    Tensors are stored as row-major float32.
    """
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(arrays)))
    cfg = config_json.encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        nm = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nm)))
        buf.write(nm)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str):
    """Returns (arrays: dict[str, float32 ndarray], config_json: str)."""
    with open(path, "rb") as fh:
        blob = fh.read()

    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated checkpoint: {what} at byte {pos}")
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad magic: not a checkpoint container (byte 0)")
    version, count = struct.unpack("<II", take(8, "version/count"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    config_json = take(cfg_len, "config blob").decode("utf-8")
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        if name in arrays:
            raise FormatError(f"duplicate tensor name {name!r} at byte {pos}")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        size = int(np.prod(shape)) if ndim else 1
        payload = take(4 * size, f"payload of {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if pos != len(blob):
        raise FormatError(f"trailing bytes after last entry at byte {pos}")
    return arrays, config_json
