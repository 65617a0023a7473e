"""Synthetic labeled rooms, binary PLY I/O and the feature-dump format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, SpecError

CLASS_NAMES = ("floor", "wall", "furniture", "column", "clutter", "table", "door")
NUM_CLASSES = len(CLASS_NAMES)
FLOOR, WALL, FURNITURE, COLUMN, CLUTTER, TABLE, DOOR = range(NUM_CLASSES)
THING_CLASSES = (FURNITURE, COLUMN, CLUTTER, TABLE, DOOR)

# Base colors overlap on purpose: several classes share hues, so color alone
# does not separate them and the geometry has to carry the semantics.
BASE_COLORS = np.array([
    [0.55, 0.50, 0.45],  # floor
    [0.70, 0.68, 0.62],  # wall
    [0.55, 0.40, 0.30],  # furniture
    [0.70, 0.68, 0.62],  # column
    [0.45, 0.45, 0.55],  # clutter
    [0.55, 0.40, 0.30],  # table
    [0.60, 0.48, 0.36],  # door
])


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    labels: np.ndarray
    instance_ids: np.ndarray
    scene_id: str = "scene"

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        if n < 1:
            raise SpecError("a point cloud needs at least one point")
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "PointCloud":
        return PointCloud(self.positions.copy(), self.colors.copy(), self.labels.copy(),
                          self.instance_ids.copy(), self.scene_id)

    def with_labels(self, labels) -> "PointCloud":
        return PointCloud(self.positions, self.colors, labels, self.instance_ids, self.scene_id)


@dataclass
class SceneSpec:
    seed: int = 0
    room_min: tuple[float, float] = (2.0, 2.0)
    room_max: tuple[float, float] = (2.6, 2.6)
    wall_height: float = 0.8
    counts: dict[str, tuple[int, int]] = field(default_factory=lambda: {
        "furniture": (1, 3), "column": (0, 2), "clutter": (1, 4), "table": (1, 2), "door": (1, 1),
    })
    density: float = 300.0
    noise: float = 0.004
    instance_color_sigma: float = 0.08
    point_color_sigma: float = 0.03
    scene_id: str | None = None

    def validate(self) -> None:
        if min(self.room_min) <= 0 or any(a > b for a, b in zip(self.room_min, self.room_max)):
            raise SpecError(f"degenerate room extents {self.room_min}..{self.room_max}")
        if self.wall_height <= 0:
            raise SpecError("wall height must be positive")
        if self.density <= 0:
            raise SpecError("point density must be positive")
        if self.noise < 0:
            raise SpecError("noise sigma must be non-negative")
        for name, (lo, hi) in self.counts.items():
            if name not in CLASS_NAMES or lo < 0 or hi < lo:
                raise SpecError(f"bad object-count range for {name!r}: {(lo, hi)}")


class _Builder:
    def __init__(self, spec: SceneSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.parts: list[tuple[np.ndarray, int, int, np.ndarray]] = []
        self.next_instance = 0

    def n_points(self, area: float) -> int:
        return max(1, int(round(area * self.spec.density)))

    def color(self, cls: int) -> np.ndarray:
        c = BASE_COLORS[cls] + self.rng.normal(0.0, self.spec.instance_color_sigma, 3)
        return np.clip(c, 0.0, 1.0)

    def emit(self, pts: np.ndarray, cls: int, instance: int, color: np.ndarray) -> None:
        if len(pts):
            self.parts.append((pts, cls, instance, color))

    def new_instance(self) -> int:
        self.next_instance += 1
        return self.next_instance - 1

    def rect(self, origin, u, v) -> np.ndarray:
        """Uniform samples on the parallelogram origin + s*u + t*v."""
        u, v = np.asarray(u, float), np.asarray(v, float)
        area = float(np.linalg.norm(np.cross(u, v)))
        st = self.rng.random((self.n_points(area), 2))
        return np.asarray(origin, float) + st[:, :1] * u + st[:, 1:] * v

    def box(self, lo, hi, bottom: bool = False) -> np.ndarray:
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        dx, dy, dz = hi - lo
        faces = [
            (lo + [0, 0, dz], [dx, 0, 0], [0, dy, 0]),
            (lo, [dx, 0, 0], [0, 0, dz]),
            (lo + [0, dy, 0], [dx, 0, 0], [0, 0, dz]),
            (lo, [0, dy, 0], [0, 0, dz]),
            (lo + [dx, 0, 0], [0, dy, 0], [0, 0, dz]),
        ]
        if bottom:
            faces.append((lo, [dx, 0, 0], [0, dy, 0]))
        return np.concatenate([self.rect(*f) for f in faces])

    def cylinder(self, cx, cy, r, h) -> np.ndarray:
        n = self.n_points(2 * np.pi * r * h)
        a = self.rng.random(n) * 2 * np.pi
        z = self.rng.random(n) * h
        side = np.stack([cx + r * np.cos(a), cy + r * np.sin(a), z], axis=1)
        m = self.n_points(np.pi * r * r)
        rr = r * np.sqrt(self.rng.random(m))
        aa = self.rng.random(m) * 2 * np.pi
        top = np.stack([cx + rr * np.cos(aa), cy + rr * np.sin(aa), np.full(m, h)], axis=1)
        return np.concatenate([side, top])

    def sphere(self, center, r) -> np.ndarray:
        d = self.rng.normal(size=(self.n_points(4 * np.pi * r * r), 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.asarray(center, float) + r * d


def _overlaps(fp, placed, margin=0.05) -> bool:
    x0, y0, x1, y1 = fp
    for a0, b0, a1, b1 in placed:
        if x0 < a1 + margin and a0 < x1 + margin and y0 < b1 + margin and b0 < y1 + margin:
            return True
    return False


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Room with floor, four walls and randomly placed primitive objects.

    Deterministic in ``spec.seed``.  Every object, the floor and each wall get
    their own instance id.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    b = _Builder(spec, rng)
    sx, sy = rng.uniform(spec.room_min, spec.room_max)
    h = spec.wall_height
    footprints: list[tuple[float, float, float, float]] = []
    surfaces_on: list[tuple[float, float, float, float, float]] = []
    counts = {name: int(rng.integers(lo, hi + 1)) for name, (lo, hi) in sorted(spec.counts.items())}

    def place(w, d, tries=30):
        for _ in range(tries):
            x = rng.uniform(0.1, sx - w - 0.1) if sx - w > 0.2 else None
            y = rng.uniform(0.1, sy - d - 0.1) if sy - d > 0.2 else None
            if x is None or y is None:
                return None
            fp = (x, y, x + w, y + d)
            if not _overlaps(fp, footprints):
                footprints.append(fp)
                return fp
        return None

    doors = []
    for _ in range(counts.get("door", 0)):
        w = rng.uniform(0.5, 0.8)
        side = int(rng.integers(4))
        length = sx if side < 2 else sy
        if length - w < 0.4:
            continue
        s = rng.uniform(0.2, length - w - 0.2)
        doors.append((side, s, w))

    for _ in range(counts.get("table", 0)):
        w, d = rng.uniform(0.6, 1.0), rng.uniform(0.5, 0.8)
        fp = place(w, d)
        if fp is None:
            continue
        x0, y0, x1, y1 = fp
        th = rng.uniform(0.55, 0.7)
        inst, col = b.new_instance(), b.color(TABLE)
        pts = [b.box([x0, y0, th - 0.04], [x1, y1, th], bottom=True)]
        for lx, ly in ((x0, y0), (x1 - 0.05, y0), (x0, y1 - 0.05), (x1 - 0.05, y1 - 0.05)):
            pts.append(b.box([lx, ly, 0.0], [lx + 0.05, ly + 0.05, th - 0.04]))
        b.emit(np.concatenate(pts), TABLE, inst, col)
        surfaces_on.append((x0, y0, x1, y1, th))

    for _ in range(counts.get("furniture", 0)):
        w, d = rng.uniform(0.4, 0.8), rng.uniform(0.4, 0.8)
        fp = place(w, d)
        if fp is None:
            continue
        x0, y0, x1, y1 = fp
        fh = rng.uniform(0.35, 0.9)
        b.emit(b.box([x0, y0, 0.0], [x1, y1, fh]), FURNITURE, b.new_instance(), b.color(FURNITURE))
        surfaces_on.append((x0, y0, x1, y1, fh))

    for _ in range(counts.get("column", 0)):
        r = rng.uniform(0.08, 0.16)
        fp = place(2 * r, 2 * r)
        if fp is None:
            continue
        cx, cy = fp[0] + r, fp[1] + r
        b.emit(b.cylinder(cx, cy, r, h), COLUMN, b.new_instance(), b.color(COLUMN))

    for _ in range(counts.get("clutter", 0)):
        r = rng.uniform(0.08, 0.15)
        if surfaces_on and rng.random() < 0.5:
            x0, y0, x1, y1, top = surfaces_on[int(rng.integers(len(surfaces_on)))]
            if x1 - x0 < 2 * r or y1 - y0 < 2 * r:
                continue
            cx, cy = rng.uniform(x0 + r, x1 - r), rng.uniform(y0 + r, y1 - r)
            center = (cx, cy, top + r)
        else:
            fp = place(2 * r, 2 * r)
            if fp is None:
                continue
            center = (fp[0] + r, fp[1] + r, r)
        b.emit(b.sphere(center, r), CLUTTER, b.new_instance(), b.color(CLUTTER))

    floor = b.rect([0, 0, 0], [sx, 0, 0], [0, sy, 0])
    hidden = np.zeros(len(floor), dtype=bool)
    for x0, y0, x1, y1 in footprints:
        hidden |= (floor[:, 0] > x0) & (floor[:, 0] < x1) & (floor[:, 1] > y0) & (floor[:, 1] < y1)
    b.emit(floor[~hidden], FLOOR, b.new_instance(), b.color(FLOOR))

    walls = [
        ([0, 0, 0], [sx, 0, 0]), ([0, sy, 0], [sx, 0, 0]),
        ([0, 0, 0], [0, sy, 0]), ([sx, 0, 0], [0, sy, 0]),
    ]
    for side, (origin, along) in enumerate(walls):
        pts = b.rect(origin, along, [0, 0, h])
        axis = 0 if side < 2 else 1
        keep = np.ones(len(pts), dtype=bool)
        for dside, s, w in doors:
            if dside == side:
                keep &= ~((pts[:, axis] > s) & (pts[:, axis] < s + w) & (pts[:, 2] < 0.9 * h))
        b.emit(pts[keep], WALL, b.new_instance(), b.color(WALL))
    for side, s, w in doors:
        origin, along = walls[side]
        axis = 0 if side < 2 else 1
        unit = np.zeros(3)
        unit[axis] = 1.0
        normal = np.zeros(3)
        normal[1 - axis] = 1.0 if side in (0, 2) else -1.0
        lo = np.asarray(origin, float) + s * unit
        corner_a = lo
        corner_b = lo + w * unit + 0.05 * normal
        dlo = np.minimum(corner_a, corner_b)
        dhi = np.maximum(corner_a, corner_b) + [0, 0, 0.9 * h]
        b.emit(b.box(dlo, dhi), DOOR, b.new_instance(), b.color(DOOR))

    pos = np.concatenate([p for p, _, _, _ in b.parts])
    pos = pos + rng.normal(0.0, spec.noise, pos.shape) if spec.noise > 0 else pos
    cols = np.concatenate([np.broadcast_to(c, p.shape) for p, _, _, c in b.parts])
    cols = np.clip(cols + rng.normal(0.0, spec.point_color_sigma, cols.shape), 0.0, 1.0)
    labels = np.concatenate([np.full(len(p), cls) for p, cls, _, _ in b.parts])
    inst = np.concatenate([np.full(len(p), i) for p, _, i, _ in b.parts])
    scene_id = spec.scene_id or f"scene_{spec.seed:06d}"
    return PointCloud(pos, cols, labels, inst, scene_id)


# ----------------------------------------------------------------------------
# PLY

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_REQUIRED = ("x", "y", "z", "red", "green", "blue", "label", "instance")


def write_ply(cloud: PointCloud, path) -> None:
    """Binary little-endian PLY: double x,y,z,red,green,blue; int label,instance."""
    n = len(cloud)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"comment scene_id {cloud.scene_id}\n"
        f"element vertex {n}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property double red\nproperty double green\nproperty double blue\n"
        "property int label\nproperty int instance\nend_header\n"
    )
    dtype = np.dtype([(k, "<f8") for k in _REQUIRED[:6]] + [("label", "<i4"), ("instance", "<i4")])
    rec = np.empty(n, dtype=dtype)
    for i, k in enumerate("xyz"):
        rec[k] = cloud.positions[:, i]
    for i, k in enumerate(("red", "green", "blue")):
        rec[k] = cloud.colors[:, i]
    rec["label"] = cloud.labels
    rec["instance"] = cloud.instance_ids
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path) -> PointCloud:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n"):]
    fmt, n, props, scene_id = None, None, [], Path(path).stem
    in_vertex = False
    for line in lines[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "comment" and len(tok) >= 3 and tok[1] == "scene_id":
            scene_id = tok[2]
        elif tok[0] == "element":
            in_vertex = len(tok) == 3 and tok[1] == "vertex"
            if in_vertex:
                try:
                    n = int(tok[2])
                except ValueError:
                    raise FormatError(f"{path}: bad vertex count {tok[2]!r}") from None
            elif n is not None:
                raise FormatError(f"{path}: elements after 'vertex' are not supported")
        elif tok[0] == "property" and in_vertex:
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise FormatError(f"{path}: unsupported property line {line!r}")
            props.append((tok[2], "<" + _PLY_TYPES[tok[1]]))
    if fmt != "binary_little_endian":
        raise FormatError(f"{path}: only binary_little_endian PLY is supported, got {fmt}")
    if n is None:
        raise FormatError(f"{path}: missing vertex element")
    names = [p for p, _ in props]
    for req in _REQUIRED:
        if req not in names:
            raise FormatError(f"{path}: missing required property {req!r}")
    dtype = np.dtype(props)
    if len(body) < n * dtype.itemsize:
        raise FormatError(f"{path}: truncated vertex data")
    rec = np.frombuffer(body, dtype=dtype, count=n)
    colors = np.stack([rec[k].astype(np.float64) for k in ("red", "green", "blue")], axis=1)
    if dtype["red"].kind == "u" and dtype["red"].itemsize == 1:
        colors = colors / 255.0
    return PointCloud(
        positions=np.stack([rec[k].astype(np.float64) for k in "xyz"], axis=1),
        colors=colors, labels=rec["label"].astype(np.int64),
        instance_ids=rec["instance"].astype(np.int64), scene_id=scene_id,
    )


# ----------------------------------------------------------------------------
# feature dumps

DUMP_MAGIC = b"MSMF"
DUMP_VERSION = 1


@dataclass
class FeatureDump:
    features: np.ndarray
    channels: list[int]
    labels: np.ndarray

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        self.features = np.asarray(self.features, dtype=np.float32).reshape(-1, sum(self.channels))
        self.labels = np.asarray(self.labels, dtype=np.int32).reshape(-1)
        if self.labels.shape[0] != self.features.shape[0]:
            raise FormatError("feature rows and labels disagree in length")

    @property
    def num_points(self) -> int:
        return self.features.shape[0]

    @property
    def num_levels(self) -> int:
        return len(self.channels)


def write_feature_dump(dump: FeatureDump, path) -> None:
    header = DUMP_MAGIC + struct.pack("<IQI", DUMP_VERSION, dump.num_points, dump.num_levels)
    header += struct.pack(f"<{dump.num_levels}I", *dump.channels)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(dump.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dump.labels, dtype="<i4").tobytes())


def read_feature_dump(path) -> FeatureDump:
    raw = Path(path).read_bytes()
    if raw[:4] != DUMP_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header")
    version, n, levels = struct.unpack_from("<IQI", raw, 4)
    if version != DUMP_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 20
    if len(raw) < off + 4 * levels:
        raise FormatError(f"{path}: truncated header")
    channels = list(struct.unpack_from(f"<{levels}I", raw, off))
    off += 4 * levels
    width = sum(channels)
    expected = off + 4 * n * width + 4 * n
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw) - off} bytes, expected {expected - off}")
    feats = np.frombuffer(raw, dtype="<f4", count=n * width, offset=off).reshape(n, width)
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=off + 4 * n * width)
    return FeatureDump(feats.copy(), channels, labels.copy())
