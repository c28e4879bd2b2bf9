"""Build Gaussian scenes from triangle meshes and point clouds, plus mesh I/O.

Both converters size an isotropic kernel from a local spacing ``d`` via

    variance = (d / 2) ** 2 / log(1 / zeta)

where ``zeta`` in (0, 1) is the coverage rate: larger values give larger,
more overlapping kernels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .scene import GaussianScene, ValidationError


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
            raise ValidationError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.float64)
            if c.ndim == 1:
                c = c[:, None]
            if c.shape[0] != v.shape[0]:
                raise ValidationError("per-vertex colors must match vertex count")
            object.__setattr__(self, "colors", c)

    def edges(self) -> np.ndarray:
        """Unique undirected edges (E, 2), smaller index first."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e = np.sort(e, axis=1)
        # zero-length (degenerate) edges are not neighbors
        e = e[e[:, 0] != e[:, 1]]
        return np.unique(e, axis=0)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals (unit length; zero for isolated vertices)."""
        v, f = self.vertices, self.faces
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])  # |fn| = 2 * area
        n = np.zeros_like(v)
        for c in range(3):
            np.add.at(n, f[:, c], fn)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return np.where(norm > 0, n / np.maximum(norm, 1e-300), 0.0)

    def scaled(self, s: float) -> TriangleMesh:
        return TriangleMesh(self.vertices * s, self.faces, self.colors)

    def translated(self, t) -> TriangleMesh:
        return TriangleMesh(self.vertices + np.asarray(t, float), self.faces, self.colors)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", p)
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.float64)
            if c.ndim == 1:
                c = c[:, None]
            if c.shape[0] != p.shape[0]:
                raise ValidationError("per-point colors must match point count")
            object.__setattr__(self, "colors", c)


@dataclass(frozen=True)
class ConvertConfig:
    zeta: float = 0.5
    flatten_rate: float = 1.0
    neighbors: int = 4
    tau: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.zeta < 1.0:
            raise ValidationError(f"zeta must satisfy 0 < zeta < 1, got {self.zeta}")
        if not 0.0 < self.flatten_rate <= 1.0:
            raise ValidationError(f"flatten_rate must lie in (0, 1], got {self.flatten_rate}")
        if int(self.neighbors) < 1:
            raise ValidationError("neighbors must be >= 1")


def spacing_to_variance(d, zeta: float):
    return (np.asarray(d, dtype=np.float64) / 2.0) ** 2 / np.log(1.0 / zeta)


def _default_attrs(n: int, colors) -> np.ndarray:
    return np.ones((n, 3)) if colors is None else np.asarray(colors, dtype=np.float64)


def _frame_from_normals(normals: np.ndarray) -> np.ndarray:
    """Rotations (N, 3, 3) whose third column is the given unit normal."""
    n = normals
    helper = np.where(np.abs(n[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=2)


def mesh_edge_lengths(mesh: TriangleMesh) -> np.ndarray:
    """Mean length of the edges touching each vertex; raises on isolated vertices."""
    v = mesh.vertices
    e = mesh.edges()
    length = np.linalg.norm(v[e[:, 0]] - v[e[:, 1]], axis=1)
    total = np.bincount(e.ravel(), weights=np.repeat(length, 2), minlength=v.shape[0])
    count = np.bincount(e.ravel(), minlength=v.shape[0])
    isolated = np.nonzero(count == 0)[0]
    if isolated.size:
        raise ValidationError(f"vertex {int(isolated[0])} has no edge neighbors "
                              f"({isolated.size} isolated vertices)")
    return total / count


def mesh_to_gaussians(mesh: TriangleMesh, cfg: ConvertConfig | None = None) -> GaussianScene:
    """One kernel per vertex, optionally flattened along the vertex normal."""
    cfg = cfg or ConvertConfig()
    var = spacing_to_variance(mesh_edge_lengths(mesh), cfg.zeta)
    N = var.shape[0]
    inv = np.zeros((N, 3, 3))
    if cfg.flatten_rate == 1.0:
        inv[:] = np.eye(3)
        inv *= (1.0 / var)[:, None, None]
    else:
        normals = mesh.vertex_normals()
        # no normal -> stays isotropic
        has_n = np.linalg.norm(normals, axis=1) > 0.5
        inv[:] = np.eye(3)
        inv *= (1.0 / var)[:, None, None]
        if has_n.any():
            Rn = _frame_from_normals(normals[has_n])
            diag = np.stack(
                [np.ones(has_n.sum()), np.ones(has_n.sum()), np.full(has_n.sum(), 1.0 / cfg.flatten_rate)],
                axis=1,
            ) / var[has_n, None]
            inv[has_n] = np.einsum("kij,kj,klj->kil", Rn, diag, Rn)
    return GaussianScene(mesh.vertices, inv, _default_attrs(N, mesh.colors), tau=cfg.tau)


def pointcloud_to_gaussians(cloud: PointCloud, cfg: ConvertConfig | None = None) -> GaussianScene:
    """Isotropic kernel per point, sized by mean distance to its ``neighbors`` nearest points."""
    cfg = cfg or ConvertConfig()
    m = int(cfg.neighbors)
    pts = cloud.points
    if pts.shape[0] <= m:
        raise ValidationError(f"need more than {m} points for {m} neighbors, got {pts.shape[0]}")
    dist, _ = cKDTree(pts).query(pts, k=m + 1)
    d = dist[:, 1:].mean(axis=1)
    bad = np.nonzero(d <= 0)[0]
    if bad.size:
        raise ValidationError(f"duplicate points give zero spacing at indices {bad[:20].tolist()}")
    var = spacing_to_variance(d, cfg.zeta)
    inv = np.eye(3)[None] / var[:, None, None]
    return GaussianScene(pts, inv, _default_attrs(pts.shape[0], cloud.colors), tau=cfg.tau)


def neighbor_graph(mesh: TriangleMesh) -> np.ndarray:
    return mesh.edges()


# --- primitive meshes ----------------------------------------------------------

def icosphere(level: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Subdivided icosahedron; level 3 has 642 vertices, level 4 has 2562."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = list(f)
    for _ in range(level):
        cache: dict = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nf
    return TriangleMesh(np.array(verts) * radius, np.array(faces))


def cuboid_mesh(size=(1.0, 1.0, 1.0), divisions: int = 4, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Closed box surface, each face split into ``divisions`` x ``divisions`` quads."""
    size = np.asarray(size, float)
    n = int(divisions)
    g = np.linspace(-0.5, 0.5, n + 1)
    verts: list = []
    index: dict = {}
    faces = []

    def vid(p):
        key = tuple(np.round(p, 9))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    for axis in range(3):
        u, w = [a for a in range(3) if a != axis]
        for side in (-0.5, 0.5):
            ids = np.empty((n + 1, n + 1), dtype=np.int64)
            for a in range(n + 1):
                for b in range(n + 1):
                    p = np.zeros(3)
                    p[axis], p[u], p[w] = side, g[a], g[b]
                    ids[a, b] = vid(p)
            for a in range(n):
                for b in range(n):
                    q00, q10, q01, q11 = ids[a, b], ids[a + 1, b], ids[a, b + 1], ids[a + 1, b + 1]
                    if (side > 0) == (axis == 1):
                        faces += [(q00, q11, q10), (q00, q01, q11)]
                    else:
                        faces += [(q00, q10, q11), (q00, q11, q01)]
    v = np.array(verts) * size + np.asarray(center, float)
    return TriangleMesh(v, np.array(faces))


def cuboid_points(n: int, size=(1.0, 1.0, 1.0), seed: int = 0) -> PointCloud:
    """Points spread uniformly over a box surface (area-proportional per face)."""
    rng = np.random.default_rng(seed)
    size = np.asarray(size, float)
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = rng.uniform(-0.5, 0.5, size=(n, 3))
    axis = face % 3
    pts[np.arange(n), axis] = np.where(face < 3, -0.5, 0.5)
    return PointCloud(pts * size)


# --- OBJ / PLY -------------------------------------------------------------------

def read_obj(path) -> TriangleMesh:
    """Vertices (``v x y z [r g b]``) and faces (``f a b c ...``, fan-triangulated)."""
    verts, colors, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            vals = [float(x) for x in parts[1:]]
            verts.append(vals[:3])
            colors.append(vals[3:6] if len(vals) >= 6 else None)
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                idx.append(i - 1 if i > 0 else len(verts) + i)
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    if not verts:
        raise ValidationError(f"{path}: no vertices found")
    col = None
    if all(c is not None for c in colors):
        col = np.array(colors)
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3), col)


def write_obj(mesh: TriangleMesh, path) -> None:
    lines = []
    for k, v in enumerate(mesh.vertices):
        s = f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}"
        if mesh.colors is not None and mesh.colors.shape[1] >= 3:
            c = mesh.colors[k]
            s += f" {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}"
        lines.append(s)
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B", "short": "h", "int16": "h",
    "ushort": "H", "uint16": "H", "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def read_ply(path):
    """ASCII or binary little-endian PLY.  Returns a TriangleMesh when faces exist."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ValidationError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    body_start = raw.index(b"\n", end) + 1
    fmt = None
    elements: list = []
    for line in header:
        p = line.split()
        if not p:
            continue
        if p[0] == "format":
            fmt = p[1]
        elif p[0] == "element":
            elements.append({"name": p[1], "count": int(p[2]), "props": []})
        elif p[0] == "property":
            if p[1] == "list":
                elements[-1]["props"].append((p[4], "list", p[2], p[3]))
            else:
                elements[-1]["props"].append((p[2], p[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValidationError(f"{path}: unsupported PLY format {fmt!r}")
    data: dict = {}
    if fmt == "ascii":
        tokens = raw[body_start:].decode("ascii").split()
        pos = 0
        for el in elements:
            rows = []
            for _ in range(el["count"]):
                row = {}
                for prop in el["props"]:
                    if prop[1] == "list":
                        n = int(tokens[pos])
                        row[prop[0]] = [float(t) for t in tokens[pos + 1:pos + 1 + n]]
                        pos += 1 + n
                    else:
                        row[prop[0]] = float(tokens[pos])
                        pos += 1
                rows.append(row)
            data[el["name"]] = rows
    else:
        buf = memoryview(raw)[body_start:]
        pos = 0
        for el in elements:
            rows = []
            scalar = all(p[1] != "list" for p in el["props"])
            if scalar:
                st = struct.Struct("<" + "".join(_PLY_TYPES[p[1]] for p in el["props"]))
                names = [p[0] for p in el["props"]]
                for vals in st.iter_unpack(buf[pos:pos + st.size * el["count"]]):
                    rows.append(dict(zip(names, vals)))
                pos += st.size * el["count"]
            else:
                for _ in range(el["count"]):
                    row = {}
                    for prop in el["props"]:
                        if prop[1] == "list":
                            cs = struct.Struct("<" + _PLY_TYPES[prop[2]])
                            (n,) = cs.unpack_from(buf, pos)
                            pos += cs.size
                            ist = struct.Struct("<" + _PLY_TYPES[prop[3]] * int(n))
                            row[prop[0]] = list(ist.unpack_from(buf, pos))
                            pos += ist.size
                        else:
                            st = struct.Struct("<" + _PLY_TYPES[prop[1]])
                            (row[prop[0]],) = st.unpack_from(buf, pos)
                            pos += st.size
                    rows.append(row)
            data[el["name"]] = rows
    verts = data.get("vertex", [])
    if not verts:
        raise ValidationError(f"{path}: no vertices")
    pts = np.array([[r["x"], r["y"], r["z"]] for r in verts], dtype=np.float64)
    colors = None
    if all(k in verts[0] for k in ("red", "green", "blue")):
        colors = np.array([[r["red"], r["green"], r["blue"]] for r in verts], dtype=np.float64)
        if colors.max() > 1.0:
            colors = colors / 255.0
    faces_rows = data.get("face", [])
    if faces_rows:
        key = "vertex_indices" if "vertex_indices" in faces_rows[0] else next(iter(faces_rows[0]))
        tris = []
        for r in faces_rows:
            idx = [int(i) for i in r[key]]
            for k in range(1, len(idx) - 1):
                tris.append((idx[0], idx[k], idx[k + 1]))
        return TriangleMesh(pts, np.array(tris, dtype=np.int64), colors)
    return PointCloud(pts, colors)


def write_ply(points, path, colors=None, faces=None, binary: bool = False) -> None:
    points = np.asarray(points, float)
    n = points.shape[0]
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
            f"element vertex {n}", "property float x", "property float y", "property float z"]
    if colors is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
        c8 = np.clip(np.round(np.asarray(colors, float) * 255.0), 0, 255).astype(np.uint8)
    if faces is not None:
        head += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    head.append("end_header")
    out = bytearray(("\n".join(head) + "\n").encode("ascii"))
    if binary:
        for k in range(n):
            out += struct.pack("<fff", *points[k])
            if colors is not None:
                out += struct.pack("<BBB", *c8[k])
        for f in faces if faces is not None else []:
            out += struct.pack("<Biii", 3, *map(int, f))
    else:
        rows = []
        for k in range(n):
            s = " ".join(f"{x:.9g}" for x in points[k])
            if colors is not None:
                s += " " + " ".join(str(int(x)) for x in c8[k])
            rows.append(s)
        rows += [f"3 {a} {b} {c}" for a, b, c in (faces if faces is not None else [])]
        out += ("\n".join(rows) + "\n").encode("ascii")
    Path(path).write_bytes(bytes(out))


def load_geometry(path, cfg: ConvertConfig | None = None) -> GaussianScene:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return mesh_to_gaussians(read_obj(path), cfg)
    if suffix == ".ply":
        geo = read_ply(path)
        if isinstance(geo, TriangleMesh):
            return mesh_to_gaussians(geo, cfg)
        return pointcloud_to_gaussians(geo, cfg)
    raise ValidationError(f"unsupported geometry format {suffix!r} (expected .obj or .ply)")
