"""Marching-cubes extraction of the SDF zero level set and mesh utilities.

Vertices are welded on shared grid edges (one vertex per crossed edge), so the
extracted surface of a closed level set is a closed 2-manifold and Euler
characteristics are meaningful. Vertex normals come from the field gradient,
oriented outward (+grad f); face winding is fixed against the same gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ParseError, UsageError
from .mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE

EVAL_CHUNK = 262144


@dataclass
class TriangleMesh:
    vertices: np.ndarray       # (V,3) float
    faces: np.ndarray          # (F,3) int, CCW outward
    vertex_normals: np.ndarray | None = None  # (V,3) unit

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise UsageError("face indices out of range")
        if len(self.vertices) and not np.isfinite(self.vertices).all():
            raise UsageError("mesh has non-finite vertices")
        if self.vertex_normals is not None:
            self.vertex_normals = np.asarray(self.vertex_normals,
                                             dtype=np.float64).reshape(-1, 3)
            if len(self.vertex_normals) != len(self.vertices):
                raise UsageError("normal count does not match vertex count")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def edge_count(self) -> int:
        if self.is_empty:
            return 0
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                            self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return len(np.unique(e, axis=0))

    def euler_characteristic(self) -> int:
        return len(self.vertices) - self.edge_count() + len(self.faces)

    def face_areas(self) -> np.ndarray:
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


# edge -> (origin corner offset, axis) in grid coordinates
_EDGE_ORIGIN = np.minimum(CORNER_OFFSETS[EDGE_CORNERS[:, 0]],
                          CORNER_OFFSETS[EDGE_CORNERS[:, 1]])
_EDGE_AXIS = np.argmax(CORNER_OFFSETS[EDGE_CORNERS[:, 0]]
                       != CORNER_OFFSETS[EDGE_CORNERS[:, 1]], axis=1)


def _eval_grid(field, resolution, lo, hi):
    axes = [np.linspace(lo[k], hi[k], resolution) for k in range(3)]
    vals = np.empty((resolution,) * 3)
    pts_yz = np.stack(np.meshgrid(axes[1], axes[2], indexing="ij"), axis=-1).reshape(-1, 2)
    for i, x in enumerate(axes[0]):
        sheet = np.concatenate([np.full((len(pts_yz), 1), x), pts_yz], axis=1)
        out = []
        for c in range(0, len(sheet), EVAL_CHUNK):
            out.append(np.asarray(field.eval(sheet[c:c + EVAL_CHUNK]), dtype=np.float64))
        vals[i] = np.concatenate(out).reshape(resolution, resolution)
    return vals, axes


def marching_cubes(field, resolution: int, bounds=None, iso: float = 0.0) -> TriangleMesh:
    """Extract the iso level set on a resolution^3 grid over bounds.

    `field` needs eval(points); grad(points) is used for vertex normals when
    present (central differences otherwise). Returns an empty mesh when the
    field has no sign change inside the bounds.
    """
    if resolution < 8:
        raise UsageError("marching_cubes needs resolution >= 8")
    if bounds is None:
        bounds = field.bounds
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    vals, axes = _eval_grid(field, resolution, lo, hi)
    step = (hi - lo) / (resolution - 1)

    inside = vals < iso
    n = resolution - 1
    cube_idx = np.zeros((n, n, n), dtype=np.uint8)
    for c, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        cube_idx |= (inside[ox:ox + n, oy:oy + n, oz:oz + n] << c).astype(np.uint8)
    active = np.nonzero((cube_idx != 0) & (cube_idx != 255))
    if len(active[0]) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                            np.zeros((0, 3)))
    ci, cj, ck = (a.astype(np.int64) for a in active)
    tri = TRI_TABLE[cube_idx[active]]          # (A,16)
    valid = tri >= 0
    counts = valid.sum(axis=1)
    cell_of = np.repeat(np.arange(len(ci)), counts)
    local_edge = tri[valid]                    # flat, per-cell triangle order kept

    origin = _EDGE_ORIGIN[local_edge]
    axis = _EDGE_AXIS[local_edge]
    gi = ci[cell_of] + origin[:, 0]
    gj = cj[cell_of] + origin[:, 1]
    gk = ck[cell_of] + origin[:, 2]
    gid = ((gi * resolution + gj) * resolution + gk) * 3 + axis
    uniq, inverse = np.unique(gid, return_inverse=True)
    faces = inverse.reshape(-1, 3)

    # interpolate vertex positions on their grid edges
    ug = uniq // 3
    ua = uniq % 3
    uk = ug % resolution
    uj = (ug // resolution) % resolution
    ui = ug // (resolution * resolution)
    p0 = np.stack([axes[0][ui], axes[1][uj], axes[2][uk]], axis=1)
    off = np.zeros((len(uniq), 3))
    off[np.arange(len(uniq)), ua] = step[ua]
    f0 = vals[ui, uj, uk]
    n1 = np.stack([ui, uj, uk], axis=1)
    n1[np.arange(len(uniq)), ua] += 1
    f1 = vals[n1[:, 0], n1[:, 1], n1[:, 2]]
    t = (iso - f0) / np.where(np.abs(f1 - f0) > 1e-300, f1 - f0, 1.0)
    verts = p0 + np.clip(t, 0.0, 1.0)[:, None] * off

    normals = _vertex_normals(field, verts, step)
    # fix winding so faces are CCW seen from outside (+grad f side)
    a = verts[faces[:, 0]]
    fn = np.cross(verts[faces[:, 1]] - a, verts[faces[:, 2]] - a)
    gmean = (normals[faces[:, 0]] + normals[faces[:, 1]] + normals[faces[:, 2]])
    flip = np.sum(fn * gmean, axis=1) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return TriangleMesh(verts, faces, normals)


def _vertex_normals(field, verts, step):
    if hasattr(field, "grad"):
        g = []
        for c in range(0, len(verts), EVAL_CHUNK):
            g.append(np.asarray(field.grad(verts[c:c + EVAL_CHUNK]), dtype=np.float64))
        g = np.concatenate(g) if g else np.zeros((0, 3))
    else:
        g = np.empty((len(verts), 3))
        h = 0.25 * float(step.min())
        for k in range(3):
            dp = verts.copy()
            dm = verts.copy()
            dp[:, k] += h
            dm[:, k] -= h
            g[:, k] = (np.asarray(field.eval(dp)) - np.asarray(field.eval(dm))) / (2 * h)
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    out = np.divide(g, norm, out=np.tile(np.array([[0.0, 0.0, 1.0]]), (len(verts), 1)),
                    where=norm > 1e-12)
    return out


def sample_surface(mesh: TriangleMesh, n: int, rng) -> np.ndarray:
    """n points drawn uniformly by area over the mesh surface."""
    if mesh.is_empty:
        raise UsageError("cannot sample an empty mesh")
    if isinstance(rng, (int, np.integer)) or rng is None:
        rng = np.random.default_rng(rng)
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise UsageError("mesh has zero surface area")
    pick = rng.choice(len(areas), size=n, p=areas / total)
    a = mesh.vertices[mesh.faces[pick, 0]]
    b = mesh.vertices[mesh.faces[pick, 1]]
    c = mesh.vertices[mesh.faces[pick, 2]]
    u = rng.uniform(size=(n, 1))
    v = rng.uniform(size=(n, 1))
    over = (u + v) > 1.0
    u = np.where(over, 1.0 - u, u)
    v = np.where(over, 1.0 - v, v)
    return a + u * (b - a) + v * (c - a)


# ---------------------------------------------------------------------------
# OBJ / PLY round trip
# ---------------------------------------------------------------------------

def write_mesh(mesh: TriangleMesh, path, fmt: str | None = None) -> None:
    """Write OBJ (ascii) or binary little-endian PLY; chosen by extension."""
    fmt = _mesh_format(path, fmt)
    if fmt == "obj":
        _write_obj(mesh, path)
    else:
        _write_ply(mesh, path)


def read_mesh(path, fmt: str | None = None) -> TriangleMesh:
    fmt = _mesh_format(path, fmt)
    return _read_obj(path) if fmt == "obj" else _read_ply(path)


def _mesh_format(path, fmt):
    if fmt is not None:
        fmt = fmt.lower()
    else:
        name = str(path).lower()
        fmt = "obj" if name.endswith(".obj") else "ply" if name.endswith(".ply") else None
    if fmt not in ("obj", "ply"):
        raise UsageError(f"unknown mesh format for {path} (use .obj or .ply)")
    return fmt


def _write_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as f:
        v = mesh.vertices.astype(np.float32)
        for x, y, z in v:
            f.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        has_n = mesh.vertex_normals is not None
        if has_n:
            for x, y, z in mesh.vertex_normals.astype(np.float32):
                f.write(f"vn {x:.9g} {y:.9g} {z:.9g}\n")
        for tri in mesh.faces + 1:
            if has_n:
                f.write(f"f {tri[0]}//{tri[0]} {tri[1]}//{tri[1]} {tri[2]}//{tri[2]}\n")
            else:
                f.write(f"f {tri[0]} {tri[1]} {tri[2]}\n")


def _read_obj(path) -> TriangleMesh:
    verts, norms, faces = [], [], []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            try:
                if tok[0] == "v":
                    verts.append([float(t) for t in tok[1:4]])
                elif tok[0] == "vn":
                    norms.append([float(t) for t in tok[1:4]])
                elif tok[0] == "f":
                    idx = [int(t.split("/")[0]) - 1 for t in tok[1:4]]
                    faces.append(idx)
            except (ValueError, IndexError) as exc:
                raise ParseError(f"{path}:{ln}: bad OBJ record: {line.strip()!r}") from exc
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3),
                        np.array(norms, dtype=np.float64).reshape(-1, 3) if norms else None)


def _write_ply(mesh: TriangleMesh, path) -> None:
    has_n = mesh.vertex_normals is not None
    props = ["property float x", "property float y", "property float z"]
    if has_n:
        props += ["property float nx", "property float ny", "property float nz"]
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {len(mesh.vertices)}", *props,
              f"element face {len(mesh.faces)}",
              "property list uchar int vertex_indices", "end_header"]
    vdata = mesh.vertices.astype("<f4")
    if has_n:
        vdata = np.concatenate([vdata, mesh.vertex_normals.astype("<f4")], axis=1)
    fdata = np.empty((len(mesh.faces), 13), dtype=np.uint8)
    fdata[:, 0] = 3
    fdata[:, 1:] = mesh.faces.astype("<i4").view(np.uint8).reshape(len(mesh.faces), 12)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(vdata.tobytes())
        f.write(fdata.tobytes())


def _read_ply(path) -> TriangleMesh:
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header")
    if end < 0:
        raise ParseError(f"{path}: no end_header in PLY")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end:]
    body = body[body.find(b"\n") + 1:]
    fmt = None
    counts = {}
    elems = []  # (name, count, [props])
    current = None
    for ln, line in enumerate(header, 1):
        tok = line.strip().split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            current = (tok[1], int(tok[2]), [])
            elems.append(current)
            counts[tok[1]] = int(tok[2])
        elif tok[0] == "property" and current is not None:
            current[2].append(tok[1:])
    if fmt is None:
        raise ParseError(f"{path}: missing PLY format line")
    if fmt == "ascii":
        return _read_ply_ascii(path, elems, body)
    if fmt != "binary_little_endian":
        raise ParseError(f"{path}: unsupported PLY format {fmt}")
    offset = 0
    verts = norms = None
    faces = None
    for name, count, props in elems:
        if name == "vertex":
            names = [p[-1] for p in props]
            if any(p[0] not in ("float", "float32") for p in props):
                raise ParseError(f"{path}: vertex properties must be float32")
            width = len(names)
            arr = np.frombuffer(body, dtype="<f4", count=count * width,
                                offset=offset).reshape(count, width)
            offset += count * width * 4
            cols = {nm: arr[:, i] for i, nm in enumerate(names)}
            verts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
            if "nx" in cols:
                norms = np.stack([cols["nx"], cols["ny"], cols["nz"]],
                                 axis=1).astype(np.float64)
        elif name == "face":
            rows = np.frombuffer(body, dtype=np.uint8, count=count * 13,
                                 offset=offset).reshape(count, 13)
            offset += count * 13
            if count and not (rows[:, 0] == 3).all():
                raise ParseError(f"{path}: only triangle faces are supported")
            faces = rows[:, 1:].copy().view("<i4").reshape(count, 3).astype(np.int64)
    if verts is None:
        raise ParseError(f"{path}: PLY has no vertex element")
    if faces is None:
        faces = np.zeros((0, 3), dtype=np.int64)
    return TriangleMesh(verts, faces, norms)


def _read_ply_ascii(path, elems, body: bytes) -> TriangleMesh:
    lines = body.decode("ascii").splitlines()
    pos = 0
    verts = norms = None
    faces = None
    for name, count, props in elems:
        chunk = lines[pos:pos + count]
        pos += count
        if name == "vertex":
            names = [p[-1] for p in props]
            arr = np.array([[float(v) for v in ln.split()] for ln in chunk]).reshape(
                count, len(names))
            cols = {nm: arr[:, i] for i, nm in enumerate(names)}
            verts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
            if "nx" in cols:
                norms = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
        elif name == "face":
            rows = []
            for ln in chunk:
                parts = [int(v) for v in ln.split()]
                if parts[0] != 3:
                    raise ParseError(f"{path}: only triangle faces are supported")
                rows.append(parts[1:4])
            faces = np.array(rows, dtype=np.int64).reshape(-1, 3)
    if verts is None:
        raise ParseError(f"{path}: PLY has no vertex element")
    if faces is None:
        faces = np.zeros((0, 3), dtype=np.int64)
    return TriangleMesh(verts, faces, norms)
