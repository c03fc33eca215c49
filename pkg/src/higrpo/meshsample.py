"""Textured triangle mesh -> dense colored point cloud.

Each face receives ``ceil(density * area)`` samples placed uniformly with
barycentric coordinates; the color comes from a nearest-texel lookup at the
interpolated UV. Also holds the small file codecs used by the CLI: an OBJ
subset, binary PPM textures and ASCII PLY clouds.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Stream, uniforms_np


class MeshError(ValueError):
    pass


@dataclass
class Texture:
    width: int
    height: int
    data: bytes  # row-major RGB, row 0 is the top of the image (v = 1)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise MeshError("texture must be at least 1x1")
        if len(self.data) != 3 * self.width * self.height:
            raise MeshError("texture byte length does not match 3*w*h")

    def as_array(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=np.uint8).reshape(self.height, self.width, 3)


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float
    uvs: np.ndarray  # (U, 2) float in [0, 1]
    faces: np.ndarray  # (F, 3) vertex indices
    face_uvs: np.ndarray  # (F, 3) uv indices
    texture: Texture

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.face_uvs = np.asarray(self.face_uvs, dtype=np.int64).reshape(-1, 3)
        if self.faces.shape != self.face_uvs.shape:
            raise MeshError("faces and face_uvs must have the same shape")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshError("vertex index out of range")
        if self.face_uvs.size and (self.face_uvs.min() < 0 or self.face_uvs.max() >= len(self.uvs)):
            raise MeshError("uv index out of range")

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())


@dataclass
class PointCloud:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    face_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.points)


def face_area(v1, v2, v3) -> float:
    v1, v2, v3 = (np.asarray(v, dtype=np.float64) for v in (v1, v2, v3))
    return float(np.linalg.norm(np.cross(v2 - v1, v3 - v1)) / 2.0)


def allocate_samples(areas, density: float) -> np.ndarray:
    """Per-face sample counts ``ceil(density * area)``; zero-area faces get 0."""
    if not density > 0:
        raise MeshError(f"sampling density must be positive, got {density}")
    areas = np.asarray(areas, dtype=np.float64)
    return np.ceil(density * areas).astype(np.int64)


def bary_from_uniforms(u, v):
    """Square-root map from the unit square onto the triangle (uniform density)."""
    su = np.sqrt(u)
    return 1.0 - su, su * (1.0 - v), su * v


def sample_barycentric(stream: Stream) -> tuple[float, float, float]:
    u = stream.uniform()
    v = stream.uniform()
    a, b, c = bary_from_uniforms(u, v)
    return float(a), float(b), float(c)


def point_from_bary(face_vertices, bary) -> np.ndarray:
    fv = np.asarray(face_vertices, dtype=np.float64)
    a, b, c = bary
    return a * fv[0] + b * fv[1] + c * fv[2]


def texel_lookup(texture: Texture, uv: np.ndarray) -> np.ndarray:
    """Nearest-texel RGB in [0, 1] for an (N, 2) array of UVs."""
    uv = np.atleast_2d(uv)
    w, h = texture.width, texture.height
    col = np.clip(np.floor(uv[:, 0] * w).astype(np.int64), 0, w - 1)
    # image row 0 sits at v = 1
    row = np.clip(np.floor((1.0 - uv[:, 1]) * h).astype(np.int64), 0, h - 1)
    return texture.as_array()[row, col].astype(np.float64) / 255.0


def color_from_bary(face_uvs, bary, texture: Texture) -> np.ndarray:
    fu = np.asarray(face_uvs, dtype=np.float64)
    a, b, c = bary
    uv = a * fu[0] + b * fu[1] + c * fu[2]
    return texel_lookup(texture, uv[None, :])[0]


def mesh_to_pointcloud(mesh: Mesh, density: float, stream: Stream) -> PointCloud:
    """Sample ``mesh`` into a colored point cloud.

    Face ``f`` draws from its own sub-stream ``stream.child("face", f)``, so the
    result does not depend on how faces are partitioned across workers.
    """
    if mesh.num_faces == 0:
        allocate_samples(np.zeros(0), density)
        return PointCloud()
    counts = allocate_samples(mesh.face_areas(), density)
    total = int(counts.sum())
    if total == 0:
        return PointCloud()
    face_idx = np.repeat(np.arange(mesh.num_faces), counts)
    # sample j of its face: counters 2j and 2j + 1
    starts = np.cumsum(counts) - counts
    j = np.arange(total) - np.repeat(starts, counts)
    face_keys = np.array([stream.child("face", f).key for f in range(mesh.num_faces)], dtype=np.uint64)
    keys = face_keys[face_idx]
    u = uniforms_np(keys, 2 * j)
    v = uniforms_np(keys, 2 * j + 1)
    a, b, c = bary_from_uniforms(u, v)
    tri = mesh.vertices[mesh.faces[face_idx]]
    pts = a[:, None] * tri[:, 0] + b[:, None] * tri[:, 1] + c[:, None] * tri[:, 2]
    tuv = mesh.uvs[mesh.face_uvs[face_idx]]
    uv = a[:, None] * tuv[:, 0] + b[:, None] * tuv[:, 1] + c[:, None] * tuv[:, 2]
    return PointCloud(pts, texel_lookup(mesh.texture, uv), face_idx)


# --- file formats -----------------------------------------------------------

def read_obj(path, texture: Texture) -> Mesh:
    verts, uvs, faces, fuvs = [], [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag = parts[0]
        try:
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif tag == "f":
                if len(parts) != 4:
                    raise MeshError(f"line {lineno}: only triangles are supported")
                vi, ti = [], []
                for corner in parts[1:]:
                    a, b = corner.split("/")[:2]
                    vi.append(int(a) - 1)
                    ti.append(int(b) - 1)
                faces.append(vi)
                fuvs.append(ti)
        except (ValueError, IndexError) as exc:
            raise MeshError(f"line {lineno}: cannot parse {raw!r}") from exc
    return Mesh(np.array(verts).reshape(-1, 3), np.array(uvs).reshape(-1, 2),
                np.array(faces, dtype=np.int64).reshape(-1, 3),
                np.array(fuvs, dtype=np.int64).reshape(-1, 3), texture)


def write_obj(mesh: Mesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"vt {u!r} {v!r}" for u, v in mesh.uvs.tolist()]
    for f, t in zip(mesh.faces.tolist(), mesh.face_uvs.tolist()):
        lines.append("f " + " ".join(f"{a + 1}/{b + 1}" for a, b in zip(f, t)))
    Path(path).write_text("\n".join(lines) + "\n")


_PPM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_ppm(path) -> Texture:
    raw = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _PPM_TOKEN.match(raw, pos)
        if not m:
            raise MeshError("truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise MeshError("only binary PPM (P6) is supported")
    w, h, maxval = (int(x) for x in fields[1:])
    if maxval != 255:
        raise MeshError("only maxval 255 is supported")
    data = raw[pos + 1: pos + 1 + 3 * w * h]
    return Texture(w, h, bytes(data))


def write_ppm(texture: Texture, path) -> None:
    Path(path).write_bytes(f"P6\n{texture.width} {texture.height}\n255\n".encode() + texture.data)


def write_ply(cloud: PointCloud, path) -> None:
    rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.int64)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    body = [f"{p[0]!r} {p[1]!r} {p[2]!r} {c[0]} {c[1]} {c[2]}"
            for p, c in zip(cloud.points.tolist(), rgb.tolist())]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(header + body) + "\n")


def read_ply(path) -> PointCloud:
    lines = Path(path).read_text().splitlines()
    end = lines.index("end_header")
    n = next(int(line.split()[-1]) for line in lines if line.startswith("element vertex"))
    rows = np.array([[float(x) for x in line.split()] for line in lines[end + 1: end + 1 + n]]).reshape(-1, 6)
    return PointCloud(rows[:, :3], rows[:, 3:] / 255.0, np.zeros(n, dtype=np.int64))


def plane_distance(point, face_vertices) -> float:
    fv = np.asarray(face_vertices, dtype=np.float64)
    normal = np.cross(fv[1] - fv[0], fv[2] - fv[0])
    norm = np.linalg.norm(normal)
    if norm == 0:
        return math.inf
    return float(abs(np.dot(np.asarray(point) - fv[0], normal)) / norm)
