"""Synthetic voxel-shape world.

Prompts are structured specs (family, extents, color, parts) instead of text.
A prompt rasterizes to a target voxel grid; policies emit one token per cell
which decodes to a ``VoxelShape``. Cells are stored flat with raster index
``x + n*y + n*n*z``.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from .meshsample import Mesh, Texture
from .rng import Stream, digest_ints

FAMILIES = ("box", "ell", "plus", "pillar")
DIFFICULTIES = ("easy", "medium", "hard")
AXES = ("+x", "-x", "+y", "-y", "+z", "-z")

DEFAULT_SIDE = 4
DEFAULT_COLORS = 7

_COLOR_NAMES = ("red", "orange", "yellow", "green", "cyan", "blue", "purple")
_PART_NAMES = {
    "box": ("lid", "base", "side", "corner"),
    "ell": ("arm", "elbow", "leg"),
    "plus": ("hub", "spoke", "tip"),
    "pillar": ("base", "column", "capital"),
}
# (extent range, part-count range) per difficulty
_DIFFICULTY = {
    "easy": ((1, 3), (0, 1)),
    "medium": ((2, 4), (1, 2)),
    "hard": ((2, 4), (2, 3)),
}


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class Part:
    name: str
    lo: tuple[int, int, int]  # inclusive cell corner
    hi: tuple[int, int, int]  # exclusive cell corner
    expected_count: int

    def mask(self, n: int) -> np.ndarray:
        """Boolean [x, y, z] grid of the cells inside the region."""
        m = np.zeros((n, n, n), dtype=bool)
        m[self.lo[0]:self.hi[0], self.lo[1]:self.hi[1], self.lo[2]:self.hi[2]] = True
        return m


@dataclass(frozen=True)
class PromptSpec:
    id: int
    family: str
    extents: tuple[int, int, int]
    color_class: int
    parts: tuple[Part, ...] = ()
    side: int = DEFAULT_SIDE
    difficulty: str = "easy"
    digest: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if any(not 1 <= e <= self.side for e in self.extents):
            raise ValueError("extents must fit the grid")
        for p in self.parts:
            if any(l < 0 or h > self.side or l >= h for l, h in zip(p.lo, p.hi)):
                raise ValueError(f"part {p.name!r} region outside the grid")
        object.__setattr__(self, "digest", self._compute_digest())

    def _compute_digest(self) -> int:
        values = [self.id, FAMILIES.index(self.family), *self.extents, self.color_class, self.side]
        for p in self.parts:
            values += [*p.name.encode(), *p.lo, *p.hi, p.expected_count]
        return digest_ints("prompt", values)

    @property
    def num_parts(self) -> int:
        return len(self.parts)

    def describe(self) -> str:
        color = color_name(self.color_class)
        ex = "x".join(map(str, self.extents))
        text = f"a {color} {self.family}-shaped object, {ex} cells"
        if self.parts:
            text += " with " + ", ".join(p.name for p in self.parts)
        return text


def color_name(c: int) -> str:
    return _COLOR_NAMES[c - 1] if 1 <= c <= len(_COLOR_NAMES) else f"color{c}"


def palette(colors: int) -> np.ndarray:
    """(colors + 1, 3) uint8 RGB table; row 0 is the background."""
    base = [(0, 0, 0), (220, 40, 40), (240, 140, 30), (235, 215, 40), (50, 170, 70),
            (40, 190, 200), (40, 70, 210), (140, 60, 190)]
    rows = base[: colors + 1]
    for k in range(len(rows), colors + 1):
        r, g, b = colorsys.hsv_to_rgb((k * 0.618034) % 1.0, 0.7, 0.85)
        rows.append((int(r * 255), int(g * 255), int(b * 255)))
    return np.array(rows, dtype=np.uint8)


@dataclass
class VoxelShape:
    side: int
    cells: np.ndarray

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int64)
        if self.cells.shape != (self.side ** 3,):
            raise DecodeError(f"expected {self.side ** 3} cells, got {self.cells.shape}")
        if self.cells.size and self.cells.min() < 0:
            raise DecodeError("negative cell value")

    @classmethod
    def empty(cls, side: int = DEFAULT_SIDE) -> "VoxelShape":
        return cls(side, np.zeros(side ** 3, dtype=np.int64))

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "VoxelShape":
        grid = np.asarray(grid)
        return cls(grid.shape[0], grid.transpose(2, 1, 0).reshape(-1))

    @property
    def grid(self) -> np.ndarray:
        """Cells as an [x, y, z] array."""
        n = self.side
        return self.cells.reshape(n, n, n).transpose(2, 1, 0)

    @property
    def occupancy(self) -> np.ndarray:
        return self.grid > 0

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.cells))

    def __eq__(self, other):
        return isinstance(other, VoxelShape) and self.side == other.side and np.array_equal(self.cells, other.cells)


@dataclass
class View:
    axis: str
    pixels: np.ndarray  # (n, n), indexed by the two remaining axes in x, y, z order


def cell_index(x: int, y: int, z: int, n: int) -> int:
    return x + n * y + n * n * z


# --- prompts ------------------------------------------------------------------

def _family_mask(family: str, extents, n: int) -> np.ndarray:
    ex, ey, ez = extents
    x, y, z = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    inside = (x < ex) & (y < ey) & (z < ez)
    if family == "box":
        return inside
    if family == "ell":
        return inside & ((y == 0) | (x == 0))
    if family == "plus":
        return inside & ((y == ey // 2) | (x == ex // 2))
    if family == "pillar":
        return ((z == 0) & (x < ex) & (y < ey)) | ((x == 0) & (y == 0) & (z < ez))
    raise ValueError(family)


def _surface_cells(occ: np.ndarray) -> np.ndarray:
    pad = np.pad(occ, 1)
    exposed = np.zeros_like(occ)
    for axis in range(3):
        for shift in (1, -1):
            neighbor = np.roll(pad, shift, axis=axis)[1:-1, 1:-1, 1:-1]
            exposed |= occ & ~neighbor
    return np.argwhere(exposed)


def sample_prompt(stream: Stream, difficulty: str = "easy", side: int = DEFAULT_SIDE,
                  colors: int = DEFAULT_COLORS) -> PromptSpec:
    if difficulty not in _DIFFICULTY:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    (elo, ehi), (plo, phi) = _DIFFICULTY[difficulty]
    ehi = min(ehi, side)
    elo = min(elo, ehi)
    pid = stream.bits64() >> 33
    family = FAMILIES[stream.randint(0, len(FAMILIES) - 1)]
    extents = tuple(stream.randint(elo, ehi) for _ in range(3))
    color = stream.randint(1, colors)
    occ = _family_mask(family, extents, side)
    surface = _surface_cells(occ)
    names = _PART_NAMES[family]
    parts = []
    for _ in range(stream.randint(plo, phi)):
        cx, cy, cz = surface[stream.randint(0, len(surface) - 1)]
        lo = [max(0, int(c) - stream.randint(0, 1)) for c in (cx, cy, cz)]
        hi = [min(side, int(c) + 1 + stream.randint(0, 1)) for c in (cx, cy, cz)]
        part = Part(names[stream.randint(0, len(names) - 1)], tuple(lo), tuple(hi), 1)
        count = int(np.count_nonzero(occ & part.mask(side)))
        parts.append(Part(part.name, part.lo, part.hi, count))
    return PromptSpec(pid, family, extents, color, tuple(parts), side, difficulty)


def rasterize_prompt(spec: PromptSpec) -> VoxelShape:
    occ = _family_mask(spec.family, spec.extents, spec.side)
    return VoxelShape.from_grid(np.where(occ, spec.color_class, 0))


# --- tokens -------------------------------------------------------------------

def decode_tokens(tokens, n: int = DEFAULT_SIDE, colors: int = DEFAULT_COLORS) -> VoxelShape:
    arr = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if arr.shape[0] != n ** 3:
        raise DecodeError(f"expected {n ** 3} tokens, got {arr.shape[0]}")
    if arr.size and (arr.min() < 0 or arr.max() > colors):
        raise DecodeError(f"token out of range [0, {colors}]")
    return VoxelShape(n, arr.copy())


def encode_shape(shape: VoxelShape) -> list[int]:
    return shape.cells.tolist()


# --- views --------------------------------------------------------------------

def render_views(shape: VoxelShape) -> list[View]:
    """Six orthographic projections; the ``+a`` view looks from +a toward -a."""
    g = shape.grid
    views = []
    for name in AXES:
        axis = "xyz".index(name[1])
        vol = np.moveaxis(g, axis, -1)  # remaining axes keep x, y, z order
        if name[0] == "+":
            vol = vol[..., ::-1]
        hit = vol > 0
        first = np.argmax(hit, axis=-1)
        pix = np.take_along_axis(vol, first[..., None], axis=-1)[..., 0]
        views.append(View(name, np.where(hit.any(axis=-1), pix, 0)))
    return views


# --- meshing ------------------------------------------------------------------

_FACE_CORNERS = {
    "+x": ((1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)),
    "-x": ((0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)),
    "+y": ((0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)),
    "-y": ((0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)),
    "+z": ((0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)),
    "-z": ((0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)),
}
_TEXEL_BLOCK = 2


def shape_texture(colors: int) -> Texture:
    """One 2x2 texel block per color class, laid out left to right."""
    pal = palette(colors)[1:]
    img = np.repeat(np.repeat(pal[None, :, :], _TEXEL_BLOCK, axis=1), _TEXEL_BLOCK, axis=0)
    return Texture(img.shape[1], img.shape[0], img.astype(np.uint8).tobytes())


def exposed_faces(shape: VoxelShape) -> list[tuple[str, np.ndarray]]:
    """(direction, (k, 3) cell coords) for each of the six face directions."""
    occ = shape.occupancy
    pad = np.pad(occ, 1)
    out = []
    for name in AXES:
        axis = "xyz".index(name[1])
        step = 1 if name[0] == "+" else -1
        neighbor = np.roll(pad, -step, axis=axis)[1:-1, 1:-1, 1:-1]
        cells = np.argwhere(occ & ~neighbor)
        # raster order within a direction
        order = np.lexsort((cells[:, 0], cells[:, 1], cells[:, 2])) if len(cells) else []
        out.append((name, cells[order] if len(cells) else cells))
    return out


def voxels_to_mesh(shape: VoxelShape, cell_size: float = 1.0, colors: int | None = None) -> Mesh:
    colors = max(colors or DEFAULT_COLORS, int(shape.cells.max(initial=0)))
    texture = shape_texture(colors)
    w, h = texture.width, texture.height
    verts, uvs, faces = [], [], []
    base = 0
    g = shape.grid
    for name, cells in exposed_faces(shape):
        if len(cells) == 0:
            continue
        corners = np.array(_FACE_CORNERS[name], dtype=np.float64)
        k = len(cells)
        verts.append(((cells[:, None, :] + corners[None]) * cell_size).reshape(-1, 3))
        c = g[cells[:, 0], cells[:, 1], cells[:, 2]]
        u0 = ((c - 1) * _TEXEL_BLOCK + 0.5) / w
        u1 = ((c - 1) * _TEXEL_BLOCK + _TEXEL_BLOCK - 0.5) / w
        v0 = np.full(k, 0.5 / h)
        v1 = np.full(k, (h - 0.5) / h)
        uvs.append(np.stack([np.stack([u0, v0], 1), np.stack([u1, v0], 1),
                             np.stack([u1, v1], 1), np.stack([u0, v1], 1)], axis=1).reshape(-1, 2))
        q = base + 4 * np.arange(k)[:, None]
        faces.append(np.concatenate([q + [0, 1, 2], q + [0, 2, 3]], axis=1).reshape(-1, 3))
        base += 4 * k
    if not faces:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 3), dtype=np.int64),
                    np.zeros((0, 3), dtype=np.int64), texture)
    f = np.concatenate(faces)
    return Mesh(np.concatenate(verts), np.concatenate(uvs), f, f.copy(), texture)
