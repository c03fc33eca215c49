"""Reward ensemble for the two generation steps.

The member scorers are synthetic stand-ins for learned judges: they compare a
generated shape against the prompt's target and keep each judge's output
range. Step totals divide every member by its number of evaluation
dimensions, and the refined-step total can be folded back into the coarse
step with weight ``lam``.
"""

from __future__ import annotations

import json
import logging
import threading
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np

from .env import PromptSpec, VoxelShape, render_views, voxels_to_mesh
from .meshsample import PointCloud, mesh_to_pointcloud
from .rng import Stream

log = logging.getLogger(__name__)

STEP1_MEMBERS = ("hpm", "unified", "consist")
STEP2_MEMBERS = ("hpm", "unified", "consist", "part")
ALL_MEMBERS = frozenset([f"{m}1" for m in STEP1_MEMBERS] + [f"{m}2" for m in STEP2_MEMBERS])

RANGES = {
    "hpm1": (0.0, 1.0),
    "unified1": (1.0, 5.0),
    "consist1": (0.0, 1.0),
    "hpm2": (0.0, 1.0),
    "unified2": (3.0, 15.0),
    "consist2": (0.0, 3.0),
    "part2": (0.0, 2.0),
}
CONSIST1_THRESHOLD = 0.25


class RewardError(ValueError):
    pass


class PartsAbsent(RewardError):
    """The prompt lists no components, so the part reward is undefined."""


@dataclass
class RewardBreakdown:
    step: int
    hpm: float | None = None
    unified: float | None = None
    consist: float | None = None
    part: float | None = None
    total: float = 0.0
    folded: float | None = None

    def members(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in ("hpm", "unified", "consist", "part")}

    def recompute_total(self) -> float:
        if self.step == 1:
            return ensemble_step1(self.hpm, self.unified, self.consist)
        return ensemble_step2(self.hpm, self.unified, self.consist, self.part)


# --- geometry helpers -----------------------------------------------------------

def occupancy_iou(a: VoxelShape, b: VoxelShape) -> float:
    oa, ob = a.cells > 0, b.cells > 0
    union = np.count_nonzero(oa | ob)
    if union == 0:
        return 1.0
    return np.count_nonzero(oa & ob) / union


def _view_score(pa: np.ndarray, pb: np.ndarray) -> float:
    sa, sb = pa > 0, pb > 0
    union = np.count_nonzero(sa | sb)
    if union == 0:
        return 0.0
    inter = sa & sb
    n_inter = np.count_nonzero(inter)
    iou = n_inter / union
    color = np.count_nonzero(pa[inter] == pb[inter]) / n_inter if n_inter else 0.0
    return 0.5 * iou + 0.5 * color


def histogram_overlap(pa: np.ndarray, pb: np.ndarray, colors: int) -> float:
    """Shared mass of the two views' normalized color histograms (0 if either is empty)."""
    ha = np.bincount(pa[pa > 0].ravel(), minlength=colors + 1)[1:].astype(float)
    hb = np.bincount(pb[pb > 0].ravel(), minlength=colors + 1)[1:].astype(float)
    if ha.sum() == 0 or hb.sum() == 0:
        return 0.0
    return float(np.minimum(ha / ha.sum(), hb / hb.sum()).sum())


def _face_pairs(shape: VoxelShape):
    g = shape.grid
    for axis in range(3):
        a = np.moveaxis(g, axis, 0)
        yield a[:-1], a[1:]


# --- member scorers ---------------------------------------------------------------

def score_hpm(prompt: PromptSpec | None, shape: VoxelShape, target: VoxelShape) -> float:
    """Best view of 0.5 * silhouette IoU + 0.5 * color agreement on the overlap."""
    return max(_view_score(a.pixels, b.pixels) for a, b in zip(render_views(shape), render_views(target)))


def score_unified_step1(shape: VoxelShape, target: VoxelShape) -> float:
    return 1.0 + 4.0 * occupancy_iou(shape, target)


def score_unified_step2(prompt: PromptSpec | None, shape: VoxelShape, target: VoxelShape) -> float:
    iou = occupancy_iou(shape, target)
    both = (shape.cells > 0) & (target.cells > 0)
    n = np.count_nonzero(both)
    color = np.count_nonzero(shape.cells[both] == target.cells[both]) / n if n else 0.0
    colors = int(max(shape.cells.max(initial=0), target.cells.max(initial=0), 1))
    hist = np.mean([histogram_overlap(a.pixels, b.pixels, colors)
                    for a, b in zip(render_views(shape), render_views(target))])
    return 3.0 + 12.0 * ((iou + color + hist) / 3.0)


def score_consist_step1(shape: VoxelShape, target: VoxelShape) -> float:
    return 1.0 if occupancy_iou(shape, target) >= CONSIST1_THRESHOLD else 0.0


def smoothness(shape: VoxelShape) -> float:
    """Share of face-adjacent occupied pairs with equal color; 1 without pairs, 0 for an empty shape."""
    if shape.count == 0:
        return 0.0
    same = pairs = 0
    for a, b in _face_pairs(shape):
        both = (a > 0) & (b > 0)
        pairs += np.count_nonzero(both)
        same += np.count_nonzero(both & (a == b))
    return same / pairs if pairs else 1.0


def isolated_cells(shape: VoxelShape) -> int:
    occ = np.pad(shape.occupancy, 1)
    core = occ[1:-1, 1:-1, 1:-1]
    neighbors = np.zeros_like(core)
    for axis in range(3):
        for step in (1, -1):
            neighbors |= np.roll(occ, step, axis=axis)[1:-1, 1:-1, 1:-1]
    return int(np.count_nonzero(core & ~neighbors))


def score_consist_step2(prompt: PromptSpec, shape: VoxelShape) -> float:
    occupied = shape.cells[shape.cells > 0]
    material = np.count_nonzero(occupied == prompt.color_class) / occupied.size if occupied.size else 0.0
    texture = 1.0 - isolated_cells(shape) / occupied.size if occupied.size else 1.0
    return smoothness(shape) + material + texture


def score_part(shape_or_cloud, parts, target_cloud: PointCloud | None = None, cell_size: float = 1.0) -> float:
    """Mean over components of existence (0/1) plus completeness in [0, 1].

    With a ``VoxelShape`` completeness is the fraction of the component's
    expected cells that are occupied; with a ``PointCloud`` it is the fraction
    of the target cloud's samples in the region that the generated cloud
    matches (``target_cloud`` required).
    """
    parts = list(parts)
    if not parts:
        raise PartsAbsent("no components to score")
    total = 0.0
    if isinstance(shape_or_cloud, VoxelShape):
        occ = shape_or_cloud.occupancy
        for p in parts:
            hit = np.count_nonzero(occ & p.mask(shape_or_cloud.side))
            total += (1.0 if hit else 0.0) + min(1.0, hit / p.expected_count)
    else:
        if target_cloud is None:
            raise RewardError("point-cloud part scoring needs the target cloud")
        for p in parts:
            hit = _points_in(shape_or_cloud.points, p, cell_size)
            exist = 1.0 if hit else 0.0
            ref = _points_in(target_cloud.points, p, cell_size)
            total += exist + (min(1.0, hit / ref) if ref else exist)
    return total / len(parts)


def _points_in(points: np.ndarray, part, cell_size: float) -> int:
    if len(points) == 0:
        return 0
    lo = np.asarray(part.lo, dtype=float) * cell_size
    hi = np.asarray(part.hi, dtype=float) * cell_size
    return int(np.count_nonzero(np.all((points >= lo) & (points <= hi), axis=1)))


# --- ensembles ------------------------------------------------------------------------

def _check(name: str, value):
    if value is None:
        return
    lo, hi = RANGES[name]
    if not lo <= value <= hi:
        raise RewardError(f"{name} = {value} outside [{lo}, {hi}]")


def ensemble_step1(r_hpm, r_unified, r_consist) -> float:
    """Coarse-step total; ``None`` members are disabled and contribute nothing."""
    _check("hpm1", r_hpm)
    _check("unified1", r_unified)
    _check("consist1", r_consist)
    total = 0.0
    for r in (r_hpm, r_unified, r_consist):
        if r is not None:
            total = total + r
    return total


def ensemble_step2(r_hpm, r_unified, r_consist, r_part) -> float:
    """Refined-step total with dimension divisors 1, 3, 3, 2."""
    _check("hpm2", r_hpm)
    _check("unified2", r_unified)
    _check("consist2", r_consist)
    _check("part2", r_part)
    total = 0.0
    for r, dims in ((r_hpm, 1.0), (r_unified, 3.0), (r_consist, 3.0), (r_part, 2.0)):
        if r is not None:
            total = total + (r if dims == 1.0 else r / dims)
    return total


def fold_back(r_high: float, r_low: float, lam: float) -> float:
    if lam < 0:
        raise RewardError("lambda must be non-negative")
    return r_high + lam * r_low


# --- remote judges ---------------------------------------------------------------------

SLOT_TEMPLATES = {
    "hpm1": "preference", "hpm2": "preference",
    "unified1": "alignment", "unified2": "alignment",
    "consist1": "shape_semantic", "consist2": "appearance",
    "part2": "part",
}


def load_template(template_id: str) -> str:
    return resources.files("higrpo").joinpath("templates", f"{template_id}.txt").read_text()


def remote_score(endpoint: str, payload_template: str | None, prompt: PromptSpec, views, slot: str,
                 timeout: float = 10.0, template_id: str | None = None) -> float:
    """POST the views to a judge service and clamp its score to the slot's range."""
    if slot not in RANGES:
        raise RewardError(f"unknown reward slot {slot!r}")
    text = prompt.describe()
    if payload_template:
        text = payload_template.format(prompt=text, num_views=len(views))
    body = {
        "prompt": text,
        "views": [np.asarray(v.pixels if hasattr(v, "pixels") else v).astype(int).tolist() for v in views],
        "template_id": template_id or SLOT_TEMPLATES[slot],
    }
    req = urllib.request.Request(endpoint, data=json.dumps(body).encode("utf-8"),
                                 headers={"Content-Type": "application/json; charset=utf-8"}, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            reply = json.loads(resp.read().decode("utf-8"))
        score = float(reply["score"])
    except (urllib.error.URLError, OSError, ValueError, KeyError, TypeError) as exc:
        raise RewardError(f"remote judge {endpoint} failed: {exc}") from exc
    if not np.isfinite(score):
        raise RewardError(f"remote judge {endpoint} returned {score}")
    lo, hi = RANGES[slot]
    score = min(max(score, lo), hi)
    if slot == "consist1":
        score = 1.0 if score >= 0.5 else 0.0
    return score


class RemoteJudge:
    """Routes selected reward slots to an HTTP judge, falling back per call."""

    def __init__(self, endpoint: str, slots, timeout: float = 10.0, max_inflight: int = 4,
                 use_templates: bool = True):
        self.endpoint = endpoint
        self.slots = frozenset(slots)
        self.timeout = timeout
        self.use_templates = use_templates
        self._gate = threading.BoundedSemaphore(max(1, max_inflight))
        self.fallbacks = 0

    def score(self, slot: str, prompt: PromptSpec, shape: VoxelShape, fallback) -> float:
        if slot not in self.slots:
            return fallback()
        template = load_template(SLOT_TEMPLATES[slot]) if self.use_templates else None
        try:
            with self._gate:
                return remote_score(self.endpoint, template, prompt, render_views(shape), slot, self.timeout)
        except RewardError as exc:
            self.fallbacks += 1
            log.warning("%s; using synthetic %s score", exc, slot)
            return fallback()


# --- step scoring ------------------------------------------------------------------------

class PartScorer:
    """Part reward via voxels or via the mesh -> point cloud path."""

    def __init__(self, mode: str = "points", density: float = 8.0, cell_size: float = 1.0, colors: int = 7):
        if mode not in ("points", "voxel"):
            raise ValueError(f"unknown part scorer {mode!r}")
        self.mode = mode
        self.density = density
        self.cell_size = cell_size
        self.colors = colors
        self._targets: dict[int, PointCloud] = {}
        self._lock = threading.Lock()

    def cloud(self, shape: VoxelShape, stream: Stream) -> PointCloud:
        return mesh_to_pointcloud(voxels_to_mesh(shape, self.cell_size, self.colors), self.density, stream)

    def target_cloud(self, prompt: PromptSpec, target: VoxelShape) -> PointCloud:
        with self._lock:
            cloud = self._targets.get(prompt.digest)
        if cloud is None:
            cloud = self.cloud(target, Stream(prompt.digest).child("target-cloud"))
            with self._lock:
                self._targets[prompt.digest] = cloud
        return cloud

    def __call__(self, prompt: PromptSpec, target: VoxelShape, shape: VoxelShape, stream: Stream) -> float:
        if self.mode == "voxel":
            return score_part(shape, prompt.parts)
        return score_part(self.cloud(shape, stream), prompt.parts, self.target_cloud(prompt, target),
                          self.cell_size)


def score_step1(prompt: PromptSpec, target: VoxelShape, shape: VoxelShape, members=ALL_MEMBERS,
                judge: RemoteJudge | None = None) -> RewardBreakdown:
    def slot(name, fn):
        if name not in members:
            return None
        return judge.score(name, prompt, shape, fn) if judge else fn()

    hpm = slot("hpm1", lambda: score_hpm(prompt, shape, target))
    unified = slot("unified1", lambda: score_unified_step1(shape, target))
    consist = slot("consist1", lambda: score_consist_step1(shape, target))
    return RewardBreakdown(1, hpm, unified, consist, None, ensemble_step1(hpm, unified, consist))


def score_step2(prompt: PromptSpec, target: VoxelShape, shape: VoxelShape, members=ALL_MEMBERS,
                judge: RemoteJudge | None = None, parts: PartScorer | None = None,
                stream: Stream | None = None) -> RewardBreakdown:
    def slot(name, fn):
        if name not in members:
            return None
        return judge.score(name, prompt, shape, fn) if judge else fn()

    hpm = slot("hpm2", lambda: score_hpm(prompt, shape, target))
    unified = slot("unified2", lambda: score_unified_step2(prompt, shape, target))
    consist = slot("consist2", lambda: score_consist_step2(prompt, shape))
    part = None
    if prompt.parts:
        scorer = parts or PartScorer("voxel")
        part = slot("part2", lambda: scorer(prompt, target, shape, stream or Stream(prompt.digest)))
    return RewardBreakdown(2, hpm, unified, consist, part, ensemble_step2(hpm, unified, consist, part))
