"""Centerline processing: smoothing, resampling, bifurcation splitting and position features.

Coordinates are voxel units throughout.  A tree arrives as a list of
labelled branch centerlines; :func:`segment_tree` turns it into segments
(branch pieces between bifurcations) with parent links, and
:func:`position_features` maps each segment to a fixed 35-vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLASSES = ("RCA", "R-PDA", "R-PLB", "AM", "LM", "LAD", "LCX", "RI", "D", "OM", "S")
CLASS_INDEX = {name: i for i, name in enumerate(CLASSES)}
N_FEATURES = 35
POLE_EPS = 1e-9
MERGE_RADIUS = 3.0
CENTERLINE_FORMAT_VERSION = 1


class DegenerateInputError(ValueError):
    pass


class MalformedTreeError(ValueError):
    pass


@dataclass
class Centerline:
    """Ordered 3D points of one branch, optionally carrying its anatomical label."""

    points: np.ndarray
    label: str | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 2:
            raise DegenerateInputError(f"a centerline needs at least 2 points, got {len(self.points)}")
        steps = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        if np.any(steps == 0.0):
            raise DegenerateInputError("consecutive centerline points must be distinct")
        if self.label is not None and self.label not in CLASS_INDEX:
            raise ValueError(f"unknown anatomical label {self.label!r}")

    @property
    def length(self) -> float:
        return float(arc_lengths(self.points)[-1])


@dataclass
class Segment:
    points: np.ndarray
    label: str | None = None
    parent: int | None = None
    branch: int = -1


@dataclass
class SegmentGraph:
    nodes: list[Segment]
    adjacency: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.sum())

    @property
    def roots(self) -> list[int]:
        return [i for i, s in enumerate(self.nodes) if s.parent is None]

    def labels(self) -> np.ndarray:
        return np.array([CLASS_INDEX[s.label] for s in self.nodes], dtype=np.int64)


@dataclass
class LocalFrame:
    origin: np.ndarray
    x_axis: np.ndarray
    y_axis: np.ndarray
    z_axis: np.ndarray

    def to_local(self, p: np.ndarray) -> np.ndarray:
        d = np.asarray(p, dtype=np.float64) - self.origin
        return np.array([d @ self.x_axis, d @ self.y_axis, d @ self.z_axis])

    def rotate(self, v: np.ndarray) -> np.ndarray:
        """Express a free vector (no translation) in frame axes."""
        v = np.asarray(v, dtype=np.float64)
        return np.array([v @ self.x_axis, v @ self.y_axis, v @ self.z_axis])


# --------------------------------------------------------------------------- curves

def arc_lengths(points: np.ndarray) -> np.ndarray:
    steps = np.linalg.norm(np.diff(points, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _point_at(points: np.ndarray, cum: np.ndarray, s: float) -> np.ndarray:
    k = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(points) - 2))
    span = cum[k + 1] - cum[k]
    t = 0.0 if span == 0 else (s - cum[k]) / span
    return points[k] + t * (points[k + 1] - points[k])


def catmull_rom_smooth(line: Centerline, samples_per_span: int = 8) -> Centerline:
    """Centripetal Catmull-Rom curve through every control point of ``line``.

    Boundary tangents come from reflected phantom points ``2*P0 - P1`` and
    ``2*Pn - Pn-1``.  Each span contributes ``samples_per_span`` samples,
    the first of which is the span's start control point itself.
    """
    pts = line.points
    if len(pts) < 2:
        raise DegenerateInputError("catmull_rom_smooth needs at least 2 points")
    if samples_per_span < 1:
        raise ValueError("samples_per_span must be >= 1")
    padded = np.vstack([2 * pts[0] - pts[1], pts, 2 * pts[-1] - pts[-2]])
    out = []
    u = np.arange(samples_per_span)[:, None] / samples_per_span
    for i in range(len(pts) - 1):
        p0, p1, p2, p3 = padded[i:i + 4]
        t0 = 0.0
        t1 = t0 + np.linalg.norm(p1 - p0) ** 0.5
        t2 = t1 + np.linalg.norm(p2 - p1) ** 0.5
        t3 = t2 + np.linalg.norm(p3 - p2) ** 0.5
        t = t1 + u * (t2 - t1)
        a1 = (t1 - t) / (t1 - t0) * p0 + (t - t0) / (t1 - t0) * p1
        a2 = (t2 - t) / (t2 - t1) * p1 + (t - t1) / (t2 - t1) * p2
        a3 = (t3 - t) / (t3 - t2) * p2 + (t - t2) / (t3 - t2) * p3
        b1 = (t2 - t) / (t2 - t0) * a1 + (t - t0) / (t2 - t0) * a2
        b2 = (t3 - t) / (t3 - t1) * a2 + (t - t1) / (t3 - t1) * a3
        c = (t2 - t) / (t2 - t1) * b1 + (t - t1) / (t2 - t1) * b2
        c[0] = p1
        out.append(c)
    out.append(pts[-1:])
    return Centerline(_dedupe(np.vstack(out)), line.label)


def _dedupe(points: np.ndarray) -> np.ndarray:
    keep = np.concatenate([[True], np.linalg.norm(np.diff(points, axis=0), axis=1) > 1e-12])
    return points[keep]


def resample_uniform(line: Centerline, spacing: float = 10.0) -> Centerline:
    """Resample at exactly ``spacing`` arc length, keeping both endpoints.

    Every gap equals ``spacing`` except the last, which takes the remainder.
    A line shorter than ``spacing`` collapses to its two endpoints.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    pts = line.points
    cum = arc_lengths(pts)
    total = cum[-1]
    steps = int(np.floor(total / spacing * (1 + 1e-12)))
    targets = list(np.arange(1, steps + 1) * spacing)
    if targets and total - targets[-1] <= 1e-9 * spacing:
        targets.pop()
    out = np.array([pts[0]] + [_point_at(pts, cum, s) for s in targets] + [pts[-1]])
    return Centerline(out, line.label)


# --------------------------------------------------------------------------- tree structure

def _closest_on_polyline(points: np.ndarray, cum: np.ndarray, q: np.ndarray) -> tuple[float, float]:
    """Distance from ``q`` to the polyline and the arc position of the foot point."""
    a, b = points[:-1], points[1:]
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", q - a, ab) / np.where(denom == 0, 1, denom), 0.0, 1.0)
    foot = a + t[:, None] * ab
    d = np.linalg.norm(foot - q, axis=1)
    k = int(np.argmin(d))
    return float(d[k]), float(cum[k] + t[k] * np.sqrt(denom[k]))


def _split_polyline(points: np.ndarray, cum: np.ndarray, cuts: list[float]) -> list[np.ndarray]:
    pieces = []
    bounds = [0.0] + cuts + [cum[-1]]
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        inside = points[(cum > lo) & (cum < hi)]
        piece = np.vstack([_point_at(points, cum, lo), inside, _point_at(points, cum, hi)])
        pieces.append(_dedupe(piece))
    return pieces


def split_into_segments(lines: list[Centerline], merge_radius: float = MERGE_RADIUS) -> list[Segment]:
    """Cut branches at bifurcations and link the resulting segments.

    A branch whose first point lies within ``merge_radius`` of another
    branch (away from that branch's own start) is a child of it.  Children
    whose starting points lie within ``merge_radius`` of one another share
    one bifurcation point on the parent.  Branches touching nothing become
    roots.  Segments are returned branch by branch, proximal to distal.
    """
    cums = [arc_lengths(l.points) for l in lines]
    parent_of: dict[int, tuple[int, float]] = {}
    for i, line in enumerate(lines):
        best = None
        for j, other in enumerate(lines):
            if j == i:
                continue
            d, s = _closest_on_polyline(other.points, cums[j], line.points[0])
            if d <= merge_radius and s > merge_radius and (best is None or d < best[0]):
                best = (d, j, s)
        if best is not None:
            parent_of[i] = (best[1], best[2])

    # cluster attachments on each parent and decide cut positions
    attach_piece: dict[int, tuple[int, int]] = {}
    pieces_of: dict[int, list[np.ndarray]] = {}
    for j, line in enumerate(lines):
        kids = sorted((s, i) for i, (p, s) in parent_of.items() if p == j)
        clusters: list[list[tuple[float, int]]] = []
        for s, i in kids:
            if clusters and np.linalg.norm(lines[i].points[0] - lines[clusters[-1][0][1]].points[0]) <= merge_radius:
                clusters[-1].append((s, i))
            else:
                clusters.append([(s, i)])
        total = cums[j][-1]
        cuts: list[float] = []
        for cluster in clusters:
            s_mean = float(np.mean([s for s, _ in cluster]))
            if s_mean < total - merge_radius:
                cuts.append(s_mean)
            piece = len(cuts) - 1 if s_mean < total - merge_radius else len(cuts)
            for _, i in cluster:
                attach_piece[i] = (j, piece)
        pieces_of[j] = _split_polyline(line.points, cums[j], cuts)
        # children at the far end hang off the last piece
        for _, i in kids:
            pj, piece = attach_piece[i]
            attach_piece[i] = (pj, min(piece, len(pieces_of[j]) - 1))

    first_index: dict[int, int] = {}
    segments: list[Segment] = []
    for j, line in enumerate(lines):
        first_index[j] = len(segments)
        for k, pts in enumerate(pieces_of[j]):
            parent = len(segments) - 1 if k > 0 else None
            segments.append(Segment(points=pts, label=line.label, parent=parent, branch=j))
    for i, (j, piece) in attach_piece.items():
        segments[first_index[i]].parent = first_index[j] + piece
    return segments


def build_graph(segments: list[Segment]) -> SegmentGraph:
    """Directed parent -> child adjacency; raises :class:`MalformedTreeError` on cycles."""
    n = len(segments)
    adj = np.zeros((n, n), dtype=np.int8)
    for j, seg in enumerate(segments):
        if seg.parent is not None:
            if not 0 <= seg.parent < n or seg.parent == j:
                raise MalformedTreeError(f"segment {j} has invalid parent {seg.parent}")
            adj[seg.parent, j] = 1
    state = np.zeros(n, dtype=np.int8)  # 0 new, 1 on path, 2 done
    for start in range(n):
        node, path = start, []
        while node is not None and state[node] == 0:
            state[node] = 1
            path.append(node)
            node = segments[node].parent
        if node is not None and state[node] == 1:
            raise MalformedTreeError(f"cycle through segment {node}")
        for k in path:
            state[k] = 2
    return SegmentGraph(list(segments), adj)


def segment_tree(lines: list[Centerline], spacing: float = 10.0, merge_radius: float = MERGE_RADIUS,
                 samples_per_span: int = 4) -> list[Segment]:
    """Smooth every branch, split at bifurcations and resample each segment."""
    smooth = [catmull_rom_smooth(l, samples_per_span) for l in lines]
    segments = split_into_segments(smooth, merge_radius)
    for seg in segments:
        seg.points = resample_uniform(Centerline(seg.points), spacing).points
    return segments


# --------------------------------------------------------------------------- SCT-S2 features

def local_frame(seg: Segment) -> LocalFrame:
    """Origin at the first point, z towards the second, first-to-last vector in the y-z plane.

    When the first-to-last vector is (nearly) parallel to z, y is built from
    the global axis least aligned with z instead.
    """
    pts = seg.points
    origin = pts[0]
    z = pts[1] - pts[0]
    zn = np.linalg.norm(z)
    if zn == 0:
        raise DegenerateInputError("first two points coincide")
    z = z / zn
    v = pts[-1] - pts[0]
    y = v - (v @ z) * z
    vn = np.linalg.norm(v)
    if vn == 0 or np.linalg.norm(y) <= 1e-6 * vn:
        e = np.zeros(3)
        e[int(np.argmin(np.abs(z)))] = 1.0
        y = e - (e @ z) * z
    y = y / np.linalg.norm(y)
    x = np.cross(y, z)
    return LocalFrame(origin.copy(), x, y, z)


def sct_s2(p) -> tuple[float, float, float, np.ndarray]:
    """Spherical coordinates ``(r, theta, phi)`` and the 2x2 sine/cosine matrix.

    Uses ``x = r sin(theta) cos(phi)``, ``y = r sin(theta) sin(phi)``,
    ``z = r cos(theta)``.  At the poles phi is 0; the origin maps to all zeros.
    """
    x, y, z = (float(c) for c in p)
    rho = np.hypot(x, y)
    r = float(np.sqrt(rho * rho + z * z))
    if r == 0.0:
        theta = phi = 0.0
    else:
        theta = float(np.arctan2(rho, z))
        phi = 0.0 if rho / r < POLE_EPS else float(np.arctan2(y, x) % (2 * np.pi))
    m = np.array([[np.sin(theta), np.sin(phi)], [np.cos(theta), np.cos(phi)]])
    return r, theta, phi, m


def from_spherical(r: float, theta: float, phi: float) -> np.ndarray:
    return r * np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])


def tree_normalization(segments: list[Segment]) -> tuple[np.ndarray, float]:
    """Bounding-box centre and diagonal over all segment points."""
    allp = np.vstack([s.points for s in segments])
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    return (lo + hi) / 2.0, diag if diag > 0 else 1.0


def _midpoint(points: np.ndarray) -> np.ndarray:
    cum = arc_lengths(points)
    return _point_at(points, cum, cum[-1] / 2.0)


def position_features(seg: Segment, scale: float = 1.0) -> np.ndarray:
    """35-vector: first/centre/last point, first-to-last direction and start tangent.

    Each block is 3 coordinates followed by the flattened S2 matrix
    ``[sin t, sin p, cos t, cos p]``.  Points are expressed in the segment's
    local frame and divided by ``scale`` (the tree's bounding-box diagonal);
    the two directions stay in tree coordinates, the first-to-last one also
    divided by ``scale`` and the tangent as a unit vector.
    """
    pts = seg.points
    frame = local_frame(seg)
    blocks = []
    for p in (pts[0], _midpoint(pts), pts[-1]):
        q = frame.to_local(p)
        blocks.append(np.concatenate([q / scale, sct_s2(q)[3].ravel()]))
    direction = (pts[-1] - pts[0]) / scale
    tangent = (pts[1] - pts[0]) / np.linalg.norm(pts[1] - pts[0])
    for v in (direction, tangent):
        blocks.append(np.concatenate([v, sct_s2(v)[3].ravel()]))
    return np.concatenate(blocks)


def tree_features(segments: list[Segment]) -> np.ndarray:
    if not segments:
        return np.zeros((0, N_FEATURES))
    _, scale = tree_normalization(segments)
    return np.vstack([position_features(s, scale) for s in segments])


# --------------------------------------------------------------------------- file format

def write_centerlines(path: str | Path, lines: list[Centerline], tree_id: str | None = None) -> Path:
    doc = {
        "version": CENTERLINE_FORMAT_VERSION,
        "units": "voxel",
        "tree_id": tree_id,
        "branches": [{"label": l.label, "points": l.points.round(6).tolist()} for l in lines],
    }
    path = Path(path)
    path.write_text(json.dumps(doc))
    return path


def read_centerlines(path: str | Path) -> list[Centerline]:
    doc = json.loads(Path(path).read_text())
    if "version" not in doc:
        raise ValueError(f"{path}: centerline document has no version field")
    if doc["version"] != CENTERLINE_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported centerline version {doc['version']!r}")
    return [Centerline(np.array(b["points"], dtype=np.float64), b.get("label")) for b in doc["branches"]]
