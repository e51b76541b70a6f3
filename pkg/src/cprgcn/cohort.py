"""Synthetic coronary trees, their rasterized volumes and the main-branch removal attack.

Coordinates follow a loose anatomical frame: +x patient left, +y anterior,
+z superior.  Every branch is a smooth curve through a few jittered
control legs; children start exactly on their parent's centerline.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conditions import Volume, write_volume
from .geometry import (
    Centerline,
    arc_lengths,
    catmull_rom_smooth,
    read_centerlines,
    resample_uniform,
    split_into_segments,
    write_centerlines,
)

# parent rules of the coronary anatomy; None marks a root
PARENT_RULES = {
    "LM": None, "RCA": None,
    "LAD": "LM", "LCX": "LM", "RI": "LM",
    "D": "LAD", "S": "LAD", "OM": "LCX",
    "AM": "RCA", "R-PDA": "RCA", "R-PLB": "RCA",
}
MAX_COUNT = {"LM": 1, "RCA": 1, "LAD": 1, "LCX": 1, "RI": 1, "D": 3, "S": 2, "OM": 2, "AM": 1, "R-PDA": 1, "R-PLB": 1}
REQUIRED = ("LM", "LAD", "RCA")

# label -> (legs as direction vectors, length, radius) at a 64-voxel reference size
SHAPES = {
    "LM": ([(1.0, 0.3, -0.2)], 8.0, 3.0),
    "LAD": ([(0.3, 1.0, -0.6), (0.2, 0.6, -1.0)], 34.0, 2.4),
    "LCX": ([(0.5, -0.6, -0.3), (0.3, -1.0, -0.6)], 26.0, 2.2),
    "RI": ([(0.9, 0.4, -0.8)], 16.0, 1.8),
    "D": ([(1.0, 0.4, -0.6)], 12.0, 1.6),
    "S": ([(-0.8, 0.2, -0.6)], 8.0, 1.0),
    "OM": ([(0.6, -0.2, -1.0)], 14.0, 1.5),
    "RCA": ([(-1.0, 0.4, -0.3), (-0.4, 0.0, -1.0), (0.3, -1.0, -0.4)], 40.0, 2.6),
    "AM": ([(-0.4, 1.0, -0.6)], 12.0, 1.3),
    "R-PDA": ([(0.5, -0.1, -1.0)], 14.0, 1.4),
    "R-PLB": ([(0.9, -0.6, 0.1)], 12.0, 1.7),
}
ROOT_OFFSETS = {"LM": (2.0, -3.0, 19.0), "RCA": (-5.0, -2.0, 18.0)}
LENGTH_SCALE = 0.8
# candidate attachment positions as fractions of the parent's length
SLOTS = {"LAD": (0.2, 0.35, 0.5, 0.65, 0.8), "LCX": (0.35, 0.55, 0.75), "RCA_mid": (0.45, 0.55)}


@dataclass
class TreeTemplate:
    """Presence probabilities; counted branches use a binomial over their maximum."""

    p_lcx: float = 0.95
    p_ri: float = 0.3
    p_d: float = 0.5
    p_s: float = 0.45
    p_om: float = 0.4
    p_am: float = 0.7
    p_pda: float = 0.85
    p_plb: float = 0.7
    length_jitter: float = 0.2
    angle_jitter_deg: float = 25.0
    rotation_deg: float = 10.0
    shift: float = 3.0
    radius_jitter: float = 0.2

    @classmethod
    def maximal(cls) -> "TreeTemplate":
        return cls(**{f.name: 1.0 for f in dataclasses.fields(cls) if f.name.startswith("p_")})

    @classmethod
    def minimal(cls) -> "TreeTemplate":
        return cls(**{f.name: 0.0 for f in dataclasses.fields(cls) if f.name.startswith("p_")})


@dataclass
class CohortSpec:
    n_trees: int = 200
    seed: int = 0
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: float = 0.5
    noise: float = 0.3
    contrast: float = 1.0
    background: float = 0.0
    attack_fraction: float = 0.2
    template: TreeTemplate = field(default_factory=TreeTemplate)

    def __post_init__(self):
        if isinstance(self.template, dict):
            self.template = TreeTemplate(**self.template)
        self.dims = tuple(int(d) for d in self.dims)
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 0.0 <= self.attack_fraction <= 1.0:
            raise ValueError("attack_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dims"] = list(self.dims)
        return d


@dataclass
class VesselTree:
    tree_id: str
    lines: list[Centerline]
    radii: list[float]
    attacked: bool = False
    clipped: bool = False

    @property
    def labels(self) -> list[str]:
        return [l.label for l in self.lines]


# --------------------------------------------------------------------------- generation


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _rotation(rng, max_deg: float) -> np.ndarray:
    axis = _unit(rng.normal(size=3))
    angle = np.deg2rad(rng.uniform(-max_deg, max_deg))
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k


def _curve(rng, start, label, template: TreeTemplate, rot, scale) -> Centerline:
    legs, length, _ = SHAPES[label]
    length *= LENGTH_SCALE * scale * rng.uniform(1 - template.length_jitter, 1 + template.length_jitter)
    pts = [np.asarray(start, dtype=np.float64)]
    for leg in legs:
        d = _rotation(rng, template.angle_jitter_deg) @ rot @ _unit(leg)
        pts.append(pts[-1] + d * length / len(legs))
    # Catmull-Rom through the legs, then dense unit spacing
    smooth = catmull_rom_smooth(Centerline(np.array(pts), label), 8)
    return resample_uniform(smooth, 1.0)


def _point_at_fraction(line: Centerline, frac: float) -> np.ndarray:
    cum = arc_lengths(line.points)
    k = int(np.argmin(np.abs(cum - frac * cum[-1])))
    return line.points[k]


def generate_tree(rng: np.random.Generator, template: TreeTemplate | None = None,
                  dims=(64, 64, 64), tree_id: str = "tree") -> VesselTree:
    """Sample one labelled tree; both coronary domains (LM and RCA) are always present."""
    t = template or TreeTemplate()
    scale = min(dims) / 64.0
    center = np.asarray(dims, dtype=np.float64) / 2.0 + rng.uniform(-t.shift, t.shift, size=3) * scale
    rot = _rotation(rng, t.rotation_deg)
    lines: list[Centerline] = []

    def add(label, start):
        line = _curve(rng, start, label, t, rot, scale)
        lines.append(line)
        return line

    def root(label):
        return center + rot @ np.asarray(ROOT_OFFSETS[label]) * scale

    lm = add("LM", root("LM"))
    lm_end = lm.points[-1]
    lad = add("LAD", lm_end)
    lcx = add("LCX", lm_end) if rng.random() < t.p_lcx else None
    if rng.random() < t.p_ri:
        add("RI", lm_end)
    n_d, n_s = rng.binomial(3, t.p_d), rng.binomial(2, t.p_s)
    slots = rng.permutation(len(SLOTS["LAD"]))[: n_d + n_s]
    for k, slot in enumerate(slots):
        frac = SLOTS["LAD"][slot] + rng.uniform(-0.03, 0.03)
        add("D" if k < n_d else "S", _point_at_fraction(lad, frac))
    if lcx is not None:
        n_om = rng.binomial(2, t.p_om)
        for slot in rng.permutation(len(SLOTS["LCX"]))[:n_om]:
            add("OM", _point_at_fraction(lcx, SLOTS["LCX"][slot] + rng.uniform(-0.03, 0.03)))

    rca = add("RCA", root("RCA"))
    if rng.random() < t.p_am:
        add("AM", _point_at_fraction(rca, rng.uniform(*SLOTS["RCA_mid"])))
    if rng.random() < t.p_pda:
        add("R-PDA", rca.points[-1])
    if rng.random() < t.p_plb:
        add("R-PLB", rca.points[-1])

    radii = [SHAPES[l.label][2] * scale * rng.uniform(1 - t.radius_jitter, 1 + t.radius_jitter) for l in lines]
    tree = VesselTree(tree_id, lines, radii)
    return _clip_to_volume(tree, dims)


def _clip_to_volume(tree: VesselTree, dims) -> VesselTree:
    hi = np.asarray(dims, dtype=np.float64) - 1.0
    lines = []
    for line in tree.lines:
        pts = np.clip(line.points, 0.0, hi)
        if np.any(pts != line.points):
            tree.clipped = True
            keep = np.concatenate([[True], np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-9])
            pts = pts[keep]
            if len(pts) < 2:
                pts = np.vstack([pts, pts[-1] + 1e-3])
        lines.append(Centerline(pts, line.label))
    tree.lines = lines
    return tree


def generate_cohort(spec: CohortSpec) -> list[VesselTree]:
    """Deterministic in (seed, spec); tree ``i`` draws from its own stream."""
    return [
        generate_tree(np.random.default_rng([spec.seed, i]), spec.template, spec.dims, f"tree{i:04d}")
        for i in range(spec.n_trees)
    ]


def rasterize_volume(tree: VesselTree, spec: CohortSpec, rng: np.random.Generator | None = None) -> Volume:
    """Gaussian tube profile ``contrast * exp(-d^2 / 2r^2)`` around each branch plus noise.

    ``d`` is the distance to the densely sampled centerline (max over
    samples), so overlapping vessels do not add up.
    """
    dims = spec.dims
    vol = np.zeros(dims)
    for line, r in zip(tree.lines, tree.radii):
        dense = resample_uniform(line, 0.5).points
        reach = int(np.ceil(3 * r))
        for p in dense:
            c = np.round(p).astype(int)
            lo = np.maximum(c - reach, 0)
            hi = np.minimum(c + reach + 1, dims)
            if np.any(hi <= lo):
                continue
            axes = [np.arange(a, b) - q for a, b, q in zip(lo, hi, p)]
            d2 = axes[0][:, None, None] ** 2 + axes[1][None, :, None] ** 2 + axes[2][None, None, :] ** 2
            box = tuple(slice(a, b) for a, b in zip(lo, hi))
            np.maximum(vol[box], np.exp(-d2 / (2 * r * r)), out=vol[box])
    vol = spec.background + spec.contrast * vol
    if spec.noise > 0:
        rng = rng or np.random.default_rng([spec.seed, zlib.crc32(tree.tree_id.encode())])
        vol = vol + rng.normal(0.0, spec.noise, size=dims)
    return Volume(vol, (spec.spacing,) * 3)


# --------------------------------------------------------------------------- attack


def apply_data_attack(trees: list[VesselTree], fraction: float, seed: int = 0) -> list[VesselTree]:
    """Delete the LM and RCA centerlines from ``round(fraction * n)`` uniformly chosen trees.

    Children of a deleted branch stay and become roots; volumes are not
    touched.  Returns new tree objects; the input list is left as is.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    n_hit = int(round(fraction * len(trees)))
    hit = set(np.random.default_rng([seed, 7]).choice(len(trees), size=n_hit, replace=False).tolist())
    out = []
    for i, tree in enumerate(trees):
        if i not in hit:
            out.append(VesselTree(tree.tree_id, list(tree.lines), list(tree.radii), tree.attacked, tree.clipped))
            continue
        keep = [k for k, l in enumerate(tree.lines) if l.label not in ("LM", "RCA")]
        out.append(VesselTree(tree.tree_id, [tree.lines[k] for k in keep], [tree.radii[k] for k in keep],
                              True, tree.clipped))
    return out


# --------------------------------------------------------------------------- validation


def validate_tree(lines: list[Centerline], merge_radius: float = 3.0, allow_missing_roots: bool = False) -> list[str]:
    """Check the anatomy rules on geometry alone; returns a list of violations.

    Each branch's parent is recovered from the segment graph (not from the
    generator), then compared with :data:`PARENT_RULES`.
    """
    problems = []
    labels = [l.label for l in lines]
    for lab, n in MAX_COUNT.items():
        if labels.count(lab) > n:
            problems.append(f"{labels.count(lab)} x {lab} exceeds {n}")
    for lab in labels:
        if lab not in PARENT_RULES:
            problems.append(f"unknown label {lab!r}")
    if not allow_missing_roots:
        for lab in REQUIRED:
            if lab not in labels:
                problems.append(f"missing {lab}")
    segs = split_into_segments(lines, merge_radius)
    first = {}
    for k, s in enumerate(segs):
        first.setdefault(s.branch, k)
    for b, k in first.items():
        p = segs[k].parent
        got = None if p is None else labels[segs[p].branch]
        want = PARENT_RULES.get(labels[b])
        if got != want and not (allow_missing_roots and got is None and want not in labels):
            problems.append(f"{labels[b]} (branch {b}) hangs off {got}, expected {want}")
    return problems


# --------------------------------------------------------------------------- files


def write_cohort(out_dir: str | Path, spec: CohortSpec, trees: list[VesselTree] | None = None,
                 with_volumes: bool = True) -> Path:
    """Write centerlines, volumes and ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trees = trees if trees is not None else generate_cohort(spec)
    entries = []
    for tree in trees:
        cl = write_centerlines(out / f"{tree.tree_id}.centerlines.json", tree.lines, tree.tree_id)
        doc = json.loads(cl.read_text())
        for branch, r in zip(doc["branches"], tree.radii):
            branch["radius"] = round(float(r), 6)
        cl.write_text(json.dumps(doc))
        entry = {
            "tree_id": tree.tree_id,
            "centerlines": cl.name,
            "labels": tree.labels,
            "attacked": tree.attacked,
            "clipped": tree.clipped,
        }
        if with_volumes:
            entry["volume"] = write_volume(out / f"{tree.tree_id}.volume", rasterize_volume(tree, spec)).name
        entries.append(entry)
    manifest = {"version": 1, "spec": spec.to_dict(), "trees": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_cohort(manifest_path: str | Path) -> tuple[CohortSpec, list[VesselTree], dict[str, Path]]:
    """Load trees and the volume path per tree id from a manifest."""
    path = Path(manifest_path)
    doc = json.loads(path.read_text())
    spec = CohortSpec(**doc["spec"])
    trees, volumes = [], {}
    for e in doc["trees"]:
        cl_path = path.parent / e["centerlines"]
        lines = read_centerlines(cl_path)
        radii = [b.get("radius", 1.0) for b in json.loads(cl_path.read_text())["branches"]]
        trees.append(VesselTree(e["tree_id"], lines, radii, e.get("attacked", False), e.get("clipped", False)))
        if "volume" in e:
            volumes[e["tree_id"]] = path.parent / e["volume"]
    return spec, trees, volumes
