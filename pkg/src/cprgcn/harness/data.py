"""Turn cohort trees and volumes into network-ready samples."""

from __future__ import annotations

import numpy as np

from ..cohort import CohortSpec, VesselTree, rasterize_volume
from ..conditions import Volume, extract_cubes, resample_volume
from ..geometry import CLASS_INDEX, build_graph, segment_tree, tree_features
from ..model import TreeSample
from .config import DataConfig


def prepare_tree(tree: VesselTree, volume: Volume | None, data_cfg: DataConfig, gamma: int,
                 background: float = 0.0) -> TreeSample:
    """Segments, graph, 35-d features, labels and (when a volume is given) cubes.

    Cubes are cut from the volume resampled to ``target_spacing`` with the
    cohort background as fill, then shifted and scaled by the volume's
    mean and standard deviation.
    """
    segments = segment_tree(tree.lines, data_cfg.resample_spacing, data_cfg.merge_radius,
                            data_cfg.samples_per_span)
    graph = build_graph(segments)
    labels = np.array([CLASS_INDEX[s.label] for s in segments], dtype=np.int64)
    cubes = None
    if volume is not None:
        factor = np.asarray(volume.spacing) / data_cfg.target_spacing
        vol = resample_volume(volume, data_cfg.target_spacing)
        mean, std = vol.data.mean(), vol.data.std()
        std = std if std > 0 else 1.0
        cubes = [(extract_cubes(vol, s.points * factor, gamma, background) - mean) / std for s in segments]
    return TreeSample(tree.tree_id, graph.adjacency.astype(np.float64), tree_features(segments), cubes, labels)


def prepare_cohort(trees: list[VesselTree], spec: CohortSpec, data_cfg: DataConfig, gamma: int,
                   with_cubes: bool = True, volumes: dict | None = None) -> list[TreeSample]:
    """Prepare every tree; volumes are rasterized on the fly unless given by tree id."""
    out = []
    for tree in trees:
        vol = None
        if with_cubes:
            vol = volumes[tree.tree_id] if volumes and tree.tree_id in volumes else rasterize_volume(tree, spec)
        out.append(prepare_tree(tree, vol, data_cfg, gamma, spec.background))
    return out
