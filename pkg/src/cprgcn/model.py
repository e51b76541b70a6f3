"""Conditional partial-residual GCN: graph blocks over (position, condition) features.

Node features are ``H0 = [x | y]`` with ``x`` the 35 position features and
``y`` the image condition vector.  Each block computes
``relu(A_hat @ H @ W) + x @ W_s``; only the position features ride the
shortcut, the conditions enter once through ``H0``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.linalg import block_diag

from .conditions import ConditionConfig, encode_segments, init_condition_params
from .geometry import CLASSES, N_FEATURES
from .tensor import (
    DimensionError,
    Tensor,
    concat,
    load_checkpoint,
    matmul,
    no_grad,
    relu,
    save_checkpoint,
    softmax_cross_entropy,
    tensor,
)

SHORTCUT_MODES = ("per_block", "single", "none")


class InvalidAdjacencyError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_features: int = N_FEATURES
    width: int = 256
    n_blocks: int = 3
    head_hidden: int = 128
    n_classes: int = len(CLASSES)
    directed: bool = True
    shortcut: str = "per_block"
    use_conditions: bool = True
    condition: ConditionConfig = field(default_factory=ConditionConfig)

    def __post_init__(self):
        if isinstance(self.condition, dict):
            cond = dict(self.condition)
            if "channels" in cond:
                cond["channels"] = tuple(cond["channels"])
            self.condition = ConditionConfig(**cond)
        if self.shortcut not in SHORTCUT_MODES:
            raise ValueError(f"shortcut must be one of {SHORTCUT_MODES}, got {self.shortcut!r}")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")

    @property
    def input_dim(self) -> int:
        return self.n_features + self.condition.output_dim

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["condition"]["channels"] = list(d["condition"]["channels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------- graph operators


def normalize_adjacency(a, directed: bool = True) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2`` with D from row sums; undirected mode symmetrizes A first."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidAdjacencyError(f"adjacency must be square, got {a.shape}")
    if np.any(a < 0):
        raise InvalidAdjacencyError("adjacency has negative entries")
    if np.any(np.diag(a) != 0):
        raise InvalidAdjacencyError("adjacency must have a zero diagonal")
    if not directed:
        a = np.maximum(a, a.T)
    at = a + np.eye(len(a))
    inv = 1.0 / np.sqrt(at.sum(axis=1))
    return inv[:, None] * at * inv[None, :]


def gcn_block(h: Tensor, a_hat, w: Tensor) -> Tensor:
    """``relu(A_hat @ H @ W)``."""
    a_hat = a_hat if isinstance(a_hat, Tensor) else tensor(a_hat)
    if a_hat.shape != (h.shape[0], h.shape[0]):
        raise DimensionError(f"gcn_block: A_hat {a_hat.shape} for {h.shape[0]} nodes")
    return relu(matmul(matmul(a_hat, h), w))


def partial_residual_forward(x: Tensor, y: Tensor, a_hat, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Stack ``cfg.n_blocks`` blocks over ``H0 = [x | y]`` with the configured shortcut."""
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"x has {x.shape[0]} rows, y has {y.shape[0]}")
    a_hat = tensor(np.asarray(a_hat, dtype=np.float64))
    h = concat([x, y], axis=1)
    for block in range(cfg.n_blocks):
        h = gcn_block(h, a_hat, params[f"gcn.{block}.w"])
        if cfg.shortcut == "per_block":
            h = h + matmul(x, params[f"shortcut.{block}.w"])
    if cfg.shortcut == "single":
        h = h + matmul(x, params["shortcut.0.w"])
    return h


def classify(h: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Two-layer head; returns (n, n_classes) logits."""
    z = relu(matmul(h, params["head.fc1.w"]) + params["head.fc1.b"])
    return matmul(z, params["head.fc2.w"]) + params["head.fc2.b"]


def predict_labels(logits) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)


# --------------------------------------------------------------------------- batches


@dataclass
class TreeSample:
    """One coronary tree ready for the network."""

    tree_id: str
    adjacency: np.ndarray
    features: np.ndarray
    cubes: list[np.ndarray] | None = None
    labels: np.ndarray | None = None


@dataclass
class GraphBatch:
    adjacency: np.ndarray
    features: np.ndarray
    cubes: list[np.ndarray] | None
    labels: np.ndarray | None
    sizes: list[int]

    @property
    def n_nodes(self) -> int:
        return len(self.features)

    def node_weights(self) -> np.ndarray:
        """Per-node weight ``1/n_tree`` so each tree counts once in the loss."""
        return np.concatenate([np.full(n, 1.0 / n) for n in self.sizes])


def collate(trees: list[TreeSample]) -> GraphBatch:
    """Block-diagonal union of several trees."""
    if not trees:
        raise ValueError("cannot collate an empty list of trees")
    sizes = [len(t.features) for t in trees]
    for t in trees:
        n = len(t.features)
        if t.adjacency.shape != (n, n):
            raise DimensionError(f"tree {t.tree_id}: adjacency {t.adjacency.shape} for {n} nodes")
    adjacency = block_diag(*[t.adjacency for t in trees])
    features = np.vstack([t.features for t in trees])
    cubes = None
    if all(t.cubes is not None for t in trees):
        cubes = [c for t in trees for c in t.cubes]
    labels = None
    if all(t.labels is not None for t in trees):
        labels = np.concatenate([t.labels for t in trees]).astype(np.int64)
    return GraphBatch(adjacency, features, cubes, labels, sizes)


# --------------------------------------------------------------------------- model


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); condition network first, then GCN and head."""
    params: dict[str, Tensor] = {}

    def uni(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    if cfg.use_conditions:
        params.update(init_condition_params(cfg.condition, rng))
    d = cfg.input_dim
    for block in range(cfg.n_blocks):
        params[f"gcn.{block}.w"] = uni((d, cfg.width), d)
        d = cfg.width
    n_short = {"per_block": cfg.n_blocks, "single": 1, "none": 0}[cfg.shortcut]
    for block in range(n_short):
        params[f"shortcut.{block}.w"] = uni((cfg.n_features, cfg.width), cfg.n_features)
    params["head.fc1.w"] = uni((cfg.width, cfg.head_hidden), cfg.width)
    params["head.fc1.b"] = uni((cfg.head_hidden,), cfg.width)
    params["head.fc2.w"] = uni((cfg.head_hidden, cfg.n_classes), cfg.head_hidden)
    params["head.fc2.b"] = uni((cfg.n_classes,), cfg.head_hidden)
    return params


class CprGcn:
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.cfg = cfg or ModelConfig()
        self.params = params if params is not None else init_params(self.cfg, np.random.default_rng(seed))

    def conditions(self, batch: GraphBatch) -> Tensor:
        if not self.cfg.use_conditions:
            return tensor(np.zeros((batch.n_nodes, self.cfg.condition.output_dim)))
        if batch.cubes is None:
            raise ValueError("this model uses image conditions but the batch carries no cubes")
        return encode_segments(batch.cubes, self.params, self.cfg.condition)

    def logits(self, batch: GraphBatch) -> Tensor:
        a_hat = normalize_adjacency(batch.adjacency, self.cfg.directed)
        y = self.conditions(batch)
        h = partial_residual_forward(tensor(batch.features), y, a_hat, self.params, self.cfg)
        return classify(h, self.params)

    def loss(self, batch: GraphBatch, reduction: str = "tree") -> Tensor:
        return forward_loss(self, batch, reduction)

    def predict(self, batch: GraphBatch) -> np.ndarray:
        with no_grad():
            return predict_labels(self.logits(batch))

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        path = Path(path)
        meta = {"model_config": self.cfg.to_dict(), "classes": list(CLASSES)}
        meta.update(extra or {})
        manifest = save_checkpoint({k: v.data for k, v in self.params.items()}, path, extra=meta)
        manifest.with_suffix(".yaml").write_text(yaml.safe_dump(meta, sort_keys=False))
        return manifest

    @classmethod
    def load(cls, path: str | Path) -> "CprGcn":
        arrays, extra = load_checkpoint(path)
        cfg = ModelConfig.from_dict(extra["model_config"])
        params = {k: tensor(v, requires_grad=True) for k, v in arrays.items()}
        expected = set(init_params(cfg, np.random.default_rng(0)))
        if set(params) != expected:
            raise ValueError(f"checkpoint parameters {sorted(set(params) ^ expected)} do not match the config")
        return cls(cfg, params=params)


def forward_loss(model: CprGcn, batch: GraphBatch, reduction: str = "tree") -> Tensor:
    """Cross-entropy over all nodes of the batch.

    ``reduction="tree"`` averages per-tree node means, so a block-diagonal
    batch reproduces the mean of single-tree losses exactly; ``"node"``
    weighs every node equally.
    """
    if batch.labels is None:
        raise ValueError("batch has no ground-truth labels")
    if len(batch.labels) != batch.n_nodes:
        raise DimensionError(f"{len(batch.labels)} labels for {batch.n_nodes} nodes")
    if reduction not in ("tree", "node"):
        raise ValueError(f"unknown reduction {reduction!r}")
    weights = batch.node_weights() if reduction == "tree" else None
    return softmax_cross_entropy(model.logits(batch), batch.labels, weights)
