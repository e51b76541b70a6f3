"""Image-domain condition vectors: cubes along each segment, a 3D CNN, then a BiLSTM.

Volumes are indexed ``data[x, y, z]`` in voxel units, matching the
centerline coordinates.  A segment with ``m`` control points yields ``m``
cubes of side ``2 * gamma``; the CNN maps each to a flat feature and the
stacked bidirectional LSTM reduces the sequence to one vector per segment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import DegenerateInputError
from .tensor import DimensionError, Tensor, concat, conv3d, lstm_cell, maxpool3d, relu, tensor

VOLUME_FORMAT_VERSION = 1


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DimensionError(f"volume must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacings must be three positive numbers, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class ConditionConfig:
    gamma: int = 12
    channels: tuple[int, ...] = (16, 32, 64)
    lstm_layers: int = 4
    hidden: int = 128

    @property
    def cube_side(self) -> int:
        return 2 * self.gamma

    @property
    def feature_dim(self) -> int:
        side = self.cube_side // 2 ** len(self.channels)
        return self.channels[-1] * side ** 3

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden

    def validate(self):
        if self.cube_side % 2 ** len(self.channels):
            raise ValueError(f"cube side {self.cube_side} is not divisible by 2^{len(self.channels)}")
        if self.cube_side // 2 ** len(self.channels) < 1:
            raise ValueError("cube too small for the pooling chain")


# --------------------------------------------------------------------------- volumes


def resample_volume(v: Volume, target_spacing: float = 0.5) -> Volume:
    """Trilinear resampling to isotropic ``target_spacing`` mm.

    Output voxel ``i`` samples physical position ``i * target_spacing``;
    extents are ``round(dims * spacing / target_spacing)``.
    """
    if target_spacing <= 0:
        raise ValueError("target_spacing must be positive")
    if v.data.size == 0:
        raise DegenerateInputError("cannot resample an empty volume")
    src = np.asarray(v.spacing)
    dims = np.maximum(1, np.round(np.asarray(v.dims) * src / target_spacing).astype(int))
    if np.all(src == target_spacing):
        return Volume(v.data.copy(), (target_spacing,) * 3)
    grids = [np.arange(n) * target_spacing / s for n, s in zip(dims, src)]
    coords = np.meshgrid(*grids, indexing="ij")
    out = ndimage.map_coordinates(v.data, coords, order=1, mode="nearest")
    return Volume(out, (target_spacing,) * 3)


def normalize_intensity(v: Volume) -> Volume:
    """Zero mean, unit variance (a constant volume just gets centred)."""
    std = v.data.std()
    return Volume((v.data - v.data.mean()) / (std if std > 0 else 1.0), v.spacing)


def extract_cubes(v: Volume, points: np.ndarray, gamma: int = 12, fill: float = 0.0) -> np.ndarray:
    """Cubes of side ``2*gamma`` centred on the rounded control points.

    Returns an array (m, 1, 2g, 2g, 2g); voxels outside the volume take ``fill``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    side = 2 * gamma
    out = np.full((len(points), 1, side, side, side), fill, dtype=np.float64)
    dims = np.asarray(v.dims)
    for k, p in enumerate(points):
        lo = np.round(p).astype(int) - gamma
        hi = lo + side
        slo, shi = np.maximum(lo, 0), np.minimum(hi, dims)
        if np.any(shi <= slo):
            continue
        dst = tuple(slice(a - l, b - l) for a, b, l in zip(slo, shi, lo))
        out[(k, 0) + dst] = v.data[tuple(slice(a, b) for a, b in zip(slo, shi))]
    return out


def write_volume(path: str | Path, v: Volume) -> Path:
    """Write ``<path>.json`` header and ``<path>.raw`` little-endian float32 payload."""
    base = Path(path).with_suffix("")
    raw = base.with_suffix(".raw")
    v.data.astype("<f4").tofile(raw)
    header = {
        "version": VOLUME_FORMAT_VERSION,
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "dtype": "float32",
        "byte_order": "little",
        "axis_order": "xyz, last axis fastest",
        "payload": raw.name,
    }
    head = base.with_suffix(".json")
    head.write_text(json.dumps(header, indent=1))
    return head


def read_volume(path: str | Path) -> Volume:
    head = Path(path).with_suffix(".json")
    header = json.loads(head.read_text())
    if header.get("version") != VOLUME_FORMAT_VERSION:
        raise ValueError(f"{head}: unsupported volume version {header.get('version')!r}")
    dtype = np.dtype(header["dtype"]).newbyteorder("<" if header["byte_order"] == "little" else ">")
    data = np.fromfile(head.parent / header["payload"], dtype=dtype)
    dims = tuple(header["dims"])
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{head}: payload has {data.size} values, header says {dims}")
    return Volume(data.reshape(dims).astype(np.float64), tuple(header["spacing"]))


# --------------------------------------------------------------------------- networks


def init_condition_params(cfg: ConditionConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    cfg.validate()
    params: dict[str, Tensor] = {}

    def uni(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    cin = 1
    for layer, cout in enumerate(cfg.channels):
        params[f"cnn.{layer}.w"] = uni((cout, cin, 3, 3, 3), cin * 27)
        params[f"cnn.{layer}.b"] = uni((cout,), cin * 27)
        cin = cout
    d, k = cfg.feature_dim, cfg.hidden
    for layer in range(cfg.lstm_layers):
        for direction in ("fwd", "bwd"):
            pre = f"lstm.{layer}.{direction}"
            params[f"{pre}.w_ih"] = uni((d, 4 * k), d)
            params[f"{pre}.w_hh"] = uni((k, 4 * k), k)
            params[f"{pre}.b"] = uni((4 * k,), k)
        d = 2 * k
    return params


def cnn_encode(cubes, params: dict[str, Tensor], cfg: ConditionConfig) -> Tensor:
    """(N, 1, S, S, S) cubes -> (N, feature_dim); conv + ReLU + 2x pool per layer."""
    x = cubes if isinstance(cubes, Tensor) else tensor(np.asarray(cubes, dtype=np.float64))
    side = cfg.cube_side
    if x.ndim != 5 or x.shape[1:] != (1, side, side, side):
        raise DimensionError(f"cnn_encode expects (N, 1, {side}, {side}, {side}) cubes, got {x.shape}")
    for layer in range(len(cfg.channels)):
        x = maxpool3d(relu(conv3d(x, params[f"cnn.{layer}.w"], params[f"cnn.{layer}.b"])))
    return x.reshape(x.shape[0], -1)


def bilstm_summarize(steps: list[Tensor], lengths, params: dict[str, Tensor], cfg: ConditionConfig) -> Tensor:
    """Stacked BiLSTM over a padded batch given as a list of (B, d) step inputs.

    Steps at or beyond an item's length are padding: the recurrent state is
    carried through them unchanged, so the forward summary is the state at
    the true last step and the backward pass starts fresh at it.  Returns
    (B, 2*hidden) = concat(top forward final, top backward final).
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    if len(steps) == 0 or lengths.size == 0 or lengths.min() < 1:
        raise DegenerateInputError("bilstm_summarize needs non-empty sequences")
    if lengths.max() > len(steps):
        raise DimensionError(f"lengths up to {lengths.max()} but only {len(steps)} steps given")
    n_steps, batch, k = int(lengths.max()), len(lengths), cfg.hidden
    masks = [None if np.all(lengths > t) else lengths > t for t in range(n_steps)]
    xs = steps[:n_steps]
    zeros = np.zeros((batch, k))
    for layer in range(cfg.lstm_layers):
        outs = {}
        finals = {}
        for direction, order in (("fwd", range(n_steps)), ("bwd", range(n_steps - 1, -1, -1))):
            pre = f"lstm.{layer}.{direction}"
            h, c = tensor(zeros), tensor(zeros)
            seq = [None] * n_steps
            for t in order:
                h, c = lstm_cell(xs[t], h, c, params[f"{pre}.w_ih"], params[f"{pre}.w_hh"],
                                 params[f"{pre}.b"], masks[t])
                seq[t] = h
            outs[direction], finals[direction] = seq, h
        if layer + 1 < cfg.lstm_layers:
            xs = [concat([outs["fwd"][t], outs["bwd"][t]], axis=1) for t in range(n_steps)]
    return concat([finals["fwd"], finals["bwd"]], axis=1)


def encode_segments(cube_seqs: list[np.ndarray], params: dict[str, Tensor], cfg: ConditionConfig) -> Tensor:
    """Condition vectors for a list of per-segment cube arrays (m_i, 1, S, S, S).

    All cubes go through the CNN in one batch; the features are then
    scattered into a padded step list for a single batched BiLSTM pass.
    """
    lengths = np.array([len(c) for c in cube_seqs], dtype=np.int64)
    if lengths.size == 0:
        return tensor(np.zeros((0, cfg.output_dim)))
    if lengths.min() < 1:
        raise DegenerateInputError("every segment needs at least one cube")
    feats = cnn_encode(np.concatenate(cube_seqs, axis=0), params, cfg)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    steps = []
    for t in range(int(lengths.max())):
        # padded rows reuse the item's last cube; the mask discards them
        rows = offsets + np.minimum(t, lengths - 1)
        steps.append(feats[rows])
    return bilstm_summarize(steps, lengths, params, cfg)
