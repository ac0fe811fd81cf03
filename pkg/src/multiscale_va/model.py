"""Multi-scale dual-encoder regressor for (valence, arousal).

Each of three branches sees the raw window average-pooled by 1, 2 or 4. A branch
produces ``[temporal mean of transformer tokens | mean random Fourier features]``;
the three branch vectors are concatenated and passed through a ReLU MLP head
with two outputs, ordered (valence, arousal).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Literal

import numpy as np

from . import tensor as T
from .errors import DimensionError, InputError, ParameterError
from .gaussian import GaussianProjection, encode_sequence, sample_projection
from .layers import (
    N_CHANNELS,
    AttentionParams,
    BlockParams,
    EmbeddingParams,
    embed_and_encode,
    encoder_stack,
    linear,
)
from .tensor import Tensor

SCALES = (1, 2, 4)
SCORE_MIN, SCORE_MAX = 0.5, 9.5
NEUTRAL = 5.0

CHECKPOINT_FORMAT = "multiscale-va-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int = 128
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    n_gauss_features: int = 32
    gauss_sigma: float = 1.0
    scales: tuple[int, ...] = SCALES
    head_widths: tuple[int, ...] = (256, 64)
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(self.scales))
        object.__setattr__(self, "head_widths", tuple(self.head_widths))
        if self.scales != SCALES:
            raise ParameterError(f"scales must be {SCALES}, got {self.scales}")
        if self.seq_len <= 0 or self.seq_len % 4:
            raise ParameterError(f"seq_len must be a positive multiple of 4, got {self.seq_len}")
        if self.d_model <= 0 or self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ParameterError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.n_layers < 0 or self.d_ff <= 0 or self.n_gauss_features <= 0:
            raise ParameterError("n_layers must be >= 0; d_ff and n_gauss_features positive")
        if not self.gauss_sigma > 0 or not self.ln_eps > 0:
            raise ParameterError("gauss_sigma and ln_eps must be positive")
        if any(w <= 0 for w in self.head_widths):
            raise ParameterError(f"head widths must be positive, got {self.head_widths}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def branch_width(self) -> int:
        return self.d_model + self.n_gauss_features

    @property
    def fused_width(self) -> int:
        return len(self.scales) * self.branch_width

    @classmethod
    def preset(cls, name: str, **overrides) -> ModelConfig:
        try:
            base = PRESETS[name]
        except KeyError:
            raise ParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return replace(base, **overrides) if overrides else base

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        d["head_widths"] = list(self.head_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "full": ModelConfig(seq_len=2048, d_model=1024, n_layers=4, n_heads=4, d_ff=4096,
                         n_gauss_features=1024),
    "desk": ModelConfig(seq_len=128, d_model=32, n_layers=2, n_heads=2, d_ff=128, n_gauss_features=32),
    "tiny": ModelConfig(seq_len=32, d_model=16, n_layers=2, n_heads=2, d_ff=64, n_gauss_features=8),
}


@dataclass(frozen=True)
class Prediction:
    valence: float
    arousal: float


@dataclass(eq=False)
class ModelParams:
    """Trainable arrays by name plus one frozen Gaussian projection per scale."""

    config: ModelConfig
    arrays: dict[str, np.ndarray]
    projections: dict[int, GaussianProjection] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.arrays)

    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> ModelParams:
        return ModelParams(self.config, dict(arrays), self.projections)

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return T.leaves(self.arrays.items(), requires_grad=requires_grad)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (self.config == other.config
                and list(self.arrays) == list(other.arrays)
                and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
                and self.projections == other.projections)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape for every trainable parameter."""
    d, dh, dff = config.d_model, config.d_head, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {}
    for s in config.scales:
        p = f"scale{s}"
        shapes[f"{p}.embed.projection"] = (N_CHANNELS, d)
        shapes[f"{p}.embed.bias"] = (d,)
        for layer in range(config.n_layers):
            b = f"{p}.block{layer}"
            for h in range(config.n_heads):
                for kind in ("query", "key", "value"):
                    shapes[f"{b}.attn.{kind}{h}"] = (d, dh)
            shapes[f"{b}.attn.output"] = (config.n_heads * dh, d)
            shapes[f"{b}.ln1.gamma"] = (d,)
            shapes[f"{b}.ln1.beta"] = (d,)
            shapes[f"{b}.ln2.gamma"] = (d,)
            shapes[f"{b}.ln2.beta"] = (d,)
            shapes[f"{b}.mlp.w1"] = (d, dff)
            shapes[f"{b}.mlp.b1"] = (dff,)
            shapes[f"{b}.mlp.w2"] = (dff, d)
            shapes[f"{b}.mlp.b2"] = (d,)
    widths = [config.fused_width, *config.head_widths, 2]
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        shapes[f"head.fc{i}.weight"] = (fan_in, fan_out)
        shapes[f"head.fc{i}.bias"] = (fan_out,)
    return shapes


def projection_seed(config: ModelConfig, scale: int) -> int:
    return config.seed * 1009 + scale


def init_params(config: ModelConfig) -> ModelParams:
    """Seeded Glorot-uniform weights, zero biases, unit LN gains.

    The final output bias starts at the neutral score 5.0 so training begins
    from the centre of the valid range.
    """
    rng = np.random.default_rng(config.seed)
    shapes = parameter_shapes(config)
    n_fc = len(config.head_widths) + 1
    arrays: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
            if name == f"head.fc{n_fc - 1}.bias":
                arr[:] = NEUTRAL
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        arrays[name] = arr
    projections = {
        s: sample_projection(projection_seed(config, s), N_CHANNELS, config.n_gauss_features,
                             config.gauss_sigma)
        for s in config.scales
    }
    return ModelParams(config, arrays, projections)


def _embedding(tensors: dict[str, Tensor], scale: int) -> EmbeddingParams:
    p = f"scale{scale}.embed"
    return EmbeddingParams(tensors[f"{p}.projection"], tensors[f"{p}.bias"])


def _blocks(tensors: dict[str, Tensor], config: ModelConfig, scale: int) -> list[BlockParams]:
    blocks = []
    for layer in range(config.n_layers):
        b = f"scale{scale}.block{layer}"
        heads = range(config.n_heads)
        attn = AttentionParams(
            query=tuple(tensors[f"{b}.attn.query{h}"] for h in heads),
            key=tuple(tensors[f"{b}.attn.key{h}"] for h in heads),
            value=tuple(tensors[f"{b}.attn.value{h}"] for h in heads),
            output=tensors[f"{b}.attn.output"],
        )
        blocks.append(BlockParams(
            attention=attn,
            ln1_gamma=tensors[f"{b}.ln1.gamma"], ln1_beta=tensors[f"{b}.ln1.beta"],
            ln2_gamma=tensors[f"{b}.ln2.gamma"], ln2_beta=tensors[f"{b}.ln2.beta"],
            mlp_w1=tensors[f"{b}.mlp.w1"], mlp_b1=tensors[f"{b}.mlp.b1"],
            mlp_w2=tensors[f"{b}.mlp.w2"], mlp_b2=tensors[f"{b}.mlp.b2"],
        ))
    return blocks


def build_pyramid(signal: Tensor) -> list[Tensor]:
    """Return the window at lengths L, L/2 and L/4 (pooling the original each time)."""
    signal = T.tensor(signal)
    length = signal.shape[0]
    if length % 4:
        raise InputError(f"signal length {length} is not divisible by 4")
    return [signal if s == 1 else T.avg_pool1d(signal, s, s) for s in SCALES]


def encode_scale(scaled: Tensor, tensors: dict[str, Tensor], params: ModelParams, scale: int) -> Tensor:
    """Branch vector ``[d_model + n_gauss_features]`` for one pyramid level."""
    config = params.config
    tokens = embed_and_encode(scaled, _embedding(tensors, scale))
    encoded = encoder_stack(tokens, _blocks(tensors, config, scale), config.ln_eps)
    gauss = encode_sequence(scaled, params.projections[scale])
    return T.concat([T.mean(encoded, axis=0), gauss], axis=-1)


def fused_features(signal, params: ModelParams, tensors: dict[str, Tensor] | None = None) -> Tensor:
    if tensors is None:
        tensors = params.leaves(requires_grad=False)
    signal = T.tensor(signal)
    if signal.shape != (params.config.seq_len, N_CHANNELS):
        raise DimensionError(
            f"expected a [{params.config.seq_len}, {N_CHANNELS}] window, got {signal.shape}"
        )
    pyramid = build_pyramid(signal)
    return T.concat([encode_scale(x, tensors, params, s) for s, x in zip(SCALES, pyramid)], axis=-1)


def head(fused: Tensor, tensors: dict[str, Tensor], config: ModelConfig) -> Tensor:
    h = T.reshape(fused, (1, -1))
    n_fc = len(config.head_widths) + 1
    for i in range(n_fc):
        h = linear(h, tensors[f"head.fc{i}.weight"], tensors[f"head.fc{i}.bias"])
        if i < n_fc - 1:
            h = T.relu(h)
    return h


def forward(signal, params: ModelParams, mode: Literal["train", "infer"] = "train",
            tensors: dict[str, Tensor] | None = None):
    """Run the model on one ``[seq_len, 8]`` window.

    ``train`` returns the raw differentiable ``[1, 2]`` output built from
    ``tensors`` (leaf tensors for ``params``; pass the same dict for every sample
    of a batch so gradients accumulate). ``infer`` returns a clamped
    :class:`Prediction`.
    """
    if mode == "train":
        if tensors is None:
            tensors = params.leaves(requires_grad=True)
        return head(fused_features(signal, params, tensors), tensors, params.config)
    if mode != "infer":
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
    if tensors is None:
        tensors = params.leaves(requires_grad=False)
    with T.no_grad():
        raw = head(fused_features(signal, params, tensors), tensors, params.config)
    v, a = clamp_scores(raw.data[0])
    return Prediction(float(v), float(a))


def clamp_scores(raw) -> np.ndarray:
    return np.clip(np.asarray(raw, dtype=np.float64), SCORE_MIN, SCORE_MAX)


def predict(windows, params: ModelParams) -> np.ndarray:
    """Clamped ``[n, 2]`` (valence, arousal) predictions for a stack of windows."""
    tensors = params.leaves(requires_grad=False)
    out = np.empty((len(windows), 2))
    with T.no_grad():
        for i, w in enumerate(windows):
            out[i] = head(fused_features(w, params, tensors), tensors, params.config).data[0]
    return clamp_scores(out)


# -- checkpoints ---------------------------------------------------------------

def _checksum(params: ModelParams) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(params.config.to_dict(), sort_keys=True).encode())
    for name, arr in params.arrays.items():
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for s in sorted(params.projections):
        proj = params.projections[s]
        h.update(f"proj{s}:{proj.seed}:{proj.sigma!r}".encode())
        h.update(np.ascontiguousarray(proj.weights, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(proj.offsets, dtype="<f8").tobytes())
    return h.hexdigest()


def checkpoint_document(params: ModelParams, extra: dict | None = None) -> dict:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "parameters": [
            {"name": k, "shape": list(v.shape), "data": v.ravel().tolist()} for k, v in params.arrays.items()
        ],
        "projections": [
            {"scale": s, "seed": p.seed, "sigma": p.sigma, "weights_shape": list(p.weights.shape),
             "weights": p.weights.ravel().tolist(), "offsets": p.offsets.tolist()}
            for s, p in sorted(params.projections.items())
        ],
        "checksum": _checksum(params),
    }
    if extra:
        doc["extra"] = extra
    return doc


def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(checkpoint_document(params, extra)))
    return path


def load_checkpoint(path) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{path} is not a checkpoint (format={doc.get('format')!r})")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise InputError(f"unsupported checkpoint version {doc.get('version')}")
    config = ModelConfig.from_dict(doc["config"])
    arrays = {p["name"]: np.array(p["data"], dtype=np.float64).reshape(p["shape"]) for p in doc["parameters"]}
    expected = parameter_shapes(config)
    if {k: v.shape for k, v in arrays.items()} != expected:
        raise InputError(f"{path}: parameter set does not match its config")
    projections = {}
    for p in doc["projections"]:
        w = np.array(p["weights"], dtype=np.float64).reshape(p["weights_shape"])
        b = np.array(p["offsets"], dtype=np.float64)
        w.flags.writeable = False
        b.flags.writeable = False
        projections[int(p["scale"])] = GaussianProjection(w, b, float(p["sigma"]), int(p["seed"]))
    params = ModelParams(config, arrays, projections)
    if _checksum(params) != doc["checksum"]:
        raise InputError(f"{path}: checksum mismatch")
    return params
