"""Two-branch sequence classifier over log-Mel maps.

Front end: two stride-2 convolutions shrink the 128x241 map by a factor of
four in time (241 -> 61 frames) and mel (128 -> 32), and a linear map folds
channels x mel into the model width. The encoder stacks layers that run two
branches over the same input: a self-attention branch with a learned
relative-offset bias for global context, and a gated depthwise-convolution
branch for local context. Branch outputs are concatenated, projected back to
the model width, and added to the layer input. Mean pooling over time and a
linear head produce three-class logits (absent / present / unknown).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"MKCK"
CHECKPOINT_VERSION = 1


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 6
    heads: int = 4
    head_dim: int = 128
    conv_kernel: int = 31
    mlp_expand: int = 2
    dropout_p: float = 0.1
    n_classes: int = 3
    n_mels: int = 128
    n_frames: int = 241
    subsample_channels: int = 32
    rel_offset_max: int = 64

    def __post_init__(self):
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if (self.mlp_expand * self.model_dim) % 2 != 0:
            raise ValueError("mlp_expand * model_dim must be even for gating")

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def subsampled_frames(self) -> int:
        return _ceil_div(_ceil_div(self.n_frames, 2), 2)

    @property
    def subsampled_mels(self) -> int:
        return _ceil_div(_ceil_div(self.n_mels, 2), 2)

    def hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:32]


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, Tensor]
    version: int = CHECKPOINT_VERSION

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())


def _param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = config.model_dim
    e = config.mlp_expand * d
    c = config.subsample_channels
    shapes: dict[str, tuple[int, ...]] = {
        "subsample.conv1.w": (c, 1, 3, 3),
        "subsample.conv1.b": (c,),
        "subsample.conv2.w": (c, c, 3, 3),
        "subsample.conv2.b": (c,),
        "subsample.proj.w": (c * config.subsampled_mels, d),
        "subsample.proj.b": (d,),
    }
    for i in range(config.layers):
        prefix = f"layers.{i}"
        shapes.update({
            f"{prefix}.attn.ln.g": (d,),
            f"{prefix}.attn.ln.b": (d,),
            f"{prefix}.attn.wq": (d, d),
            f"{prefix}.attn.bq": (d,),
            # no key bias: softmax cancels a per-row constant exactly, so a
            # key bias would be a dead parameter
            f"{prefix}.attn.wk": (d, d),
            f"{prefix}.attn.wv": (d, d),
            f"{prefix}.attn.bv": (d,),
            f"{prefix}.attn.wo": (d, d),
            f"{prefix}.attn.bo": (d,),
            f"{prefix}.attn.rel_bias": (config.heads, 2 * config.rel_offset_max + 1),
            f"{prefix}.conv.ln.g": (d,),
            f"{prefix}.conv.ln.b": (d,),
            f"{prefix}.conv.up.w": (d, e),
            f"{prefix}.conv.up.b": (e,),
            f"{prefix}.conv.dw.w": (config.conv_kernel, e // 2),
            f"{prefix}.conv.dw.b": (e // 2,),
            f"{prefix}.conv.down.w": (e // 2, d),
            f"{prefix}.conv.down.b": (d,),
            f"{prefix}.merge.w": (2 * d, d),
            f"{prefix}.merge.b": (d,),
        })
    shapes["final_ln.g"] = (d,)
    shapes["final_ln.b"] = (d,)
    shapes["head.w"] = (d, config.n_classes)
    shapes["head.b"] = (config.n_classes,)
    return shapes


def _init_value(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("b", "bq", "bk", "bv", "bo", "rel_bias"):
        return np.zeros(shape)
    if leaf == "g":  # layer-norm scale
        return np.ones(shape)
    if name.endswith(".dw.w"):
        limit = math.sqrt(3.0 / shape[0])
    elif len(shape) == 4:  # conv kernels (O, C, KH, KW)
        receptive = shape[2] * shape[3]
        limit = math.sqrt(6.0 / (shape[1] * receptive + shape[0] * receptive))
    else:
        limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.stream(seed, "init", name).uniform(-limit, limit, size=shape)


def init_state(config: ModelConfig, seed: int = 0) -> ModelState:
    params = {
        name: Tensor(_init_value(name, shape, seed), requires_grad=True)
        for name, shape in _param_shapes(config).items()
    }
    return ModelState(config=config, params=params)


def expected_param_count(config: ModelConfig) -> int:
    """Closed-form parameter count; tests assert it equals the actual total."""
    d = config.model_dim
    e = config.mlp_expand * d
    c = config.subsample_channels
    mels = config.subsampled_mels
    k = config.conv_kernel
    rel = config.heads * (2 * config.rel_offset_max + 1)
    subsample = (9 * c + c) + (9 * c * c + c) + (c * mels * d + d)
    attn = 2 * d + 4 * d * d + 3 * d + rel  # q/v/o carry biases, k does not
    conv = 2 * d + (d * e + e) + (k * (e // 2) + e // 2) + ((e // 2) * d + d)
    merge = 2 * d * d + d
    head = d * config.n_classes + config.n_classes
    return subsample + config.layers * (attn + conv + merge) + 2 * d + head


class DropoutStreams:
    """Per-site dropout streams derived from a named seed path.

    Training uses path (seed, "dropout", step) with per-sample masks.
    MC-dropout inference uses (seed, "mc", pass_index) with one mask shared
    across the batch, so each pass applies a single stochastic sub-network
    to every input and results do not depend on how a split is batched.
    """

    def __init__(self, *tokens: int | str, shared_batch: bool = False):
        self._tokens = tokens
        self.shared_batch = shared_batch

    def get(self, site: str) -> np.random.Generator:
        return rng.stream(*self._tokens, site)

    def mask_shape(self, data_shape: tuple[int, ...]) -> tuple[int, ...] | None:
        if not self.shared_batch:
            return None
        return (1,) + tuple(data_shape[1:])


def _same_pads(size: int, kernel: int = 3, stride: int = 2) -> tuple[int, int]:
    rem = size % stride
    total = max(kernel - (rem if rem else stride), 0)
    return total // 2, total - total // 2


def subsample(state: ModelState, feats: np.ndarray | Tensor) -> Tensor:
    """(B, n_mels, n_frames) -> (B, subsampled_frames, model_dim)."""
    cfg = state.config
    p = state.params
    x = ad.as_tensor(feats)
    if x.data.ndim != 3 or x.data.shape[1:] != (cfg.n_mels, cfg.n_frames):
        raise ad.ShapeError(
            f"expected (B, {cfg.n_mels}, {cfg.n_frames}) features, got {x.data.shape}")
    if x.data.shape[0] == 0:
        raise ValueError("empty batch")
    batch = x.data.shape[0]
    x = ad.reshape(x, (batch, 1, cfg.n_mels, cfg.n_frames))
    h1 = ad.conv2d(x, p["subsample.conv1.w"], p["subsample.conv1.b"],
                   stride=(2, 2),
                   pads=(_same_pads(cfg.n_mels), _same_pads(cfg.n_frames)))
    h1 = ad.gelu(h1)
    mels_mid = _ceil_div(cfg.n_mels, 2)
    frames_mid = _ceil_div(cfg.n_frames, 2)
    h2 = ad.conv2d(h1, p["subsample.conv2.w"], p["subsample.conv2.b"],
                   stride=(2, 2),
                   pads=(_same_pads(mels_mid), _same_pads(frames_mid)))
    # (B, C, mel', T') -> (B, T', C * mel')
    h2 = ad.permute(h2, (0, 3, 1, 2))
    h2 = ad.reshape(h2, (batch, cfg.subsampled_frames,
                         cfg.subsample_channels * cfg.subsampled_mels))
    return ad.linear(h2, p["subsample.proj.w"], p["subsample.proj.b"])


def _attention_branch(state: ModelState, x: Tensor, i: int,
                      streams: DropoutStreams | None,
                      ) -> tuple[Tensor, Tensor, Tensor]:
    cfg = state.config
    p = state.params
    prefix = f"layers.{i}.attn"
    batch, length, d = x.data.shape
    h = ad.layer_norm(x, p[f"{prefix}.ln.g"], p[f"{prefix}.ln.b"])

    def heads_view(t: Tensor) -> Tensor:
        t = ad.reshape(t, (batch, length, cfg.heads, cfg.head_dim))
        return ad.permute(t, (0, 2, 1, 3))

    q = heads_view(ad.linear(h, p[f"{prefix}.wq"], p[f"{prefix}.bq"]))
    k = heads_view(ad.matmul(h, p[f"{prefix}.wk"]))
    v = heads_view(ad.linear(h, p[f"{prefix}.wv"], p[f"{prefix}.bv"]))
    scores = ad.mul(ad.matmul(q, ad.transpose_last2(k)),
                    1.0 / math.sqrt(cfg.head_dim))
    scores = ad.add(scores, ad.relative_bias_matrix(
        p[f"{prefix}.rel_bias"], length, cfg.rel_offset_max))
    attn = ad.softmax_last(scores)
    ctx = ad.permute(ad.matmul(attn, v), (0, 2, 1, 3))
    ctx = ad.reshape(ctx, (batch, length, d))
    out = ad.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
    if streams is not None and cfg.dropout_p > 0.0:
        out = ad.dropout(out, cfg.dropout_p, streams.get(f"{prefix}.drop"),
                         mask_shape=streams.mask_shape(out.data.shape))
    return out, attn, scores


def _conv_branch(state: ModelState, x: Tensor, i: int,
                 streams: DropoutStreams | None) -> Tensor:
    cfg = state.config
    p = state.params
    prefix = f"layers.{i}.conv"
    half = cfg.mlp_expand * cfg.model_dim // 2
    h = ad.layer_norm(x, p[f"{prefix}.ln.g"], p[f"{prefix}.ln.b"])
    h = ad.gelu(ad.linear(h, p[f"{prefix}.up.w"], p[f"{prefix}.up.b"]))
    direct = ad.slice_last(h, 0, half)
    gate = ad.depthwise_conv1d(ad.slice_last(h, half, 2 * half),
                               p[f"{prefix}.dw.w"], p[f"{prefix}.dw.b"])
    out = ad.linear(ad.mul(direct, gate), p[f"{prefix}.down.w"], p[f"{prefix}.down.b"])
    if streams is not None and cfg.dropout_p > 0.0:
        out = ad.dropout(out, cfg.dropout_p, streams.get(f"{prefix}.drop"),
                         mask_shape=streams.mask_shape(out.data.shape))
    return out


def encode_layer(state: ModelState, x: Tensor, i: int,
                 streams: DropoutStreams | None = None,
                 return_attention: bool = False):
    """One two-branch layer; output shape equals input shape."""
    p = state.params
    attn_out, attn_probs, attn_scores = _attention_branch(state, x, i, streams)
    conv_out = _conv_branch(state, x, i, streams)
    merged = ad.linear(ad.concat_last([attn_out, conv_out]),
                       p[f"layers.{i}.merge.w"], p[f"layers.{i}.merge.b"])
    out = ad.add(merged, x)
    if return_attention:
        return out, {"probs": attn_probs, "scores": attn_scores}
    return out


def forward(state: ModelState, feats: np.ndarray | Tensor, mode: str = "eval",
            seed: int = 0, index: int = 0) -> Tensor:
    """Logits (B, n_classes) for a batch of feature maps.

    mode "eval" disables dropout (deterministic); "train" draws masks from
    (seed, "dropout", index=step); "mc" draws from (seed, "mc", index=pass).
    """
    if mode == "eval":
        streams = None
    elif mode == "train":
        streams = DropoutStreams(seed, "dropout", index)
    elif mode == "mc":
        streams = DropoutStreams(seed, "mc", index, shared_batch=True)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    x = subsample(state, feats)
    for i in range(state.config.layers):
        x = encode_layer(state, x, i, streams)
    x = ad.layer_norm(x, state.params["final_ln.g"], state.params["final_ln.b"])
    pooled = ad.mean_axis(x, axis=1)
    return ad.linear(pooled, state.params["head.w"], state.params["head.b"])


def save_checkpoint(state: ModelState, path) -> None:
    """Versioned binary checkpoint; float32 values, bit-exact round-trip."""
    config_json = json.dumps(asdict(state.config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(config_json)))
        fh.write(config_json)
        fh.write(bytes.fromhex(state.config.hash()))
        fh.write(struct.pack("<I", len(state.params)))
        for name, tensor in state.params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", tensor.data.ndim))
            fh.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (config_len,) = struct.unpack("<I", fh.read(4))
        config = ModelConfig(**json.loads(fh.read(config_len).decode("utf-8")))
        stored_hash = fh.read(16).hex()
        if stored_hash != config.hash():
            raise ValueError(f"{path}: config hash mismatch")
        (n_params,) = struct.unpack("<I", fh.read(4))
        expected = _param_shapes(config)
        params: dict[str, Tensor] = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            values = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            if name not in expected or expected[name] != shape:
                raise ValueError(
                    f"{path}: parameter {name!r} with shape {shape} does not match "
                    f"the stored config")
            params[name] = Tensor(values, requires_grad=True)
        missing = set(expected) - set(params)
        if missing:
            raise ValueError(f"{path}: missing parameters {sorted(missing)}")
    return ModelState(config=config, params=params, version=version)
