"""Residual speaker embedder with configurable context-block insertion.

The network is a small ResNet over (1, F, T) log-mel maps: a conv stem,
four residual stages, attentive statistics pooling over the frame axis and
a linear head whose output is L2-normalized. A context block can be
inserted into every residual branch (after the last batch norm by default,
the other positions are selectable) or restricted to the final stage.

Checkpoints are a versioned binary container of named arrays in the raw
tensor dump format plus the run-config document; round-trips are bit-exact.
"""

from __future__ import annotations

import json
import math
import struct
from typing import Callable

import numpy as np

from . import blocks
from . import tensor as T
from .errors import DataError, NumericalError, ShapeError
from .tensor import RunningStats, Tensor

INSERTION_POSITIONS = ("after_bn", "before_bn", "before_conv", "none")


class Conv2dLayer:
    def __init__(self, cin: int, cout: int, kernel: int = 3, stride=(1, 1),
                 padding=(1, 1), bias: bool = False, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * kernel * kernel
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        self.weight = Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), (cout, cin, kernel, kernel)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def named_parameters(self, prefix):
        out = [(f"{prefix}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{prefix}.bias", self.bias))
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNormLayer:
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running = RunningStats(channels, momentum)
        self.eps = eps

    def named_parameters(self, prefix):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def named_state(self, prefix):
        return [(f"{prefix}.running_mean", self.running.mean),
                (f"{prefix}.running_var", self.running.var)]

    def load_state(self, prefix, arrays):
        self.running.mean = arrays[f"{prefix}.running_mean"].copy()
        self.running.var = arrays[f"{prefix}.running_var"].copy()

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm2d(x, self.gamma, self.beta, self.eps, training, self.running)


class ResidualBlock:
    """conv-bn-relu-conv-bn with an optional context block at the configured
    position, then the skip connection (1x1 projection on shape change)."""

    def __init__(self, cin: int, cout: int, stride: int = 1,
                 gcm: blocks.GcmBlock | None = None, insertion: str = "none",
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if insertion not in INSERTION_POSITIONS:
            raise ValueError(f"unknown insertion position {insertion!r}")
        if (gcm is None) != (insertion == "none"):
            raise ValueError("insertion position must be 'none' exactly when no context block is present")
        self.conv1 = Conv2dLayer(cin, cout, 3, (stride, stride), (1, 1), rng=rng)
        self.bn1 = BatchNormLayer(cout)
        self.conv2 = Conv2dLayer(cout, cout, 3, (1, 1), (1, 1), rng=rng)
        self.bn2 = BatchNormLayer(cout)
        self.gcm = gcm
        self.insertion = insertion
        if stride != 1 or cin != cout:
            self.proj = Conv2dLayer(cin, cout, 1, (stride, stride), (0, 0), rng=rng)
            self.proj_bn = BatchNormLayer(cout)
        else:
            self.proj = None
            self.proj_bn = None

    def named_parameters(self, prefix):
        out = self.conv1.named_parameters(f"{prefix}.conv1")
        out += self.bn1.named_parameters(f"{prefix}.bn1")
        out += self.conv2.named_parameters(f"{prefix}.conv2")
        out += self.bn2.named_parameters(f"{prefix}.bn2")
        if self.proj is not None:
            out += self.proj.named_parameters(f"{prefix}.proj")
            out += self.proj_bn.named_parameters(f"{prefix}.proj_bn")
        if self.gcm is not None:
            out += self.gcm.named_parameters(f"{prefix}.gcm")
        return out

    def named_state(self, prefix):
        out = self.bn1.named_state(f"{prefix}.bn1") + self.bn2.named_state(f"{prefix}.bn2")
        if self.proj_bn is not None:
            out += self.proj_bn.named_state(f"{prefix}.proj_bn")
        return out

    def load_state(self, prefix, arrays):
        self.bn1.load_state(f"{prefix}.bn1", arrays)
        self.bn2.load_state(f"{prefix}.bn2", arrays)
        if self.proj_bn is not None:
            self.proj_bn.load_state(f"{prefix}.proj_bn", arrays)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        branch = x
        if self.gcm is not None and self.insertion == "before_conv":
            branch = self.gcm(branch)
        y = T.relu(self.bn1(self.conv1(branch), training))
        y = self.conv2(y)
        if self.gcm is not None and self.insertion == "before_bn":
            y = self.gcm(y)
        y = self.bn2(y, training)
        if self.gcm is not None and self.insertion == "after_bn":
            y = self.gcm(y)
        identity = x if self.proj is None else self.proj_bn(self.proj(x), training)
        return T.relu(T.add(y, identity))


class AttentiveStatsPool:
    """Per-frame scalar attention (one-hidden-layer MLP, softmax over time);
    pools frames into concatenated weighted mean and standard deviation."""

    VAR_FLOOR = 1e-8

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.hidden = hidden
        self.proj = Tensor(rng.normal(0.0, 1.0 / math.sqrt(in_dim), (hidden, in_dim)),
                           requires_grad=True)
        self.proj_bias = Tensor(np.zeros(hidden), requires_grad=True)
        self.score_vec = Tensor(rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden,)),
                                requires_grad=True)
        self.score_bias = Tensor(np.zeros(1), requires_grad=True)

    def named_parameters(self, prefix):
        return [(f"{prefix}.proj", self.proj), (f"{prefix}.proj_bias", self.proj_bias),
                (f"{prefix}.score_vec", self.score_vec), (f"{prefix}.score_bias", self.score_bias)]

    def __call__(self, frames: Tensor) -> Tensor:
        """(N, D, T) frames -> (N, 2D) pooled stats."""
        if frames.ndim != 3:
            raise ShapeError(f"expected (N, D, T) frames, got {frames.shape}")
        h = T.tanh(T.add(T.einsum2("hd,ndt->nht", self.proj, frames),
                         T.reshape(self.proj_bias, (1, self.hidden, 1))))
        scores = T.add(T.einsum2("h,nht->nt", self.score_vec, h), self.score_bias)
        weights = T.softmax_over(scores, (1,))
        mean = T.einsum2("nt,ndt->nd", weights, frames)
        sq_mean = T.einsum2("nt,ndt->nd", weights, T.mul(frames, frames))
        var = T.add(sq_mean, T.mul(T.mul(mean, mean), -1.0))
        std = T.sqrt(T.clamp_min(var, self.VAR_FLOOR))
        return T.concat([mean, std], 1)


def asp_pool(frames: Tensor, pool: AttentiveStatsPool) -> Tensor:
    """Single-utterance (D, T) form of the pooling."""
    if frames.ndim != 2:
        raise ShapeError(f"expected (D, T) frames, got {frames.shape}")
    return T.reshape(pool(T.reshape(frames, (1,) + frames.shape)), (2 * frames.shape[0],))


def _conv_out(n: int, stride: int) -> int:
    # 3x3 kernel, padding 1
    return (n + 2 - 3) // stride + 1


class Embedder:
    """Feature map (N, 1, F, T) -> unit-norm embedding (N, embed_dim)."""

    def __init__(self, mel_bins: int, stage_channels, blocks_per_stage, stage_strides,
                 stem_stride, embed_dim: int, asp_hidden: int,
                 make_gcm: Callable[[int], blocks.GcmBlock | None] | None = None,
                 insertion: str = "after_bn", gcm_stages: str = "all",
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if embed_dim < 2:
            raise ValueError("embedding dimension must be at least 2")
        if not (len(stage_channels) == len(blocks_per_stage) == len(stage_strides)):
            raise ValueError("stage_channels, blocks_per_stage and stage_strides must align")
        if gcm_stages not in ("all", "last"):
            raise ValueError(f"unknown gcm_stages {gcm_stages!r}")
        self.mel_bins = mel_bins
        self.embed_dim = embed_dim

        self.stem = Conv2dLayer(1, stage_channels[0], 3, tuple(stem_stride), (1, 1), rng=rng)
        self.stem_bn = BatchNormLayer(stage_channels[0])

        f = _conv_out(mel_bins, stem_stride[0])
        self.stages: list[list[ResidualBlock]] = []
        cin = stage_channels[0]
        for si, (cout, n_blocks, stride) in enumerate(zip(stage_channels, blocks_per_stage, stage_strides)):
            stage = []
            for bi in range(n_blocks):
                s = stride if bi == 0 else 1
                wants_gcm = make_gcm is not None and (gcm_stages == "all" or si == len(stage_channels) - 1)
                # a block placed before the first conv recalibrates the input
                gcm_width = cin if insertion == "before_conv" else cout
                gcm = make_gcm(gcm_width) if wants_gcm else None
                pos = insertion if gcm is not None else "none"
                stage.append(ResidualBlock(cin, cout, s, gcm, pos, rng))
                cin = cout
                if bi == 0:
                    f = _conv_out(f, stride)
            self.stages.append(stage)
        self.final_f = f
        self.frame_dim = stage_channels[-1] * f

        self.pool = AttentiveStatsPool(self.frame_dim, asp_hidden, rng)
        self.head_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(2 * self.frame_dim),
                                        (embed_dim, 2 * self.frame_dim)), requires_grad=True)
        self.head_b = Tensor(np.zeros(embed_dim), requires_grad=True)

    def named_parameters(self):
        out = self.stem.named_parameters("stem")
        out += self.stem_bn.named_parameters("stem_bn")
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                out += block.named_parameters(f"stage{si}.block{bi}")
        out += self.pool.named_parameters("pool")
        out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def named_state(self):
        out = self.stem_bn.named_state("stem_bn")
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                out += block.named_state(f"stage{si}.block{bi}")
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameters and batch-norm state from a checkpoint dict."""
        expected = {name for name, _ in self.named_parameters()} | {name for name, _ in self.named_state()}
        if expected != set(arrays):
            missing = expected - set(arrays)
            extra = set(arrays) - expected
            raise DataError(f"checkpoint does not match model: missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}")
        for name, param in self.named_parameters():
            if param.data.shape != arrays[name].shape:
                raise DataError(f"checkpoint entry {name} has shape {arrays[name].shape}, expected {param.data.shape}")
            param.data = arrays[name].copy()
        self.stem_bn.load_state("stem_bn", arrays)
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                block.load_state(f"stage{si}.block{bi}", arrays)

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        """(N, 1, F, T) feature maps -> pre-normalization embeddings (N, E)."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected (N, 1, F, T) input, got {x.shape}")
        if x.shape[2] != self.mel_bins:
            raise ShapeError(f"model built for {self.mel_bins} mel bins, got {x.shape[2]}")
        y = T.relu(self.stem_bn(self.stem(x), training))
        for stage in self.stages:
            for block in stage:
                y = block(y, training)
        n = y.shape[0]
        frames = T.reshape(y, (n, self.frame_dim, y.shape[3]))
        pooled = self.pool(frames)
        return T.add(T.matmul(pooled, T.moveaxis(self.head_w, 0, 1)),
                     T.reshape(self.head_b, (1, self.embed_dim)))

    def embed(self, x: Tensor, training: bool = False) -> Tensor:
        """Unit-norm embeddings; raises rather than dividing by a zero norm."""
        raw = self.forward(x, training)
        sq = T.reduce(T.mul(raw, raw), (1,), "sum", keepdims=True)
        if np.any(sq.data <= 0.0):
            raise NumericalError("embedding collapsed to the zero vector before normalization")
        return T.div(raw, T.sqrt(sq))


def embed_utterance(features: Tensor, embedder: Embedder) -> Tensor:
    """(1, F, T) single-channel features -> unit-norm (embed_dim,) vector."""
    if features.ndim != 3 or features.shape[0] != 1:
        raise ShapeError(f"expected (1, F, T) features, got {features.shape}")
    out = embedder.embed(T.reshape(features, (1,) + features.shape))
    return T.reshape(out, (embedder.embed_dim,))


# -- analytic parameter counting ------------------------------------------------


def analytic_embedder_count(mel_bins: int, stage_channels, blocks_per_stage, stage_strides,
                            stem_stride_f: int, embed_dim: int, asp_hidden: int,
                            gcm_counter: Callable[[int], int] | None = None,
                            gcm_stages: str = "all", insertion: str = "after_bn") -> int:
    """Closed-form parameter total for a given architecture; the regression
    tests assert it equals the instantiated model's count."""
    def conv(cin, cout, k):
        return cout * cin * k * k

    def bn(c):
        return 2 * c

    total = conv(1, stage_channels[0], 3) + bn(stage_channels[0])
    cin = stage_channels[0]
    for si, (cout, n_blocks, stride) in enumerate(zip(stage_channels, blocks_per_stage, stage_strides)):
        for bi in range(n_blocks):
            s = stride if bi == 0 else 1
            total += conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout)
            if s != 1 or cin != cout:
                total += conv(cin, cout, 1) + bn(cout)
            if gcm_counter is not None and (gcm_stages == "all" or si == len(stage_channels) - 1):
                total += gcm_counter(cin if insertion == "before_conv" else cout)
            cin = cout
    frame_dim = stage_channels[-1] * _final_f(mel_bins, stage_strides, stem_stride_f)
    total += asp_hidden * frame_dim + asp_hidden + asp_hidden + 1
    total += embed_dim * 2 * frame_dim + embed_dim
    return total


def _final_f(mel_bins: int, stage_strides, stem_stride_f: int) -> int:
    f = _conv_out(mel_bins, stem_stride_f)
    for s in stage_strides:
        f = _conv_out(f, s)
    return f


# -- checkpoint container ---------------------------------------------------------

_CKPT_MAGIC = b"TFCXCKPT"
_CKPT_VERSION = 1


def save_checkpoint(path: str, named_arrays, config: dict) -> None:
    """Versioned container: magic, version, config JSON, then named tensors
    in the raw dump format. Everything little-endian; identical inputs give
    identical bytes."""
    config_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        f.write(struct.pack("<Q", len(config_bytes)))
        f.write(config_bytes)
        entries = list(named_arrays)
        f.write(struct.pack("<Q", len(entries)))
        for name, arr in entries:
            raw = name.encode()
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)
            T.save_tensor(f, np.asarray(arr))


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as f:
            if f.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
                raise DataError(f"{path} is not a checkpoint (bad magic)")
            (version,) = struct.unpack("<I", f.read(4))
            if version != _CKPT_VERSION:
                raise DataError(f"unsupported checkpoint version {version}")
            (config_len,) = struct.unpack("<Q", f.read(8))
            config = json.loads(f.read(config_len).decode())
            (count,) = struct.unpack("<Q", f.read(8))
            arrays = {}
            for _ in range(count):
                (name_len,) = struct.unpack("<Q", f.read(8))
                name = f.read(name_len).decode()
                arrays[name] = T.load_tensor(f)
            return config, arrays
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except (struct.error, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint {path}: {exc}") from None
