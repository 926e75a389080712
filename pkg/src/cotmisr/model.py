"""The CoT-MISR network.

A stack of low-resolution frames is fused against its per-pixel median
reference, encoded by two shallow convolutions, refined by a sequence of
light residual channel attention blocks ('c') and reduced transformer
encoder blocks ('t') given by an architecture string, and upscaled with
a sub-pixel convolution. Parameters live in a named, ordered collection
split into an "encoder" group (shallow + reconstruction convs) and a
"cot" group (all attention/transformer blocks) so the trainer can drive
them at two learning rates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from cotmisr import tensor as T
from cotmisr.errors import ConfigError, DataError
from cotmisr.tensor import Tensor

__all__ = [
    "LrcaConfig",
    "TBlockConfig",
    "CotConfig",
    "ModelParams",
    "parse_arch",
    "format_arch",
    "init_params",
    "count_params",
    "median_reference",
    "pair_with_reference",
    "shallow_encode",
    "lrca_forward",
    "tblock_forward",
    "transformer_encode",
    "self_attention",
    "cot_forward",
    "reconstruct",
    "forward",
    "super_resolve",
    "select_frame_indices",
    "pad_frames",
    "save_checkpoint",
    "load_checkpoint",
]


# -- configuration ---------------------------------------------------------


@dataclass
class LrcaConfig:
    """Switches and sizes for the light residual channel attention block."""

    use_ca: bool = True
    use_sa: bool = True
    ca_reduction: int = 8
    sa_kernel: int = 3


@dataclass
class TBlockConfig:
    """Sizes for one transformer block ('t' in the architecture string)."""

    layers: int = 1
    heads: int = 8
    ff_dim: int = 256
    dropout: float = 0.0
    # learned positional embedding over H*W tokens; 0 disables it
    pos_tokens: int = 0


@dataclass
class CotConfig:
    """Full model hyperparameter record."""

    k: int = 9
    c_in: int = 1
    c_e: int = 64
    r: int = 3
    arch: str = "(2c1t)x4"
    lrca: LrcaConfig = field(default_factory=LrcaConfig)
    tblock: TBlockConfig = field(default_factory=TBlockConfig)

    def validate(self) -> "CotConfig":
        if self.k < 1:
            raise ConfigError(f"frame count k must be >= 1, got {self.k}")
        if self.c_in < 1:
            raise ConfigError(f"c_in must be >= 1, got {self.c_in}")
        if self.c_e <= self.c_in:
            raise ConfigError(f"embedding width c_e={self.c_e} must exceed c_in={self.c_in}")
        if self.r < 2:
            raise ConfigError(f"upscale factor r must be >= 2, got {self.r}")
        if not (self.lrca.use_ca or self.lrca.use_sa):
            raise ConfigError("at least one of use_ca/use_sa must be enabled")
        if self.lrca.ca_reduction < 1 or self.c_e // self.lrca.ca_reduction < 1:
            raise ConfigError(
                f"ca_reduction={self.lrca.ca_reduction} leaves no channels at c_e={self.c_e}"
            )
        if self.lrca.sa_kernel < 1 or self.lrca.sa_kernel % 2 == 0:
            raise ConfigError(f"sa_kernel must be odd and positive, got {self.lrca.sa_kernel}")
        if self.tblock.heads < 1 or self.c_e % self.tblock.heads != 0:
            raise ConfigError(
                f"c_e={self.c_e} must be divisible by heads={self.tblock.heads}"
            )
        if self.tblock.layers < 0:
            raise ConfigError(f"tblock.layers must be >= 0, got {self.tblock.layers}")
        if not 0.0 <= self.tblock.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0,1), got {self.tblock.dropout}")
        blocks = parse_arch(self.arch)
        if not blocks:
            raise ConfigError(f"architecture {self.arch!r} expands to an empty sequence")
        return self

    def with_arch(self, arch: str) -> "CotConfig":
        return replace(self, arch=arch)


# -- architecture grammar ----------------------------------------------------


def parse_arch(text: str) -> list[str]:
    """Expand an architecture string into a flat block sequence.

    Grammar: a sequence of items, where an item is an optional repeat
    count followed by 'c' (attention block), 't' (transformer block), or
    a parenthesised sequence with an 'xN' repeat suffix. "(2c1t)x4"
    expands to c c t repeated four times.
    """
    s = text.strip()
    pos = 0

    def fail(msg: str):
        raise ConfigError(f"cannot parse architecture {text!r}: {msg} (position {pos})")

    def parse_count():
        nonlocal pos
        start = pos
        while pos < len(s) and s[pos].isdigit():
            pos += 1
        return int(s[start:pos]) if pos > start else None

    def parse_seq() -> list[str]:
        nonlocal pos
        blocks: list[str] = []
        while pos < len(s) and s[pos] != ")":
            count = parse_count()
            if pos >= len(s):
                fail("dangling repeat count")
            ch = s[pos]
            if ch in ("c", "t"):
                pos += 1
                blocks.extend([ch] * (1 if count is None else count))
            elif ch == "(":
                if count is not None:
                    fail("repeat count before '(' is not allowed")
                pos += 1
                inner = parse_seq()
                if pos >= len(s) or s[pos] != ")":
                    fail("missing ')'")
                pos += 1
                if pos >= len(s) or s[pos] != "x":
                    fail("group must be followed by 'xN'")
                pos += 1
                repeat = parse_count()
                if repeat is None:
                    fail("missing repeat count after 'x'")
                blocks.extend(inner * repeat)
            else:
                fail(f"unexpected character {ch!r}")
        return blocks

    blocks = parse_seq()
    if pos != len(s):
        fail("unbalanced ')'")
    if not blocks:
        fail("empty block sequence")
    return blocks


def format_arch(blocks: Sequence[str]) -> str:
    """Run-length encode a block sequence; a fixed point of parse/format."""
    out = []
    i = 0
    while i < len(blocks):
        j = i
        while j < len(blocks) and blocks[j] == blocks[i]:
            j += 1
        out.append(f"{j - i}{blocks[i]}")
        i = j
    return "".join(out)


# -- parameters ---------------------------------------------------------------


class ModelParams:
    """Named, ordered collection of learnable tensors.

    Names starting with "cot." belong to the "cot" group; everything
    else (shallow encoder + reconstruction) to the "encoder" group.
    """

    GROUPS = ("encoder", "cot")

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._tensors.items()

    def tensors(self) -> Iterable[Tensor]:
        return self._tensors.values()

    @staticmethod
    def group_of(name: str) -> str:
        return "cot" if name.startswith("cot.") else "encoder"

    def group_items(self, group: str) -> list[tuple[str, Tensor]]:
        if group not in self.GROUPS:
            raise ConfigError(f"unknown parameter group {group!r}")
        return [(n, t) for n, t in self._tensors.items() if self.group_of(n) == group]

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def count(self, group: str | None = None) -> int:
        if group is None:
            return sum(t.size for t in self._tensors.values())
        return sum(t.size for _, t in self.group_items(group))


def count_params(params: ModelParams, group: str | None = None) -> int:
    """Total number of learnable scalars, optionally for one group."""
    return params.count(group)


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _xavier_uniform(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(cfg: CotConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Create freshly initialized parameters for ``cfg``.

    Conv kernels are Kaiming-uniform, attention/feed-forward projections
    Xavier-uniform, biases and positional embeddings zero, norm scales
    one. Creation order is fixed, so a seed pins every value.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}

    def param(name, data):
        p[name] = Tensor(np.asarray(data, dtype=dtype), requires_grad=True)

    def conv(name, cout, cin, kh, kw):
        param(f"{name}.weight", _kaiming_uniform(rng, (cout, cin, kh, kw), cin * kh * kw, dtype))
        param(f"{name}.bias", np.zeros(cout, dtype=dtype))

    def linear(name, fan_in, fan_out):
        param(f"{name}.weight", _xavier_uniform(rng, (fan_in, fan_out), fan_in, fan_out, dtype))
        param(f"{name}.bias", np.zeros(fan_out, dtype=dtype))

    ce = cfg.c_e
    conv("shallow.conv1", ce, cfg.k * 2 * cfg.c_in, 3, 3)
    conv("shallow.conv2", ce, ce, 3, 3)

    for i, kind in enumerate(parse_arch(cfg.arch)):
        base = f"cot.{i}"
        if kind == "c":
            if cfg.lrca.use_sa:
                sk = cfg.lrca.sa_kernel
                param(
                    f"{base}.sa.depthwise.weight",
                    _kaiming_uniform(rng, (ce, 1, sk, sk), sk * sk, dtype),
                )
                param(f"{base}.sa.depthwise.bias", np.zeros(ce, dtype=dtype))
                conv(f"{base}.sa.pointwise", 1, ce, 1, 1)
            if cfg.lrca.use_ca:
                cr = ce // cfg.lrca.ca_reduction
                conv(f"{base}.ca.down", cr, ce, 1, 1)
                conv(f"{base}.ca.up", ce, cr, 1, 1)
        else:
            if cfg.tblock.pos_tokens > 0:
                param(f"{base}.pos.embedding", np.zeros((cfg.tblock.pos_tokens, 1, ce), dtype=dtype))
            for l in range(cfg.tblock.layers):
                layer = f"{base}.layer{l}"
                param(f"{layer}.ln1.gamma", np.ones(ce, dtype=dtype))
                param(f"{layer}.ln1.beta", np.zeros(ce, dtype=dtype))
                for proj in ("q", "k", "v", "out"):
                    linear(f"{layer}.attn.{proj}", ce, ce)
                param(f"{layer}.ln2.gamma", np.ones(ce, dtype=dtype))
                param(f"{layer}.ln2.beta", np.zeros(ce, dtype=dtype))
                linear(f"{layer}.ff.lin1", ce, cfg.tblock.ff_dim)
                linear(f"{layer}.ff.lin2", cfg.tblock.ff_dim, ce)
                # zero-init the residual-branch outputs: each encoder layer
                # starts as the identity, which keeps early training stable
                p[f"{layer}.attn.out.weight"].data[:] = 0.0
                p[f"{layer}.ff.lin2.weight"].data[:] = 0.0

    conv("recon.conv", cfg.c_in * cfg.r * cfg.r, ce, 3, 3)
    return ModelParams(p)


# -- network blocks ------------------------------------------------------------


def median_reference(frames: Tensor) -> Tensor:
    """Per-pixel median across the frame axis of (B,K,C,H,W)."""
    if frames.ndim != 5:
        raise ValueError(f"frame stack must be (B,K,C,H,W), got shape {frames.shape}")
    if frames.shape[1] < 1:
        raise ValueError("frame stack is empty")
    return T.median(frames, axis=1)


def pair_with_reference(frames: Tensor, ref: Tensor) -> Tensor:
    """Concatenate the reference ahead of each frame along channels.

    (B,K,C,H,W) with (B,C,H,W) gives (B,K,2C,H,W); channels [0,C) hold
    the reference, channels [C,2C) the frame.
    """
    b, k, c, h, w = frames.shape
    if ref.shape != (b, c, h, w):
        raise ValueError(f"reference shape {ref.shape} does not match frames {frames.shape}")
    ref_k = T.broadcast_to(ref.reshape(b, 1, c, h, w), (b, k, c, h, w))
    return T.concat([ref_k, frames], axis=2)


def shallow_encode(g: Tensor, params: ModelParams, cfg: CotConfig) -> Tensor:
    """Fold frames into channels and apply the two shallow convolutions."""
    b, k, c2, h, w = g.shape
    if k != cfg.k:
        raise ConfigError(f"input has {k} frames but the model is configured for k={cfg.k}")
    if c2 != 2 * cfg.c_in:
        raise ValueError(f"paired input must have {2 * cfg.c_in} channels, got {c2}")
    x = g.reshape(b, k * c2, h, w)
    x = T.conv2d(x, params["shallow.conv1.weight"], params["shallow.conv1.bias"], padding=1)
    x = T.relu(x)
    return T.conv2d(x, params["shallow.conv2.weight"], params["shallow.conv2.bias"], padding=1)


def lrca_forward(x: Tensor, params: ModelParams, cfg: CotConfig, index: int = 0) -> Tensor:
    """Light residual channel attention: y = CA(SA(x)) + x.

    SA: depthwise conv, then a single-channel 1x1-conv sigmoid gate
    multiplied onto the depthwise output. CA: squeeze to per-channel
    statistics, bottleneck 1x1 convs, sigmoid, per-channel rescale.
    A disabled part is the identity map.
    """
    if not (cfg.lrca.use_ca or cfg.lrca.use_sa):
        raise ConfigError("lrca block with both attention parts disabled")
    base = f"cot.{index}"
    y = x
    if cfg.lrca.use_sa:
        pad = (cfg.lrca.sa_kernel - 1) // 2
        y = T.depthwise_conv2d(
            y, params[f"{base}.sa.depthwise.weight"], params[f"{base}.sa.depthwise.bias"], padding=pad
        )
        gate = T.sigmoid(
            T.conv2d(y, params[f"{base}.sa.pointwise.weight"], params[f"{base}.sa.pointwise.bias"])
        )
        y = y * gate
    if cfg.lrca.use_ca:
        s = T.global_avg_pool2d(y)
        s = T.relu(T.conv2d(s, params[f"{base}.ca.down.weight"], params[f"{base}.ca.down.bias"]))
        s = T.sigmoid(T.conv2d(s, params[f"{base}.ca.up.weight"], params[f"{base}.ca.up.bias"]))
        y = y * s
    return y + x


def _tokens_from_map(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return x.transpose(2, 3, 0, 1).reshape(h * w, b, c)


def _map_from_tokens(tokens: Tensor, b: int, c: int, h: int, w: int) -> Tensor:
    return tokens.reshape(h, w, b, c).transpose(2, 3, 0, 1)


def _linear(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return x @ params[f"{name}.weight"] + params[f"{name}.bias"]


def self_attention(
    tokens: Tensor, params: ModelParams, prefix: str, heads: int
) -> tuple[Tensor, Tensor]:
    """Multi-head self-attention over (T,B,C) tokens.

    Returns the projected output and the (B*heads, T, T) attention
    probabilities (rows sum to one).
    """
    t_len, b, c = tokens.shape
    dh = c // heads

    def to_heads(z):
        return z.reshape(t_len, b, heads, dh).transpose(1, 2, 0, 3).reshape(b * heads, t_len, dh)

    q = to_heads(_linear(tokens, params, f"{prefix}.attn.q"))
    k = to_heads(_linear(tokens, params, f"{prefix}.attn.k"))
    v = to_heads(_linear(tokens, params, f"{prefix}.attn.v"))
    logits = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh))
    attn = T.softmax(logits, axis=-1)
    ctx = attn @ v
    ctx = ctx.reshape(b, heads, t_len, dh).transpose(2, 0, 1, 3).reshape(t_len, b, c)
    return _linear(ctx, params, f"{prefix}.attn.out"), attn


def _maybe_dropout(x: Tensor, p: float, rng) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return x * Tensor(keep)


def _encoder_layer(x: Tensor, params: ModelParams, prefix: str, cfg: CotConfig, rng) -> Tensor:
    h = T.layer_norm(x) * params[f"{prefix}.ln1.gamma"] + params[f"{prefix}.ln1.beta"]
    attn_out, _ = self_attention(h, params, prefix, cfg.tblock.heads)
    x = x + _maybe_dropout(attn_out, cfg.tblock.dropout, rng)
    h = T.layer_norm(x) * params[f"{prefix}.ln2.gamma"] + params[f"{prefix}.ln2.beta"]
    h = T.relu(_linear(h, params, f"{prefix}.ff.lin1"))
    h = _linear(h, params, f"{prefix}.ff.lin2")
    return x + _maybe_dropout(h, cfg.tblock.dropout, rng)


def transformer_encode(
    tokens: Tensor, params: ModelParams, cfg: CotConfig, index: int, dropout_rng=None
) -> Tensor:
    """Apply the configured pre-norm encoder layers to (T,B,C) tokens."""
    base = f"cot.{index}"
    if cfg.tblock.pos_tokens > 0:
        if tokens.shape[0] != cfg.tblock.pos_tokens:
            raise ConfigError(
                f"positional embedding covers {cfg.tblock.pos_tokens} tokens "
                f"but the input has {tokens.shape[0]}"
            )
        tokens = tokens + params[f"{base}.pos.embedding"]
    for l in range(cfg.tblock.layers):
        tokens = _encoder_layer(tokens, params, f"{base}.layer{l}", cfg, dropout_rng)
    return tokens


def tblock_forward(
    x: Tensor, params: ModelParams, cfg: CotConfig, index: int = 0, dropout_rng=None
) -> Tensor:
    """Flatten spatial positions to tokens, run the encoder, restore the map.

    With zero layers this is the exact reshape round-trip identity.
    """
    b, c, h, w = x.shape
    if c % cfg.tblock.heads != 0:
        raise ConfigError(f"channel count {c} not divisible by heads={cfg.tblock.heads}")
    tokens = _tokens_from_map(x)
    tokens = transformer_encode(tokens, params, cfg, index, dropout_rng)
    return _map_from_tokens(tokens, b, c, h, w)


def cot_forward(x: Tensor, params: ModelParams, cfg: CotConfig, dropout_rng=None) -> Tensor:
    """Run the expanded architecture string left to right."""
    for i, kind in enumerate(parse_arch(cfg.arch)):
        if kind == "c":
            x = lrca_forward(x, params, cfg, index=i)
        else:
            x = tblock_forward(x, params, cfg, index=i, dropout_rng=dropout_rng)
    return x


def reconstruct(feat: Tensor, params: ModelParams, cfg: CotConfig) -> Tensor:
    """Project to c_in * r^2 channels and pixel-shuffle up to (rH, rW)."""
    x = T.conv2d(feat, params["recon.conv.weight"], params["recon.conv.bias"], padding=1)
    return T.pixel_shuffle(x, cfg.r)


def forward(frames: Tensor, params: ModelParams, cfg: CotConfig, dropout_rng=None) -> Tensor:
    """Full pipeline: median reference, pairing, encoding, blocks, upscale."""
    ref = median_reference(frames)
    paired = pair_with_reference(frames, ref)
    feat = shallow_encode(paired, params, cfg)
    feat = cot_forward(feat, params, cfg, dropout_rng=dropout_rng)
    return reconstruct(feat, params, cfg)


def super_resolve(frames: np.ndarray, params: ModelParams, cfg: CotConfig) -> np.ndarray:
    """Upscale one scene given as a (K,C,H,W) array; returns (C,rH,rW).

    Inference-mode forward pass with the output clamped to [0,1].
    """
    if frames.ndim != 4:
        raise ValueError(f"expected a (K,C,H,W) scene, got shape {frames.shape}")
    dtype = next(iter(params.tensors())).data.dtype
    with T.no_grad():
        out = forward(Tensor(frames[None].astype(dtype)), params, cfg)
    return np.clip(out.data[0].astype(np.float64), 0.0, 1.0)


# -- frame-count normalization ---------------------------------------------------


def select_frame_indices(clearances: Sequence[float], k: int) -> list[int]:
    """Choose which frames feed a k-frame model.

    Too many frames: keep the k clearest (original order preserved).
    Too few: keep all, then repeat frames cyclically in decreasing
    clearance order until k exist. Ties break toward the earlier frame.
    """
    n = len(clearances)
    if n == 0:
        raise DataError("cannot pad an empty frame list")
    by_clearance = sorted(range(n), key=lambda i: (-float(clearances[i]), i))
    if n >= k:
        return sorted(by_clearance[:k])
    indices = list(range(n))
    pos = 0
    while len(indices) < k:
        indices.append(by_clearance[pos % n])
        pos += 1
    return indices


def pad_frames(
    frames: Sequence[np.ndarray], masks: Sequence[np.ndarray], k: int
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Normalize a scene to exactly k frames using clearance ordering."""
    if len(frames) != len(masks):
        raise DataError(f"{len(frames)} frames but {len(masks)} masks")
    clearances = [float(m.mean()) for m in masks]
    idx = select_frame_indices(clearances, k)
    return [frames[i] for i in idx], [masks[i] for i in idx]


# -- checkpoint format -------------------------------------------------------------
#
# "COTM" magic, u16 version, u32-length-prefixed canonical config text,
# then per tensor: u32 name length + UTF-8 name, u32 rank, u32 extents,
# raw little-endian float32 data in row-major order, until EOF.

CHECKPOINT_MAGIC = b"COTM"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ModelParams, config_text: str) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        blob = config_text.encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, t in params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t.data.ndim))
            for extent in t.data.shape:
                f.write(struct.pack("<I", extent))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    """Read a checkpoint back as (config text, name -> float32 array)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 6
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config_text = blob[off : off + cfg_len].decode("utf-8")
    off += cfg_len
    arrays: dict[str, np.ndarray] = {}
    while off < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        arrays[name] = arr.copy()
    return config_text, arrays


def params_from_arrays(arrays: dict[str, np.ndarray], dtype=np.float32) -> ModelParams:
    """Wrap loaded arrays as trainable parameters, preserving order."""
    return ModelParams(
        {name: Tensor(arr.astype(dtype), requires_grad=True) for name, arr in arrays.items()}
    )
