"""Dual-branch warping-flow network for two-page spreads.

A ResNet-style stem pools the input to 1/8 resolution, a transformer encoder
mixes the whole spread, and two decoder branches (one per page, each holding
its own learned query grid) estimate per-page backward flows. Midway through
decoding, each branch attends to the other's features so the two page
estimates stay consistent across the gutter. Branch features are finally
concatenated along the width, refined by two convolutions, and read out as
three flows: left page, right page, and full spread, each convex-upsampled
by 8x to pixel resolution.

Flow heads predict offsets from the fixed identity grid, so a freshly
initialized network starts out (almost) as a no-op rectifier.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .geometry import UPSAMPLE_FACTOR, convex_upsample
from .grad.checkpoint import load_checkpoint, save_checkpoint
from .grad.ops import (
    AttentionParams,
    conv2d,
    instance_norm,
    layer_norm,
    linear,
    multi_head_attention,
    relu,
)
from .grad.tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    add,
    concat,
    reshape,
    transpose,
)

__all__ = [
    "BookNetConfig",
    "BookNetParams",
    "init_params",
    "param_count",
    "backbone_forward",
    "encoder_forward",
    "decoder_stage1",
    "cross_page_exchange",
    "decoder_stage2",
    "fuse_and_predict",
    "booknet_forward",
    "save_model",
    "load_model",
    "config_to_json",
    "config_from_json",
]


@dataclass
class BookNetConfig:
    """Architectural hyperparameters and ablation switches."""

    height: int = 288
    width: int = 288
    channels: int = 256
    in_channels: int = 3
    encoder_layers: int = 4
    heads: int = 8
    decoder_layers_per_stage: int = 2
    ffn_expansion: int = 4
    backbone_blocks_per_stage: int = 2
    cross_page_attention: bool = True
    use_fusion: bool = True
    supervise_left: bool = True
    supervise_right: bool = True
    supervise_full: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.height % 16 or self.width % 16:
            raise ConfigError(f"input extents {self.height}x{self.width} must be divisible by 16")
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by {self.heads} heads")
        if self.channels % 4:
            raise ConfigError(f"channels {self.channels} must be divisible by 4 (backbone widths)")
        if self.encoder_layers < 0 or self.decoder_layers_per_stage < 0:
            raise ConfigError("layer counts must be nonnegative")
        if self.backbone_blocks_per_stage < 1:
            raise ConfigError("backbone needs at least one block per stage")
        if not (self.supervise_left or self.supervise_right or self.supervise_full):
            raise ConfigError("at least one supervision target must be enabled")

    # derived grid extents
    @property
    def feat_h(self) -> int:
        return self.height // 8

    @property
    def feat_w(self) -> int:
        return self.width // 8

    @property
    def query_h(self) -> int:
        return self.height // 8

    @property
    def query_w(self) -> int:
        return self.width // 16

    @property
    def query_tokens(self) -> int:
        return self.query_h * self.query_w


def config_to_json(config: BookNetConfig) -> dict:
    """Every field explicit; no defaults live on disk."""
    return asdict(config)


def config_from_json(obj: dict) -> BookNetConfig:
    names = {f.name for f in fields(BookNetConfig)}
    unknown = set(obj) - names
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    missing = names - set(obj)
    if missing:
        raise ConfigError(f"missing config fields: {sorted(missing)}")
    return BookNetConfig(**obj)


# ---------------------------------------------------------------------------
# parameter registry


def _attention_specs(prefix: str, c: int):
    for nm in ("wq", "wk", "wv", "wo"):
        yield f"{prefix}.{nm}", (c, c), "attn"
    for nm in ("bq", "bk", "bv", "bo"):
        yield f"{prefix}.{nm}", (c,), "zeros"


def _norm_specs(prefix: str, c: int):
    yield f"{prefix}.g", (c,), "ones"
    yield f"{prefix}.b", (c,), "zeros"


def _ffn_specs(prefix: str, c: int, expansion: int):
    yield f"{prefix}.w1", (c, c * expansion), "ffn1"
    yield f"{prefix}.b1", (c * expansion,), "zeros"
    yield f"{prefix}.w2", (c * expansion, c), "ffn2"
    yield f"{prefix}.b2", (c,), "zeros"


def _decoder_layer_specs(prefix: str, c: int, expansion: int):
    yield from _norm_specs(f"{prefix}.ln1", c)
    yield from _attention_specs(f"{prefix}.self", c)
    yield from _norm_specs(f"{prefix}.ln2", c)
    yield from _attention_specs(f"{prefix}.cross", c)
    yield from _norm_specs(f"{prefix}.ln3", c)
    yield from _ffn_specs(f"{prefix}.ffn", c, expansion)


def param_specs(config: BookNetConfig) -> list[tuple[str, tuple, str]]:
    """Ordered (name, shape, init kind) for every learnable tensor."""
    c = config.channels
    c4, c2 = c // 4, c // 2
    specs: list[tuple[str, tuple, str]] = []

    def put(it: Iterable):
        specs.extend(it)

    # backbone stem + two downsampling stages
    put([(f"backbone.stem.conv.w", (c4, config.in_channels, 7, 7), "conv"), ("backbone.stem.conv.b", (c4,), "zeros")])
    put(_norm_specs("backbone.stem.norm", c4))
    for s, (cin, cout) in enumerate([(c4, c2), (c2, c)], start=1):
        for b in range(config.backbone_blocks_per_stage):
            pre = f"backbone.stage{s}.block{b}"
            bin_ = cin if b == 0 else cout
            put([(f"{pre}.conv1.w", (cout, bin_, 3, 3), "conv"), (f"{pre}.conv1.b", (cout,), "zeros")])
            put(_norm_specs(f"{pre}.norm1", cout))
            put([(f"{pre}.conv2.w", (cout, cout, 3, 3), "conv"), (f"{pre}.conv2.b", (cout,), "zeros")])
            put(_norm_specs(f"{pre}.norm2", cout))
            if b == 0:  # strided block reshapes the skip path too
                put([(f"{pre}.down.conv.w", (cout, bin_, 1, 1), "conv"), (f"{pre}.down.conv.b", (cout,), "zeros")])
                put(_norm_specs(f"{pre}.down.norm", cout))

    # encoder
    specs.append(("pos_embed", (config.feat_h * config.feat_w, c), "embed"))
    for i in range(config.encoder_layers):
        pre = f"enc.l{i}"
        put(_norm_specs(f"{pre}.ln1", c))
        put(_attention_specs(f"{pre}.attn", c))
        put(_norm_specs(f"{pre}.ln2", c))
        put(_ffn_specs(f"{pre}.ffn", c, config.ffn_expansion))

    # branch queries and decoders
    specs.append(("query.left", (config.query_tokens, c), "embed"))
    specs.append(("query.right", (config.query_tokens, c), "embed"))
    for branch in ("left", "right"):
        for stage in (1, 2):
            for i in range(config.decoder_layers_per_stage):
                put(_decoder_layer_specs(f"dec.{branch}.s{stage}.l{i}", c, config.ffn_expansion))

    if config.cross_page_attention:
        for direction in ("ltr", "rtl"):
            put(_attention_specs(f"xpage.{direction}.attn", c))
            put(_norm_specs(f"xpage.{direction}.ln", c))

    if config.use_fusion:
        put([("fusion.conv1.w", (c, c, 3, 3), "conv"), ("fusion.conv1.b", (c,), "zeros")])
        put([("fusion.conv2.w", (c, c, 3, 3), "conv"), ("fusion.conv2.b", (c,), "zeros")])
        put([("head.full.flow.w", (2, c, 3, 3), "flow_head"), ("head.full.flow.b", (2,), "zeros")])

    nup = UPSAMPLE_FACTOR * UPSAMPLE_FACTOR * 9
    for page in ("left", "right"):
        put([(f"head.{page}.flow.w", (2, c, 3, 3), "flow_head"), (f"head.{page}.flow.b", (2,), "zeros")])
        put([(f"head.{page}.up.w", (nup, c, 1, 1), "up_head"), (f"head.{page}.up.b", (nup,), "zeros")])
    put([("head.full.up.w", (nup, c, 1, 1), "up_head"), ("head.full.up.b", (nup,), "zeros")])
    return specs


def param_count(config: BookNetConfig) -> int:
    """Exact number of learnable scalars for a configuration."""
    return int(sum(np.prod(shape) for _, shape, _ in param_specs(config)))


class BookNetParams:
    """Named learnable tensors, checkpoint-ordered."""

    def __init__(self, tensors: dict[str, Tensor], config: BookNetConfig):
        self.tensors = tensors
        self.config = config

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def attention(self, prefix: str) -> AttentionParams:
        t = self.tensors
        return AttentionParams(
            t[f"{prefix}.wq"], t[f"{prefix}.bq"],
            t[f"{prefix}.wk"], t[f"{prefix}.bk"],
            t[f"{prefix}.wv"], t[f"{prefix}.bv"],
            t[f"{prefix}.wo"], t[f"{prefix}.bo"],
        )

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())


def _init_array(rng: np.random.Generator, shape: tuple, kind: str, dtype) -> np.ndarray:
    if kind == "zeros":
        return np.zeros(shape, dtype=dtype)
    if kind == "ones":
        return np.ones(shape, dtype=dtype)
    if kind == "conv":
        fan_in = int(np.prod(shape[1:]))
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(dtype)
    if kind == "attn":
        return rng.normal(0.0, np.sqrt(1.0 / shape[0]), shape).astype(dtype)
    if kind == "ffn1":
        return rng.normal(0.0, np.sqrt(2.0 / shape[0]), shape).astype(dtype)
    if kind == "ffn2":
        return rng.normal(0.0, np.sqrt(1.0 / shape[0]), shape).astype(dtype)
    if kind == "embed":
        return rng.normal(0.0, 0.02, shape).astype(dtype)
    if kind == "flow_head":
        # near-identity start: offsets from the identity grid stay tiny
        return rng.normal(0.0, 1e-4, shape).astype(dtype)
    if kind == "up_head":
        # near-zero logits: an almost uniform 3x3 mixture
        return rng.normal(0.0, 1e-3, shape).astype(dtype)
    raise ValueError(f"unknown init kind {kind!r}")


def init_params(config: BookNetConfig, seed: int = 0, dtype=np.float64) -> BookNetParams:
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape, kind in param_specs(config):
        tensors[name] = Tensor(_init_array(rng, shape, kind, dtype), requires_grad=True, name=name)
    return BookNetParams(tensors, config)


# ---------------------------------------------------------------------------
# forward pieces


def _tokens_from_grid(x: Tensor) -> Tensor:
    c, h, w = x.shape
    return transpose(reshape(x, (c, h * w)), (1, 0))


def _grid_from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    l, c = t.shape
    if l != h * w:
        raise ShapeError(f"token count {l} != grid {h}x{w}")
    return reshape(transpose(t, (1, 0)), (c, h, w))


def _res_block(params: BookNetParams, prefix: str, x: Tensor, stride: int) -> Tensor:
    t = params.tensors
    y = conv2d(x, t[f"{prefix}.conv1.w"], t[f"{prefix}.conv1.b"], stride=stride, padding=1)
    y = relu(instance_norm(y, t[f"{prefix}.norm1.g"], t[f"{prefix}.norm1.b"]))
    y = conv2d(y, t[f"{prefix}.conv2.w"], t[f"{prefix}.conv2.b"], stride=1, padding=1)
    y = instance_norm(y, t[f"{prefix}.norm2.g"], t[f"{prefix}.norm2.b"])
    if f"{prefix}.down.conv.w" in t:
        skip = conv2d(x, t[f"{prefix}.down.conv.w"], t[f"{prefix}.down.conv.b"], stride=stride, padding=0)
        skip = instance_norm(skip, t[f"{prefix}.down.norm.g"], t[f"{prefix}.down.norm.b"])
    else:
        skip = x
    return relu(add(y, skip))


def backbone_forward(image: Tensor, params: BookNetParams, config: BookNetConfig) -> Tensor:
    """(C_in, H, W) -> (C, H/8, W/8); three stride-2 levels."""
    if image.shape != (config.in_channels, config.height, config.width):
        raise ShapeError(
            f"backbone input {image.shape} != ({config.in_channels}, {config.height}, {config.width})"
        )
    t = params.tensors
    x = conv2d(image, t["backbone.stem.conv.w"], t["backbone.stem.conv.b"], stride=2, padding=3)
    x = relu(instance_norm(x, t["backbone.stem.norm.g"], t["backbone.stem.norm.b"]))
    for s in (1, 2):
        for b in range(config.backbone_blocks_per_stage):
            x = _res_block(params, f"backbone.stage{s}.block{b}", x, stride=2 if b == 0 else 1)
    return x


def encoder_forward(features: Tensor, params: BookNetParams, config: BookNetConfig) -> Tensor:
    """Self-attention stack over the flattened feature grid (pre-norm)."""
    c, h, w = features.shape
    if (c, h, w) != (config.channels, config.feat_h, config.feat_w):
        raise ShapeError(f"encoder input {features.shape} != ({config.channels}, {config.feat_h}, {config.feat_w})")
    t = params.tensors
    tok = add(_tokens_from_grid(features), t["pos_embed"])
    for i in range(config.encoder_layers):
        pre = f"enc.l{i}"
        normed = layer_norm(tok, t[f"{pre}.ln1.g"], t[f"{pre}.ln1.b"])
        tok = add(tok, multi_head_attention(normed, normed, normed, params.attention(f"{pre}.attn"), config.heads))
        normed = layer_norm(tok, t[f"{pre}.ln2.g"], t[f"{pre}.ln2.b"])
        ff = linear(relu(linear(normed, t[f"{pre}.ffn.w1"], t[f"{pre}.ffn.b1"])), t[f"{pre}.ffn.w2"], t[f"{pre}.ffn.b2"])
        tok = add(tok, ff)
    return _grid_from_tokens(tok, h, w)


def _decoder_layer(params: BookNetParams, prefix: str, q: Tensor, memory: Tensor, heads: int) -> Tensor:
    t = params.tensors
    normed = layer_norm(q, t[f"{prefix}.ln1.g"], t[f"{prefix}.ln1.b"])
    q = add(q, multi_head_attention(normed, normed, normed, params.attention(f"{prefix}.self"), heads))
    normed = layer_norm(q, t[f"{prefix}.ln2.g"], t[f"{prefix}.ln2.b"])
    q = add(q, multi_head_attention(normed, memory, memory, params.attention(f"{prefix}.cross"), heads))
    normed = layer_norm(q, t[f"{prefix}.ln3.g"], t[f"{prefix}.ln3.b"])
    ff = linear(relu(linear(normed, t[f"{prefix}.ffn.w1"], t[f"{prefix}.ffn.b1"])), t[f"{prefix}.ffn.w2"], t[f"{prefix}.ffn.b2"])
    return add(q, ff)


def _run_stage(params: BookNetParams, branch: str, stage: int, q: Tensor, memory: Tensor, config: BookNetConfig) -> Tensor:
    for i in range(config.decoder_layers_per_stage):
        q = _decoder_layer(params, f"dec.{branch}.s{stage}.l{i}", q, memory, config.heads)
    return q


def decoder_stage1(
    q_left: Tensor, q_right: Tensor, enc_grid: Tensor, params: BookNetParams, config: BookNetConfig
) -> tuple[Tensor, Tensor]:
    """Independent per-branch decoding against the shared encoder tokens."""
    memory = _tokens_from_grid(enc_grid)
    f_l = _run_stage(params, "left", 1, q_left, memory, config)
    f_r = _run_stage(params, "right", 1, q_right, memory, config)
    return f_l, f_r


def cross_page_exchange(
    f_left: Tensor, f_right: Tensor, params: BookNetParams, config: BookNetConfig
) -> tuple[Tensor, Tensor]:
    """Bidirectional attention between the branches; identity when ablated.

    Each branch's tokens query keys/values projected from the counterpart
    branch, with a residual connection and layer norm on top.
    """
    if not config.cross_page_attention:
        return f_left, f_right
    if f_left.shape != f_right.shape:
        raise ShapeError(f"branch token shapes differ: {f_left.shape} vs {f_right.shape}")
    t = params.tensors
    heads = config.heads
    mixed_l = add(f_left, multi_head_attention(f_left, f_right, f_right, params.attention("xpage.ltr.attn"), heads))
    out_l = layer_norm(mixed_l, t["xpage.ltr.ln.g"], t["xpage.ltr.ln.b"])
    mixed_r = add(f_right, multi_head_attention(f_right, f_left, f_left, params.attention("xpage.rtl.attn"), heads))
    out_r = layer_norm(mixed_r, t["xpage.rtl.ln.g"], t["xpage.rtl.ln.b"])
    return out_l, out_r


def decoder_stage2(
    f_left: Tensor, f_right: Tensor, enc_grid: Tensor, params: BookNetParams, config: BookNetConfig
) -> tuple[Tensor, Tensor]:
    memory = _tokens_from_grid(enc_grid)
    out_l = _run_stage(params, "left", 2, f_left, memory, config)
    out_r = _run_stage(params, "right", 2, f_right, memory, config)
    return out_l, out_r


def _coarse_identity(config: BookNetConfig, region: str, dtype) -> np.ndarray:
    """Identity-grid coordinates at coarse-cell block centers, full-source units.

    region: 'left' / 'right' (page heads, width W/16) or 'full' (width W/8).
    """
    f = UPSAMPLE_FACTOR
    gh = config.query_h
    gw = config.feat_w if region == "full" else config.query_w
    rows = np.arange(gh) * f + (f - 1) / 2.0
    cols = np.arange(gw) * f + (f - 1) / 2.0
    if region == "right":
        cols = cols + config.width / 2.0
    u = 2.0 * cols / (config.width - 1) - 1.0
    v = 2.0 * rows / (config.height - 1) - 1.0
    out = np.empty((2, gh, gw), dtype=dtype)
    out[0] = u[None, :]
    out[1] = v[:, None]
    return out


def _page_coarse_flow(params: BookNetParams, page: str, grid: Tensor, config: BookNetConfig) -> Tensor:
    t = params.tensors
    offset = conv2d(grid, t[f"head.{page}.flow.w"], t[f"head.{page}.flow.b"], stride=1, padding=1)
    ident = Tensor(_coarse_identity(config, page, grid.dtype))
    return add(offset, ident)


def fuse_and_predict(
    f_left: Tensor, f_right: Tensor, params: BookNetParams, config: BookNetConfig
) -> tuple[Tensor, Tensor, Tensor, dict]:
    """Branch tokens -> three upsampled flows.

    Page flows come from each branch's own grid; the full flow from the
    width-concatenated grids after two fusion convolutions (or, with fusion
    ablated, by stitching the page coarse flows and keeping only the learned
    upsampling weights).
    """
    t = params.tensors
    gh, gw = config.query_h, config.query_w
    grid_l = _grid_from_tokens(f_left, gh, gw)
    grid_r = _grid_from_tokens(f_right, gh, gw)

    coarse_l = _page_coarse_flow(params, "left", grid_l, config)
    coarse_r = _page_coarse_flow(params, "right", grid_r, config)
    logits_l = conv2d(grid_l, t["head.left.up.w"], t["head.left.up.b"], stride=1, padding=0)
    logits_r = conv2d(grid_r, t["head.right.up.w"], t["head.right.up.b"], stride=1, padding=0)
    m_l = convex_upsample(coarse_l, logits_l)
    m_r = convex_upsample(coarse_r, logits_r)

    cat = concat([grid_l, grid_r], axis=2)  # (C, H/8, W/8)
    if config.use_fusion:
        fused = relu(conv2d(cat, t["fusion.conv1.w"], t["fusion.conv1.b"], stride=1, padding=1))
        fused = relu(conv2d(fused, t["fusion.conv2.w"], t["fusion.conv2.b"], stride=1, padding=1))
        offset = conv2d(fused, t["head.full.flow.w"], t["head.full.flow.b"], stride=1, padding=1)
        coarse_f = add(offset, Tensor(_coarse_identity(config, "full", cat.dtype)))
        logits_f = conv2d(fused, t["head.full.up.w"], t["head.full.up.b"], stride=1, padding=0)
    else:
        coarse_f = concat([coarse_l, coarse_r], axis=2)
        logits_f = conv2d(cat, t["head.full.up.w"], t["head.full.up.b"], stride=1, padding=0)
    m_f = convex_upsample(coarse_f, logits_f)

    diagnostics = {
        "coarse_left": coarse_l.data,
        "coarse_right": coarse_r.data,
        "coarse_full": coarse_f.data,
    }
    return m_l, m_r, m_f, diagnostics


def booknet_forward(
    image: Tensor, params: BookNetParams, config: BookNetConfig
) -> tuple[Tensor, Tensor, Tensor]:
    """Full forward pass: image -> (M_l, M_r, M_f) flow tensors.

    Shapes: (2, H, W/2), (2, H, W/2), (2, H, W).
    """
    features = backbone_forward(image, params, config)
    enc = encoder_forward(features, params, config)
    f_l1, f_r1 = decoder_stage1(params["query.left"], params["query.right"], enc, params, config)
    ex_l, ex_r = cross_page_exchange(f_l1, f_r1, params, config)
    f_l2, f_r2 = decoder_stage2(ex_l, ex_r, enc, params, config)
    m_l, m_r, m_f, _ = fuse_and_predict(f_l2, f_r2, params, config)
    return m_l, m_r, m_f


# ---------------------------------------------------------------------------
# persistence


def save_model(checkpoint_path: Union[str, Path], params: BookNetParams, config_path: Optional[Union[str, Path]] = None) -> None:
    save_checkpoint(checkpoint_path, params.tensors)
    if config_path is not None:
        Path(config_path).write_text(json.dumps(config_to_json(params.config), indent=2, sort_keys=True) + "\n")


def load_model(
    checkpoint_path: Union[str, Path],
    config: Union[BookNetConfig, str, Path],
    dtype=np.float64,
) -> BookNetParams:
    """Load a checkpoint against a config, verifying names and extents."""
    if not isinstance(config, BookNetConfig):
        config = config_from_json(json.loads(Path(config).read_text()))
    arrays = load_checkpoint(checkpoint_path)
    expected = param_specs(config)
    exp_names = [n for n, _, _ in expected]
    if list(arrays) != exp_names:
        missing = [n for n in exp_names if n not in arrays]
        extra = [n for n in arrays if n not in exp_names]
        raise ConfigError(f"checkpoint does not match config (missing {missing[:3]}, extra {extra[:3]})")
    tensors: dict[str, Tensor] = {}
    for name, shape, _ in expected:
        arr = arrays[name]
        if arr.shape != tuple(shape):
            raise ConfigError(f"checkpoint entry {name!r} has shape {arr.shape}, config wants {tuple(shape)}")
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return BookNetParams(tensors, config)
