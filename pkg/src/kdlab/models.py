"""Teacher CNN and transformer student models built on the tensor engine.

Four presets share one interface: ``forward`` produces raw logits,
``features`` the penultimate representation used for similarity analysis.
The teacher stacks conv → batchnorm → relu blocks; the students realize a
plain ViT, a two-stage pyramid variant (patch merging, pooled tokens), and
a hybrid variant with a convolutional stem feeding a transformer trunk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    RunningStats,
    Tensor,
    batchnorm2d,
    bmm,
    broadcast_to,
    concat,
    conv2d,
    gelu,
    layernorm,
    matmul,
    relu,
    reshape,
    select,
    softmax_t,
    transpose,
)

PRESET_NAMES = ("teacher", "vit", "pvt", "hybrid")

TEACHER_CHANNELS = (32, 64, 128, 256)
VIT_PATCH, VIT_DIM, VIT_DEPTH, VIT_HEADS, VIT_MLP_RATIO = 4, 64, 4, 4, 4.0
PVT_PATCH, PVT_DIMS, PVT_DEPTHS, PVT_HEADS, PVT_MLP_RATIO = 4, (48, 96), (2, 2), 4, 4.0
HYBRID_STEM, HYBRID_PATCH, HYBRID_DIM, HYBRID_DEPTH, HYBRID_HEADS = (24, 48), 2, 64, 3, 4
HYBRID_MLP_RATIO = 4.0

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelSpec:
    """Architecture selector: preset name plus the input/output contract."""

    preset: str
    in_channels: int
    num_classes: int
    image_size: int = 32

    def __post_init__(self):
        if self.preset not in PRESET_NAMES:
            raise ConfigError(f"unknown model preset {self.preset!r}; choose from {PRESET_NAMES}")
        if self.in_channels < 1 or self.num_classes < 2 or self.image_size < 4:
            raise ConfigError(f"invalid model spec: {self}")


class ParamStore:
    """Named tensors with deterministic (lexicographic) iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in sorted(self._params):
            yield name, self._params[name]

    def total(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled until everything lies within ±2 std."""
    out = rng.normal(0.0, std, size=shape)
    mask = np.abs(out) > 2 * std
    while mask.any():
        out[mask] = rng.normal(0.0, std, size=int(mask.sum()))
        mask = np.abs(out) > 2 * std
    return out


# ---------------------------------------------------------------------------
# building blocks


@dataclass
class AttnParams:
    heads: int
    w_qkv: Tensor
    b_qkv: Tensor
    w_proj: Tensor
    b_proj: Tensor


@dataclass
class BlockParams:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    attn: AttnParams
    ln2_gamma: Tensor
    ln2_beta: Tensor
    w_fc1: Tensor
    b_fc1: Tensor
    w_fc2: Tensor
    b_fc2: Tensor


@dataclass
class ConvBlockParams:
    w: Tensor
    b: Tensor
    gamma: Tensor
    beta: Tensor
    stats: RunningStats
    stride: int


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over the last axis of an arbitrary-rank input."""
    lead = x.shape[:-1]
    d_in = x.shape[-1]
    n = 1
    for e in lead:
        n *= e
    y = matmul(reshape(x, (n, d_in)), w) + b
    return reshape(y, lead + (w.shape[1],))


def patch_embed(images: Tensor, w: Tensor, b: Tensor, patch_size: int) -> Tensor:
    """Flatten non-overlapping patches and project them to the token width."""
    n, c, h, wd = images.shape
    if h % patch_size or wd % patch_size:
        raise ShapeError(
            f"image extents {h}x{wd} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, wd // patch_size
    x = reshape(images, (n, c, gh, patch_size, gw, patch_size))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    x = reshape(x, (n, gh * gw, c * patch_size * patch_size))
    return linear(x, w, b)


def mhsa(x: Tensor, p: AttnParams, capture: dict | None = None,
         prefix: str = "") -> Tensor:
    """Multi-head self-attention: softmax(QKᵀ/√dₕ)·V per head, then projected."""
    n, t, d = x.shape
    if d % p.heads:
        raise ConfigError(f"embed dim {d} not divisible by {p.heads} heads")
    dh = d // p.heads
    qkv = linear(x, p.w_qkv, p.b_qkv)
    qkv = reshape(qkv, (n, t, 3, p.heads, dh))
    qkv = transpose(qkv, (2, 0, 3, 1, 4))  # (3, n, heads, tokens, dh)
    q = select(qkv, 0, 0)
    k = select(qkv, 0, 1)
    v = select(qkv, 0, 2)
    scores = bmm(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = softmax_t(scores, 1.0)
    if capture is not None:
        capture[prefix + "attn"] = attn
    ctx = bmm(attn, v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (n, t, d))
    return linear(ctx, p.w_proj, p.b_proj)


def transformer_block(x: Tensor, blk: BlockParams, activation: str = "gelu",
                      capture: dict | None = None, prefix: str = "") -> Tensor:
    """Pre-norm residual pair: attention sub-layer, then MLP sub-layer."""
    y = x + mhsa(layernorm(x, blk.ln1_gamma, blk.ln1_beta), blk.attn, capture, prefix)
    if capture is not None:
        capture[prefix + "y"] = y
    h = linear(layernorm(y, blk.ln2_gamma, blk.ln2_beta), blk.w_fc1, blk.b_fc1)
    h = gelu(h) if activation == "gelu" else relu(h)
    return y + linear(h, blk.w_fc2, blk.b_fc2)


def conv_block(x: Tensor, p: ConvBlockParams, mode: str) -> Tensor:
    out = conv2d(x, p.w, p.b, stride=p.stride, padding=1)
    out = batchnorm2d(out, p.gamma, p.beta, p.stats, mode)
    return relu(out)


class _Builder:
    """Registers parameters/buffers and keeps structured handles to them."""

    def __init__(self, params: ParamStore, buffers: ParamStore,
                 rng: np.random.Generator):
        self.params = params
        self.buffers = buffers
        self.rng = rng

    def weight(self, name, shape):
        return self.params.add(name, trunc_normal(self.rng, shape))

    def zeros(self, name, shape):
        return self.params.add(name, np.zeros(shape))

    def ones(self, name, shape):
        return self.params.add(name, np.ones(shape))

    def conv_block(self, name, c_in, c_out, stride):
        stats = RunningStats(c_out)
        # register the live stat tensors so checkpoints see batchnorm state
        stats.mean = self.buffers.add(f"{name}.bn.running_mean",
                                      stats.mean.data, requires_grad=False)
        stats.var = self.buffers.add(f"{name}.bn.running_var",
                                     stats.var.data, requires_grad=False)
        return ConvBlockParams(
            w=self.weight(f"{name}.conv.weight", (c_out, c_in, 3, 3)),
            b=self.zeros(f"{name}.conv.bias", (c_out,)),
            gamma=self.ones(f"{name}.bn.gamma", (c_out,)),
            beta=self.zeros(f"{name}.bn.beta", (c_out,)),
            stats=stats,
            stride=stride,
        )

    def block(self, name, dim, heads, mlp_ratio):
        hidden = int(dim * mlp_ratio)
        return BlockParams(
            ln1_gamma=self.ones(f"{name}.ln1.gamma", (dim,)),
            ln1_beta=self.zeros(f"{name}.ln1.beta", (dim,)),
            attn=AttnParams(
                heads=heads,
                w_qkv=self.weight(f"{name}.attn.qkv.weight", (dim, 3 * dim)),
                b_qkv=self.zeros(f"{name}.attn.qkv.bias", (3 * dim,)),
                # zero-started output projections make each block the identity
                # at init, which keeps small-data training stable
                w_proj=self.zeros(f"{name}.attn.proj.weight", (dim, dim)),
                b_proj=self.zeros(f"{name}.attn.proj.bias", (dim,)),
            ),
            ln2_gamma=self.ones(f"{name}.ln2.gamma", (dim,)),
            ln2_beta=self.zeros(f"{name}.ln2.beta", (dim,)),
            w_fc1=self.weight(f"{name}.mlp.fc1.weight", (dim, hidden)),
            b_fc1=self.zeros(f"{name}.mlp.fc1.bias", (hidden,)),
            w_fc2=self.zeros(f"{name}.mlp.fc2.weight", (hidden, dim)),
            b_fc2=self.zeros(f"{name}.mlp.fc2.bias", (dim,)),
        )


class _BaseModel:
    """Common surface: spec, params, buffers, forward/features."""

    spec: ModelSpec
    params: ParamStore
    buffers: ParamStore

    def _check_input(self, images: Tensor) -> None:
        s = self.spec
        want = (s.in_channels, s.image_size, s.image_size)
        if images.ndim != 4 or images.shape[1:] != want:
            raise ShapeError(
                f"{s.preset} expects input N x {want}, got {images.shape}")

    def forward(self, images: Tensor, mode: str = "train",
                capture: dict | None = None) -> Tensor:
        self._check_input(images)
        feat = self._penultimate(images, mode, capture)
        return matmul(feat, self.head_w) + self.head_b

    def features(self, images: Tensor) -> Tensor:
        self._check_input(images)
        return self._penultimate(images, "eval", None)

    def _penultimate(self, images, mode, capture) -> Tensor:
        raise NotImplementedError


class TeacherConvNet(_BaseModel):
    """Stack of conv→batchnorm→relu blocks, pooled into a linear classifier."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        self.params = ParamStore()
        self.buffers = ParamStore()
        b = _Builder(self.params, self.buffers, np.random.default_rng(seed))
        self.blocks = []
        c_in = spec.in_channels
        for i, c_out in enumerate(TEACHER_CHANNELS):
            stride = 1 if i == 0 else 2
            self.blocks.append(b.conv_block(f"stage{i}", c_in, c_out, stride))
            c_in = c_out
        self.head_w = b.weight("head.weight", (c_in, spec.num_classes))
        self.head_b = b.zeros("head.bias", (spec.num_classes,))

    def _penultimate(self, images, mode, capture):
        x = images
        for blk in self.blocks:
            x = conv_block(x, blk, mode)
        pooled = x.mean(axis=(2, 3))
        if capture is not None:
            capture["features"] = pooled
        return pooled


class StudentViT(_BaseModel):
    """Plain ViT: patch tokens plus a class token, pre-norm blocks."""

    def __init__(self, spec: ModelSpec, seed: int = 0,
                 patch: int = VIT_PATCH, dim: int = VIT_DIM,
                 depth: int = VIT_DEPTH, heads: int = VIT_HEADS,
                 mlp_ratio: float = VIT_MLP_RATIO, activation: str = "gelu"):
        if spec.image_size % patch:
            raise ConfigError(f"image size {spec.image_size} not divisible by patch {patch}")
        if dim % heads:
            raise ConfigError(f"embed dim {dim} not divisible by {heads} heads")
        self.spec = spec
        self.patch = patch
        self.dim = dim
        self.activation = activation
        self.n_patches = (spec.image_size // patch) ** 2
        self.params = ParamStore()
        self.buffers = ParamStore()
        b = _Builder(self.params, self.buffers, np.random.default_rng(seed))
        in_dim = spec.in_channels * patch * patch
        self.patch_w = b.weight("embed.weight", (in_dim, dim))
        self.patch_b = b.zeros("embed.bias", (dim,))
        self.cls = b.weight("cls_token", (1, dim))
        self.pos = b.weight("pos_embed", (self.n_patches + 1, dim))
        self.blocks = [b.block(f"block{k}", dim, heads, mlp_ratio)
                       for k in range(depth)]
        self.ln_gamma = b.ones("norm.gamma", (dim,))
        self.ln_beta = b.zeros("norm.beta", (dim,))
        self.head_w = b.weight("head.weight", (dim, spec.num_classes))
        self.head_b = b.zeros("head.bias", (spec.num_classes,))

    def _penultimate(self, images, mode, capture):
        n = images.shape[0]
        tok = patch_embed(images, self.patch_w, self.patch_b, self.patch)
        cls = broadcast_to(reshape(self.cls, (1, 1, self.dim)), (n, 1, self.dim))
        x = concat([tok, cls], axis=1)  # class token rides after the patches
        x = x + self.pos
        for k, blk in enumerate(self.blocks):
            x = transformer_block(x, blk, self.activation, capture, f"block{k}.")
        x = layernorm(x, self.ln_gamma, self.ln_beta)
        feat = select(x, 1, self.n_patches)
        if capture is not None:
            capture["features"] = feat
        return feat


class StudentPyramidViT(_BaseModel):
    """Two-stage pyramid: tokens merge 2x2 between stages, width grows."""

    def __init__(self, spec: ModelSpec, seed: int = 0,
                 patch: int = PVT_PATCH, dims=PVT_DIMS, depths=PVT_DEPTHS,
                 heads: int = PVT_HEADS, mlp_ratio: float = PVT_MLP_RATIO,
                 activation: str = "gelu"):
        grid = spec.image_size // patch
        if spec.image_size % patch or grid % 2:
            raise ConfigError(
                f"image size {spec.image_size} incompatible with patch {patch} and 2x2 merging")
        for d in dims:
            if d % heads:
                raise ConfigError(f"embed dim {d} not divisible by {heads} heads")
        self.spec = spec
        self.patch = patch
        self.dims = tuple(dims)
        self.grid = grid
        self.activation = activation
        self.params = ParamStore()
        self.buffers = ParamStore()
        b = _Builder(self.params, self.buffers, np.random.default_rng(seed))
        in_dim = spec.in_channels * patch * patch
        self.patch_w = b.weight("embed.weight", (in_dim, dims[0]))
        self.patch_b = b.zeros("embed.bias", (dims[0],))
        self.pos = [
            b.weight("stage0.pos_embed", (grid * grid, dims[0])),
            b.weight("stage1.pos_embed", ((grid // 2) ** 2, dims[1])),
        ]
        self.stage_blocks = [
            [b.block(f"stage0.block{k}", dims[0], heads, mlp_ratio)
             for k in range(depths[0])],
            [b.block(f"stage1.block{k}", dims[1], heads, mlp_ratio)
             for k in range(depths[1])],
        ]
        self.merge_w = b.weight("merge.weight", (4 * dims[0], dims[1]))
        self.merge_b = b.zeros("merge.bias", (dims[1],))
        self.ln_gamma = b.ones("norm.gamma", (dims[1],))
        self.ln_beta = b.zeros("norm.beta", (dims[1],))
        self.head_w = b.weight("head.weight", (dims[1], spec.num_classes))
        self.head_b = b.zeros("head.bias", (spec.num_classes,))

    def _merge(self, x: Tensor) -> Tensor:
        # (n, g*g, d) -> 2x2 neighborhoods concatenated -> (n, (g/2)^2, 4d)
        n = x.shape[0]
        g, d = self.grid, self.dims[0]
        x = reshape(x, (n, g // 2, 2, g // 2, 2, d))
        x = transpose(x, (0, 1, 3, 2, 4, 5))
        x = reshape(x, (n, (g // 2) ** 2, 4 * d))
        return linear(x, self.merge_w, self.merge_b)

    def _penultimate(self, images, mode, capture):
        x = patch_embed(images, self.patch_w, self.patch_b, self.patch)
        x = x + self.pos[0]
        for k, blk in enumerate(self.stage_blocks[0]):
            x = transformer_block(x, blk, self.activation, capture, f"stage0.block{k}.")
        x = self._merge(x)
        x = x + self.pos[1]
        for k, blk in enumerate(self.stage_blocks[1]):
            x = transformer_block(x, blk, self.activation, capture, f"stage1.block{k}.")
        x = layernorm(x, self.ln_gamma, self.ln_beta)
        feat = x.mean(axis=1)  # no class token survives merging; pool instead
        if capture is not None:
            capture["features"] = feat
        return feat


class StudentHybridViT(_BaseModel):
    """Convolutional stem (two strided blocks) feeding a small ViT trunk."""

    def __init__(self, spec: ModelSpec, seed: int = 0,
                 stem=HYBRID_STEM, patch: int = HYBRID_PATCH,
                 dim: int = HYBRID_DIM, depth: int = HYBRID_DEPTH,
                 heads: int = HYBRID_HEADS, mlp_ratio: float = HYBRID_MLP_RATIO,
                 activation: str = "gelu"):
        reduced = spec.image_size // (2 ** len(stem))
        if spec.image_size % (2 ** len(stem)) or reduced % patch:
            raise ConfigError(
                f"image size {spec.image_size} leaves stem output {reduced} "
                f"indivisible by trunk patch {patch}")
        if dim % heads:
            raise ConfigError(f"embed dim {dim} not divisible by {heads} heads")
        self.spec = spec
        self.patch = patch
        self.dim = dim
        self.activation = activation
        self.n_patches = (reduced // patch) ** 2
        self.params = ParamStore()
        self.buffers = ParamStore()
        b = _Builder(self.params, self.buffers, np.random.default_rng(seed))
        self.stem_blocks = []
        c_in = spec.in_channels
        for i, c_out in enumerate(stem):
            self.stem_blocks.append(b.conv_block(f"stem{i}", c_in, c_out, 2))
            c_in = c_out
        in_dim = c_in * patch * patch
        self.patch_w = b.weight("embed.weight", (in_dim, dim))
        self.patch_b = b.zeros("embed.bias", (dim,))
        self.cls = b.weight("cls_token", (1, dim))
        self.pos = b.weight("pos_embed", (self.n_patches + 1, dim))
        self.blocks = [b.block(f"block{k}", dim, heads, mlp_ratio)
                       for k in range(depth)]
        self.ln_gamma = b.ones("norm.gamma", (dim,))
        self.ln_beta = b.zeros("norm.beta", (dim,))
        self.head_w = b.weight("head.weight", (dim, spec.num_classes))
        self.head_b = b.zeros("head.bias", (spec.num_classes,))

    def _penultimate(self, images, mode, capture):
        x = images
        for blk in self.stem_blocks:
            x = conv_block(x, blk, mode)
        n = x.shape[0]
        tok = patch_embed(x, self.patch_w, self.patch_b, self.patch)
        cls = broadcast_to(reshape(self.cls, (1, 1, self.dim)), (n, 1, self.dim))
        t = concat([tok, cls], axis=1)
        t = t + self.pos
        for k, blk in enumerate(self.blocks):
            t = transformer_block(t, blk, self.activation, capture, f"block{k}.")
        t = layernorm(t, self.ln_gamma, self.ln_beta)
        feat = select(t, 1, self.n_patches)
        if capture is not None:
            capture["features"] = feat
        return feat


_MODEL_CLASSES = {
    "teacher": TeacherConvNet,
    "vit": StudentViT,
    "pvt": StudentPyramidViT,
    "hybrid": StudentHybridViT,
}


def build_model(spec: ModelSpec, seed: int = 0) -> _BaseModel:
    """Instantiate a preset with deterministic, seed-fixed initialization."""
    return _MODEL_CLASSES[spec.preset](spec, seed)


def forward(model: _BaseModel, images: Tensor, mode: str = "eval") -> Tensor:
    return model.forward(images, mode)


def extract_features(model: _BaseModel, images: Tensor) -> Tensor:
    return model.features(images)


def count_params(model: _BaseModel) -> int:
    return model.params.total()
