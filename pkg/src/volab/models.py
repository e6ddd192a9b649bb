"""Model zoo: conv nets, token transformers, hierarchical window
transformers, and slice-sequence hybrids, in 2-D and 3-D.

Every family shares one contract: ``build_model(cfg, seed)`` gives a
``ModelInstance`` whose ``forward`` returns a probability in [0, 1]
(sigmoid head) plus, on request, per-stage activation taps and attention
records with token centroids in voxel units. Stage taps follow a fixed
per-family protocol so the analysis instruments can address layers
uniformly:

  cnn                 stage1..stage4 (the four residual blocks)
  hybrid_*            encoder, aggregator
  vit                 block1..blockN
  swin                patch_embed, stage1..stageN
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import (
    BatchNorm,
    BiLstm,
    Conv,
    LayerNorm,
    Linear,
    Module,
    PatchEmbed,
    PatchMerge,
    SwinBlock,
    TransformerBlock,
    _normal,
    sinusoid_positions,
)
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    expand_batch,
    load_checkpoint,
    mean,
    narrow,
    pool2d,
    pool3d,
    relu,
    reshape,
    save_checkpoint,
    sigmoid,
    transpose,
)

FAMILIES = ("cnn", "hybrid_lstm", "hybrid_transformer", "vit", "swin")


@dataclass(frozen=True)
class ModelConfig:
    """Declarative architecture description; JSON round-trippable.

    input_shape is the spatial shape the network consumes: 2 dims for 2-D
    models, 3 dims for 3-D models and for hybrids (whose first axis is the
    slice-sequence axis feeding a 2-D per-slice encoder).
    """

    family: str
    input_dims: int
    input_shape: tuple
    in_channels: int = 1
    preset: str = "desk"
    pad_policy: str = "strict"
    # conv backbone (cnn family; also the hybrid per-slice encoder)
    stem_channels: int = 8
    stage_channels: tuple = (8, 16, 32, 64)
    stage_strides: tuple = (1, 2, 2, 2)
    # token families
    patch_size: tuple = ()
    embed_dim: int = 32
    depth: int = 2
    n_heads: int = 2
    mlp_ratio: float = 4.0
    window_size: tuple = ()
    stage_depths: tuple = ()
    # hybrid aggregator
    agg_hidden: int = 16
    agg_depth: int = 2
    agg_heads: int = 4
    agg_dropout: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "stage_channels",
                           tuple(self.stage_channels))
        object.__setattr__(self, "stage_strides", tuple(self.stage_strides))
        object.__setattr__(self, "patch_size", tuple(self.patch_size))
        object.__setattr__(self, "window_size", tuple(self.window_size))
        object.__setattr__(self, "stage_depths", tuple(self.stage_depths))
        if self.family not in FAMILIES:
            raise ShapeError(f"unknown family {self.family!r}")
        if self.input_dims not in (2, 3):
            raise ShapeError(f"input_dims must be 2 or 3, got "
                             f"{self.input_dims}")
        if self.pad_policy not in ("strict", "pad"):
            raise ShapeError(f"unknown pad_policy {self.pad_policy!r}")
        expect = 3 if self.family.startswith("hybrid") else self.input_dims
        if len(self.input_shape) != expect:
            raise ShapeError(f"{self.family} expects {expect} spatial dims, "
                             f"got {self.input_shape}")
        if self.family in ("vit", "swin"):
            if len(self.patch_size) != self.input_dims:
                raise ShapeError("patch_size must match input_dims")
            if self.embed_dim % self.n_heads != 0:
                raise ShapeError(f"embed dim {self.embed_dim} not divisible "
                                 f"by {self.n_heads} heads")
            if self.pad_policy == "strict":
                for s, p in zip(self.input_shape, self.patch_size):
                    if s % p != 0:
                        raise ShapeError(
                            f"input {self.input_shape} not divisible by "
                            f"patch {self.patch_size} (pad_policy=strict)")
        if self.family == "swin":
            if len(self.window_size) != self.input_dims:
                raise ShapeError("window_size must match input_dims")
            if not self.stage_depths:
                raise ShapeError("swin needs stage_depths")
        if self.family == "cnn" or self.family.startswith("hybrid"):
            if len(self.stage_channels) != len(self.stage_strides):
                raise ShapeError("stage_channels/stage_strides length "
                                 "mismatch")

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def token_grid(self):
        """Token grid after patch embedding (pads first when allowed)."""
        if self.family not in ("vit", "swin"):
            raise ShapeError(f"{self.family} has no token grid")
        grid = []
        for s, p in zip(self.input_shape, self.patch_size):
            padded = s + ((-s) % p if self.pad_policy == "pad" else 0)
            grid.append(padded // p)
        return tuple(grid)


def desk_config(name):
    """Small CPU-tractable presets keyed by family+dimensionality."""
    presets = {
        "cnn2d": ModelConfig(
            family="cnn", input_dims=2, input_shape=(32, 32),
            stem_channels=8, stage_channels=(8, 16, 32, 64),
            stage_strides=(1, 2, 2, 2)),
        "cnn3d": ModelConfig(
            family="cnn", input_dims=3, input_shape=(32, 32, 32),
            stem_channels=8, stage_channels=(8, 16, 32, 64),
            stage_strides=(1, 2, 2, 2)),
        "vit2d": ModelConfig(
            family="vit", input_dims=2, input_shape=(32, 32),
            patch_size=(8, 8), embed_dim=32, depth=2, n_heads=2),
        "vit3d": ModelConfig(
            family="vit", input_dims=3, input_shape=(32, 32, 32),
            patch_size=(4, 8, 8), embed_dim=32, depth=2, n_heads=2),
        "swin2d": ModelConfig(
            family="swin", input_dims=2, input_shape=(32, 32),
            patch_size=(2, 2), embed_dim=12, n_heads=2,
            window_size=(4, 4), stage_depths=(2, 2, 1, 1)),
        "swin3d": ModelConfig(
            family="swin", input_dims=3, input_shape=(32, 32, 32),
            patch_size=(4, 4, 4), embed_dim=12, n_heads=2,
            window_size=(4, 4, 4), stage_depths=(2, 2, 1, 1)),
        "hybrid_lstm": ModelConfig(
            family="hybrid_lstm", input_dims=2, input_shape=(32, 32, 32),
            stem_channels=4, stage_channels=(4, 8, 16, 32),
            stage_strides=(1, 2, 2, 2), agg_hidden=16),
        "hybrid_transformer": ModelConfig(
            family="hybrid_transformer", input_dims=2,
            input_shape=(32, 32, 32), stem_channels=4,
            stage_channels=(4, 8, 16, 32), stage_strides=(1, 2, 2, 2),
            agg_depth=2, agg_heads=4, agg_dropout=0.1),
    }
    if name not in presets:
        raise KeyError(f"unknown desk preset {name!r}; "
                       f"choose from {sorted(presets)}")
    return presets[name]


def paper_config(name):
    """Full-scale geometry presets (shape-level tests; too slow to train
    here). Widths/depths follow the published configurations."""
    presets = {
        "cnn2d": ModelConfig(
            family="cnn", input_dims=2, input_shape=(224, 224),
            preset="paper", stem_channels=64,
            stage_channels=(64, 128, 256, 512), stage_strides=(1, 2, 2, 2)),
        "cnn3d": ModelConfig(
            family="cnn", input_dims=3, input_shape=(112, 112, 80),
            preset="paper", stem_channels=64,
            stage_channels=(64, 128, 256, 512), stage_strides=(1, 2, 2, 2)),
        "vit2d": ModelConfig(
            family="vit", input_dims=2, input_shape=(224, 224),
            preset="paper", patch_size=(16, 16), embed_dim=768, depth=12,
            n_heads=12),
        "vit3d": ModelConfig(
            family="vit", input_dims=3, input_shape=(112, 112, 80),
            preset="paper", patch_size=(16, 16, 4), embed_dim=512, depth=12,
            n_heads=8),
        "swin2d": ModelConfig(
            family="swin", input_dims=2, input_shape=(224, 224),
            preset="paper", patch_size=(4, 4), embed_dim=96, n_heads=3,
            window_size=(7, 7), stage_depths=(2, 2, 6, 2)),
        "swin3d": ModelConfig(
            family="swin", input_dims=3, input_shape=(112, 112, 80),
            preset="paper", patch_size=(4, 4, 4), embed_dim=96, n_heads=3,
            window_size=(4, 4, 4), stage_depths=(2, 2, 6, 2),
            pad_policy="pad"),
        "hybrid_lstm": ModelConfig(
            family="hybrid_lstm", input_dims=2,
            input_shape=(24, 224, 224), preset="paper", stem_channels=64,
            stage_channels=(64, 128, 256, 512), stage_strides=(1, 2, 2, 2),
            agg_hidden=256),
        "hybrid_transformer": ModelConfig(
            family="hybrid_transformer", input_dims=2,
            input_shape=(24, 224, 224), preset="paper", stem_channels=64,
            stage_channels=(64, 128, 256, 512), stage_strides=(1, 2, 2, 2),
            agg_depth=6, agg_heads=8, agg_dropout=0.1),
    }
    if name not in presets:
        raise KeyError(f"unknown paper preset {name!r}; "
                       f"choose from {sorted(presets)}")
    return presets[name]


@dataclass
class AttentionRecord:
    """One attention map: (groups, heads, L, L) probabilities plus the
    voxel-space centroid of every token, NaN rows marking class tokens."""
    layer: str
    attn: np.ndarray
    centroids: np.ndarray


@dataclass
class StageTap:
    """A named activation snapshot for mechanistic analysis.

    kind "grid" taps are (N, C, *spatial); "tokens" are (N, L, D) with
    per-token voxel centroids; "vector" are (N, F).
    """
    name: str
    kind: str
    data: Tensor
    centroids: np.ndarray = None
    has_cls: bool = False


@dataclass
class ForwardResult:
    pred: Tensor
    attention: list = field(default_factory=list)
    stages: list = field(default_factory=list)


class ResidualBlock(Module):
    """conv3x3(stride)-BN-ReLU-conv3x3-BN + projection skip, ReLU after."""

    def __init__(self, rng, nd, in_ch, out_ch, stride, dtype=np.float32):
        super().__init__()
        k = (3,) * nd
        self.conv1 = Conv(rng, in_ch, out_ch, k, stride=stride, padding=1,
                          bias=False, dtype=dtype)
        self.bn1 = BatchNorm(out_ch, dtype=dtype)
        self.conv2 = Conv(rng, out_ch, out_ch, k, stride=1, padding=1,
                          bias=False, dtype=dtype)
        self.bn2 = BatchNorm(out_ch, dtype=dtype)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv(rng, in_ch, out_ch, (1,) * nd, stride=stride,
                             padding=0, bias=False, dtype=dtype)
            self.proj_bn = BatchNorm(out_ch, dtype=dtype)
        else:
            self.proj = None
            self.proj_bn = None

    def __call__(self, x):
        h = self.bn2(self.conv2(relu(self.bn1(self.conv1(x)))))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return relu(add(h, skip))


class ConvBackbone(Module):
    """Stem (conv-BN-ReLU-maxpool2) + one residual block per stage."""

    def __init__(self, rng, nd, in_ch, stem_ch, channels, strides,
                 dtype=np.float32):
        super().__init__()
        self.nd = nd
        self.stem = Conv(rng, in_ch, stem_ch, (3,) * nd, stride=1, padding=1,
                         bias=False, dtype=dtype)
        self.stem_bn = BatchNorm(stem_ch, dtype=dtype)
        blocks = []
        prev = stem_ch
        for ch, st in zip(channels, strides):
            blocks.append(ResidualBlock(rng, nd, prev, ch, st, dtype=dtype))
            prev = ch
        self.blocks = blocks
        self.out_channels = prev

    def __call__(self, x):
        pool = pool3d if self.nd == 3 else pool2d
        h = pool(relu(self.stem_bn(self.stem(x))), "max", 2, stride=2)
        taps = []
        for blk in self.blocks:
            h = blk(h)
            taps.append(h)
        return h, taps


class CnnNet(Module):
    def __init__(self, rng, cfg, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.backbone = ConvBackbone(rng, cfg.input_dims, cfg.in_channels,
                                     cfg.stem_channels, cfg.stage_channels,
                                     cfg.stage_strides, dtype=dtype)
        self.head = Linear(rng, self.backbone.out_channels, 1, dtype=dtype)

    def forward(self, x, training=False, rng=None, record_attention=False,
                record_stages=False):
        if record_attention:
            raise ShapeError("model has no attention layers")
        h, tap_tensors = self.backbone(x)
        feat = mean(h, axis=tuple(range(2, h.ndim)))
        pred = reshape(sigmoid(self.head(feat)), (x.shape[0],))
        stages = []
        if record_stages:
            stages = [StageTap(f"stage{i + 1}", "grid", t)
                      for i, t in enumerate(tap_tensors)]
        return ForwardResult(pred=pred, stages=stages)


class VitNet(Module):
    def __init__(self, rng, cfg, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.embed = PatchEmbed(rng, cfg.in_channels, cfg.patch_size, d,
                                pad_policy=cfg.pad_policy, dtype=dtype)
        self.cls = _normal(rng, (1, d), 0.02, dtype)
        n_tokens = 1
        for g in cfg.token_grid():
            n_tokens *= g
        # learned position table covers CLS (row 0) + every patch token
        self.pos = _normal(rng, (n_tokens + 1, d), 0.02, dtype)
        self.blocks = [TransformerBlock(rng, d, cfg.n_heads,
                                        mlp_ratio=cfg.mlp_ratio, dtype=dtype)
                       for _ in range(cfg.depth)]
        self.norm = LayerNorm(d, dtype=dtype)
        self.head = Linear(rng, d, 1, dtype=dtype)

    def forward(self, x, training=False, rng=None, record_attention=False,
                record_stages=False):
        n = x.shape[0]
        tokens, grid = self.embed(x)
        cents = self.embed.centroids(grid)
        cls_cents = np.concatenate(
            [np.full((1, cents.shape[1]), np.nan), cents], axis=0)
        t = concat([expand_batch(self.cls, n), tokens], axis=1)
        t = add(t, self.pos)
        records, stages = [], []
        for i, blk in enumerate(self.blocks):
            t, attn = blk(t, rng=rng, record=record_attention)
            if record_attention:
                records.append(AttentionRecord(
                    layer=f"block{i + 1}", attn=attn,
                    centroids=cls_cents[None]))
            if record_stages:
                stages.append(StageTap(f"block{i + 1}", "tokens", t,
                                       centroids=cls_cents, has_cls=True))
        t = self.norm(t)
        cls_out = reshape(narrow(t, 1, 0, 1), (n, self.cfg.embed_dim))
        pred = reshape(sigmoid(self.head(cls_out)), (n,))
        return ForwardResult(pred=pred, attention=records, stages=stages)


def merge_centroids(cgrid):
    """Parent centroid = mean of its 2^nd children (numpy twin of the
    token merge)."""
    nd = cgrid.ndim - 1
    half = tuple(g // 2 for g in cgrid.shape[:-1])
    shape = []
    for h in half:
        shape.extend([h, 2])
    shape.append(nd)
    arr = cgrid.reshape(shape)
    axes = tuple(2 * a + 1 for a in range(nd))
    return arr.mean(axis=axes)


class SwinNet(Module):
    def __init__(self, rng, cfg, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        nd = cfg.input_dims
        d = cfg.embed_dim
        self.embed = PatchEmbed(rng, cfg.in_channels, cfg.patch_size, d,
                                pad_policy=cfg.pad_policy, dtype=dtype)
        self.embed_norm = LayerNorm(d, dtype=dtype)
        shift = tuple(w // 2 for w in cfg.window_size)
        stages, merges = [], []
        for s, depth in enumerate(cfg.stage_depths):
            dim_s = d * (2 ** s)
            heads_s = cfg.n_heads * (2 ** s)
            blocks = []
            for b in range(depth):
                # even blocks use plain windows, odd blocks shifted ones
                blk_shift = shift if b % 2 == 1 else (0,) * nd
                blocks.append(SwinBlock(rng, dim_s, heads_s, cfg.window_size,
                                        blk_shift, mlp_ratio=cfg.mlp_ratio,
                                        dtype=dtype))
            stages.append(blocks)
            if s < len(cfg.stage_depths) - 1:
                merges.append(PatchMerge(rng, dim_s, nd,
                                         pad_policy=cfg.pad_policy,
                                         dtype=dtype))
        self.stages = [blk for blocks in stages for blk in blocks]
        self._stage_layout = [len(blocks) for blocks in stages]
        self.merges = merges
        final_dim = d * (2 ** (len(cfg.stage_depths) - 1))
        self.norm = LayerNorm(final_dim, dtype=dtype)
        self.head = Linear(rng, final_dim, 1, dtype=dtype)

    def forward(self, x, training=False, rng=None, record_attention=False,
                record_stages=False):
        n = x.shape[0]
        cfg = self.cfg
        tokens, grid = self.embed(x)
        t = self.embed_norm(tokens)
        cgrid = self.embed.centroids(grid).reshape(grid + (len(grid),))
        records, stages = [], []
        if record_stages:
            stages.append(StageTap("patch_embed", "tokens", t,
                                   centroids=cgrid.reshape(-1, len(grid))))
        t = reshape(t, (n,) + grid + (cfg.embed_dim,))
        idx = 0
        for s, depth in enumerate(self._stage_layout):
            for b in range(depth):
                t, attn, cents = self.stages[idx](
                    t, record=record_attention, centroid_grid=cgrid)
                idx += 1
                if record_attention:
                    records.append(AttentionRecord(
                        layer=f"stage{s + 1}.block{b + 1}", attn=attn,
                        centroids=cents))
            if record_stages:
                flat = reshape(t, (n, -1, t.shape[-1]))
                stages.append(StageTap(
                    f"stage{s + 1}", "tokens", flat,
                    centroids=cgrid.reshape(-1, cgrid.shape[-1])))
            if s < len(self._stage_layout) - 1:
                t, grid = self.merges[s](t)
                cgrid = merge_centroids(cgrid)
        t = reshape(t, (n, -1, t.shape[-1]))
        t = self.norm(t)
        feat = mean(t, axis=1)
        pred = reshape(sigmoid(self.head(feat)), (n,))
        return ForwardResult(pred=pred, attention=records, stages=stages)


class HybridNet(Module):
    """Shared 2-D encoder over the slice sequence + sequence aggregator."""

    def __init__(self, rng, cfg, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.encoder = ConvBackbone(rng, 2, cfg.in_channels,
                                    cfg.stem_channels, cfg.stage_channels,
                                    cfg.stage_strides, dtype=dtype)
        f = self.encoder.out_channels
        self.feature_dim = f
        n_slices = cfg.input_shape[0]
        if cfg.family == "hybrid_lstm":
            self.agg = BiLstm(rng, f, cfg.agg_hidden, dtype=dtype)
            agg_out = 2 * cfg.agg_hidden
        else:
            self.cls = _normal(rng, (1, f), 0.02, dtype)
            # fixed sin/cos positions; row 0 is taken by the class token
            self._buffers = {"pos_table": sinusoid_positions(n_slices + 1, f,
                                                             dtype=dtype)}
            self.agg_blocks = [
                TransformerBlock(rng, f, cfg.agg_heads, mlp_ratio=cfg.mlp_ratio,
                                 drop=cfg.agg_dropout, dtype=dtype)
                for _ in range(cfg.agg_depth)]
            self.agg_norm = LayerNorm(f, dtype=dtype)
            agg_out = f
        self.head = Linear(rng, agg_out, 1, dtype=dtype)

    def forward(self, x, training=False, rng=None, record_attention=False,
                record_stages=False):
        cfg = self.cfg
        n, c = x.shape[0], x.shape[1]
        s = x.shape[2]
        slices = reshape(transpose(x, (0, 2, 1, 3, 4)),
                         (n * s, c) + tuple(x.shape[3:]))
        h, _ = self.encoder(slices)
        feat = mean(h, axis=tuple(range(2, h.ndim)))
        seq = reshape(feat, (n, s, self.feature_dim))
        slice_cents = np.arange(s, dtype=np.float64)[:, None]
        records, stages = [], []
        if record_stages:
            stages.append(StageTap("encoder", "tokens", seq,
                                   centroids=slice_cents))
        if cfg.family == "hybrid_lstm":
            if record_attention:
                raise ShapeError("model has no attention layers")
            agg_feat = self.agg(seq)
        else:
            if training and rng is None:
                raise ValueError("hybrid_transformer in training mode needs "
                                 "an rng for dropout")
            t = concat([expand_batch(self.cls, n), seq], axis=1)
            t = add(t, Tensor(self._buffers["pos_table"]))
            cls_cents = np.concatenate([np.full((1, 1), np.nan),
                                        slice_cents], axis=0)
            for i, blk in enumerate(self.agg_blocks):
                t, attn = blk(t, rng=rng, record=record_attention)
                if record_attention:
                    records.append(AttentionRecord(
                        layer=f"agg_block{i + 1}", attn=attn,
                        centroids=cls_cents[None]))
            t = self.agg_norm(t)
            agg_feat = reshape(narrow(t, 1, 0, 1), (n, self.feature_dim))
        if record_stages:
            stages.append(StageTap("aggregator", "vector", agg_feat))
        pred = reshape(sigmoid(self.head(agg_feat)), (n,))
        return ForwardResult(pred=pred, attention=records, stages=stages)


_NETS = {
    "cnn": CnnNet,
    "vit": VitNet,
    "swin": SwinNet,
    "hybrid_lstm": HybridNet,
    "hybrid_transformer": HybridNet,
}


class ModelInstance:
    """A built network plus its config and the stage-tap protocol."""

    def __init__(self, config, net):
        self.config = config
        self.net = net

    def forward(self, x, training=False, rng=None, record_attention=False,
                record_stages=False):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x))
        expect = (self.config.in_channels,) + self.config.input_shape
        if x.shape[1:] != expect:
            raise ShapeError(f"input shape {x.shape[1:]} does not match "
                             f"model input {expect}")
        if record_attention and x.shape[0] != 1:
            raise ShapeError("attention recording expects batch size 1")
        self.net.set_training(training)
        return self.net.forward(x, training=training, rng=rng,
                                record_attention=record_attention,
                                record_stages=record_stages)

    def stage_names(self):
        cfg = self.config
        if cfg.family == "cnn":
            return [f"stage{i + 1}" for i in range(len(cfg.stage_channels))]
        if cfg.family.startswith("hybrid"):
            return ["encoder", "aggregator"]
        if cfg.family == "vit":
            return [f"block{i + 1}" for i in range(cfg.depth)]
        return ["patch_embed"] + [f"stage{i + 1}"
                                  for i in range(len(cfg.stage_depths))]

    def named_parameters(self):
        return self.net.named_parameters()

    def named_buffers(self):
        return self.net.named_buffers()

    def param_count(self):
        return sum(int(p.size) for _, p in self.named_parameters())

    def state_arrays(self):
        arrays = {name: p.data for name, p in self.named_parameters()}
        for name, buf in self.named_buffers():
            arrays[name] = buf
        return arrays

    def save(self, path, epoch=0, val_mse=0.0):
        arrays = dict(self.state_arrays())
        arrays["meta.epoch"] = np.asarray(float(epoch), dtype=np.float32)
        arrays["meta.val_mse"] = np.asarray(float(val_mse), dtype=np.float32)
        save_checkpoint(path, arrays)

    def load(self, path):
        arrays = load_checkpoint(path)

        def scalar(key):
            arr = arrays.pop(key, None)
            return 0.0 if arr is None else float(np.asarray(arr).reshape(-1)[0])

        meta = {"epoch": int(scalar("meta.epoch")),
                "val_mse": scalar("meta.val_mse")}
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, arr in arrays.items():
            if name in params:
                target = params[name]
                if target.shape != arr.shape:
                    raise ShapeError(f"checkpoint shape {arr.shape} does not "
                                     f"match parameter {name} {target.shape}")
                target.data[...] = arr.astype(target.data.dtype)
            elif name in buffers:
                buffers[name][...] = arr.astype(buffers[name].dtype)
            else:
                raise ShapeError(f"checkpoint entry {name!r} not in model")
        return meta


def build_model(cfg, seed=0, dtype=np.float32):
    """Deterministic instantiation: same (cfg, seed) -> same parameters."""
    rng = np.random.default_rng(seed)
    net = _NETS[cfg.family](rng, cfg, dtype=dtype)
    return ModelInstance(cfg, net)


__all__ = [
    "AttentionRecord", "FAMILIES", "ForwardResult", "ModelConfig",
    "ModelInstance", "StageTap", "build_model", "desk_config",
    "merge_centroids", "paper_config",
]
