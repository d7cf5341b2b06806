"""
encoder.py
A miniature IBAFormer: overlapping patch-merging encoder with the block-1
attention swap, per-level intra-batch fusion before the decoder, and an
all-MLP decoder. Also owns checkpoint I/O.
"""
import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

import config
import tensor_core as tc
from attention import AttentionKind, AttentionParams, BatchFeatures, attention_output
from exceptions import ConfigError, FormatError, ShapeError
from utils import image_to_tokens, tokens_to_image, upsample_bilinear

CHECKPOINT_MAGIC = b'IBAC'
CHECKPOINT_VERSION = 1
NUM_STAGES = 4


def _parse_fusion(value):
    if value is None or str(value).lower() == 'none':
        return None
    return AttentionKind.parse(value)


@dataclass
class ModelConfig:
    stage_widths: tuple = config.STAGE_WIDTHS
    blocks_per_stage: tuple = config.BLOCKS_PER_STAGE
    heads_per_stage: tuple = config.HEADS_PER_STAGE
    block1_kind: AttentionKind = AttentionKind.SELF
    block2_kind: AttentionKind = AttentionKind.SELF
    fusion_kind: AttentionKind = None
    fusion_site_count: int = config.FUSION_SITE_COUNT
    num_classes: int = config.NUM_CLASSES
    inference_intra_batch: bool = True
    decoder_width: int = config.DECODER_WIDTH
    mlp_ratio: int = config.MLP_RATIO
    in_channels: int = 3
    scale_by_head_count: bool = False
    patch_kernels: tuple = field(default=config.PATCH_KERNELS, init=False)
    patch_strides: tuple = field(default=config.PATCH_STRIDES, init=False)

    def __post_init__(self):
        self.stage_widths = tuple(int(v) for v in self.stage_widths)
        self.blocks_per_stage = tuple(int(v) for v in self.blocks_per_stage)
        self.heads_per_stage = tuple(int(v) for v in self.heads_per_stage)
        self.block1_kind = AttentionKind.parse(self.block1_kind)
        self.block2_kind = AttentionKind.parse(self.block2_kind)
        self.fusion_kind = _parse_fusion(self.fusion_kind)
        self.validate()

    def validate(self):
        for name in ('stage_widths', 'blocks_per_stage', 'heads_per_stage'):
            values = getattr(self, name)
            if len(values) != NUM_STAGES or any(v < 1 for v in values):
                raise ConfigError(f"{name} needs {NUM_STAGES} positive integers, got {values}")
        if any(b < a for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ConfigError(f"stage widths must be nondecreasing, got {self.stage_widths}")
        for width, heads in zip(self.stage_widths, self.heads_per_stage):
            if width % heads:
                raise ConfigError(f"stage width {width} is not divisible by {heads} heads")
        if not 0 <= self.fusion_site_count <= NUM_STAGES:
            raise ConfigError(f"fusion_site_count must lie in [0, {NUM_STAGES}], got {self.fusion_site_count}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.decoder_width < 1 or self.mlp_ratio < 1:
            raise ConfigError("decoder_width and mlp_ratio must be positive")

    def stage_kind(self, stage):
        if stage == 1:
            return self.block1_kind
        if stage == 2:
            return self.block2_kind
        return AttentionKind.SELF

    def fusion_levels(self):
        """Pyramid levels (1-based) that carry a fusion layer, lowest levels first."""
        if self.fusion_kind is None:
            return ()
        return tuple(range(1, self.fusion_site_count + 1))

    def to_dict(self):
        return {
            'stage_widths': list(self.stage_widths),
            'blocks_per_stage': list(self.blocks_per_stage),
            'heads_per_stage': list(self.heads_per_stage),
            'block1_kind': self.block1_kind.value,
            'block2_kind': self.block2_kind.value,
            'fusion_kind': 'none' if self.fusion_kind is None else self.fusion_kind.value,
            'fusion_site_count': self.fusion_site_count,
            'num_classes': self.num_classes,
            'inference_intra_batch': self.inference_intra_batch,
            'decoder_width': self.decoder_width,
            'mlp_ratio': self.mlp_ratio,
            'in_channels': self.in_channels,
            'scale_by_head_count': self.scale_by_head_count,
        }

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in dataclasses.fields(cls) if f.init}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass(frozen=True)
class FeaturePyramid:
    levels: tuple        # four BatchFeatures, strides 4, 8, 16, 32
    spatial: tuple       # (h, w) per level

    def __post_init__(self):
        for feats, (h, w) in zip(self.levels, self.spatial):
            if feats.N != h * w:
                raise ShapeError("pyramid token count does not match its spatial size", (feats.N,), (h, w))


class Model:
    """Configuration plus a flat, name-sorted parameter dict. Treated as immutable."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = dict(sorted(params.items()))

    def with_params(self, params):
        return Model(self.cfg, params)

    def parameter_count(self):
        return int(np.sum([t.size for t in self.params.values()]))

    def attention_params(self, prefix, kind, heads):
        return AttentionParams.from_dict(self.params, prefix, heads, kind,
                                         scale_by_head_count=self.cfg.scale_by_head_count)

    def intra_batch_layers(self):
        layers = []
        for stage in (1, 2):
            if self.cfg.stage_kind(stage) != AttentionKind.SELF:
                layers += [f"stage{stage}.block{j}.attn" for j in range(self.cfg.blocks_per_stage[stage - 1])]
        layers += [f"fusion{level}.attn" for level in self.cfg.fusion_levels()]
        return layers

    def __repr__(self):
        return (f"Model(block1={self.cfg.block1_kind.value}, block2={self.cfg.block2_kind.value}, "
                f"fusion={'none' if self.cfg.fusion_kind is None else self.cfg.fusion_kind.value}, "
                f"params={self.parameter_count()})")


def _dense(rng, d_in, d_out, prefix, std=config.INIT_STD):
    return {
        f"{prefix}.w": tc.Tensor(rng.truncated_normal(std, (d_in, d_out))),
        f"{prefix}.b": tc.Tensor(np.zeros(d_out)),
    }


def _norm(width, prefix):
    return {f"{prefix}.gamma": tc.Tensor(np.ones(width)), f"{prefix}.beta": tc.Tensor(np.zeros(width))}


def build_model(cfg, rng):
    """Initialise every parameter in a fixed order so the same seed gives the same model."""
    cfg.validate()
    params = {}
    in_ch = cfg.in_channels
    for s in range(1, NUM_STAGES + 1):
        width = cfg.stage_widths[s - 1]
        heads = cfg.heads_per_stage[s - 1]
        kernel = cfg.patch_kernels[s - 1]
        params.update(_dense(rng, in_ch * kernel * kernel, width, f"stage{s}.patch"))
        params.update(_norm(width, f"stage{s}.patch_norm"))
        for j in range(cfg.blocks_per_stage[s - 1]):
            prefix = f"stage{s}.block{j}"
            params.update(_norm(width, f"{prefix}.norm1"))
            attn = AttentionParams.init(width, heads, cfg.stage_kind(s), rng)
            params.update(attn.to_dict(f"{prefix}.attn"))
            params.update(_norm(width, f"{prefix}.norm2"))
            params.update(_dense(rng, width, width * cfg.mlp_ratio, f"{prefix}.mlp1"))
            params.update(_dense(rng, width * cfg.mlp_ratio, width, f"{prefix}.mlp2"))
        params.update(_norm(width, f"stage{s}.norm"))
        in_ch = width

    for level in cfg.fusion_levels():
        width = cfg.stage_widths[level - 1]
        params.update(_norm(width, f"fusion{level}.norm"))
        attn = AttentionParams.init(width, cfg.heads_per_stage[level - 1], cfg.fusion_kind, rng)
        params.update(attn.to_dict(f"fusion{level}.attn"))

    for level in range(1, NUM_STAGES + 1):
        params.update(_dense(rng, cfg.stage_widths[level - 1], cfg.decoder_width, f"decoder.proj{level}"))
    params.update(_dense(rng, NUM_STAGES * cfg.decoder_width, cfg.decoder_width, "decoder.fuse"))
    params.update(_dense(rng, cfg.decoder_width, cfg.num_classes, "decoder.classify"))

    model = Model(cfg, params)
    logging.info(f"Built {model}")
    return model


def set_inference_mode(model, intra_batch):
    """Copy of the model that does (True) or does not (False) share information across the batch at inference."""
    return Model(dataclasses.replace(model.cfg, inference_intra_batch=bool(intra_batch)), model.params)


def _norm_apply(model, x, prefix):
    return tc.layer_norm(x, model.params[f"{prefix}.gamma"], model.params[f"{prefix}.beta"])


def _dense_apply(model, x, prefix):
    return tc.linear(x, model.params[f"{prefix}.w"], model.params[f"{prefix}.b"])


def _block(model, x, stage, j, intra_batch, maps):
    prefix = f"stage{stage}.block{j}"
    p = model.attention_params(f"{prefix}.attn", model.cfg.stage_kind(stage), model.cfg.heads_per_stage[stage - 1])
    attended, attn_maps = attention_output(BatchFeatures(_norm_apply(model, x, f"{prefix}.norm1")), p,
                                           intra_batch=intra_batch)
    if maps is not None:
        maps[f"{prefix}.attn"] = attn_maps
    x = tc.add(x, attended)
    hidden = tc.gelu(_dense_apply(model, _norm_apply(model, x, f"{prefix}.norm2"), f"{prefix}.mlp1"))
    return tc.add(x, _dense_apply(model, hidden, f"{prefix}.mlp2"))


def encode(model, images, intra_batch, maps=None):
    cfg = model.cfg
    levels, spatial = [], []
    x = images
    for s in range(1, NUM_STAGES + 1):
        kernel, stride = cfg.patch_kernels[s - 1], cfg.patch_strides[s - 1]
        tokens = tc.unfold(x, kernel, stride, kernel // 2)
        h, w = x.shape[2] // stride, x.shape[3] // stride
        tokens = _norm_apply(model, _dense_apply(model, tokens, f"stage{s}.patch"), f"stage{s}.patch_norm")
        for j in range(cfg.blocks_per_stage[s - 1]):
            tokens = _block(model, tokens, s, j, intra_batch, maps)
        tokens = _norm_apply(model, tokens, f"stage{s}.norm")
        levels.append(BatchFeatures(tokens))
        spatial.append((h, w))
        x = tokens_to_image(tokens, h, w)
    return FeaturePyramid(tuple(levels), tuple(spatial))


def fuse(model, pyramid, intra_batch, maps=None):
    """Pre-decoder intra-batch fusion, one residual layer per configured level."""
    cfg = model.cfg
    levels = list(pyramid.levels)
    for level in cfg.fusion_levels():
        prefix = f"fusion{level}"
        x = levels[level - 1].tensor
        p = model.attention_params(f"{prefix}.attn", cfg.fusion_kind, cfg.heads_per_stage[level - 1])
        attended, attn_maps = attention_output(BatchFeatures(_norm_apply(model, x, f"{prefix}.norm")), p,
                                               intra_batch=intra_batch)
        if maps is not None:
            maps[f"{prefix}.attn"] = attn_maps
        levels[level - 1] = BatchFeatures(tc.add(x, attended))
    return FeaturePyramid(tuple(levels), pyramid.spatial)


def decode(model, pyramid):
    cfg = model.cfg
    out_h, out_w = pyramid.spatial[0]
    upsampled = []
    for level, (feats, (h, w)) in enumerate(zip(pyramid.levels, pyramid.spatial), start=1):
        projected = _dense_apply(model, feats.tensor, f"decoder.proj{level}")
        upsampled.append(upsample_bilinear(tokens_to_image(projected, h, w), out_h, out_w))
    stacked = image_to_tokens(tc.concat(upsampled, axis=1))
    hidden = tc.gelu(_dense_apply(model, stacked, "decoder.fuse"))
    logits = _dense_apply(model, hidden, "decoder.classify")
    return tokens_to_image(logits, out_h, out_w)


def _check_images(model, images):
    if images.ndim != 4 or images.shape[1] != model.cfg.in_channels:
        raise ShapeError(f"images must be [B,{model.cfg.in_channels},H,W]", images.shape)
    if images.shape[2] % 32 or images.shape[3] % 32:
        raise ShapeError("image height and width must be divisible by 32", images.shape)


def forward_with_maps(model, images, intra_batch=None):
    """Logits [B, C, H/4, W/4] plus the attention maps of every layer, keyed by layer name."""
    images = tc.as_tensor(images)
    _check_images(model, images)
    if intra_batch is None:
        intra_batch = model.cfg.inference_intra_batch
    maps = {}
    pyramid = fuse(model, encode(model, images, intra_batch, maps), intra_batch, maps)
    return decode(model, pyramid), maps


def forward(model, images, intra_batch=None):
    images = tc.as_tensor(images)
    _check_images(model, images)
    if intra_batch is None:
        intra_batch = model.cfg.inference_intra_batch
    return decode(model, fuse(model, encode(model, images, intra_batch), intra_batch))


def upsample_logits(logits, height, width):
    return upsample_bilinear(logits, height, width)


def predict(model, images, intra_batch=None):
    """Per-pixel class ids at full input resolution."""
    images = tc.as_tensor(images)
    logits = upsample_logits(forward(model, images, intra_batch), images.shape[2], images.shape[3])
    return np.argmax(logits.data, axis=1)


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path, model, header=None):
    header = dict(header or {})
    header['model'] = model.cfg.to_dict()
    blob = json.dumps(header, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack('<BI', CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack('<I', len(model.params)))
        for name in sorted(model.params):
            encoded = name.encode('utf-8')
            fh.write(struct.pack('<H', len(encoded)))
            fh.write(encoded)
            tc.write_tensor(fh, model.params[name])
    logging.info(f"Saved checkpoint with {len(model.params)} tensors to {path}")
    return path


def load_checkpoint(path):
    """Returns (Model, header dict)."""
    with open(path, 'rb') as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
        version, length = struct.unpack('<BI', tc.read_exact(fh, 5, 'checkpoint header'))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(tc.read_exact(fh, length, 'checkpoint header').decode('utf-8'))
            cfg = ModelConfig.from_dict(header['model'])
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise FormatError(f"{path}: unreadable checkpoint header ({e})") from None
        (count,) = struct.unpack('<I', tc.read_exact(fh, 4, 'checkpoint tensor count'))
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack('<H', tc.read_exact(fh, 2, 'parameter name length'))
            name = tc.read_exact(fh, name_len, 'parameter name').decode('utf-8')
            params[name] = tc.read_tensor(fh)
    logging.info(f"Loaded checkpoint {path} ({count} tensors)")
    return Model(cfg, params), header
