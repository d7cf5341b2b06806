"""
data.py
Procedural segmentation scenes with a photometric source->target domain
shift, the RICA-style colour augmentation, corpus files and the batch loader.
"""
import logging
import math
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

import config
import tensor_core as tc
from exceptions import ConfigError, DataError, FormatError

CORPUS_MAGIC = b'IBAD'
CORPUS_VERSION = 2
TARGET_SALT = 0x7A2E_5D1C_0B3F_9A61

# Base RGB colour per class id; classes beyond the palette cycle through it.
BASE_PALETTE = (
    (0.55, 0.70, 0.90),   # background / sky
    (0.45, 0.40, 0.35),   # ground band
    (0.85, 0.25, 0.20),
    (0.20, 0.65, 0.30),
    (0.90, 0.80, 0.25),
    (0.55, 0.30, 0.70),
    (0.20, 0.55, 0.75),
    (0.95, 0.55, 0.15),
)


class Domain(IntEnum):
    SOURCE = 0
    TARGET = 1

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ConfigError(f"unknown domain {value!r}; expected source or target") from None


@dataclass(frozen=True)
class SceneConfig:
    height: int = config.IMAGE_SIZE
    width: int = config.IMAGE_SIZE
    num_classes: int = config.NUM_CLASSES

    def validate(self):
        if self.height % 32 or self.width % 32 or self.height < 32 or self.width < 32:
            raise ConfigError(f"scene size must be a positive multiple of 32, got {self.height}x{self.width}")
        if self.num_classes < 1 or self.num_classes > 255:
            raise ConfigError(f"num_classes must lie in [1, 255], got {self.num_classes}")


@dataclass(frozen=True)
class DomainStyle:
    class_colors: tuple
    hue_rotation: float = 0.0       # degrees, rotation about the grey axis
    contrast: float = 1.0
    noise_sigma: float = 0.0
    texture_frequency: float = 0.0  # cycles per image; 0 disables texture

    @classmethod
    def source(cls, num_classes=config.NUM_CLASSES):
        return cls(_palette(num_classes), hue_rotation=0.0, contrast=1.0, noise_sigma=0.02,
                   texture_frequency=4.0)

    @classmethod
    def target(cls, num_classes=config.NUM_CLASSES):
        return cls(_palette(num_classes), hue_rotation=40.0, contrast=0.75, noise_sigma=0.06,
                   texture_frequency=9.0)

    @classmethod
    def for_domain(cls, domain, num_classes=config.NUM_CLASSES):
        return cls.source(num_classes) if Domain.parse(domain) == Domain.SOURCE else cls.target(num_classes)


@dataclass(frozen=True)
class SceneSample:
    image: tc.Tensor          # [3, H, W] in [0, 1]
    labels: np.ndarray        # [H, W] uint8 class ids
    domain: Domain


def _palette(num_classes):
    return tuple(BASE_PALETTE[c % len(BASE_PALETTE)] for c in range(num_classes))


def _hue_matrix(degrees):
    """Rotation of RGB space about the (1,1,1) axis."""
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    k = np.ones((3, 3)) / 3.0
    cross = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]]) / math.sqrt(3.0)
    return c * np.eye(3) + s * cross + (1.0 - c) * k


def _draw_geometry(rng, cfg):
    h, w = cfg.height, cfg.width
    labels = np.zeros((h, w), dtype=np.uint8)
    if cfg.num_classes == 1:
        return labels
    ground_top = rng.integers(h // 2, 3 * h // 4)
    labels[ground_top:, :] = 1
    object_classes = list(range(2, cfg.num_classes)) or [1]
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(1, 5)):
        cls = object_classes[rng.integers(0, len(object_classes))]
        rh = rng.integers(h // 8, h // 3 + 1)
        rw = rng.integers(w // 8, w // 3 + 1)
        top = rng.integers(0, h - rh + 1)
        left = rng.integers(0, w - rw + 1)
        labels[top:top + rh, left:left + rw] = cls
    for _ in range(rng.integers(1, 4)):
        cls = object_classes[rng.integers(0, len(object_classes))]
        radius = rng.integers(h // 16, h // 6 + 1)
        cy = rng.integers(0, h)
        cx = rng.integers(0, w)
        labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2] = cls
    return labels


def _render(rng, labels, style):
    h, w = labels.shape
    colors = np.asarray(style.class_colors, dtype=np.float64)
    image = colors[labels].transpose(2, 0, 1).copy()
    if style.texture_frequency > 0:
        angle = rng.uniform(0.0, math.pi)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        wave = np.sin(2.0 * math.pi * style.texture_frequency
                      * (xx * math.cos(angle) + yy * math.sin(angle)) / max(h, w) + phase)
        image *= 1.0 + 0.15 * wave[None]
    if style.hue_rotation:
        image = np.einsum('ij,jhw->ihw', _hue_matrix(style.hue_rotation), image)
    image = (image - 0.5) * style.contrast + 0.5
    if style.noise_sigma > 0:
        image = image + rng.normal(0.0, style.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def generate_scene(rng, cfg, style, domain=Domain.SOURCE):
    """Geometry is drawn before any rendering draw, so one seed gives identical
    labels under every style."""
    cfg.validate()
    if len(style.class_colors) < cfg.num_classes:
        raise ConfigError(f"style defines {len(style.class_colors)} colours for {cfg.num_classes} classes")
    labels = _draw_geometry(rng, cfg)
    image = _render(rng, labels, style)
    return SceneSample(tc.Tensor(image), labels, Domain.parse(domain))


def rica_augment(img, rng, strength):
    """Random per-channel gain/bias followed by a convex channel-mixing matrix."""
    if not 0.0 <= strength <= 1.0:
        raise ConfigError(f"RICA strength must lie in [0, 1], got {strength}")
    if strength == 0.0:
        return img
    data = img.data if isinstance(img, tc.Tensor) else np.asarray(img, dtype=np.float64)
    gain = rng.uniform(1.0 - 0.4 * strength, 1.0 + 0.4 * strength, size=(3,))
    bias = rng.uniform(-0.2 * strength, 0.2 * strength, size=(3,))
    stochastic = rng.uniform(0.0, 1.0, size=(3, 3))
    # plain elementwise sums: no BLAS or fused multiply-add, so outputs are bit-stable
    stochastic = stochastic / (stochastic[:, 0] + stochastic[:, 1] + stochastic[:, 2])[:, None]
    alpha = rng.uniform(0.0, 0.3 * strength)
    mixing = (1.0 - alpha) * np.eye(3) + alpha * stochastic
    shifted = gain[:, None, None] * data + bias[:, None, None]
    out = np.stack([mixing[i, 0] * shifted[0] + mixing[i, 1] * shifted[1] + mixing[i, 2] * shifted[2]
                    for i in range(3)])
    return tc.Tensor(np.clip(out, 0.0, 1.0))


def augment_batch(images, labels, rng, strength=config.RICA_STRENGTH, crop_pad=config.CROP_PAD):
    """Training-time augmentation: edge-padded random crop, horizontal flip, RICA."""
    images = np.array(images)
    labels = np.array(labels)
    b, _, h, w = images.shape
    for i in range(b):
        if crop_pad > 0:
            top = rng.integers(0, 2 * crop_pad + 1)
            left = rng.integers(0, 2 * crop_pad + 1)
            padded = np.pad(images[i], ((0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad)), mode='edge')
            padded_labels = np.pad(labels[i], crop_pad, mode='edge')
            images[i] = padded[:, top:top + h, left:left + w]
            labels[i] = padded_labels[top:top + h, left:left + w]
        if rng.random() < 0.5:
            images[i] = images[i][:, :, ::-1]
            labels[i] = labels[i][:, ::-1]
        images[i] = rica_augment(tc.Tensor(images[i]), rng, strength).data
    return images, labels


def scene_seed(seed, index, domain):
    base = seed if Domain.parse(domain) == Domain.SOURCE else seed ^ TARGET_SALT
    return tc.derive_seed(base, index)


def generate_corpus(seed, count, cfg, domain, style=None):
    """Scene i is a pure function of (seed, i, domain), so generation order does not matter."""
    domain = Domain.parse(domain)
    style = style or DomainStyle.for_domain(domain, cfg.num_classes)
    samples = [generate_scene(tc.Rng(scene_seed(seed, i, domain)), cfg, style, domain) for i in range(count)]
    logging.info(f"Generated {count} {domain.name.lower()} scenes ({cfg.height}x{cfg.width}, {cfg.num_classes} classes)")
    return samples


@dataclass
class Corpus:
    samples: list
    num_classes: int
    domain: Domain = Domain.SOURCE

    def __len__(self):
        return len(self.samples)


def write_corpus(path, samples, num_classes, domain):
    domain = Domain.parse(domain)
    with open(path, 'wb') as fh:
        fh.write(CORPUS_MAGIC)
        fh.write(struct.pack('<BIBB', CORPUS_VERSION, len(samples), num_classes, int(domain)))
        for sample in samples:
            if sample.domain != domain:
                raise DataError(f"{path}: {sample.domain.name.lower()} scene in a {domain.name.lower()} corpus")
            tc.write_tensor(fh, sample.image)
            fh.write(np.ascontiguousarray(sample.labels, dtype=np.uint8).tobytes())
            fh.write(struct.pack('<B', int(sample.domain)))
    logging.info(f"Wrote {len(samples)} {domain.name.lower()} scenes to {path}")
    return path


def read_corpus(path):
    try:
        fh = open(path, 'rb')
    except FileNotFoundError:
        raise DataError(f"corpus file not found: {path}") from None
    with fh:
        magic = fh.read(4)
        if magic != CORPUS_MAGIC:
            raise FormatError(f"{path}: not a corpus file (magic {magic!r})")
        version, count, num_classes, domain = struct.unpack('<BIBB', tc.read_exact(fh, 7, 'corpus header'))
        if version != CORPUS_VERSION:
            raise FormatError(f"{path}: unsupported corpus version {version}")
        if domain not in tuple(Domain):
            raise FormatError(f"{path}: unknown domain id {domain}")
        domain = Domain(domain)
        samples = []
        for _ in range(count):
            image = tc.read_tensor(fh)
            if image.ndim != 3:
                raise FormatError(f"{path}: scene image has shape {image.shape}")
            h, w = image.shape[1], image.shape[2]
            raw = tc.read_exact(fh, h * w, 'label grid')
            labels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()
            (tag,) = struct.unpack('<B', tc.read_exact(fh, 1, 'domain tag'))
            if tag != domain:
                raise FormatError(f"{path}: scene tagged {tag} in a {domain.name.lower()} corpus")
            samples.append(SceneSample(image, labels, domain))
    logging.info(f"Read {count} {domain.name.lower()} scenes from {path}")
    return Corpus(samples, num_classes, domain)


class SceneLoader:
    """Uniformly shuffled batches; the epoch order is a pure function of the rng seed."""

    def __init__(self, samples, batch_size, rng, drop_last=True, shuffle=True, augment=None):
        if batch_size < 1:
            raise ConfigError(f"batch size must be at least 1, got {batch_size}")
        if drop_last and batch_size > len(samples):
            raise DataError(f"batch size {batch_size} exceeds dataset size {len(samples)}")
        self.samples = list(samples)
        self.batch_size = batch_size
        self.rng = rng
        self.drop_last = drop_last
        self.shuffle = shuffle
        self.augment = augment
        self.epoch = 0

    def __len__(self):
        n = len(self.samples)
        return n // self.batch_size if self.drop_last else -(-n // self.batch_size)

    def _collate(self, indices):
        images = np.stack([self.samples[i].image.data for i in indices])
        labels = np.stack([self.samples[i].labels for i in indices]).astype(np.int64)
        if self.augment is not None:
            images, labels = self.augment(images, labels, self.rng)
        return tc.Tensor(images), labels

    def __iter__(self):
        order = self.rng.permutation(len(self.samples)) if self.shuffle else np.arange(len(self.samples))
        self.epoch += 1
        for k in range(len(self)):
            yield self._collate(order[k * self.batch_size:(k + 1) * self.batch_size])

    def batches(self, steps):
        """`steps` batches, crossing epoch boundaries as needed."""
        produced = 0
        while produced < steps:
            for batch in self:
                if produced == steps:
                    return
                yield batch
                produced += 1


def make_loader(samples, batch_size, rng, drop_last=True, shuffle=True, augment=None):
    return SceneLoader(samples, batch_size, rng, drop_last=drop_last, shuffle=shuffle, augment=augment)
