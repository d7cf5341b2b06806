"""
test_data.py
Scene generator, domain styles, RICA, corpus files and the loader.
"""
from pathlib import Path

import numpy as np
import pytest

import tensor_core as tc
from data import (Domain, DomainStyle, SceneConfig, augment_batch, generate_corpus, generate_scene,
                  make_loader, read_corpus, rica_augment, scene_seed, write_corpus)
from exceptions import ConfigError, DataError, FormatError

CFG = SceneConfig(64, 64, 5)
TESTDATA = Path(__file__).parent / 'testdata'


def flat_style(num_classes):
    return DomainStyle(DomainStyle.source(num_classes).class_colors, noise_sigma=0.0, texture_frequency=0.0)


def test_one_class_zero_noise_scene_is_constant():
    sample = generate_scene(tc.Rng(1), SceneConfig(64, 64, 1), flat_style(1))
    assert np.all(sample.labels == 0)
    assert np.all(np.ptp(sample.image.data, axis=(1, 2)) == 0.0)


def test_same_seed_same_scene():
    style = DomainStyle.source()
    a = generate_scene(tc.Rng(5), CFG, style)
    b = generate_scene(tc.Rng(5), CFG, style)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.image.data, b.image.data)


def test_domain_styles_share_geometry():
    src = generate_scene(tc.Rng(9), CFG, DomainStyle.source(), Domain.SOURCE)
    tgt = generate_scene(tc.Rng(9), CFG, DomainStyle.target(), Domain.TARGET)
    assert np.array_equal(src.labels, tgt.labels)
    assert not np.array_equal(src.image.data, tgt.image.data)
    assert tgt.domain == Domain.TARGET


def test_scene_value_ranges():
    for i in range(10):
        sample = generate_scene(tc.Rng(i), CFG, DomainStyle.target())
        assert sample.image.shape == (3, 64, 64)
        assert 0.0 <= sample.image.data.min() and sample.image.data.max() <= 1.0
        assert sample.labels.max() < CFG.num_classes


def test_class_balance_over_many_scenes():
    counts = np.zeros(CFG.num_classes)
    style = flat_style(CFG.num_classes)
    for i in range(1000):
        counts += np.bincount(generate_scene(tc.Rng(scene_seed(3, i, Domain.SOURCE)), CFG, style).labels.ravel(),
                              minlength=CFG.num_classes)
    assert np.all(counts / counts.sum() >= 0.02)


def test_scene_config_validation():
    with pytest.raises(ConfigError):
        SceneConfig(48, 64, 5).validate()
    with pytest.raises(ConfigError):
        generate_scene(tc.Rng(0), CFG, DomainStyle(((0.0, 0.0, 0.0),)))


def test_domain_parse():
    assert Domain.parse('target') is Domain.TARGET
    assert Domain.parse(Domain.SOURCE) is Domain.SOURCE
    with pytest.raises(ConfigError):
        Domain.parse('val')


# -------------------------------------------------------------------- RICA

def test_rica_zero_strength_is_identity():
    img = generate_scene(tc.Rng(1), CFG, DomainStyle.source()).image
    assert rica_augment(img, tc.Rng(2), 0.0) is img


def test_rica_full_strength_properties():
    img = generate_scene(tc.Rng(1), CFG, DomainStyle.source()).image
    out = rica_augment(img, tc.Rng(2), 1.0)
    again = rica_augment(img, tc.Rng(2), 1.0)
    assert out.shape == img.shape
    assert np.array_equal(out.data, again.data)
    assert 0.0 <= out.data.min() and out.data.max() <= 1.0
    assert not np.array_equal(out.data, img.data)


def test_rica_matches_frozen_output():
    img = tc.Tensor(np.arange(192).reshape(3, 8, 8) / 191.0)
    with open(TESTDATA / 'rica_strength1_seed2.ibat', 'rb') as fh:
        expected = tc.read_tensor(fh)
    assert np.array_equal(rica_augment(img, tc.Rng(2), 1.0).data, expected.data)


def test_rica_rejects_out_of_range_strength():
    with pytest.raises(ConfigError):
        rica_augment(tc.Tensor(np.zeros((3, 4, 4))), tc.Rng(0), 1.5)


def test_augmentation_keeps_labels_aligned_with_pixels():
    labels = np.stack([generate_scene(tc.Rng(i), CFG, flat_style(5)).labels for i in range(4)]).astype(np.int64)
    images = np.repeat(labels[:, None].astype(np.float64) / 10.0, 3, axis=1)
    aug_images, aug_labels = augment_batch(images, labels, tc.Rng(4), strength=0.0, crop_pad=4)
    assert aug_labels.shape == labels.shape
    np.testing.assert_allclose(aug_images[:, 0] * 10.0, aug_labels, atol=1e-12)
    assert np.array_equal(labels, np.stack([generate_scene(tc.Rng(i), CFG, flat_style(5)).labels
                                            for i in range(4)]))


# ---------------------------------------------------------- corpus files

def test_corpus_round_trip_and_reproducibility(tmp_path):
    samples = generate_corpus(7, 6, CFG, Domain.TARGET)
    first = write_corpus(tmp_path / 'a.ibad', samples, CFG.num_classes, Domain.TARGET)
    write_corpus(tmp_path / 'b.ibad', generate_corpus(7, 6, CFG, Domain.TARGET), CFG.num_classes,
                 Domain.TARGET)
    assert (tmp_path / 'a.ibad').read_bytes() == (tmp_path / 'b.ibad').read_bytes()
    corpus = read_corpus(first)
    assert len(corpus) == 6 and corpus.num_classes == 5 and corpus.domain == Domain.TARGET
    for original, loaded in zip(samples, corpus.samples):
        assert np.array_equal(original.image.data, loaded.image.data)
        assert np.array_equal(original.labels, loaded.labels)


def test_corpus_is_generation_order_independent():
    samples = generate_corpus(7, 4, CFG, Domain.SOURCE)
    third = generate_scene(tc.Rng(scene_seed(7, 2, Domain.SOURCE)), CFG, DomainStyle.source(), Domain.SOURCE)
    assert np.array_equal(samples[2].image.data, third.image.data)


def test_target_corpus_uses_its_own_seeds():
    assert scene_seed(7, 0, Domain.SOURCE) != scene_seed(7, 0, Domain.TARGET)


def test_read_corpus_errors(tmp_path):
    with pytest.raises(DataError):
        read_corpus(tmp_path / 'missing.ibad')
    bad = tmp_path / 'bad.ibad'
    bad.write_bytes(b'XXXX' + b'\x00' * 16)
    with pytest.raises(FormatError):
        read_corpus(bad)
    good = write_corpus(tmp_path / 'good.ibad', generate_corpus(1, 2, CFG, Domain.SOURCE), 5, Domain.SOURCE)
    raw = good.read_bytes()
    for cut in (8, 40, len(raw) - 1):
        (tmp_path / 'cut.ibad').write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            read_corpus(tmp_path / 'cut.ibad')


def test_empty_corpus_keeps_its_domain(tmp_path):
    corpus = read_corpus(write_corpus(tmp_path / 'empty.ibad', [], 5, Domain.TARGET))
    assert len(corpus) == 0 and corpus.domain == Domain.TARGET


def test_write_corpus_rejects_foreign_scenes(tmp_path):
    with pytest.raises(DataError):
        write_corpus(tmp_path / 'mixed.ibad', generate_corpus(1, 2, CFG, Domain.SOURCE), 5, Domain.TARGET)


# ------------------------------------------------------------------ loader

def test_loader_batches_per_epoch():
    samples = generate_corpus(1, 8, CFG, Domain.SOURCE)
    loader = make_loader(samples, 4, tc.Rng(0))
    batches = list(loader)
    assert len(loader) == 2 and len(batches) == 2
    images, labels = batches[0]
    assert images.shape == (4, 3, 64, 64) and labels.shape == (4, 64, 64)


def test_loaders_with_same_seed_agree():
    samples = generate_corpus(1, 8, CFG, Domain.SOURCE)
    a = [labels for _, labels in make_loader(samples, 4, tc.Rng(3)).batches(5)]
    b = [labels for _, labels in make_loader(samples, 4, tc.Rng(3)).batches(5)]
    assert len(a) == 5
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_loader_batch_larger_than_dataset():
    samples = generate_corpus(1, 3, CFG, Domain.SOURCE)
    with pytest.raises(DataError):
        make_loader(samples, 4, tc.Rng(0))
    assert len(make_loader(samples, 4, tc.Rng(0), drop_last=False)) == 1
