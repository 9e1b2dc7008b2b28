import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from omuda.cam import (BlockMask, build_class_index, check_index_coverage, combine_masked_image,
                       compute_frequencies, make_block_mask, make_grid_mask, make_random_mask,
                       sample_class, sample_source_image, sampling_distribution, scaled_block,
                       uniform_distribution)
from omuda.datagen import ClassPartition, LabeledImage, SceneConfig, generate_dataset
from omuda.errors import ArgumentError, EmptyDataError, SamplingIndexError

PART = SceneConfig().partition


def _img(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    return LabeledImage(np.zeros(labels.shape + (3,), np.uint8), labels)


def test_frequencies_counting():
    f = compute_frequencies([_img([[0, 0], [0, 1]]), _img([[1, 1], [2, 2]])]).f
    assert np.allclose(f, [3 / 8, 3 / 8, 2 / 8], atol=0)
    f = compute_frequencies([_img([[2, 2], [2, 2]])], K=4).f
    assert list(f) == [0, 0, 1, 0]


def test_frequencies_ignore_and_empty():
    f = compute_frequencies([_img([[0, 255], [1, 255]])]).f
    assert list(f) == [0.5, 0.5]
    with pytest.raises(EmptyDataError):
        compute_frequencies([_img([[255, 255]])])
    with pytest.raises(EmptyDataError):
        compute_frequencies([])


def test_frequencies_match_brute_force():
    ds = generate_dataset(SceneConfig(), "source", 1000, 7)
    f = compute_frequencies(ds, 8).f
    counts = [0] * 8
    total = 0
    for im in ds:
        for v in im.labels.ravel().tolist():
            counts[v] += 1
            total += 1
    assert np.array_equal(f, np.array(counts, dtype=np.float64) / total)


def test_sampling_distribution_examples():
    part = ClassPartition((0, 1), (2, 3))
    d = sampling_distribution(np.array([0.9, 0.1, 0.25, 0.25]), part, T_b=1.0, T_f=1.0)
    assert np.allclose(d.p_back, [0.5, 0.5], atol=1e-15)
    e = math.exp(0.8)
    assert np.allclose(d.p_fore, [1 / (1 + e), e / (1 + e)], atol=1e-15)
    assert abs(d.p_fore[0] - 0.3100) < 1e-4
    d7 = sampling_distribution(np.array([0.9, 0.1, 0.25, 0.25]), part, T_b=1.0, T_f=0.7)
    assert d7.p_fore[1] > d.p_fore[1]
    with pytest.raises(ArgumentError):
        sampling_distribution(np.zeros(4), part, T_b=0.0)


@given(arrays(np.float64, 8, elements=st.floats(0, 1)), st.floats(-5, 5))
def test_sampling_shift_invariance(f, c):
    # adding c to every (1 - f_k) equals subtracting c from every f_k
    a = sampling_distribution(f, PART)
    b = sampling_distribution(f - c, PART)
    assert np.max(np.abs(a.p_fore - b.p_fore)) <= 1e-12
    assert np.max(np.abs(a.p_back - b.p_back)) <= 1e-12


@given(arrays(np.float64, 8, elements=st.floats(0, 1)))
def test_sampling_high_temperature_is_uniform(f):
    d = sampling_distribution(f, PART, T_b=1e6, T_f=1e6)
    assert np.max(np.abs(d.p_fore - 0.25)) < 1e-3 and np.max(np.abs(d.p_back - 0.25)) < 1e-3
    assert abs(d.p_fore.sum() - 1) <= 1e-12 and abs(d.p_back.sum() - 1) <= 1e-12


def test_class_draw_frequencies_monte_carlo():
    f = np.array([0.3, 0.3, 0.2, 0.12, 0.04, 0.02, 0.015, 0.005])
    d = sampling_distribution(f, PART)
    rng = np.random.default_rng(0)
    draws = np.bincount([sample_class(d, rng) for _ in range(100_000)], minlength=8) / 100_000
    assert np.max(np.abs(draws - d.class_probabilities(8))) < 0.01


def test_sample_source_image():
    ds = [_img(np.full((4, 4), k)) for k in (0, 4, 4, 2)]
    index = build_class_index(ds, 8, n_min=8)
    d = sampling_distribution(np.zeros(8), PART)
    one = type(d)((4, 5, 6, 7), np.array([1.0, 0, 0, 0]), (0, 1, 2, 3), np.full(4, 0.25), 1.0)
    rng = np.random.default_rng(1)
    assert {sample_source_image(one, index, rng) for _ in range(50)} == {1, 2}
    with pytest.raises(SamplingIndexError) as e:
        check_index_coverage(one, build_class_index(ds, 8, n_min=100))
    assert e.value.cls == 4
    with pytest.raises(SamplingIndexError):
        sample_source_image(one, build_class_index(ds, 8, n_min=100), rng)


def test_uniform_distribution():
    d = uniform_distribution(PART, 0.3)
    assert np.allclose(d.class_probabilities(8), [0.175] * 4 + [0.075] * 4)


def test_block_mask_extremes():
    rng = np.random.default_rng(0)
    assert make_block_mask(64, 64, 16, 0.0, rng).keep.all()
    assert not make_block_mask(64, 64, 16, 1.0, rng).keep.any()
    with pytest.raises(ArgumentError):
        make_block_mask(64, 64, 0, 0.5, rng)
    with pytest.raises(ArgumentError):
        make_block_mask(64, 64, 16, 1.5, rng)


def test_block_mask_mean_fraction():
    rng = np.random.default_rng(42)
    fr = np.array([make_block_mask(64, 64, 16, 0.7, rng).masked_fraction for _ in range(10_000)])
    assert abs(fr.mean() - 0.7) <= 0.01


@settings(max_examples=40)
@given(st.integers(32, 80), st.integers(32, 80), st.integers(1, 32), st.floats(0, 1), st.integers(0, 1000))
def test_block_mask_invariants(H, W, block, ratio, seed):
    m = make_block_mask(H, W, block, ratio, np.random.default_rng(seed))
    assert m.keep.shape == (H, W) and set(np.unique(m.keep)) <= {0, 1}
    # constant on each aligned tile
    for r0 in range(0, H, block):
        for c0 in range(0, W, block):
            tile = m.keep[r0:r0 + block, c0:c0 + block]
            assert tile.min() == tile.max()
    # masked tiles are within one tile of the ratio
    tiles = m.keep[::block, ::block]
    assert abs((1 - tiles.mean()) - ratio) <= 1.0 / tiles.size + 1e-12


def test_random_and_grid_masks():
    rng = np.random.default_rng(3)
    m = make_random_mask(64, 64, 0.7, rng)
    assert abs(m.masked_fraction - 0.7) <= 1 / 4096
    g = make_grid_mask(64, 64, 8, rng)
    assert g.masked_fraction == 0.5
    assert g.keep[0, 0] != g.keep[0, 8] and g.keep[0, 0] == g.keep[8, 8]
    assert scaled_block(16, 64) == 16 and scaled_block(32, 32) == 16 and scaled_block(1, 8) == 1


def _brute(x, pseudo, part, mb, mf):
    out = np.empty_like(x)
    H, W = pseudo.shape
    for i in range(H):
        for j in range(W):
            keep = mb.keep[i, j] if int(pseudo[i, j]) in part.background else mf.keep[i, j]
            out[i, j] = x[i, j] * keep
    return out


def test_combine_examples():
    rng = np.random.default_rng(5)
    x = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    ones = BlockMask(32, 32, 1, np.ones((32, 32), np.uint8))
    pseudo = rng.integers(0, 8, (32, 32))
    assert np.array_equal(combine_masked_image(x, pseudo, PART, ones, ones), x)
    mb = make_block_mask(32, 32, 8, 0.5, rng)
    mf = make_block_mask(32, 32, 4, 0.5, rng)
    bg = np.zeros((32, 32), int)
    assert np.array_equal(combine_masked_image(x, bg, PART, mb, mf), x * mb.keep[..., None])
    checker = np.where((np.arange(32)[:, None] + np.arange(32)) % 2 == 0, 0, 5)
    comp = BlockMask(32, 32, 8, 1 - mb.keep)
    assert np.array_equal(combine_masked_image(x, checker, PART, mb, comp), _brute(x, checker, PART, mb, comp))
    with pytest.raises(ArgumentError):
        combine_masked_image(x[:16], pseudo, PART, mb, mf)


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_combine_output_is_input_or_zero(seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    pseudo = rng.integers(0, 8, (32, 32))
    mb = make_block_mask(32, 32, 16, 0.7, rng)
    mf = make_block_mask(32, 32, 8, 0.7, rng)
    out = combine_masked_image(x, pseudo, PART, mb, mf)
    assert np.all((out == x) | (out == 0))
    assert np.array_equal(out, _brute(x, pseudo, PART, mb, mf))
