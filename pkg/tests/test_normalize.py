import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikeiaa.normalize import (PAD, ResolutionError, bin_edges, bin_labels, bin_temporal,
                                group_areas, group_sizes, normalize)
from spikeiaa.spike_io import SpikeRecording


def test_bin_sum_example():
    binned, edges = bin_temporal(np.array([[1], [0], [2], [0], [1], [1]]), 2)
    assert binned[:, 0].tolist() == [3, 2]
    assert edges.tolist() == [0, 3, 6]


def test_bin_edges_floor():
    assert bin_edges(7, 2).tolist() == [0, 3, 7]


def test_bin_zeros():
    binned, _ = bin_temporal(np.zeros((10, 3), int), 5)
    assert not binned.any()


def test_resolution_error():
    with pytest.raises(ResolutionError):
        bin_temporal(np.zeros((4, 2), int), 5)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 60), st.integers(1, 400), st.integers(0, 2**31))
def test_edges_partition(T_norm, extra, seed):
    T_raw = T_norm + extra
    e = bin_edges(T_raw, T_norm)
    assert e[0] == 0 and e[-1] == T_raw
    assert np.all(np.diff(e) > 0)
    counts = np.random.default_rng(seed).poisson(2, (T_raw, 3))
    binned, _ = bin_temporal(counts, T_norm)
    np.testing.assert_array_equal(binned.sum(0), counts.sum(0))


def test_group_sizes_70():
    assert group_sizes(70, 8) == [9, 9, 9, 9, 9, 9, 8, 8]


def test_group_70_padded():
    ns = group_areas(np.ones((2, 70), int), 8, 32)
    assert ((ns.channel_map != PAD).sum(1)).tolist() == [9, 9, 9, 9, 9, 9, 8, 8]
    assert ns.values.sum() == 2 * 70


def test_group_256_exact_fill():
    ns = group_areas(np.ones((2, 256), int), 8, 32)
    assert not (ns.channel_map == PAD).any()
    assert ns.channel_map.ravel().tolist() == list(range(256))


def test_group_300_truncated():
    assert group_sizes(300, 8) == [38, 38, 38, 38, 37, 37, 37, 37]
    binned = np.arange(300)[None, :].repeat(3, 0)
    ns = group_areas(binned, 8, 32)
    assert ns.channel_map[0].tolist() == list(range(32))
    assert ns.channel_map[4, 0] == 4 * 38
    kept = ns.channel_map.ravel()
    assert ns.values.sum() == binned[:, kept].sum()


def test_pad_slots_zero():
    ns = group_areas(np.random.default_rng(0).poisson(3, (5, 7)), 8, 4)
    assert not ns.values[:, ns.channel_map == PAD].any()
    # 7 channels over 8 areas: the last area is empty
    assert (ns.channel_map[7] == PAD).all()


def test_channel_map_injective():
    ns = group_areas(np.ones((1, 300), int), 8, 32)
    mapped = ns.channel_map[ns.channel_map != PAD]
    assert len(set(mapped.tolist())) == len(mapped)


def test_permuting_channels_permutes_map():
    rng = np.random.default_rng(3)
    binned = rng.poisson(2, (4, 70))
    perm = rng.permutation(70)
    a = group_areas(binned, 8, 32)
    b = group_areas(binned[:, perm], 8, 32)
    # grouping follows index order only, so the same slots see permuted sources
    np.testing.assert_array_equal(a.channel_map, b.channel_map)
    mapped = a.channel_map != PAD
    np.testing.assert_array_equal(b.values[:, mapped], binned[:, perm][:, a.channel_map[mapped]])


def test_shuffle_flag_is_seeded():
    binned = np.random.default_rng(0).poisson(2, (3, 70))
    a = group_areas(binned, 8, 32, shuffle_seed=5)
    b = group_areas(binned, 8, 32, shuffle_seed=5)
    np.testing.assert_array_equal(a.channel_map, b.channel_map)
    assert not np.array_equal(a.channel_map, group_areas(binned, 8, 32).channel_map)
    assert a.values.sum() == binned.sum()


def test_normalize_shapes(meta):
    rec = SpikeRecording(np.ones((1000, 70), np.uint32), 1000.0, meta)
    ns = normalize(rec)
    assert ns.shape == (100, 8, 32)
    assert ns.bin_edges.tolist()[:3] == [0, 10, 20]
    assert ns.values.sum() == 70000


def test_bin_labels_mean():
    lab = np.arange(6.0)[:, None]
    assert bin_labels(lab, bin_edges(6, 2))[:, 0].tolist() == [1.0, 4.0]
