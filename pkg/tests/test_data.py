import numpy as np
import pytest

from pimtl import data
from pimtl.data import DataError, SplitSpec


def test_split_bounds_partition():
    b = SplitSpec().bounds(1000)
    assert b == {"train": (0, 600), "val": (600, 800), "test": (800, 1000)}


def test_split_must_sum_to_one():
    with pytest.raises(DataError):
        SplitSpec(0.5, 0.2, 0.2)


def test_blocks_stay_inside_their_split(small_data):
    for sd in small_data.values():
        for name in ("train", "val", "test"):
            for blk in sd.blocks(name):
                first = blk.batch.index - 15
                assert first.min() >= blk.start and blk.batch.index.max() < blk.stop
                assert np.all(np.diff(blk.batch.index) == 1)


def test_subject_ids_and_hash(small_data):
    assert sorted(small_data) == [1, 2, 3]
    assert all(len(sd.split_hash) == 16 for sd in small_data.values())


def test_fraction_keeps_prefix(small_data):
    sd = small_data[1]
    half = sd.with_fraction(0.5, 16)
    for full, part in zip(sd.train, half.train):
        n = len(part.batch)
        assert np.array_equal(part.batch.index, full.batch.index[:n])
        assert part.stop - part.start == int(np.ceil(0.5 * (full.stop - full.start)))
    with pytest.raises(DataError):
        sd.with_fraction(0.0, 16)


def test_unprocessed_trials_rejected():
    from pimtl import synth
    trials, subjects = synth.generate_dataset(synth.PopulationConfig(),
                                              synth.ExcitationProfile(duration=0.2), 1, 1, 0)
    with pytest.raises(DataError):
        data.build_subject_data(trials, subjects)
