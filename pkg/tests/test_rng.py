import numpy as np
import pytest

from sgrpf.rng import INIT, PROPOSAL, RESAMPLE, Streams, raw_block, to_uniform


def test_lane_draws_do_not_depend_on_batch():
    wide = Streams(7, lanes=12).normal(PROPOSAL, 3, 5)
    for lane0 in (0, 3, 11):
        alone = Streams(7, lanes=1, lane0=lane0).normal(PROPOSAL, 3, 5)
        np.testing.assert_array_equal(alone[:, 0], wide[:, lane0])
    middle = Streams(7, lanes=4, lane0=5).uniform(RESAMPLE, 2, 3)
    np.testing.assert_array_equal(middle, Streams(7, lanes=12).uniform(RESAMPLE, 2, 3)[:, 5:9])


def test_odd_offsets_within_a_philox_block():
    # per_lane not divisible by the 4-word Philox block exercises the skip path
    full = raw_block(1, 0, 0, 0, 0, 6, 3)
    for lane0 in range(6):
        np.testing.assert_array_equal(raw_block(1, 0, 0, 0, lane0, 1, 3)[0], full[lane0])


def test_streams_steps_and_epochs_are_distinct():
    s = Streams(3, lanes=2)
    a = s.uniform(PROPOSAL, 1, 4)
    assert not np.array_equal(a, s.uniform(INIT, 1, 4))
    assert not np.array_equal(a, s.uniform(PROPOSAL, 2, 4))
    assert not np.array_equal(a, s.with_epoch(1).uniform(PROPOSAL, 1, 4))
    np.testing.assert_array_equal(a, Streams(3, lanes=2).uniform(PROPOSAL, 1, 4))


def test_uniforms_strictly_inside_unit_interval():
    raw = np.array([0, 2**64 - 1], dtype=np.uint64)
    u = to_uniform(raw)
    assert u[0] == 2.0**-53
    assert u[1] == 1.0 - 2.0**-53


def test_normal_moments():
    z = Streams(11, lanes=2000).normal(PROPOSAL, 0, 50).ravel()
    assert abs(z.mean()) < 4 / np.sqrt(z.size)
    assert abs(z.var() - 1.0) < 4 * np.sqrt(2.0 / z.size)
    assert abs(np.mean(z**3)) < 4 * np.sqrt(15.0 / z.size)


@pytest.mark.parametrize("seed", [-1, 2**64])
def test_seed_range(seed):
    with pytest.raises(ValueError):
        Streams(seed)


def test_large_seeds_are_distinct():
    # seeds above 2**63 must not collapse through a signed cast
    a = Streams(2**64 - 1).uniform(INIT, 0, 4)
    b = Streams(2**64 - 2).uniform(INIT, 0, 4)
    c = Streams(2**63).uniform(INIT, 0, 4)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)
