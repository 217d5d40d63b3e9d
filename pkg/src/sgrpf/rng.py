"""Counter-based random streams keyed by (seed, stream, step, epoch, lane).

Built on numpy's Philox bit generator.  Every draw is addressed by its
coordinates rather than by generator state, so a replicate lane sees the
same numbers whether it runs alone or inside a batch of 10^5 lanes, and
turning resampling on or off does not shift the proposal noise.
"""

import numpy as np

INIT, PROPOSAL, RESAMPLE, DATA, OBS, MIXTURE = range(6)

_MASK64 = (1 << 64) - 1
_TWO_NEG52 = 2.0**-52


def _check_seed(seed):
    seed = int(seed)
    if seed < 0 or seed > _MASK64:
        raise ValueError(f"seed must be in [0, 2**64), got {seed}")
    return seed


def raw_block(seed, stream, step, epoch, lane0, lanes, per_lane):
    """uint64 draws, shape ``(lanes, per_lane)``, lane ``l`` at offset ``(lane0 + l) * per_lane``."""
    key = np.array([_check_seed(seed), int(stream)], dtype=np.uint64)
    bg = np.random.Philox(key=key, counter=np.array([0, int(step), int(epoch), 0], dtype=np.uint64))
    offset = int(lane0) * per_lane
    bg.advance(offset // 4)
    skip = offset % 4
    raw = bg.random_raw(skip + lanes * per_lane)[skip:]
    return raw.reshape(lanes, per_lane)


def to_uniform(raw):
    """Map uint64 to doubles strictly inside (0, 1).

    52 bits plus a half-step offset keep every value exactly representable,
    so the largest is ``1 - 2**-53`` rather than rounding up to 1.
    """
    return ((raw >> np.uint64(12)).astype(np.float64) + 0.5) * _TWO_NEG52


class Streams:
    """Random numbers for ``lanes`` replicates starting at replicate ``lane0``."""

    def __init__(self, seed, lanes=1, lane0=0, epoch=0):
        self.seed = _check_seed(seed)
        self.lanes = int(lanes)
        self.lane0 = int(lane0)
        self.epoch = int(epoch)

    def with_epoch(self, epoch):
        return Streams(self.seed, self.lanes, self.lane0, epoch)

    def uniform(self, stream, step, n):
        """Uniforms on (0, 1), shape ``(n, lanes)``."""
        raw = raw_block(self.seed, stream, step, self.epoch, self.lane0, self.lanes, n)
        return to_uniform(raw).T.copy()

    def normal(self, stream, step, n):
        """Standard normals (Box-Muller, cosine branch), shape ``(n, lanes)``."""
        raw = raw_block(self.seed, stream, step, self.epoch, self.lane0, self.lanes, 2 * n)
        u = to_uniform(raw)
        z = np.sqrt(-2.0 * np.log(u[:, 0::2])) * np.cos(2.0 * np.pi * u[:, 1::2])
        return z.T.copy()
