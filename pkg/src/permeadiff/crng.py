"""Counter-based random number streams.

Each walker owns an independent stream keyed by (seed, walker id); draw i of
the stream is ``mix64(key + i * GOLDEN)``, the SplitMix64 construction. Draws
are addressed by (step id, draw-within-step) so a walker's values never depend
on how work is scheduled across threads.
"""

import numpy as np
from numba import njit

U64 = np.uint64

GOLDEN = U64(0x9E3779B97F4A7C15)
# draws reserved per step: 2 for the direction, <=100 membrane transits, slack
DRAWS_PER_STEP = 256
_INV_2_64 = 1.0 / 18446744073709551616.0


@njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> U64(30))) * U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> U64(27))) * U64(0x94D049BB133111EB)
    return z ^ (z >> U64(31))


@njit(cache=True, inline="always")
def stream_key(seed, walker_id):
    return mix64(mix64(U64(seed)) ^ mix64(U64(walker_id) + GOLDEN))


@njit(cache=True, inline="always")
def uniform(key, counter):
    """Uniform double in [0, 1) for draw `counter` of stream `key`."""
    return (mix64(key + U64(counter) * GOLDEN) >> U64(11)) * (_INV_2_64 * 2048.0)


@njit(cache=True, inline="always")
def step_counter(step_id, draw):
    """Counter for draw `draw` inside step `step_id` (step -1 = initialization)."""
    return U64(step_id + 1) * U64(DRAWS_PER_STEP) + U64(draw)


def uniforms(seed, walker_id, step_id, n):
    """Vector of the first `n` uniforms of one step, for tests and seeding."""
    key = stream_key(seed, walker_id)
    return np.array(
        [uniform(key, step_counter(step_id, j)) for j in range(n)], dtype=np.float64
    )
