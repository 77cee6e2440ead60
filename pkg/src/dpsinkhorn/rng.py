"""Counter-based random streams.

All randomness is addressed by ``(seed, purpose, index)``. The stream for
that address is a Philox-4x64 generator keyed by ``(seed, purpose_id)`` whose
counter starts at ``(0, 0, 0, index)``. Consumers therefore never share a
sequence: drawing more latents in a step cannot shift the noise of that step,
and resuming at step ``t`` only needs ``t``.
"""

import numpy as np

PURPOSES = {
    "init": 1,
    "sample": 2,
    "latent": 3,
    "noise": 4,
    "eval": 5,
    "probe": 6,
    "data": 7,
    "generate": 8,
}

_MASK64 = (1 << 64) - 1


def stream(seed, purpose, index=0):
    """Return the generator for ``(seed, purpose, index)``.

    Parameters
    ----------
    seed : int
        Root seed (taken modulo 2**64).
    purpose : str
        One of :data:`PURPOSES`.
    index : int
        Counter offset, usually the training step.
    """
    if purpose not in PURPOSES:
        raise KeyError(f"unknown random stream purpose {purpose!r}")
    key = np.array([int(seed) & _MASK64, PURPOSES[purpose]], dtype=np.uint64)
    counter = np.array([0, 0, 0, int(index) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def as_generator(random_state):
    """Coerce ``None``, an int or a Generator into a Generator.

    Ints are routed through :func:`stream` with the ``"eval"`` purpose so
    helper calls stay on the documented counter scheme.
    """
    if isinstance(random_state, np.random.Generator):
        return random_state
    if random_state is None:
        return np.random.default_rng()
    return stream(int(random_state), "eval")
