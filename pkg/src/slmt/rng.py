"""Named, replayable random streams derived from one experiment seed.

Every source of randomness in the package (parameter init, data order,
dropout, contrastive sampling, corpus generation) pulls from its own stream
so that toggling one component never shifts the draws of another. Streams
are pure functions of (seed, name, keys): the same arguments always yield
the same generator, which is what makes mid-run resume bit-exact.
"""

import hashlib

import numpy as np

_STREAMS = {"init": 0, "data": 1, "dropout": 2, "sampling": 3, "corpus": 4}


def stream(seed, name, *keys):
    """Return a fresh Generator for (seed, stream name, extra integer keys).

    Extra keys select sub-streams, e.g. the training step, an epoch index,
    or a parameter name key from `name_key`.
    """
    if name not in _STREAMS:
        raise ValueError(f"unknown rng stream {name!r}; expected one of {sorted(_STREAMS)}")
    entropy = [int(seed), _STREAMS[name]] + [int(k) for k in keys]
    if any(k < 0 for k in entropy):
        raise ValueError(f"rng stream keys must be non-negative, got {entropy}")
    return np.random.default_rng(np.random.SeedSequence(entropy))


def name_key(text):
    """Stable 64-bit key for a string, safe to feed to `stream`."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
