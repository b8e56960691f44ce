"""Named, counter-based random streams.

Every random draw in the engine comes from a stream addressed by
(seed, label, *indices).  Streams are independent Philox generators, so
the order in which scenes or workers consume them cannot perturb the
values: worker counts and resume points leave results bit-identical.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, label: str, *indices: int) -> np.random.Generator:
    """Return the generator addressed by (seed, label, indices)."""
    msg = "%d:%s:%s" % (seed, label, ",".join(str(i) for i in indices))
    digest = hashlib.blake2b(msg.encode("ascii"), digest_size=16).digest()
    key = np.frombuffer(digest, dtype="<u8")
    return np.random.Generator(np.random.Philox(key=key))
