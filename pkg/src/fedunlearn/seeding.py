"""Deterministic sub-seed derivation from one master seed.

``derive_seed(master, name)`` hashes ``name`` with BLAKE2b (8-byte digest),
adds it to ``master`` modulo 2**64 and passes the sum through one SplitMix64
output step.  The result is reduced to 63 bits so it can seed numpy.
"""

import hashlib

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, name: str) -> int:
    h = int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")
    return splitmix64((int(master) + h) & _MASK64) >> 1
