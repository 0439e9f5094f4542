"""Deterministic 64-bit seed derivation.

All replicate-, fold-, and purpose-specific seeds are derived from one master
seed through splitmix64 so that results depend only on (master_seed, labels),
never on scheduling or worker count.
"""

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 mixing round (Steele, Lea & Flood 2014 constants)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def derive_seed(master: int, *parts: int | str) -> int:
    """Mix a master seed with integer or string labels into a fresh u64 seed."""
    h = master & _MASK
    for part in parts:
        if isinstance(part, str):
            for byte in part.encode("utf-8"):
                h = splitmix64(h ^ byte)
        else:
            h = splitmix64(h ^ (int(part) & _MASK))
        h = splitmix64(h)
    return h
