"""Deterministic seed derivation.

Child seeds (per shard, per replication, per method) are derived from a
master seed with the splitmix64 mixer so that streams are decoupled:
changing any index gives an unrelated child seed, and the mapping is
stable across platforms and process counts.
"""

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(seed: int, index: int = 0) -> int:
    """Return a 64-bit child seed for (seed, index).

    Implements one splitmix64 step at state seed + (index+1)*golden.
    """
    z = (int(seed) + (int(index) + 1) * _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK
