"""Byte-level entropy statistics used by the feature extractor."""

from __future__ import annotations

import math

# Strings shorter than this are never considered shellcode candidates.
SHELLCODE_MIN_LEN = 20
# Linear ramp: 4.0 bits/byte maps to 0.0, 6.0 bits/byte and above to 1.0.
SHELLCODE_ENTROPY_FLOOR = 4.0
SHELLCODE_ENTROPY_SPAN = 2.0


def shannon_entropy(data: bytes) -> float:
    """Shannon entropy of `data` in bits per byte, in [0.0, 8.0].

    Empty input yields 0.0.  Byte values are visited in ascending order so
    the floating point result is reproducible across runs.
    """
    if not data:
        return 0.0
    counts = [0] * 256
    for b in data:
        counts[b] += 1
    n = len(data)
    h = 0.0
    for c in counts:
        if c:
            p = c / n
            h -= p * math.log2(p)
    return h


def shellcode_probability(strings: list[str]) -> float:
    """Heuristic probability that one of `strings` carries packed shellcode.

    For every string of at least SHELLCODE_MIN_LEN characters the byte
    entropy of its UTF-8 encoding is mapped through a linear ramp
    clamp((H - 4.0) / 2.0, 0, 1); the maximum over all candidates is
    returned, 0.0 when no string qualifies.
    """
    best = 0.0
    for s in strings:
        if len(s) < SHELLCODE_MIN_LEN:
            continue
        h = shannon_entropy(s.encode("utf-8", "replace"))
        p = (h - SHELLCODE_ENTROPY_FLOOR) / SHELLCODE_ENTROPY_SPAN
        if p < 0.0:
            p = 0.0
        elif p > 1.0:
            p = 1.0
        if p > best:
            best = p
    return best
