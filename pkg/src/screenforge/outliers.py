"""Robust outlier flagging via modified z-scores.

Flags mark unusual values for reviewer attention; nothing is ever filtered
out based on a flag.
"""

from __future__ import annotations

from statistics import median
from typing import Sequence

MODIFIED_Z_THRESHOLD = 3.5
_SCALE = 0.6745


def flag_outliers(values: Sequence[float]) -> list[bool]:
    """|0.6745 * (x - median) / MAD| > 3.5; with MAD 0, any x != median."""
    if not values:
        return []
    center = median(values)
    mad = median([abs(x - center) for x in values])
    if mad == 0:
        return [x != center for x in values]
    return [abs(_SCALE * (x - center) / mad) > MODIFIED_Z_THRESHOLD
            for x in values]
