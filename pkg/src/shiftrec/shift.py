"""Quantifying how far a target item departs from the categories of a history.

The shift degree of a (history, target) pair is one minus the fraction of
the target item's categories already covered by the union of the history's
categories: 0 means the target stays entirely inside familiar categories,
1 means it is categorically novel.  A bucketizer maps the continuous degree
onto ``V`` discrete levels: degree 0 is level 1, degree 1 is level ``V``,
and the open interval in between is split evenly into ``V - 2`` sub-intervals
assigned to levels 2 through ``V - 1`` in order.

Degrees are formed from integer set sizes, so bucketing is done in exact
integer arithmetic and boundary values never wobble from float rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

__all__ = ["ShiftBucketizer", "shift_degree", "bucket", "assess_shift"]


def shift_degree(history_categories: frozenset | set, target_categories: frozenset | set) -> Fraction:
    """Shift degree in [0, 1] as an exact rational.

    ``history_categories`` is the union of category sets over the input
    items; padding contributes nothing and may leave it empty.
    """
    if not target_categories:
        raise ValueError("target item has an empty category set")
    overlap = len(target_categories & history_categories)
    return Fraction(len(target_categories) - overlap, len(target_categories))


def bucket(a, v: int) -> int:
    """Map a shift degree ``a`` to a discrete level in ``{1, ..., v}``."""
    if v < 3:
        raise ValueError(f"need at least 3 shift levels, got {v}")
    if isinstance(a, Fraction):
        frac = a
    else:
        frac = Fraction(a)
    if frac < 0 or frac > 1:
        raise ValueError(f"shift degree must lie in [0, 1], got {a}")
    if frac == 0:
        return 1
    if frac == 1:
        return v
    scaled = (v - 2) * frac
    return math.ceil(scaled) + 1


@dataclass(frozen=True)
class ShiftBucketizer:
    """Discretizer of shift degrees into ``n_levels`` ordered levels."""

    n_levels: int

    def __post_init__(self):
        if self.n_levels < 3:
            raise ValueError(f"need at least 3 shift levels, got {self.n_levels}")

    def level(self, a) -> int:
        return bucket(a, self.n_levels)


def assess_shift(input_items, target_item: int, catalog, v: int) -> int:
    """Shift level of a (history, target) pair under ``catalog``.

    ``input_items`` may contain the padding index 0, which is ignored.  The
    result depends only on the union of the history's categories, not on
    item order or multiplicity.
    """
    union: set = set()
    for item in input_items:
        if item != 0:
            union |= catalog.categories_of(item)
    return bucket(shift_degree(union, catalog.categories_of(target_item)), v)
