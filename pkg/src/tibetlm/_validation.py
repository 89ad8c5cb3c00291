"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import math
import numbers
from typing import Any, Sequence


def check_positive_int(value: Any, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_fraction(value: Any, name: str, *, low_open=True, high_open=True) -> float:
    """Check that ``value`` lies in the unit interval with the given openness."""
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or math.isnan(value):
        raise ValueError(f"{name} must be a real number, got {value!r}")
    lo_ok = value > 0 if low_open else value >= 0
    hi_ok = value < 1 if high_open else value <= 1
    if not (lo_ok and hi_ok):
        lo = "(" if low_open else "["
        hi = ")" if high_open else "]"
        raise ValueError(f"{name} must lie in {lo}0, 1{hi}, got {value!r}")
    return float(value)


def check_text_list(X: Any, *, allow_tokens: bool = False) -> list:
    """Accept a sequence of strings (or token lists when ``allow_tokens``)."""
    if isinstance(X, str):
        raise TypeError("expected a sequence of texts, got a single string")
    try:
        items = list(X)
    except TypeError:
        raise TypeError(f"expected a sequence of texts, got {type(X).__name__}") from None
    for i, item in enumerate(items):
        if isinstance(item, str):
            continue
        if allow_tokens and isinstance(item, Sequence) and all(isinstance(t, str) for t in item):
            continue
        raise TypeError(f"item {i} is {type(item).__name__}, expected str")
    return items


def check_consistent_length(*arrays: Sequence) -> None:
    lengths = {len(a) for a in arrays}
    if len(lengths) > 1:
        raise ValueError(f"inconsistent input lengths: {sorted(lengths)}")
