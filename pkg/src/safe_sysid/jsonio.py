"""Deterministic JSON serialization with 17-significant-digit floats."""

from __future__ import annotations


def _fmt_float(x: float) -> str:
    if x != x:  # NaN
        raise ValueError("cannot serialize NaN")
    if x in (float("inf"), float("-inf")):
        raise ValueError("cannot serialize infinity")
    s = format(float(x), ".17g")
    # Keep the token a JSON number that parses back as float.
    if not any(c in s for c in ".eE"):
        s += ".0"
    return s


def dumps_canonical(obj, indent: int = 0) -> str:
    """Serialize to JSON with sorted keys and round-trip-exact floats."""
    pad = " " * indent
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _fmt_float(obj)
    if isinstance(obj, str):
        import json

        return json.dumps(obj)
    if isinstance(obj, dict):
        items = []
        for key in sorted(obj):
            if not isinstance(key, str):
                raise TypeError("JSON object keys must be strings")
            import json

            items.append(f"{json.dumps(key)}: {dumps_canonical(obj[key])}")
        return pad + "{" + ", ".join(items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps_canonical(v) for v in obj) + "]"
    # numpy scalars and arrays reduce to the cases above
    try:
        import numpy as np

        if isinstance(obj, np.ndarray):
            return dumps_canonical(obj.tolist())
        if isinstance(obj, np.integer):
            return str(int(obj))
        if isinstance(obj, np.floating):
            return _fmt_float(float(obj))
    except ImportError:  # pragma: no cover
        pass
    raise TypeError(f"cannot serialize {type(obj)!r}")
