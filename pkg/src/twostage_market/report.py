"""Rendering of command outcomes as text, JSON or CSV.

Outcomes are plain nested dicts. Text output prints every number with four
decimals; JSON keeps full precision so it round-trips exactly.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import is_dataclass
from typing import Any, Iterable

import numpy as np

DECIMALS = 4


def jsonable(obj: Any) -> Any:
    """Convert numpy values and objects with ``to_dict`` into JSON types."""
    if hasattr(obj, "to_dict") and (is_dataclass(obj) or callable(obj.to_dict)):
        return jsonable(obj.to_dict())
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def render_json(payload: Any) -> str:
    return json.dumps(jsonable(payload), indent=2) + "\n"


def _scalar(v: Any) -> str:
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        if v != v:
            return "nan"
        if v in (float("inf"), float("-inf")):
            return "inf" if v > 0 else "-inf"
        text = f"{v:.{DECIMALS}f}"
        return "0.0000" if text == "-0.0000" else text
    if v is None:
        return "-"
    return str(v)


def _is_flat(seq: list) -> bool:
    return all(not isinstance(v, (list, dict)) for v in seq)


def _inline(v: Any) -> str:
    if isinstance(v, list):
        return "[" + ", ".join(_inline(x) for x in v) + "]"
    return _scalar(v)


def _table(rows: list[dict], indent: str) -> list[str]:
    headers = list(rows[0])
    for r in rows[1:]:
        headers += [k for k in r if k not in headers]
    cells = [[_inline(r.get(h)) for h in headers] for r in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) for i, h in enumerate(headers)]
    out = [indent + "  ".join(h.rjust(w) for h, w in zip(headers, widths))]
    out += [indent + "  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    return out


def _lines(obj: Any, indent: str) -> list[str]:
    out = []
    for key, v in obj.items():
        if isinstance(v, dict):
            out.append(f"{indent}{key}:")
            out += _lines(v, indent + "  ")
        elif isinstance(v, list) and v and all(isinstance(r, dict) for r in v):
            out.append(f"{indent}{key}:")
            if any(isinstance(x, dict) for r in v for x in r.values()):
                for n, r in enumerate(v):
                    out.append(f"{indent}  [{n}]")
                    out += _lines(r, indent + "    ")
            else:
                out += _table(v, indent + "  ")
        elif isinstance(v, list) and v and not _is_flat(v) and all(isinstance(r, list) for r in v):
            out.append(f"{indent}{key}:")
            out += [f"{indent}  {_inline(r)}" for r in v]
        else:
            out.append(f"{indent}{key}: {_inline(v)}")
    return out


def render_text(payload: Any) -> str:
    data = jsonable(payload)
    if not isinstance(data, dict):
        return _inline(data) + "\n"
    return "\n".join(_lines(data, "")) + "\n"


def render(payload: Any, fmt: str = "text") -> str:
    if fmt == "json":
        return render_json(payload)
    if fmt == "text":
        return render_text(payload)
    raise ValueError(f"unknown format {fmt!r}")


def deviation_csv(results: Iterable) -> str:
    """One row per payoff probe of each deviation search."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["agent", "coordinate", "bid", "payoff", "gain"])
    for res in results:
        for p in res.probes:
            w.writerow([p.agent, p.coordinate, repr(p.bid), repr(p.payoff), repr(p.gain)])
    return buf.getvalue()
