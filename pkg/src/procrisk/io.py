"""Reading and writing trees, processes, measures, risk specs and term structures."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import BadDensity, MalformedTree
from .measures import ProductMeasure
from .tree import AdaptedProcess, EventTree, _lookup, validate_tree


def load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedTree(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None


def dumps(obj) -> str:
    """Deterministic JSON text (sorted keys, fixed float formatting)."""
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if np.isnan(f):
            return None
        if np.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    return obj


def write_atomic(path, text: str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def tree_from_spec(spec: dict) -> EventTree:
    return validate_tree(spec)


def tree_to_spec(tree: EventTree, processes: dict | None = None) -> dict:
    out = tree.to_spec()
    if processes:
        out["processes"] = {name: proc.to_mapping() for name, proc in processes.items()}
    return out


def load_tree(path):
    """Tree and its named processes from a tree file."""
    spec = load_json(path)
    tree = validate_tree(spec)
    procs = {}
    for name, mapping in (spec.get("processes") or {}).items():
        procs[name] = AdaptedProcess.from_mapping(tree, mapping, f"processes.{name}")
    return tree, procs


def measure_from_mapping(tree: EventTree, body: dict) -> ProductMeasure:
    """A product measure from ``{"Z": {node id: density}}``.

    Missing nodes get density 0.
    """
    if not isinstance(body, dict) or "Z" not in body:
        raise BadDensity("measure needs a 'Z' field")
    z = np.zeros(tree.n)
    for i, nid in enumerate(tree.ids):
        val = _lookup(body["Z"], nid)
        if val is not None:
            z[i] = float(val)
    return ProductMeasure(tree, z)


def load_measure(tree: EventTree, path) -> ProductMeasure:
    return measure_from_mapping(tree, load_json(path))


def disintegration_to_mapping(dis) -> dict:
    return dis.to_mapping()


def penalty_to_mapping(tree: EventTree, pen) -> dict:
    return {str(tree.ids[v]): (float(x) if np.isfinite(x) else "inf")
            for v, x in zip(tree.level(pen.t), pen.values)}
