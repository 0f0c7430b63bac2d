"""Minimal pytree helpers over dataclasses, dicts, lists and array leaves."""

from __future__ import annotations

import dataclasses
from typing import Any, Callable, Iterator

import numpy as np

from .autograd import Var


def _is_leaf(x) -> bool:
    return isinstance(x, (np.ndarray, Var))


def _join(prefix: str, key) -> str:
    return f"{prefix}.{key}" if prefix else str(key)


def tree_items(tree, prefix: str = "") -> Iterator[tuple[str, Any]]:
    """Yield ``(path, leaf)`` for every array leaf, in a fixed order."""
    if _is_leaf(tree):
        yield prefix, tree
    elif dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        for f in dataclasses.fields(tree):
            yield from tree_items(getattr(tree, f.name), _join(prefix, f.name))
    elif isinstance(tree, dict):
        for k in sorted(tree):
            yield from tree_items(tree[k], _join(prefix, k))
    elif isinstance(tree, (list, tuple)):
        for i, x in enumerate(tree):
            yield from tree_items(x, _join(prefix, i))


def tree_map(fn: Callable[[str, Any], Any], tree, prefix: str = ""):
    """Rebuild ``tree`` with each array leaf replaced by ``fn(path, leaf)``."""
    if _is_leaf(tree):
        return fn(prefix, tree)
    if dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        changes = {f.name: tree_map(fn, getattr(tree, f.name), _join(prefix, f.name))
                   for f in dataclasses.fields(tree)}
        return dataclasses.replace(tree, **changes)
    if isinstance(tree, dict):
        return {k: tree_map(fn, v, _join(prefix, k)) for k, v in tree.items()}
    if isinstance(tree, list):
        return [tree_map(fn, x, _join(prefix, i)) for i, x in enumerate(tree)]
    if isinstance(tree, tuple):
        return tuple(tree_map(fn, x, _join(prefix, i)) for i, x in enumerate(tree))
    return tree


def tree_dict(tree, prefix: str = "") -> dict[str, Any]:
    return dict(tree_items(tree, prefix))


def tree_copy(tree):
    return tree_map(lambda _, a: np.array(a, copy=True), tree)


def tree_from_dict(template, flat: dict[str, np.ndarray], prefix: str = ""):
    """Fill ``template``'s structure with arrays looked up by path in ``flat``."""

    def pick(path, leaf):
        if path not in flat:
            raise KeyError(f"missing parameter {path!r}")
        arr = np.asarray(flat[path], dtype=np.float64)
        if arr.shape != leaf.shape:
            raise ValueError(f"shape mismatch for {path!r}: {arr.shape} != {leaf.shape}")
        return arr

    return tree_map(pick, template, prefix)
