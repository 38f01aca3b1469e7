"""Versioned on-disk formats for masks and parameter checkpoints.

Both artifacts are JSON documents with binary payloads encoded as base64:
mask bits are packed big-endian with ``np.packbits``; parameter values are
little-endian float64. Headers carry a layout hash so a file is rejected when
loaded against a different architecture.
"""

from __future__ import annotations

import base64
import json

import numpy as np

from .errors import ConfigError
from .masks import Grouping, Mask, MaskableSpace
from .params import Layout, ParamVector

FORMAT_VERSION = 1


def _pack_bits(bits: np.ndarray) -> str:
    return base64.b64encode(np.packbits(bits.astype(np.uint8), bitorder="big")).decode()


def _unpack_bits(payload: str, n: int) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(payload), dtype=np.uint8)
    return np.unpackbits(raw, count=n, bitorder="big").astype(bool)


def _pack_f64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode()


def _unpack_f64(payload: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(payload), dtype="<f8").copy()


def _pack_i64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<i8").tobytes()).decode()


def _unpack_i64(payload: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(payload), dtype="<i8").copy()


def save_mask(mask: Mask, path, *, sparsity: float | None = None,
              seed: int | None = None, ledger=None) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "mask",
        "model_hash": mask.layout.content_hash(),
        "grouping": None if mask.grouping is None else mask.grouping.kind,
        "block_size": None if mask.grouping is None else mask.grouping.block_size,
        "sparsity": sparsity,
        "seed": seed,
        "ledger": None if ledger is None else ledger.to_dict(),
        "always_trainable": list(mask.always_trainable),
        "layers": {},
    }
    for name, zv in mask.z.items():
        layer = {
            "n_groups": int(zv.size),
            "z": _pack_bits(zv),
        }
        if mask.grouping is not None and mask.grouping.kind == "random":
            layer["group_ids"] = _pack_i64(mask.grouping.group_ids[name])
        doc["layers"][name] = layer
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)


def load_mask(path, model) -> Mask:
    """Rebuild a mask against `model`; the layout hash must match."""
    with open(path) as f:
        doc = json.load(f)
    if doc.get("kind") != "mask" or doc.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: not a version-{FORMAT_VERSION} mask file")
    if doc["model_hash"] != model.layout.content_hash():
        raise ConfigError(f"{path}: mask was built for a different architecture")
    always = tuple(doc["always_trainable"])
    if doc["grouping"] is None:
        return Mask.empty(model.layout, always)
    space = MaskableSpace.of_model(model)
    if doc["grouping"] == "random":
        ids = {
            name: _unpack_i64(layer["group_ids"])
            for name, layer in doc["layers"].items()
        }
        counts = {name: int(g.max()) + 1 if g.size else 0 for name, g in ids.items()}
        grouping = Grouping(kind="random", space=space, group_ids=ids,
                            n_groups=counts, block_size=doc["block_size"])
    else:
        grouping = Grouping.build(space, doc["grouping"])
    z = {
        name: _unpack_bits(layer["z"], layer["n_groups"])
        for name, layer in doc["layers"].items()
    }
    return Mask(z, grouping, always, model.layout)


def save_params(params: ParamVector, path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "params",
        "model_hash": params.layout.content_hash(),
        "segments": [
            {
                "name": seg.name,
                "kind": seg.kind,
                "shape": list(seg.shape),
                "values": _pack_f64(params.get(seg.name)),
            }
            for seg in params.layout
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)


def load_params(path, layout: Layout) -> ParamVector:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("kind") != "params" or doc.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: not a version-{FORMAT_VERSION} checkpoint")
    if doc["model_hash"] != layout.content_hash():
        raise ConfigError(f"{path}: checkpoint was built for a different architecture")
    params = ParamVector.zeros(layout)
    for entry in doc["segments"]:
        seg = layout.segment(entry["name"])
        values = _unpack_f64(entry["values"]).reshape(seg.shape)
        params.set(seg.name, values)
    params.assert_finite("loaded checkpoint")
    return params
