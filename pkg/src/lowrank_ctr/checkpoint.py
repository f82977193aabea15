"""Binary model checkpoints.

Layout::

    b"LRCK1\\n"                      6-byte magic
    uint64 little-endian             manifest byte length
    manifest                         UTF-8 JSON
    payload                          raw little-endian float32 tensors

The manifest holds the model topology (field layouts, layer attributes,
flags) and a tensor table: name, shape, dtype tag ``"f32"``, byte offset
into the payload and byte length.  Serialization is canonical (sorted
keys, no whitespace) so identical models produce identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError, ShapeError
from .linalg import TTCores
from .nn import (
    DeepFMModel,
    DenseLayer,
    EmbeddingTable,
    ProjectionLayer,
    TTEmbeddingTable,
)

MAGIC = b"LRCK1\n"
_FORMAT_VERSION = 1


def _topology(model: DeepFMModel) -> dict:
    fields = []
    for table in model.tables:
        if isinstance(table, TTEmbeddingTable):
            fields.append(
                {
                    "kind": "tt",
                    "vocab": table.vocab,
                    "dim": table.dim,
                    "row_factors": list(table.cores.row_factors),
                    "col_factors": list(table.cores.col_factors),
                    "ranks": list(table.cores.ranks),
                }
            )
        else:
            fields.append(
                {"kind": "dense", "vocab": table.vocab, "dim": table.dim}
            )
    return {
        "kind": "deepfm",
        "embed_dim": model.embed_dim,
        "n_continuous": model.n_continuous,
        "fm_enabled": model.fm_enabled,
        "fused": model.fused,
        "has_projections": model.projections is not None,
        "has_first_order": bool(model.first_order),
        "fields": fields,
        "mlp": [
            {
                "activation": layer.activation,
                "dropout_rate": float(layer.dropout_rate),
                "dropout_site": bool(layer.dropout_site),
            }
            for layer in model.mlp
        ],
    }


def manifest_for(model: DeepFMModel) -> dict:
    """The manifest that ``save_checkpoint`` would write, without payload."""
    tensors = []
    offset = 0
    for name, arr in model.named_parameters():
        if arr.dtype != np.float32:
            raise ShapeError(
                f"checkpoints store float32 tensors; {name} is {arr.dtype}"
            )
        nbytes = arr.size * 4
        tensors.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f32",
                "offset": offset,
                "nbytes": nbytes,
            }
        )
        offset += nbytes
    return {
        "format_version": _FORMAT_VERSION,
        "topology": _topology(model),
        "tensors": tensors,
    }


def save_checkpoint(model: DeepFMModel, path) -> None:
    manifest = manifest_for(model)
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode(
        "utf-8"
    )
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in model.named_parameters():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> DeepFMModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic {magic!r})")
        header = fh.read(8)
        if len(header) < 8:
            raise DataError(f"{path}: truncated checkpoint header")
        (length,) = struct.unpack("<Q", header)
        blob = fh.read(length)
        if len(blob) < length:
            raise DataError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise DataError(f"{path}: corrupt manifest ({exc})") from exc
        payload = fh.read()

    if not isinstance(manifest, dict):
        raise DataError(f"{path}: corrupt manifest (not an object)")

    if manifest.get("format_version") != _FORMAT_VERSION:
        raise DataError(
            f"{path}: unsupported format version {manifest.get('format_version')}"
        )
    arrays = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != "f32":
            raise DataError(f"{path}: unsupported tensor dtype {entry['dtype']}")
        start = entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(payload):
            raise DataError(f"{path}: truncated payload for {entry['name']}")
        flat = np.frombuffer(payload[start:stop], dtype="<f4")
        arrays[entry["name"]] = (
            flat.reshape(entry["shape"]).astype(np.float32, copy=True)
        )

    topo = manifest["topology"]
    if topo.get("kind") != "deepfm":
        raise DataError(f"{path}: unknown model kind {topo.get('kind')}")

    def take(name: str) -> np.ndarray:
        if name not in arrays:
            raise DataError(f"{path}: missing tensor {name}")
        return arrays[name]

    tables = []
    for i, fspec in enumerate(topo["fields"]):
        if fspec["kind"] == "tt":
            ranks = fspec["ranks"]
            cores = tuple(
                take(f"emb.{i}.core.{j}") for j in range(len(ranks) - 1)
            )
            tt = TTCores(
                cores,
                tuple(fspec["row_factors"]),
                tuple(fspec["col_factors"]),
                tuple(ranks),
            )
            tables.append(TTEmbeddingTable(tt, fspec["vocab"], fspec["dim"]))
        elif fspec["kind"] == "dense":
            tables.append(EmbeddingTable(take(f"emb.{i}.weight")))
        else:
            raise DataError(f"{path}: unknown field kind {fspec['kind']}")

    projections = None
    if topo["has_projections"]:
        projections = [
            ProjectionLayer(take(f"proj.{i}.weight"), take(f"proj.{i}.bias"))
            for i in range(len(tables))
        ]
    first_order = []
    if topo["has_first_order"]:
        first_order = [take(f"fo.{i}.weight") for i in range(len(tables))]
    mlp = [
        DenseLayer(
            take(f"mlp.{j}.weight"),
            take(f"mlp.{j}.bias"),
            spec["activation"],
            float(spec["dropout_rate"]),
            bool(spec["dropout_site"]),
        )
        for j, spec in enumerate(topo["mlp"])
    ]
    return DeepFMModel(
        tables=tables,
        first_order=first_order,
        mlp=mlp,
        n_continuous=int(topo["n_continuous"]),
        embed_dim=int(topo["embed_dim"]),
        projections=projections,
        fm_enabled=bool(topo["fm_enabled"]),
        fused=bool(topo["fused"]),
    )
