"""LMLM model archives: one container for every trained model kind.

Layout (all integers little-endian)::

    b"LMLM" | version u8 (=1) | kind length u8 | kind ASCII
    | metadata length u32 | metadata JSON (UTF-8) | payload

The payload is a sequence of raw blocks whose names, dtypes and shapes are
listed in order under ``metadata["blocks"]``. Numeric blocks are ``<f8`` or
``<i8`` in row-major order. Tree blocks hold one 16-byte record per node in
preorder: feature index as ``<i8`` (-1 for a leaf) followed by the split
threshold, or the leaf value, as ``<f8``.

Block order per kind:

- ``vae``: weights then bias of every layer in ``VaeModel.layers()`` order
- ``dtree``: ``tree``
- ``rforest``: ``tree0`` ... ``tree{n-1}``
- ``gbdt``: ``initial_score`` then ``tree0`` ... ``tree{n-1}``
- ``logreg``: ``weights``, ``bias``, ``loss_history``
- ``gnb``: ``class_log_priors``, ``means``, ``variances``
- ``scaler``: ``minimum``, ``maximum``

``metadata["digest"]`` is the 64-bit FNV-1a hash, in hex, of the kind tag,
the canonical metadata JSON without the digest key, and the payload. It is
checked on every load. The metadata holds no timestamps, so saving the same
model twice gives identical bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numba
import numpy as np

from . import __version__
from .baseline_models import GaussianNbModel, LogisticRegressionModel, LogRegParams
from .dataio import ScalerParams, _atomic_write
from .errors import FormatError, IntegrityError
from .tree_models import (
    DecisionTreeModel,
    ForestParams,
    GbdtModel,
    GbdtParams,
    RandomForestModel,
    Tree,
    TreeParams,
)
from .vae import DenseLayer, VaeModel

__all__ = [
    "LMLM_MAGIC",
    "LMLM_VERSION",
    "MODEL_KINDS",
    "fnv1a64",
    "save_model",
    "load_model",
    "model_to_bytes",
    "model_from_bytes",
    "inspect_archive",
    "archive_digest",
]

LMLM_MAGIC = b"LMLM"
LMLM_VERSION = 1
MODEL_KINDS = ("vae", "dtree", "rforest", "gbdt", "logreg", "gnb", "scaler")

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)
_NODE = np.dtype([("feature", "<i8"), ("value", "<f8")])


@numba.njit(cache=True)
def _fnv_update(h, data):
    for b in data:
        h = (h ^ np.uint64(b)) * _FNV_PRIME
    return h


def fnv1a64(*chunks: bytes) -> int:
    """64-bit FNV-1a over the concatenation of ``chunks``."""
    h = _FNV_OFFSET
    for c in chunks:
        h = np.uint64(_fnv_update(np.uint64(h), np.frombuffer(c, dtype=np.uint8)))
    return int(h)


def _canonical(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":"),
                      allow_nan=False).encode("utf-8")


# -- encoding ----------------------------------------------------------------

class _Writer:
    def __init__(self):
        self.blocks = []
        self.parts = []

    def array(self, name, a, dtype="<f8"):
        a = np.ascontiguousarray(a, dtype=dtype)
        if a.dtype.kind == "f" and not np.isfinite(a).all():
            raise IntegrityError(f"non-finite values in parameter block {name!r}")
        self.blocks.append({"name": name, "dtype": dtype, "shape": list(a.shape)})
        self.parts.append(a.tobytes())

    def tree(self, name, tree: Tree):
        records = np.array(list(tree.preorder()), dtype=_NODE)
        if not np.isfinite(records["value"]).all():
            raise IntegrityError(f"non-finite values in tree block {name!r}")
        self.blocks.append({"name": name, "dtype": "node", "shape": [records.shape[0]]})
        self.parts.append(records.tobytes())


def _encode(model):
    kind = getattr(model, "kind", None)
    if isinstance(model, ScalerParams):
        kind = "scaler"
    if kind not in MODEL_KINDS:
        raise TypeError(f"cannot archive a {type(model).__name__}")
    w = _Writer()
    meta = {}
    if kind == "vae":
        meta["input_dim"] = model.input_dim
        meta["latent_dim"] = model.latent_dim
        meta["hidden_dims"] = model.hidden_dims
        meta["activations"] = [layer.activation for layer in model.layers()]
        for i, layer in enumerate(model.layers()):
            w.array(f"layer{i}.weights", layer.weights)
            w.array(f"layer{i}.bias", layer.bias)
    elif kind == "dtree":
        meta["n_features"] = model.n_features
        meta["params"] = asdict(model.params)
        w.tree("tree", model.tree)
    elif kind == "rforest":
        meta["n_features"] = model.n_features
        meta["params"] = asdict(model.params)
        meta["tree_params"] = asdict(model.trees[0].params)
        for i, m in enumerate(model.trees):
            w.tree(f"tree{i}", m.tree)
    elif kind == "gbdt":
        meta["n_features"] = model.n_features
        meta["params"] = asdict(model.params)
        w.array("initial_score", [model.initial_score])
        for i, t in enumerate(model.trees):
            w.tree(f"tree{i}", t)
    elif kind == "logreg":
        meta["n_features"] = model.n_features
        meta["params"] = asdict(model.params)
        w.array("weights", model.weights)
        w.array("bias", [model.bias])
        w.array("loss_history", np.asarray(model.loss_history, dtype=np.float64).reshape(-1))
    elif kind == "gnb":
        meta["n_features"] = model.n_features
        w.array("class_log_priors", model.class_log_priors)
        w.array("means", model.means)
        w.array("variances", model.variances)
    else:
        meta["n_features"] = model.dim
        w.array("minimum", model.minimum)
        w.array("maximum", model.maximum)
    meta["blocks"] = w.blocks
    meta["created_by"] = f"latentmal {__version__}"
    meta["seed"] = meta.get("params", {}).get("seed")
    return kind, meta, b"".join(w.parts)


def model_to_bytes(model) -> bytes:
    """Serialize ``model`` to LMLM bytes (deterministic)."""
    kind, meta, payload = _encode(model)
    kind_b = kind.encode("ascii")
    meta["digest"] = f"{fnv1a64(kind_b, _canonical(meta), payload):016x}"
    meta_b = _canonical(meta)
    return (LMLM_MAGIC + bytes([LMLM_VERSION, len(kind_b)]) + kind_b
            + struct.pack("<I", len(meta_b)) + meta_b + payload)


def save_model(model, path) -> None:
    """Write ``model`` atomically (temporary file then rename)."""
    _atomic_write(Path(path), model_to_bytes(model))


# -- decoding ----------------------------------------------------------------

def _split_archive(blob: bytes, verify: bool = True):
    if len(blob) < 6 or blob[:4] != LMLM_MAGIC:
        raise FormatError("bad magic: not an LMLM archive")
    if blob[4] != LMLM_VERSION:
        raise FormatError(f"unsupported LMLM version {blob[4]}")
    klen = blob[5]
    pos = 6 + klen
    if len(blob) < pos + 4:
        raise FormatError("truncated archive header")
    try:
        kind = blob[6:pos].decode("ascii")
    except UnicodeDecodeError:
        raise FormatError("kind tag is not ASCII") from None
    if kind not in MODEL_KINDS:
        raise FormatError(f"unknown model kind {kind!r}")
    (mlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if len(blob) < pos + mlen:
        raise FormatError("truncated metadata")
    try:
        meta = json.loads(blob[pos:pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"metadata is not valid JSON: {exc}") from None
    if not isinstance(meta, dict) or "digest" not in meta:
        raise FormatError("metadata lacks a digest")
    payload = blob[pos + mlen:]
    if verify:
        body = {k: v for k, v in meta.items() if k != "digest"}
        actual = f"{fnv1a64(kind.encode('ascii'), _canonical(body), payload):016x}"
        if actual != meta["digest"]:
            raise FormatError(
                f"digest mismatch: archive says {meta['digest']}, content hashes to {actual}")
    return kind, meta, payload


def _read_blocks(meta, payload):
    out = {}
    pos = 0
    for b in meta.get("blocks", []):
        dtype = _NODE if b["dtype"] == "node" else np.dtype(b["dtype"])
        count = int(np.prod(b["shape"], dtype=np.int64))
        size = count * dtype.itemsize
        if pos + size > len(payload):
            raise FormatError(f"payload truncated inside block {b['name']!r}")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=pos)
        out[b["name"]] = arr.reshape(b["shape"]).copy()
        pos += size
    if pos != len(payload):
        raise FormatError(f"{len(payload) - pos} trailing payload bytes")
    return out


def _tree(records, n_features) -> Tree:
    # predictors index columns without bounds checks, so validate here
    if records["feature"].max(initial=-1) >= n_features or records["feature"].min(initial=-1) < -1:
        raise FormatError("tree references a feature outside the model's input")
    return Tree.from_preorder(zip(records["feature"].tolist(), records["value"].tolist()))


def _decode(kind, meta, blocks):
    if kind == "vae":
        acts = meta["activations"]
        layers = [DenseLayer(blocks[f"layer{i}.weights"], blocks[f"layer{i}.bias"], a)
                  for i, a in enumerate(acts)]
        h = len(meta["hidden_dims"])
        return VaeModel(layers[:h], layers[h], layers[h + 1], layers[h + 2:-1], layers[-1])
    if kind == "dtree":
        d = meta["n_features"]
        return DecisionTreeModel(_tree(blocks["tree"], d), d, TreeParams(**meta["params"]))
    if kind == "rforest":
        tp = TreeParams(**meta["tree_params"])
        n = len(meta["blocks"])
        d = meta["n_features"]
        trees = [DecisionTreeModel(_tree(blocks[f"tree{i}"], d), d, tp) for i in range(n)]
        return RandomForestModel(trees, meta["n_features"], ForestParams(**meta["params"]))
    if kind == "gbdt":
        n = len(meta["blocks"]) - 1
        trees = [_tree(blocks[f"tree{i}"], meta["n_features"]) for i in range(n)]
        return GbdtModel(float(blocks["initial_score"][0]), trees, meta["n_features"],
                         GbdtParams(**meta["params"]))
    if kind == "logreg":
        return LogisticRegressionModel(blocks["weights"], float(blocks["bias"][0]),
                                       LogRegParams(**meta["params"]),
                                       tuple(blocks["loss_history"].tolist()))
    if kind == "gnb":
        return GaussianNbModel(blocks["class_log_priors"], blocks["means"], blocks["variances"])
    return ScalerParams(blocks["minimum"], blocks["maximum"])


def model_from_bytes(blob: bytes):
    """Inverse of :func:`model_to_bytes`. Returns ``(model, kind)``."""
    kind, meta, payload = _split_archive(blob)
    blocks = _read_blocks(meta, payload)
    try:
        return _decode(kind, meta, blocks), kind
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"archive content does not describe a {kind} model: {exc}") from None


def load_model(path):
    """Read and verify an archive. Returns ``(model, kind)``."""
    return model_from_bytes(Path(path).read_bytes())


def inspect_archive(path, verify: bool = True) -> dict:
    """Archive metadata plus ``kind``, ``version`` and ``file_bytes``."""
    blob = Path(path).read_bytes()
    kind, meta, _ = _split_archive(blob, verify)
    return {"kind": kind, "version": LMLM_VERSION, "file_bytes": len(blob), **meta}


def archive_digest(path) -> str:
    return inspect_archive(path)["digest"]
