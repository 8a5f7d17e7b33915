"""FUSEFL01 checkpoint format.

Layout::

    b"FUSEFL01" | u64 LE manifest length | manifest (canonical JSON, UTF-8) | blob

The blob is every tensor as contiguous little-endian float32, in manifest
order. The manifest records the model topology, the tensor directory (name,
shape, byte offset, trainable flag) and the SHA-256 of the blob.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from . import nn
from .errors import CheckpointDigestError, CheckpointError, CheckpointTruncatedError, CheckpointVersionError
from .model import Adaptor, Branch, FusedModel, FusedStage, ModelSpec, SplitModel

MAGIC = b"FUSEFL01"
_LAYER_KINDS = {cls.__name__: cls for cls in (nn.Dense, nn.ReLU, nn.Conv2d, nn.AvgPool2d, nn.Flatten,
                                               nn.Upsample2d, nn.Unflatten)}


# ----------------------------------------------------------------------------
# tensor payloads

def tensor_blob(param_sets: Iterable[nn.ParamSet]) -> bytes:
    """Little-endian float32 bytes of every weight and bias, in key order."""
    chunks = []
    for ps in param_sets:
        for i in sorted(ps):
            chunks.append(np.asarray(ps[i].weights, dtype="<f4").tobytes())
            chunks.append(np.asarray(ps[i].bias, dtype="<f4").tobytes())
    return b"".join(chunks)


def payload_bytes(param_sets: Iterable[nn.ParamSet]) -> int:
    return len(tensor_blob(param_sets))


# ----------------------------------------------------------------------------
# topology <-> JSON

def _layer_to_json(layer) -> dict:
    d = {"kind": type(layer).__name__}
    for f in dataclasses.fields(layer):
        v = getattr(layer, f.name)
        d[f.name] = list(v) if isinstance(v, tuple) else v
    return d


def _layer_from_json(d: dict):
    d = dict(d)
    cls = _LAYER_KINDS[d.pop("kind")]
    if cls is nn.Unflatten:
        d["shape"] = tuple(d["shape"])
    return cls(**d)


def _layers_to_json(layers):
    return [_layer_to_json(l) for l in layers]


def _layers_from_json(items):
    return [_layer_from_json(d) for d in items]


def _spec_to_json(spec: ModelSpec) -> dict:
    return {
        "blocks": [_layers_to_json(b) for b in spec.blocks],
        "classifier": _layers_to_json(spec.classifier),
        "base_width": spec.base_width,
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
    }


def _spec_from_json(d: dict) -> ModelSpec:
    return ModelSpec([_layers_from_json(b) for b in d["blocks"]], _layers_from_json(d["classifier"]),
                     d["base_width"], tuple(d["input_shape"]), d["num_classes"])


def _adaptor_to_json(a: Adaptor | None):
    if a is None:
        return None
    return {"kind": a.kind, "branch_dims": list(a.branch_dims), "out_dim": a.out_dim, "spatial": a.spatial,
            "layers": _layers_to_json(a.layers)}


class _Writer:
    def __init__(self):
        self.entries: list[dict] = []
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, prefix: str, params: nn.ParamSet) -> None:
        for i in sorted(params):
            p = params[i]
            for suffix, arr in (("weight", p.weights), ("bias", p.bias)):
                raw = np.asarray(arr, dtype="<f4").tobytes()
                self.entries.append({"name": f"{prefix}.layer{i}.{suffix}", "shape": list(arr.shape),
                                     "offset": self.offset, "nbytes": len(raw), "trainable": bool(p.trainable)})
                self.chunks.append(raw)
                self.offset += len(raw)


class _Reader:
    def __init__(self, entries: list[dict], blob: bytes):
        self.by_name = {e["name"]: e for e in entries}
        self.blob = blob

    def _tensor(self, name: str) -> tuple[np.ndarray, bool]:
        try:
            e = self.by_name[name]
        except KeyError:
            raise CheckpointError(f"tensor {name} missing from manifest") from None
        raw = self.blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointTruncatedError(f"tensor {name} runs past the end of the blob")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(e["shape"])
        return arr, e["trainable"]

    def params(self, prefix: str, layers) -> nn.ParamSet:
        out: nn.ParamSet = {}
        for i, layer in enumerate(layers):
            if isinstance(layer, nn.PARAMETRIC):
                w, trainable = self._tensor(f"{prefix}.layer{i}.weight")
                b, _ = self._tensor(f"{prefix}.layer{i}.bias")
                out[i] = nn.Param(w, b, trainable)
        return out

    def adaptor(self, d, prefix: str) -> Adaptor | None:
        if d is None:
            return None
        layers = _layers_from_json(d["layers"])
        return Adaptor(d["kind"], tuple(d["branch_dims"]), d["out_dim"], d["spatial"], layers,
                       self.params(prefix, layers))


def _split_topology(model: SplitModel, w: _Writer, prefix: str) -> dict:
    for k, ps in enumerate(model.block_params):
        w.add(f"{prefix}block{k}", ps)
    w.add(f"{prefix}classifier", model.classifier_params)
    return {"type": "split", "spec": _spec_to_json(model.spec)}


def _split_from(topo: dict, r: _Reader, prefix: str) -> SplitModel:
    spec = _spec_from_json(topo["spec"])
    blocks = [r.params(f"{prefix}block{k}", b) for k, b in enumerate(spec.blocks)]
    return SplitModel(spec, blocks, r.params(f"{prefix}classifier", spec.classifier))


def _encode(model, w: _Writer) -> dict:
    from .federation import Ensemble  # local import: federation imports this module

    if isinstance(model, SplitModel):
        return _split_topology(model, w, "")
    if isinstance(model, Ensemble):
        return {"type": "ensemble",
                "members": [_split_topology(m, w, f"member{i}.") for i, m in enumerate(model.models)]}
    if isinstance(model, FusedModel):
        stages = []
        for k, st in enumerate(model.stages):
            branches = []
            for m, br in enumerate(st.branches):
                if br.adaptor is not None:
                    w.add(f"stage{k}.branch{m}.adaptor", br.adaptor.params)
                w.add(f"stage{k}.branch{m}", br.params)
                branches.append({"layers": _layers_to_json(br.layers), "adaptor": _adaptor_to_json(br.adaptor)})
            stages.append({"client_order": list(st.client_order), "input_shape": list(st.input_shape),
                           "branch_out_shapes": [list(s) for s in st.branch_out_shapes], "branches": branches})
        if model.head is not None:
            w.add("head", model.head.params)
        w.add("classifier", model.classifier_params)
        return {"type": "fused", "stages": stages, "head": _adaptor_to_json(model.head),
                "classifier": _layers_to_json(model.classifier)}
    raise CheckpointError(f"cannot checkpoint objects of type {type(model).__name__}")


def _decode(topo: dict, r: _Reader):
    from .federation import Ensemble

    kind = topo.get("type")
    if kind == "split":
        return _split_from(topo, r, "")
    if kind == "ensemble":
        return Ensemble([_split_from(t, r, f"member{i}.") for i, t in enumerate(topo["members"])])
    if kind == "fused":
        stages = []
        for k, st in enumerate(topo["stages"]):
            branches = []
            for m, b in enumerate(st["branches"]):
                layers = _layers_from_json(b["layers"])
                branches.append(Branch(layers, r.params(f"stage{k}.branch{m}", layers),
                                       r.adaptor(b["adaptor"], f"stage{k}.branch{m}.adaptor")))
            stages.append(FusedStage(branches, tuple(st["client_order"]), tuple(st["input_shape"]),
                                     [tuple(s) for s in st["branch_out_shapes"]]))
        classifier = _layers_from_json(topo["classifier"])
        return FusedModel(stages, classifier, r.params("classifier", classifier), r.adaptor(topo["head"], "head"))
    raise CheckpointError(f"unknown model type {kind!r}")


# ----------------------------------------------------------------------------
# public API

def dumps(model, extra: dict | None = None) -> bytes:
    w = _Writer()
    topology = _encode(model, w)
    blob = b"".join(w.chunks)
    manifest = {
        "format": MAGIC.decode(),
        "topology": topology,
        "client_order": _client_order(model),
        "tensors": w.entries,
        "blob_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "extra": extra or {},
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(mbytes)) + mbytes + blob


def _client_order(model):
    if isinstance(model, FusedModel) and model.stages:
        return list(model.stages[0].client_order)
    return None


def loads(raw: bytes):
    if len(raw) < len(MAGIC) + 8:
        raise CheckpointTruncatedError("file shorter than the checkpoint header")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointVersionError(f"unsupported checkpoint version {raw[:len(MAGIC)]!r}, expected {MAGIC!r}")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + mlen:
        raise CheckpointTruncatedError("manifest truncated")
    try:
        manifest = json.loads(raw[16 : 16 + mlen])
    except ValueError as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from None
    if manifest.get("format") != MAGIC.decode():
        raise CheckpointVersionError(f"manifest format {manifest.get('format')!r} is not {MAGIC.decode()}")
    blob = raw[16 + mlen :]
    if len(blob) < manifest["blob_bytes"]:
        raise CheckpointTruncatedError(f"blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    if len(blob) > manifest["blob_bytes"]:
        raise CheckpointDigestError("trailing bytes after the tensor blob")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CheckpointDigestError("blob digest mismatch")
    return _decode(manifest["topology"], _Reader(manifest["tensors"], blob))


def checkpoint_save(model, path, extra: dict | None = None) -> int:
    raw = dumps(model, extra)
    Path(path).write_bytes(raw)
    return len(raw)


def checkpoint_load(path):
    return loads(Path(path).read_bytes())


def model_bytes(model) -> int:
    """Size of the model's float32 tensor blob (the byte count used for cost accounting)."""
    w = _Writer()
    _encode(model, w)
    return w.offset
