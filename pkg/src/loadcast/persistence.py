"""Bit-exact binary containers for backbone checkpoints and adapter files.

Layout (little-endian throughout)::

    8-byte magic | u32 format version | u32 manifest length |
    manifest (canonical UTF-8 JSON) | blob (packed float64 arrays) |
    32-byte SHA-256 of everything before the trailer

The manifest lists every array's name, shape, dtype, byte offset, and
byte length; offsets are contiguous and cover the blob exactly.  Writes
go to a temporary file first and are renamed into place.  Adapter files
record the parameter hash of the backbone they were tuned against and
refuse to load against a different one unless overridden.
"""

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .data import StatsTable
from .errors import CompatibilityError, ContractError, CorruptionError, DataError, VersionError
from .forecaster import Forecaster, ModelConfig
from .lora import TARGETS, FactorPair, LoraAdapter
from .numerics import Tensor

MAGIC = b"LOADCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<II")  # version, manifest length


def _canonical_json(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack(kind: str, meta: dict, arrays) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8",
                        "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = dict(meta)
    manifest["kind"] = kind
    manifest["entries"] = entries
    manifest_bytes = _canonical_json(manifest)
    body = MAGIC + _HEADER.pack(FORMAT_VERSION, len(manifest_bytes)) \
        + manifest_bytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def _unpack(data: bytes, label: str):
    if len(data) < len(MAGIC) + _HEADER.size + 32:
        raise CorruptionError(f"{label}: file too short to be a checkpoint")
    if data[:len(MAGIC)] != MAGIC:
        raise DataError(f"{label}: bad magic; not a loadcast container")
    version, manifest_len = _HEADER.unpack_from(data, len(MAGIC))
    if version > FORMAT_VERSION:
        raise VersionError(
            f"{label}: format version {version} is newer than supported "
            f"version {FORMAT_VERSION}"
        )
    body, trailer = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise CorruptionError(f"{label}: content hash mismatch (corrupt or truncated)")
    manifest_start = len(MAGIC) + _HEADER.size
    blob_start = manifest_start + manifest_len
    if blob_start > len(body):
        raise CorruptionError(f"{label}: manifest overruns the file")
    try:
        manifest = json.loads(body[manifest_start:blob_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{label}: unreadable manifest: {exc}") from None
    blob = body[blob_start:]
    arrays = {}
    covered = 0
    for entry in manifest.get("entries", []):
        off, length = entry["offset"], entry["length"]
        if off != covered or off + length > len(blob):
            raise CorruptionError(f"{label}: manifest offsets do not tile the blob")
        covered = off + length
        arr = np.frombuffer(blob, dtype="<f8", count=length // 8, offset=off)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    if covered != len(blob):
        raise CorruptionError(f"{label}: blob has {len(blob) - covered} trailing bytes")
    return manifest, arrays


def _atomic_write(path, payload: bytes):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def param_hash(model: Forecaster) -> str:
    """SHA-256 over all backbone parameters in registry order."""
    digest = hashlib.sha256()
    for name, p in model.parameters().items():
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return digest.hexdigest()


# -- backbone ---------------------------------------------------------------


def backbone_bytes(model: Forecaster, stats: StatsTable, extra: dict = None) -> bytes:
    config = model.config
    meta = {
        "model_config": {
            "input_width": config.input_width, "lift_width": config.lift_width,
            "hidden_width": config.hidden_width, "latent_width": config.latent_width,
            "context_steps": config.context_steps,
            "source_names": list(config.source_names),
            "source_dim": config.source_dim, "gate_hidden": config.gate_hidden,
            "hyper_hidden": config.hyper_hidden,
            "head_activation": config.head_activation,
            "logvar_clip": config.logvar_clip,
        },
        "stats": stats.to_dict(),
        "param_hash": param_hash(model),
        "extra": extra or {},
    }
    arrays = [(name, p.data) for name, p in model.parameters().items()]
    return _pack("backbone", meta, arrays)


def save_backbone(model: Forecaster, stats: StatsTable, path, extra: dict = None):
    _atomic_write(path, backbone_bytes(model, stats, extra))


def load_backbone_bytes(data: bytes, label: str = "<memory>"):
    manifest, arrays = _unpack(data, label)
    if manifest.get("kind") != "backbone":
        raise DataError(f"{label}: container holds {manifest.get('kind')!r}, "
                        "expected a backbone checkpoint")
    mc = dict(manifest["model_config"])
    mc["source_names"] = tuple(mc["source_names"])
    model = Forecaster.from_state(ModelConfig(**mc), arrays)
    if param_hash(model) != manifest["param_hash"]:
        raise CorruptionError(f"{label}: parameter hash mismatch after load")
    stats = StatsTable.from_dict(manifest["stats"])
    return model, stats, manifest


def load_backbone(path):
    """Read a checkpoint back: (model, stats table, manifest)."""
    with open(path, "rb") as fh:
        data = fh.read()
    return load_backbone_bytes(data, str(path))


# -- adapters -----------------------------------------------------------------


def adapter_bytes(adapter: LoraAdapter) -> bytes:
    if not adapter.backbone_hash:
        raise ContractError("adapter has no backbone hash; fine-tune it (or set "
                            "backbone_hash) before saving")
    meta = {
        "target": adapter.target,
        "rank": adapter.rank,
        "alpha": adapter.alpha,
        "group_id": adapter.group_id,
        "backbone_hash": adapter.backbone_hash,
        "pair_names": [pair.param_name for pair in adapter.pairs],
    }
    arrays = []
    for pair in adapter.pairs:
        arrays.append((f"{pair.param_name}.a", pair.a.data))
        arrays.append((f"{pair.param_name}.b", pair.b.data))
    return _pack("adapter", meta, arrays)


def save_adapter(adapter: LoraAdapter, path):
    _atomic_write(path, adapter_bytes(adapter))


def load_adapter_bytes(data: bytes, label: str = "<memory>",
                       backbone_hash: str = None, override: bool = False) -> LoraAdapter:
    manifest, arrays = _unpack(data, label)
    if manifest.get("kind") != "adapter":
        raise DataError(f"{label}: container holds {manifest.get('kind')!r}, "
                        "expected an adapter")
    if manifest["target"] not in TARGETS:
        raise DataError(f"{label}: unknown adapter target {manifest['target']!r}")
    if backbone_hash is not None and manifest["backbone_hash"] != backbone_hash:
        if not override:
            raise CompatibilityError(
                f"{label}: adapter was tuned against backbone "
                f"{manifest['backbone_hash'][:12]}..., not the loaded backbone "
                f"{backbone_hash[:12]}...; pass override to force"
            )
    adapter = LoraAdapter(
        target=manifest["target"], rank=int(manifest["rank"]),
        alpha=float(manifest["alpha"]), group_id=manifest["group_id"],
        backbone_hash=manifest["backbone_hash"],
    )
    for name in manifest["pair_names"]:
        a = Tensor(arrays[f"{name}.a"], requires_grad=True)
        b = Tensor(arrays[f"{name}.b"], requires_grad=True)
        adapter.pairs.append(FactorPair(name, a, b))
    return adapter


def load_adapter(path, backbone_hash: str = None, override: bool = False) -> LoraAdapter:
    """Read an adapter; refuses a mismatched backbone unless ``override``."""
    with open(path, "rb") as fh:
        data = fh.read()
    return load_adapter_bytes(data, str(path), backbone_hash, override)
