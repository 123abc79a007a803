"""Checkpoint I/O: a text manifest next to a raw little-endian float64 blob.

Layout (one directory per checkpoint):
    manifest.txt   key=value lines; see ``docs/formats.md`` for the grammar
    params.bin     parameter arrays concatenated in manifest order

The manifest records the format version, the architecture (hash plus a JSON
descriptor so a checkpoint is self-contained), the init seed, and one line
per parameter with shape and byte offset.  Loading verifies sizes and, when
a model is supplied, the architecture hash.
"""

import json
import os

import numpy as np

from posekd.nn.model import ModelSpec, ParamStore, model_from_dict, model_to_dict

FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Raised for unreadable, truncated, or incompatible checkpoints."""


def save_params(store: ParamStore, path: str, model: ModelSpec | None = None) -> None:
    """Writes ``store`` under directory ``path`` (created if needed)."""
    os.makedirs(path, exist_ok=True)
    names = sorted(store.params)
    for name in names:
        if ":" in name or any(c.isspace() for c in name):
            raise ValueError(f"param name {name!r} not representable in manifest")

    lines = [f"format_version={FORMAT_VERSION}"]
    lines.append(f"model_hash={model.hash() if model is not None else '-'}")
    spec_json = json.dumps(model_to_dict(model), sort_keys=True) if model is not None else "-"
    lines.append(f"model_spec={spec_json}")
    lines.append(f"seed={store.seed}")

    blobs = []
    offset = 0
    for name in names:
        arr = store.params[name]
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        lines.append(f"param={name}:{shape}:{offset}")
        blobs.append(raw)
        offset += len(raw)
    lines.append(f"blob_bytes={offset}")

    with open(os.path.join(path, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(path, "params.bin"), "wb") as f:
        f.write(b"".join(blobs))


def _parse_manifest(text: str) -> dict:
    meta: dict[str, str] = {}
    params: list[tuple[str, tuple[int, ...], int]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"manifest line {lineno} is not key=value: {line!r}")
        key, value = line.split("=", 1)
        if key == "param":
            try:
                name, shape_s, offset_s = value.split(":")
                shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
                params.append((name, shape, int(offset_s)))
            except ValueError as exc:
                raise CheckpointError(f"bad param line {lineno}: {line!r}") from exc
        else:
            meta[key] = value
    return {"meta": meta, "params": params}


def load_params(path: str, model: ModelSpec | None = None) -> ParamStore:
    """Loads a checkpoint directory; round-trips ``save_params`` bit-exactly.

    If ``model`` is given its architecture hash must match the manifest.
    """
    manifest_path = os.path.join(path, "manifest.txt")
    blob_path = os.path.join(path, "params.bin")
    if not os.path.isfile(manifest_path) or not os.path.isfile(blob_path):
        raise CheckpointError(f"no checkpoint at {path!r} (need manifest.txt and params.bin)")
    with open(manifest_path) as f:
        parsed = _parse_manifest(f.read())
    meta, params = parsed["meta"], parsed["params"]

    version = meta.get("format_version")
    if version != str(FORMAT_VERSION):
        raise CheckpointError(f"unsupported checkpoint format version {version!r}, expected {FORMAT_VERSION}")
    if "blob_bytes" not in meta:
        raise CheckpointError("manifest missing blob_bytes")

    with open(blob_path, "rb") as f:
        blob = f.read()
    expected = int(meta["blob_bytes"])
    if len(blob) != expected:
        raise CheckpointError(f"params.bin is {len(blob)} bytes, manifest says {expected} (truncated or corrupt)")

    if model is not None:
        recorded = meta.get("model_hash", "-")
        if recorded != model.hash():
            raise CheckpointError(f"checkpoint was written for model {recorded}, not {model.hash()}")

    store: dict[str, np.ndarray] = {}
    for name, shape, offset in params:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"param {name} extends past end of blob (truncated?)")
        arr = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        store[name] = arr
    seed = int(meta.get("seed", "0"))
    return ParamStore(store, seed)


def load_model(path: str) -> ModelSpec:
    """Reconstructs the architecture recorded in a checkpoint manifest."""
    manifest_path = os.path.join(path, "manifest.txt")
    if not os.path.isfile(manifest_path):
        raise CheckpointError(f"no checkpoint at {path!r}")
    with open(manifest_path) as f:
        meta = _parse_manifest(f.read())["meta"]
    spec_json = meta.get("model_spec", "-")
    if spec_json == "-":
        raise CheckpointError("checkpoint does not record its architecture")
    return model_from_dict(json.loads(spec_json))
