"""Bit-exact model serialization.

File layout:

    [8 bytes]  little-endian uint64: manifest length in bytes
    [manifest] UTF-8 JSON: format version, config, schema + fingerprint,
               preprocessing state, tensor directory (name/shape/offset)
    [blobs]    the parameter arrays, raw little-endian floats, row-major,
               concatenated in directory order; offsets are relative to
               the start of this section

The schema fingerprint is recomputed from the stored schema on load and
compared against the stored value, so a manifest edited after saving is
rejected rather than silently trusted.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .data import DatasetSchema, Preprocessing, QuantileBins, TargetNormalizer
from .errors import CheckpointError, FingerprintError, TruncationError, VersionError
from .model import RuleNetConfig, RuleNetModel

FORMAT_VERSION = 1

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(model: RuleNetModel, path) -> None:
    params = model.named_parameters()
    dtype_name = np.dtype(model.dtype).name
    code = _DTYPE_CODES[dtype_name]
    itemsize = np.dtype(code).itemsize

    directory = []
    blobs = []
    offset = 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype=code).tobytes()
        directory.append({"name": name, "shape": list(t.data.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
        assert len(raw) == t.data.size * itemsize

    prep = model.prep
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": dtype_name,
        "config": model.config.to_json(),
        "schema": prep.schema.to_json(),
        "schema_fingerprint": prep.schema.fingerprint(),
        "preprocessing": {
            "bins": {
                name: {"boundaries": b.boundaries.tolist(), "n_quantiles": b.n_quantiles}
                for name, b in prep.bins.items()
            },
            "normalizer": (
                None
                if prep.normalizer is None
                else {
                    "mean": prep.normalizer.mean,
                    "std": prep.normalizer.std,
                    "eps": prep.normalizer.eps,
                }
            ),
        },
        "tensors": directory,
    }
    payload = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> RuleNetModel:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e

    if len(data) < 8:
        raise TruncationError(f"{path}: file too short for the length header")
    (manifest_len,) = struct.unpack("<Q", data[:8])
    if manifest_len > len(data) - 8:
        raise TruncationError(
            f"{path}: header claims a {manifest_len}-byte manifest, "
            f"only {len(data) - 8} bytes follow"
        )
    try:
        manifest = json.loads(data[8 : 8 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: manifest is not valid JSON: {e}") from e

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")

    schema = DatasetSchema.from_json(manifest["schema"])
    stored_fp = manifest.get("schema_fingerprint")
    if schema.fingerprint() != stored_fp:
        raise FingerprintError(
            f"{path}: stored schema fingerprint {stored_fp!r} does not match the stored schema"
        )

    dtype_name = manifest.get("dtype", "float32")
    if dtype_name not in _DTYPE_CODES:
        raise CheckpointError(f"{path}: unsupported tensor dtype {dtype_name!r}")
    code = _DTYPE_CODES[dtype_name]
    itemsize = np.dtype(code).itemsize

    pp = manifest["preprocessing"]
    bins = {
        name: QuantileBins(name, np.asarray(b["boundaries"], dtype=np.float64), b["n_quantiles"])
        for name, b in pp["bins"].items()
    }
    normalizer = None
    if pp["normalizer"] is not None:
        nz = pp["normalizer"]
        normalizer = TargetNormalizer(nz["mean"], nz["std"], nz["eps"])
    prep = Preprocessing(schema=schema, bins=bins, normalizer=normalizer)
    config = RuleNetConfig.from_json(manifest["config"])

    model = RuleNetModel.build(prep, config, seed=0, dtype=np.dtype(dtype_name).type)
    params = model.named_parameters()

    directory = {entry["name"]: entry for entry in manifest["tensors"]}
    missing = set(params) - set(directory)
    extra = set(directory) - set(params)
    if missing or extra:
        raise CheckpointError(
            f"{path}: tensor directory mismatch (missing {sorted(missing)}, extra {sorted(extra)})"
        )

    blob_start = 8 + manifest_len
    for name, t in params.items():
        entry = directory[name]
        shape = tuple(entry["shape"])
        if shape != t.data.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {shape}, model expects {t.data.shape}"
            )
        size = int(np.prod(shape, dtype=np.int64)) * itemsize if shape else itemsize
        lo = blob_start + entry["offset"]
        hi = lo + size
        if hi > len(data):
            raise TruncationError(f"{path}: tensor {name!r} extends past end of file")
        t.data = np.frombuffer(data[lo:hi], dtype=code).reshape(shape).copy()
    return model
