import json
import struct

import numpy as np
import pytest

from rulenet.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from rulenet.errors import (
    CheckpointError,
    FingerprintError,
    TruncationError,
    VersionError,
)

from helpers import tiny_model


@pytest.fixture()
def saved(tmp_path):
    model, batch = tiny_model(seed=31, dtype=np.float32, missing_rate=0.2)
    path = tmp_path / "model.rnc"
    save_checkpoint(model, path)
    return model, batch, path


def _rewrite_manifest(path, mutate):
    """Edit the manifest JSON in place, fixing the length prefix."""
    data = path.read_bytes()
    (mlen,) = struct.unpack("<Q", data[:8])
    manifest = json.loads(data[8 : 8 + mlen])
    mutate(manifest)
    payload = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    path.write_bytes(struct.pack("<Q", len(payload)) + payload + data[8 + mlen :])


def test_round_trip_is_bit_exact(saved):
    model, batch, path = saved
    loaded = load_checkpoint(path)
    want = model.named_parameters()
    got = loaded.named_parameters()
    assert set(got) == set(want)
    for name in want:
        assert got[name].data.dtype == want[name].data.dtype
        assert np.array_equal(got[name].data, want[name].data), name
    assert loaded.config == model.config
    assert np.array_equal(
        loaded.forward(batch, "eval").data, model.forward(batch, "eval").data
    )


def test_round_trip_preserves_preprocessing(saved):
    model, _, path = saved
    loaded = load_checkpoint(path)
    assert loaded.prep.schema.fingerprint() == model.prep.schema.fingerprint()
    for name, bins in model.prep.bins.items():
        assert np.array_equal(loaded.prep.bins[name].boundaries, bins.boundaries)
    assert loaded.prep.normalizer == model.prep.normalizer


def test_round_trip_float64(tmp_path):
    model, batch = tiny_model(seed=32, dtype=np.float64)
    path = tmp_path / "m64.rnc"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.dtype == np.float64
    assert loaded.head.weight.data.dtype == np.float64
    assert np.array_equal(
        loaded.forward(batch, "eval").data, model.forward(batch, "eval").data
    )


def test_missing_file_reports_cleanly(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.rnc")


def test_file_shorter_than_header(saved):
    _, _, path = saved
    path.write_bytes(path.read_bytes()[:4])
    with pytest.raises(TruncationError):
        load_checkpoint(path)


def test_header_overstates_manifest(saved):
    _, _, path = saved
    path.write_bytes(struct.pack("<Q", 10**9) + b"{}")
    with pytest.raises(TruncationError):
        load_checkpoint(path)


def test_truncated_blob_section(saved):
    _, _, path = saved
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(TruncationError, match="past end"):
        load_checkpoint(path)


def test_garbage_manifest(saved):
    _, _, path = saved
    path.write_bytes(struct.pack("<Q", 5) + b"ruleN" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="JSON"):
        load_checkpoint(path)


def test_future_version_is_refused(saved):
    _, _, path = saved

    def bump(m):
        m["format_version"] = FORMAT_VERSION + 1

    _rewrite_manifest(path, bump)
    with pytest.raises(VersionError, match=str(FORMAT_VERSION + 1)):
        load_checkpoint(path)


def test_tampered_schema_is_refused(saved):
    _, _, path = saved

    def rename(m):
        m["schema"]["columns"][0]["name"] = "smuggled"

    _rewrite_manifest(path, rename)
    with pytest.raises(FingerprintError):
        load_checkpoint(path)


def test_dropped_tensor_is_refused(saved):
    _, _, path = saved

    def drop(m):
        del m["tensors"][0]

    _rewrite_manifest(path, drop)
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(path)


def test_wrong_shape_is_refused(saved):
    _, _, path = saved

    def reshape(m):
        m["tensors"][0]["shape"] = [1, 1]

    _rewrite_manifest(path, reshape)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)


def test_unsupported_dtype_is_refused(saved):
    _, _, path = saved

    def poison(m):
        m["dtype"] = "float16"

    _rewrite_manifest(path, poison)
    with pytest.raises(CheckpointError, match="float16"):
        load_checkpoint(path)
