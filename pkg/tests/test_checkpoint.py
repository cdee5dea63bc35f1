"""Checkpoint format tests: canonical bytes, round trips, blending."""

import hashlib
import json

import numpy as np
import pytest

from facestyle.checkpoint import (
    Checkpoint,
    CheckpointError,
    blend_checkpoints,
    canonical_json_bytes,
    config_fingerprint,
    load_checkpoint,
    save_checkpoint,
)
from facestyle.deform import DeformModel


def small_ckpt(seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    return Checkpoint(
        {"net.w": rng.standard_normal((3, 4)), "net.b": rng.standard_normal(4)},
        fingerprint="abc123",
        seed=seed,
    )


def test_bytes_roundtrip_is_stable():
    ckpt = small_ckpt()
    data = ckpt.to_bytes()
    again = Checkpoint.from_bytes(data)
    assert again.to_bytes() == data
    assert again.fingerprint == "abc123"
    for name in ckpt.tensors:
        assert np.array_equal(again.tensors[name], ckpt.tensors[name])


def test_bytes_independent_of_insertion_order():
    a = Checkpoint({"x": np.ones(2), "y": np.zeros(3)})
    b = Checkpoint({"y": np.zeros(3), "x": np.ones(2)})
    assert a.to_bytes() == b.to_bytes()


def test_fingerprint_matches_direct_hash():
    cfg = {"b": [1, 2], "a": {"c": 0.5}}
    want = hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()
    assert config_fingerprint(cfg) == want


def test_canonical_json_rejects_nan():
    with pytest.raises(ValueError):
        canonical_json_bytes({"x": float("nan")})


def test_from_bytes_rejects_wrong_format():
    bad = json.dumps({"format": "other", "tensors": {}}).encode()
    with pytest.raises(CheckpointError, match="format"):
        Checkpoint.from_bytes(bad)
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(b"not json at all {")


def test_from_bytes_rejects_nan_constant():
    raw = (
        b'{"fingerprint":"","format":"nta-v1","seed":0,'
        b'"tensors":{"t":{"shape":[1],"values":[NaN]}}}'
    )
    with pytest.raises(ValueError):
        Checkpoint.from_bytes(raw)


def test_from_bytes_rejects_count_mismatch():
    raw = json.dumps({
        "format": "nta-v1", "fingerprint": "", "seed": 0,
        "tensors": {"t": {"shape": [2, 2], "values": [1.0, 2.0, 3.0]}},
    }).encode()
    with pytest.raises(CheckpointError, match="values"):
        Checkpoint.from_bytes(raw)


def test_constructor_rejects_nonfinite_tensor():
    with pytest.raises(CheckpointError):
        Checkpoint({"t": np.array([1.0, np.inf])})


def test_save_load_model_roundtrip(tmp_path):
    model = DeformModel(4, 2, seed=7)
    path = tmp_path / "model.ckpt.json"
    saved = save_checkpoint({"ds": model}, path, fingerprint="fp", seed=7)
    loaded = load_checkpoint(path, expected_fingerprint="fp")
    assert loaded.to_bytes() == saved.to_bytes()
    assert len(loaded.tensors) == len(model.params)

    fresh = DeformModel(4, 2, seed=999)
    fresh.load_state_arrays(loaded.group("ds"))
    for name, t in model.params.items():
        assert np.array_equal(fresh.params[name].data, t.data)


def test_load_fingerprint_mismatch(tmp_path):
    path = tmp_path / "c.json"
    small_ckpt().save(path)
    with pytest.raises(CheckpointError, match="fingerprint"):
        load_checkpoint(path, expected_fingerprint="other")
    ok = load_checkpoint(path, expected_fingerprint="other", force=True)
    assert ok.fingerprint == "abc123"


def test_group_strips_prefix_and_rejects_unknown():
    ckpt = small_ckpt()
    sub = ckpt.group("net")
    assert set(sub) == {"w", "b"}
    with pytest.raises(KeyError):
        ckpt.group("missing")


def test_blend_endpoints_bitwise():
    a = small_ckpt(1)
    b = small_ckpt(2)
    # Negative zero is the classic way naive alpha-blending breaks bitwise
    # equality at the endpoints.
    a.tensors["net.b"] = a.tensors["net.b"].copy()
    a.tensors["net.b"][0] = -0.0
    at_one = blend_checkpoints(a, b, 1.0)
    at_zero = blend_checkpoints(a, b, 0.0)
    for name in a.tensors:
        assert (
            at_one.tensors[name].tobytes() == a.tensors[name].tobytes()
        )
        assert (
            at_zero.tensors[name].tobytes() == b.tensors[name].tobytes()
        )


def test_blend_midpoint_formula():
    a, b = small_ckpt(1), small_ckpt(2)
    mid = blend_checkpoints(a, b, 0.25)
    for name in a.tensors:
        want = 0.25 * a.tensors[name] + 0.75 * b.tensors[name]
        assert np.array_equal(mid.tensors[name], want)


def test_blend_roundtrips_through_bytes():
    mid = blend_checkpoints(small_ckpt(1), small_ckpt(2), 0.5)
    again = Checkpoint.from_bytes(mid.to_bytes())
    assert again.to_bytes() == mid.to_bytes()


def test_blend_rejects_mismatches():
    a, b = small_ckpt(1), small_ckpt(2)
    with pytest.raises(ValueError):
        blend_checkpoints(a, b, 1.5)
    c = Checkpoint({"net.w": np.zeros((3, 4)), "other": np.zeros(4)})
    with pytest.raises(CheckpointError, match="names"):
        blend_checkpoints(a, c, 0.5)
    d = Checkpoint({"net.w": np.zeros((4, 3)), "net.b": np.zeros(4)})
    with pytest.raises(CheckpointError, match="shape"):
        blend_checkpoints(a, d, 0.5)
