import os
import struct

import numpy as np
import pytest

from gdfd import checkpoint
from gdfd.checkpoint import CheckpointError, VersionError, decode, encode
from gdfd.models import build_classifier, build_generator

GOLDEN = os.path.join(os.path.dirname(__file__), "data", "golden_v1.gdfd")
GOLDEN_TENSORS = {
    "w": np.array([[1.5, -2.0, 0.25], [0.0, 3.0, -0.125]], dtype=np.float32),
    "running/var": np.array([1.0, 0.1], dtype=np.float64),
    "step": np.array(7, dtype=np.int64),
}


def test_golden_file_decodes():
    tensors, meta = checkpoint.load_checkpoint(GOLDEN)
    assert meta == {"kind": "golden"}
    assert list(tensors) == list(GOLDEN_TENSORS)
    for name, expected in GOLDEN_TENSORS.items():
        assert tensors[name].dtype == expected.dtype
        assert tensors[name].shape == expected.shape
        assert np.array_equal(tensors[name], expected)


def test_golden_file_encodes_byte_identically():
    with open(GOLDEN, "rb") as fh:
        assert encode(GOLDEN_TENSORS, {"kind": "golden"}) == fh.read()


def test_header_layout():
    buf = encode({"a": np.zeros((2, 3), np.float64)}, {"k": "v"})
    assert buf[:4] == b"GDFD"
    assert struct.unpack("<I", buf[4:8]) == (1,)
    assert struct.unpack("<I", buf[8:12]) == (1,)
    # key "k", value "v", then one tensor named "a": f64, rank 2, dims 2 and 3
    assert buf[12:22] == struct.pack("<I", 1) + b"k" + struct.pack("<I", 1) + b"v"
    assert buf[22:26] == struct.pack("<I", 1)
    assert buf[26:33] == struct.pack("<I", 1) + b"a" + bytes([1, 2])
    assert buf[33:49] == struct.pack("<QQ", 2, 3)
    assert len(buf) == 49 + 6 * 8


def test_classifier_round_trip_is_bit_exact(tmp_path):
    model = build_classifier(seed=3)
    model(np.random.default_rng(0).standard_normal((4, 1, 16, 16)).astype(np.float32), mode="train")
    path = str(tmp_path / "m.gdfd")
    checkpoint.save_model(model, path)
    back = checkpoint.load_model(path)
    assert type(back) is type(model) and back.cfg == model.cfg
    for name, arr in model.state_dict().items():
        got = back.state_dict()[name]
        assert got.dtype == arr.dtype and np.array_equal(got, arr), name


def test_generator_round_trip(tmp_path):
    gen = build_generator(latent_dim=8, num_classes=2, channels=1, target_size=16, widths=(4, 4, 2),
                          dtype=np.float64)
    path = str(tmp_path / "g.gdfd")
    checkpoint.save_model(gen, path)
    back = checkpoint.load_model(path)
    assert back.cfg == gen.cfg
    z = np.random.default_rng(0).standard_normal((3, 8))
    assert np.array_equal(back(z, [0, 1, 0], mode="eval").data, gen(z, [0, 1, 0], mode="eval").data)


def test_version_bump_rejected():
    buf = bytearray(encode({"a": np.zeros(2, np.float32)}))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionError):
        decode(bytes(buf))


def test_bad_magic_rejected():
    with pytest.raises(CheckpointError):
        decode(b"GDFX" + encode({})[4:])


def test_truncation_rejected_at_every_cut():
    buf = encode({"a": np.arange(3, dtype=np.float32), "b": np.ones((2, 2))}, {"x": "y"})
    for cut in range(len(buf)):
        with pytest.raises(CheckpointError):
            decode(buf[:cut])
    with pytest.raises(CheckpointError):
        decode(buf + b"\0")


def test_duplicate_names_rejected():
    one = encode({"a": np.zeros(1, np.float32)})
    # splice a second copy of the same tensor record into the table
    record = one[16:]
    dup = one[:12] + struct.pack("<I", 2) + record + record
    with pytest.raises(CheckpointError):
        decode(dup)


def test_unsupported_dtype():
    with pytest.raises(CheckpointError):
        encode({"a": np.zeros(2, np.int32)})


def test_moments_round_trip(tmp_path):
    from gdfd.losses import MomentTargets
    targets = MomentTargets([(np.zeros(2), np.ones(2)), (np.arange(3.0), np.full(3, 0.5))],
                            "per_group", (4, 5))
    path = str(tmp_path / "t.gdfd")
    checkpoint.save_moments(targets, path)
    back = checkpoint.load_moments(path)
    assert back.provenance == "per_group" and back.classes == (4, 5)
    for (m, v), (m2, v2) in zip(targets.layers, back.layers):
        assert np.array_equal(m, m2) and np.array_equal(v, v2)
