import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from maskguard import io
from maskguard.errors import InputError
from maskguard.optim import Adam
from maskguard.tensor import Tape, Tensor
from maskguard import tensor as tn

names = st.text(st.characters(blacklist_categories=("Cs",)), min_size=0, max_size=12)
shapes = st.lists(st.integers(0, 4), min_size=0, max_size=3).map(tuple)
f64 = st.floats(allow_nan=True, allow_infinity=True, width=64)


@st.composite
def checkpoints(draw):
    keys = draw(st.lists(names, unique=True, max_size=5))
    return {k: draw(arrays(np.float64, draw(shapes), elements=f64)) for k in keys}


def test_checkpoint_layout_by_hand():
    blob = io.encode_checkpoint({"w": np.array([[1.0, 2.0]])})
    expected = (b"SCKT" + struct.pack("<II", 1, 1) + struct.pack("<I", 1) + b"w"
                + struct.pack("<I", 2) + struct.pack("<QQ", 1, 2) + struct.pack("<2d", 1.0, 2.0))
    assert blob == expected


@settings(max_examples=80, deadline=None)
@given(checkpoints())
def test_checkpoint_roundtrip_bit_exact(tensors):
    blob = io.encode_checkpoint(tensors)
    back = io.decode_checkpoint(blob)
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        assert back[k].data.tobytes() == np.ascontiguousarray(v).tobytes()
    assert io.encode_checkpoint(back) == blob


def test_checkpoint_file_roundtrip(tmp_path):
    t = {"a.b": np.arange(6.0).reshape(2, 3), "scalar": np.array(3.5)}
    io.save_checkpoint(tmp_path / "x.sckt", t)
    back = io.load_checkpoint(tmp_path / "x.sckt")
    assert back["scalar"].shape == () and back["scalar"].item() == 3.5


@pytest.mark.parametrize("mutate", ["magic", "version", "trailing", "duplicate"])
def test_checkpoint_rejects_corruption(mutate):
    blob = bytearray(io.encode_checkpoint({"w": np.ones(2)}))
    if mutate == "magic":
        blob[:4] = b"XXXX"
    elif mutate == "version":
        blob[4:8] = struct.pack("<I", 9)
    elif mutate == "trailing":
        blob += b"\0"
    else:
        one = bytes(blob[12:])
        blob = bytearray(b"SCKT" + struct.pack("<II", 1, 2) + one + one)
    with pytest.raises(InputError):
        io.decode_checkpoint(bytes(blob))


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3))))
def test_ppm_roundtrip(rgb):
    blob = io.encode_ppm(rgb)
    back = io.decode_ppm(blob)
    assert back.tobytes() == rgb.tobytes() and back.shape == rgb.shape
    assert io.encode_ppm(back) == blob


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm_roundtrip(gray):
    back = io.decode_pgm(io.encode_pgm(gray))
    assert back.tobytes() == gray.tobytes() and back.shape == gray.shape


def test_netpbm_header_comments_and_files(tmp_path):
    blob = b"P5\n# made by hand\n2 1\n255\n\x00\xff"
    assert io.decode_pgm(blob).tolist() == [[0, 255]]
    io.write_ppm(tmp_path / "a.ppm", np.full((2, 2, 3), 7, np.uint8))
    assert io.read_ppm(tmp_path / "a.ppm").sum() == 7 * 12


def test_netpbm_rejects_wrong_kind():
    with pytest.raises(InputError):
        io.decode_ppm(io.encode_pgm(np.zeros((2, 2), np.uint8)))
    with pytest.raises(InputError):
        io.encode_ppm(np.zeros((2, 2), np.float64))


def test_uint8_mapping():
    assert io.to_uint8(np.array([-1.0, 0.0, 1.0, 3.0])).tolist() == [0, 128, 255, 255]
    x = np.arange(256, dtype=np.uint8)
    assert io.to_uint8(io.from_uint8(x)).tolist() == x.tolist()


def test_csv_roundtrip_keeps_floats(tmp_path):
    rows = [[1, "a", 0.1 + 0.2], [2, "b", 1e-300]]
    io.write_csv(tmp_path / "r.csv", ["i", "s", "v"], rows)
    back = io.read_csv(tmp_path / "r.csv")
    assert [float(r["v"]) for r in back] == [0.1 + 0.2, 1e-300]
    assert (tmp_path / "r.csv").read_bytes().count(b"\r") == 0


def test_adam_minimizes_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([x], lr=0.1)
    tape = Tape()
    for _ in range(300):
        tape.reset()
        with tape:
            loss = tn.tsum(tn.square(x))
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
    assert np.abs(x.data).max() < 1e-2


def test_adam_clips_global_norm():
    x = Tensor(np.zeros(2), requires_grad=True)
    x.grad = np.array([300.0, 400.0])
    opt = Adam([x], lr=1.0, clip_norm=1.0)
    opt.step()
    # the first Adam step moves each coordinate by ~lr regardless of scale
    np.testing.assert_allclose(x.data, [-1.0, -1.0], atol=1e-6)
