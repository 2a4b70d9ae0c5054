import io
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from quadmix.errors import FormatError, ShapeError, TensorIOError, TruncationError
from quadmix.tensor_io import (IGNORE, LabelMap, emit_image, encode_tensor, load_labels, palette,
                               read_tensor, save_labels, write_tensor)


def test_f32_example_layout():
    t = np.array([[1, 2], [3, 4]], dtype=np.float32)
    buf = io.BytesIO()
    n = write_tensor(t, buf)
    data = buf.getvalue()
    assert n == len(data) == 4 + 1 + 1 + 1 + 8 + 16 == 31
    assert data[:4] == b"QTNS"
    assert data[4:7] == bytes([1, 0, 2])
    assert data[7:15] == struct.pack("<II", 2, 2)
    assert data[15:19] == struct.pack("<f", 1.0)


def test_u16_payload_is_little_endian():
    data = encode_tensor(np.array([255], dtype=np.uint16))
    assert data[-2:] == b"\xff\x00"
    assert data[5] == 2


def test_read_example_round_trip():
    t = np.array([[1, 2], [3, 4]], dtype=np.float32)
    out = read_tensor(encode_tensor(t))
    assert out.dtype == np.float32 and out.shape == (2, 2)
    assert np.array_equal(out, t)


def test_bad_magic():
    with pytest.raises(FormatError):
        read_tensor(io.BytesIO(b"XXXX\x01\x00\x01\x01\x00\x00\x00"))


def test_truncated_payload_reports_counts():
    header = b"QTNS" + bytes([1, 0, 1]) + struct.pack("<I", 10)
    with pytest.raises(TruncationError) as exc:
        read_tensor(io.BytesIO(header + b"\x00" * 16))
    assert (exc.value.expected, exc.value.actual) == (40, 16)


def test_truncated_header():
    with pytest.raises(TruncationError):
        read_tensor(io.BytesIO(b"QTNS\x01\x00\x02\x01\x00"))


@pytest.mark.parametrize("blob", [b"QTNS\x02\x00\x01\x01\x00\x00\x00", b"QTNS\x01\x07\x01\x01\x00\x00\x00",
                                  b"QTNS\x01\x00\x06", b"QTNS\x01\x00\x00"])
def test_bad_header_fields(blob):
    with pytest.raises(FormatError):
        read_tensor(io.BytesIO(blob))


def test_hundred_random_round_trips(nprng):
    for _ in range(100):
        rank = int(nprng.integers(1, 6))
        shape = tuple(int(x) for x in nprng.integers(1, 5, rank))
        kind = nprng.integers(0, 3)
        if kind == 0:
            t = nprng.standard_normal(shape).astype(np.float32)
        elif kind == 1:
            t = nprng.integers(0, 256, shape).astype(np.uint8)
        else:
            t = nprng.integers(0, 65536, shape).astype(np.uint16)
        blob = encode_tensor(t)
        back = read_tensor(blob)
        assert back.dtype == t.dtype and np.array_equal(back, t)
        assert encode_tensor(back) == blob


dtypes = st.sampled_from([np.dtype("<f4"), np.dtype("u1"), np.dtype("<u2")])


@given(hnp.arrays(dtypes, hnp.array_shapes(min_dims=1, max_dims=5, min_side=1, max_side=4)))
def test_round_trip_is_bit_exact(t):
    blob = encode_tensor(t)
    back = read_tensor(blob)
    assert back.tobytes() == t.astype(t.dtype.newbyteorder("<")).tobytes()
    assert encode_tensor(back) == blob


def test_big_endian_input_is_written_little_endian():
    t = np.array([1.5, -2.0], dtype=">f4")
    assert encode_tensor(t) == encode_tensor(t.astype("<f4"))


@pytest.mark.parametrize("t", [np.zeros((2,), np.float64), np.zeros((2,), np.int32),
                               np.zeros((1,) * 6, np.float32), np.zeros((0, 2), np.float32),
                               np.float32(1.0)])
def test_unsupported_tensors(t):
    with pytest.raises(ShapeError):
        encode_tensor(t)


def test_path_round_trip(tmp_path):
    t = np.arange(6, dtype=np.uint8).reshape(2, 3)
    write_tensor(t, tmp_path / "a.qtns")
    assert np.array_equal(read_tensor(tmp_path / "a.qtns"), t)


class _FailingSink:
    def __init__(self, budget):
        self.budget = budget

    def write(self, data):
        if self.budget == 0:
            raise OSError("disk full")
        n = min(self.budget, len(data))
        self.budget -= n
        return n


def test_sink_failure_reports_offset():
    with pytest.raises(TensorIOError) as exc:
        write_tensor(np.zeros(8, np.float32), _FailingSink(10))
    assert exc.value.offset == 10


def test_label_map_validation():
    LabelMap(np.array([[0, 1], [IGNORE, 2]]), 3)
    with pytest.raises(ShapeError):
        LabelMap(np.array([[3]]), 3)
    with pytest.raises(ShapeError):
        LabelMap(np.array([[0]]), 1)


def test_label_save_load(tmp_path):
    lab = LabelMap(np.array([[0, 1], [IGNORE, 2]]), 3)
    save_labels(lab, tmp_path / "l.qtns")
    back = load_labels(tmp_path / "l.qtns", 3)
    assert np.array_equal(back.values, lab.values)
    write_tensor(np.zeros((2, 2), np.float32), tmp_path / "f.qtns")
    with pytest.raises(FormatError):
        load_labels(tmp_path / "f.qtns", 3)


# --------------------------------------------------------------------------
# PPM


def test_black_frame_ppm():
    buf = io.BytesIO()
    n = emit_image(np.zeros((3, 2, 2), np.float32), buf, kind="frame")
    assert buf.getvalue() == b"P6\n2 2\n255\n" + bytes(12)
    assert n == len(buf.getvalue())


def test_frame_clamps_and_rounds():
    buf = io.BytesIO()
    emit_image(np.array([[[-1.0, 0.5, 2.0]]] * 3, np.float32), buf)
    assert buf.getvalue()[-9:] == bytes([0, 0, 0, 128, 128, 128, 255, 255, 255])


def test_gray_frame_replicates_channel():
    buf = io.BytesIO()
    emit_image(np.full((1, 1, 1), 1.0, np.float32), buf)
    assert buf.getvalue()[-3:] == b"\xff\xff\xff"


def test_palette_formula_and_ignore():
    assert palette(0).tolist() == [0, 0, 0]
    for i in (1, 7, 254):
        assert palette(i).tolist() == [(i * 67) % 256, (i * 113) % 256, (i * 197) % 256]
    lab = LabelMap(np.array([[0, 3, IGNORE]]), 5)
    buf = io.BytesIO()
    emit_image(lab, buf)
    assert buf.getvalue()[-9:] == bytes([0, 0, 0, 201, 83, 79, 0, 0, 0])


def test_zero_flow_is_black():
    buf = io.BytesIO()
    emit_image(np.zeros((4, 5, 2), np.float32), buf, kind="flow")
    assert buf.getvalue() == b"P6\n5 4\n255\n" + bytes(60)


def test_flow_hue_and_value():
    flow = np.zeros((1, 3, 2), np.float32)
    flow[0, 0] = (1, 0)      # angle 0 -> red, full value
    flow[0, 1] = (0, 0.5)    # angle 90 deg, half value
    buf = io.BytesIO()
    emit_image(flow, buf, kind="flow")
    px = np.frombuffer(buf.getvalue()[-9:], np.uint8).reshape(3, 3)
    assert px[0].tolist() == [255, 0, 0]
    assert px[2].tolist() == [0, 0, 0]
    assert px[1].max() == 128


def test_unsupported_channel_count():
    with pytest.raises(ShapeError):
        emit_image(np.zeros((2, 4, 4), np.float32), io.BytesIO(), kind="frame")


@given(st.integers(1, 9), st.integers(1, 9), st.sampled_from(["frame", "labels", "flow"]))
def test_ppm_length(h, w, kind):
    if kind == "frame":
        obj = np.full((3, h, w), 0.3, np.float32)
    elif kind == "labels":
        obj = LabelMap(np.zeros((h, w), np.uint16), 2)
    else:
        obj = np.ones((h, w, 2), np.float32)
    buf = io.BytesIO()
    n = emit_image(obj, buf, kind=None if kind == "labels" else kind)
    header = f"P6\n{w} {h}\n255\n".encode()
    assert n == len(header) + 3 * h * w
    assert buf.getvalue().startswith(header)
