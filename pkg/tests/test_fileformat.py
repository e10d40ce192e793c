import struct

import numpy as np
import pytest

from crosr import fileformat
from crosr.errors import FormatError


def sample():
    rng = np.random.default_rng(0)
    return {"b": "two", "a": "1"}, {"w": rng.normal(size=(2, 3)), "scalar": np.array(3.5), "empty": np.zeros((0, 2))}


def test_round_trip_is_bit_exact(tmp_path):
    header, arrays = sample()
    path = tmp_path / "m.crsr"
    fileformat.write(path, header, arrays)
    h2, a2 = fileformat.read(path)
    assert h2 == header
    assert list(a2) == list(arrays)
    for k in arrays:
        assert a2[k].shape == arrays[k].shape
        assert a2[k].tobytes() == arrays[k].tobytes()
    assert fileformat.encode(h2, a2) == path.read_bytes()


def test_header_is_sorted_and_magic_leads():
    raw = fileformat.encode({"z": "1", "a": "2"}, {})
    assert raw[:4] == b"CRSR"
    version, hlen = struct.unpack("<II", raw[4:12])
    assert version == fileformat.FORMAT_VERSION
    assert raw[12:12 + hlen].decode() == "a=2\nz=1\n"


def test_values_are_little_endian_float64():
    raw = fileformat.encode({}, {"x": np.array([1.0])})
    assert raw.endswith(struct.pack("<d", 1.0))


@pytest.mark.parametrize("mutate", [
    lambda r: b"XXXX" + r[4:],
    lambda r: r[:4] + struct.pack("<I", 99) + r[8:],
    lambda r: r[:-3],
    lambda r: r + b"\x00",
    lambda r: b"",
    lambda r: r[:10],
])
def test_corrupt_files_raise_format_error(mutate):
    raw = fileformat.encode(*sample())
    with pytest.raises(FormatError):
        fileformat.decode(mutate(raw))


def test_truncation_error_names_offset():
    raw = fileformat.encode(*sample())
    with pytest.raises(FormatError, match="offset"):
        fileformat.decode(raw[:-3])


def test_duplicate_array_names_rejected():
    one = fileformat.encode({}, {"x": np.ones(1)})
    # splice a second copy of the array record and bump the count
    hlen = struct.unpack("<I", one[8:12])[0]
    count_at = 12 + hlen
    record = one[count_at + 4:]
    raw = one[:count_at] + struct.pack("<I", 2) + record + record
    with pytest.raises(FormatError):
        fileformat.decode(raw)
