import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from waferocc import dataio
from waferocc.dataio import (BadMagicError, DatasetFormatError, InvalidCellError,
                             RecordValidationError, TruncatedRecordError)
from waferocc.wafer import Label, WaferMap, generate_dataset, split_dataset

maps_strategy = st.lists(
    st.builds(
        WaferMap,
        arrays(np.uint8, st.tuples(st.integers(1, 30), st.integers(1, 30)),
               elements=st.integers(0, 2)).filter(lambda a: a.any()),
        st.sampled_from(list(Label)),
    ),
    max_size=8,
)


@settings(max_examples=60, deadline=None)
@given(maps_strategy)
def test_bytes_round_trip(maps):
    assert dataio.loads(dataio.dumps(maps)) == maps


def test_file_round_trip_100_maps(tmp_path):
    rng = np.random.default_rng(0)
    maps = []
    for _ in range(100):
        h, w = rng.integers(1, 60, size=2)
        cells = rng.integers(0, 3, size=(h, w)).astype(np.uint8)
        cells[0, 0] = 1
        maps.append(WaferMap(cells, Label(rng.choice([0, 3, 4, 5, 6, 8, 255]))))
    path = tmp_path / "d.wmd"
    dataio.save_dataset(maps, path)
    assert dataio.load_dataset(path) == maps
    assert path.read_bytes()[:4] == b"WMD1"


def test_split_is_saved_in_order(tmp_path):
    sp = split_dataset(generate_dataset({"None": 10, "Center": 4}, seed=2), seed=3)
    dataio.save_dataset(sp, tmp_path / "all.wmd")
    assert dataio.load_dataset(tmp_path / "all.wmd") == sp.train + sp.valid + sp.test


def test_header_layout():
    m = WaferMap(np.array([[0, 1, 2]]), Label.DONUT)
    buf = dataio.dumps([m])
    assert buf == b"WMD1" + struct.pack("<IHHB", 1, 1, 3, 8) + bytes([0, 1, 2])


def _one_record():
    return bytearray(dataio.dumps([WaferMap(np.array([[1, 2], [0, 1]]), Label.NONE)]))


def test_bad_magic():
    buf = _one_record()
    buf[0:4] = b"XXXX"
    with pytest.raises(BadMagicError):
        dataio.loads(bytes(buf))


def test_truncated():
    buf = bytes(_one_record())
    with pytest.raises(TruncatedRecordError):
        dataio.loads(buf[:-1])
    with pytest.raises(TruncatedRecordError):
        dataio.loads(buf[:10])


def test_zero_extent_is_validation_error():
    buf = _one_record()
    buf[8:10] = struct.pack("<H", 0)
    with pytest.raises(RecordValidationError):
        dataio.loads(bytes(buf))


def test_bad_cell_value():
    buf = _one_record()
    buf[-1] = 7
    with pytest.raises(InvalidCellError):
        dataio.loads(bytes(buf))


def test_error_classes_are_distinct():
    kinds = {BadMagicError, TruncatedRecordError, InvalidCellError, RecordValidationError}
    assert len(kinds) == 4
    assert all(issubclass(k, DatasetFormatError) for k in kinds)


def test_trailing_bytes():
    with pytest.raises(DatasetFormatError):
        dataio.loads(bytes(_one_record()) + b"\x00")


def test_manifest_round_trip(tmp_path):
    maps = generate_dataset({"None": 3, "Edge-Ring": 2, "Scratch": 1}, sizes=[(12, 14)], seed=4)
    manifest = dataio.write_manifest(maps, tmp_path / "export")
    assert dataio.convert_manifest(manifest) == maps


def test_grid_parsing_variants(tmp_path):
    np.testing.assert_array_equal(dataio.parse_grid("012\n121\n"), [[0, 1, 2], [1, 2, 1]])
    np.testing.assert_array_equal(dataio.parse_grid("0 1 2\n1 2 1"), [[0, 1, 2], [1, 2, 1]])
    with pytest.raises(InvalidCellError):
        dataio.parse_grid("0 3")
    with pytest.raises(RecordValidationError):
        dataio.parse_grid("01\n1")


def test_manifest_needs_columns(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("path,kind\nx.txt,None\n")
    with pytest.raises(DatasetFormatError):
        dataio.convert_manifest(p)
