"""Tests utils.py features."""

import json

import numpy as np
import pandas as pd
import pytest

from hierfdr.utils import OutputDirectory, dumps, file_digest, read_json, to_jsonable


def test_to_jsonable_converts_numpy():
    out = to_jsonable(
        {
            "a": np.arange(3),
            "b": np.float64(1.5),
            "c": (np.int64(2), np.bool_(True)),
            "d": {3, 1},
            "e": float("nan"),
        }
    )
    assert out == {"a": [0, 1, 2], "b": 1.5, "c": [2, True], "d": [1, 3], "e": None}
    json.dumps(out, allow_nan=False)


def test_dumps_is_deterministic():
    assert dumps({"b": 1, "a": 2}) == dumps({"a": 2, "b": 1})
    assert dumps({"x": 0.1}).endswith("\n")


def test_output_directory_writes(tmp_path):
    with OutputDirectory(tmp_path / "out") as out:
        out.write_json("a.json", {"value": np.float64(0.25)})
        out.write_csv("b.csv", pd.DataFrame({"x": [0.1, 1 / 3]}))
        out.write_bytes("c.bin", b"\x00\x01")
    assert read_json(tmp_path / "out" / "a.json") == {"value": 0.25}
    frame = pd.read_csv(tmp_path / "out" / "b.csv")
    assert frame["x"].iloc[1] == 1 / 3
    assert (tmp_path / "out" / "c.bin").read_bytes() == b"\x00\x01"
    assert len(out.written) == 3


def test_output_directory_discards_on_error(tmp_path):
    with pytest.raises(RuntimeError):
        with OutputDirectory(tmp_path) as out:
            out.write_text("partial.txt", "half")
            raise RuntimeError("boom")
    assert not (tmp_path / "partial.txt").exists()


def test_file_digest(tmp_path):
    path = tmp_path / "f.txt"
    path.write_bytes(b"abc")
    assert file_digest(path) == (
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    )
