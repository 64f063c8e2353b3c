import json

import numpy as np
import pytest

from anisogmrf import fileio
from anisogmrf.errors import DataError
from anisogmrf.grid import GridSpec


def test_gf3d_round_trip(tmp_path):
    g = GridSpec(3, 4, 5, (0, 3, -1, 1, 0, 5))
    Z = np.random.default_rng(0).normal(size=(3, g.n_cells))
    p = tmp_path / "a.gf3d"
    fileio.write_gf3d(p, g, Z)
    g2, Z2 = fileio.read_gf3d(p)
    assert g2 == g and np.array_equal(Z, Z2)
    head = json.loads(p.read_bytes().split(b"\n", 1)[0])
    assert head == {"magic": "GF3D", "M": 3, "N": 4, "P": 5, "bounds": [0, 3, -1, 1, 0, 5], "T": 2}
    assert len(p.read_bytes().split(b"\n", 1)[1]) == 8 * 3 * g.n_cells
    # little-endian float64 in linear-index order
    raw = p.read_bytes().split(b"\n", 1)[1]
    assert np.frombuffer(raw[:8], "<f8")[0] == Z[0, 0]


def test_gf3d_errors(tmp_path):
    g = GridSpec(3, 3, 3)
    p = tmp_path / "b.gf3d"
    fileio.write_gf3d(p, g, np.ones((1, 27)))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(DataError, match="expected 27"):
        fileio.read_gf3d(p)
    p.write_bytes(b'{"magic": "XXXX"}\n')
    with pytest.raises(DataError, match="magic"):
        fileio.read_gf3d(p)
    p.write_bytes(b"\xff\xfe garbage")
    with pytest.raises(DataError):
        fileio.read_gf3d(p)
    Z = np.ones((1, 27))
    Z[0, 2] = np.inf
    fileio.write_gf3d(p, g, Z)
    with pytest.raises(DataError, match="non-finite"):
        fileio.read_gf3d(p)


def test_observation_csv(tmp_path):
    p = tmp_path / "o.csv"
    pts = np.array([[0.5, 1.5, 2.5], [1.0, 1.0, 1.0]])
    fileio.write_observations(p, pts, [0.1, -2.0], [0, 1])
    a, v, r = fileio.read_observations(p)
    assert np.array_equal(a, pts) and np.array_equal(v, [0.1, -2.0]) and list(r) == [0, 1]
    fileio.write_observations(p, pts, [0.1, -2.0])
    assert fileio.read_observations(p)[2] is None


@pytest.mark.parametrize("body,row", [("x,y,z,value\n1,2,3,4\n1,2,oops,4\n", 3),
                                      ("x,y,z,value\n1,2,3\n", 2),
                                      ("x,y,value\n1,2,3\n", 1),
                                      ("x,y,z,value\n1,2,3,nan\n", 2),
                                      ("", 1)])
def test_observation_csv_errors(tmp_path, body, row):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(DataError) as e:
        fileio.read_observations(p)
    assert e.value.row == row


def test_segments_csv(tmp_path):
    p = tmp_path / "s.csv"
    pts = np.random.default_rng(1).uniform(size=(4, 3))
    fileio.write_segments(p, [0, 0, 1, 2], pts, [1.0, 2, 3, 4])
    assert p.read_text().splitlines()[0] == "segment,x,y,z,value"
    s, q, v = fileio.read_segments(p)
    assert list(s) == [0, 0, 1, 2] and np.array_equal(q, pts) and list(v) == [1, 2, 3, 4]


def test_json_is_canonical(tmp_path):
    p = tmp_path / "j.json"
    fileio.dump_json(p, {"b": 1, "a": [1.5, 2]})
    assert p.read_text() == '{\n  "a": [\n    1.5,\n    2\n  ],\n  "b": 1\n}\n'
