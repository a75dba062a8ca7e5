import json
import math

import numpy as np

from powmfg import io as pio


def test_floats_round_trip_exactly():
    rng = np.random.default_rng(0)
    for x in rng.standard_normal(1000) * 10.0 ** rng.integers(-300, 300, 1000):
        assert float(pio.fmt(x)) == x


def test_fmt_special_values():
    assert pio.fmt(True) == "true"
    assert pio.fmt(np.int64(7)) == "7"
    assert pio.fmt(0.1) == "0.10000000000000001"
    assert pio.fmt(math.inf) == "inf" and pio.fmt(-math.inf) == "-inf" and pio.fmt(math.nan) == "nan"
    assert pio.fmt("abc") == "abc"


def test_json_sorted_and_parseable():
    obj = {"b": [1, 2.5, None], "a": {"y": np.float64(0.1), "x": math.inf}, "c": np.array([1.0, 2.0])}
    text = pio.dumps(obj)
    assert text.index('"a"') < text.index('"b"') < text.index('"c"')
    back = json.loads(text)
    assert back["a"]["x"] is None
    assert back["a"]["y"] == 0.1
    assert back["c"] == [1.0, 2.0]
    assert pio.dumps(obj) == text


def test_csv_layout(tmp_path):
    f = pio.write_csv(tmp_path / "x.csv", ("K", "U"), [(0.0, 1.0), (0.5, -2)])
    assert f.read_text() == "K,U\n0,1\n0.5,-2\n"
