import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ksi import ConfigError, CorruptTableError, DriftTable
from ksi.io import (
    MAGIC,
    config_hash,
    parse_config,
    parse_table,
    read_csv_samples,
    read_table,
    table_bytes,
    validate_config,
    write_csv_samples,
    write_table,
)


def random_table(rng) -> DriftTable:
    P = int(rng.integers(1, 65))
    K = int(rng.integers(1, 257))
    etas = rng.standard_normal((K, P)) * 10.0 ** rng.integers(-300, 300, size=(K, P))
    return DriftTable(
        grid=np.arange(K + 1) / K,
        etas=etas,
        feature_map={"type": "rff", "num_frequencies": P, "bandwidth": float(rng.random() + 0.1), "seed": 3},
        schedule_id=int(rng.integers(0, 2)),
        ridge=float(rng.random()),
        n_pairs=int(rng.integers(1, 10**6)),
        dim=int(rng.integers(1, 100)),
    )


def test_round_trip_100_random_tables(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(100):
        table = random_table(rng)
        path = tmp_path / f"t{i}.ksid"
        write_table(table, path)
        back = read_table(path)
        assert back.identical(table)
        assert table_bytes(back) == path.read_bytes()


def test_layout_header(tmp_path):
    table = DriftTable(np.array([0.0, 0.5, 1.0]), np.ones((2, 3)), {"type": "linear"}, 1, 1e-8, 7, 3)
    data = table_bytes(table)
    assert data[:4] == MAGIC
    assert int.from_bytes(data[4:8], "little") == 1
    assert [int.from_bytes(data[o : o + 4], "little") for o in (8, 12, 16)] == [3, 2, 3]
    assert data[20] == 1


def test_truncation_names_section():
    table = DriftTable(np.array([0.0, 0.5, 1.0]), np.ones((2, 3)), {"type": "linear"}, 0, 1e-8, 7, 3)
    data = table_bytes(table)
    cases = {10: "header", 30: "descriptor", len(data) - 3 * 8 * 2 - 1: "grid", len(data) - 1: "eta"}
    for cut, section in cases.items():
        with pytest.raises(CorruptTableError, match=section):
            parse_table(data[:cut])
    with pytest.raises(CorruptTableError, match="trailing"):
        parse_table(data + b"\0")


def test_bad_magic_and_version():
    with pytest.raises(CorruptTableError, match="not a drift table"):
        parse_table(b"PK\x03\x04" + bytes(40))
    table = DriftTable(np.array([0.0, 1.0]), np.ones((1, 1)), {"type": "linear"}, 0, 0.0, 1, 1)
    data = bytearray(table_bytes(table))
    data[4] = 9
    with pytest.raises(CorruptTableError, match="version"):
        parse_table(bytes(data))


def test_write_is_atomic_and_reports_path(tmp_path):
    table = DriftTable(np.array([0.0, 1.0]), np.ones((1, 1)), {"type": "linear"}, 0, 0.0, 1, 1)
    path = tmp_path / "x.ksid"
    write_table(table, path)
    assert [p.name for p in tmp_path.iterdir()] == ["x.ksid"]
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        write_table(table, blocker / "sub" / "t.ksid")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=3, max_size=3), min_size=1, max_size=20))
def test_csv_round_trip_full_precision(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("csv") / "s.csv"
    x = np.array(rows)
    write_csv_samples(x, path)
    back = read_csv_samples(path)
    assert back.tobytes() == x.tobytes()


def test_csv_reader_cases(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("1,2,3\n4,5,6\n")
    assert read_csv_samples(p).shape == (2, 3)
    p.write_text("a,b,c\n1,2,3\n")
    np.testing.assert_array_equal(read_csv_samples(p), [[1, 2, 3]])
    p.write_text("1,2\n3,NaN\n")
    with pytest.raises(ValueError, match="row 1, column 1"):
        read_csv_samples(p)
    p.write_text("1,2\n3\n")
    with pytest.raises(ValueError, match="ragged"):
        read_csv_samples(p)
    p.write_text("1,2\n")
    with pytest.raises(ValueError, match="expected 3"):
        read_csv_samples(p, expected_dim=3)


MINIMAL = {"target": {"gaussian": {"mean": [0, 0], "isotropic": 1}}, "features": "linear", "schedule": "trig", "steps": 200}


def test_minimal_config_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(MINIMAL))
    cfg = parse_config(p)
    assert cfg.ridge == 1e-8 and cfg.seed == 0 and cfg.steps == 200
    assert cfg.target_kind == "gaussian" and not cfg.is_series
    assert cfg.hash() == config_hash(MINIMAL)


@pytest.mark.parametrize(
    "patch, pointer",
    [
        ({"steps": 0}, "/steps"),
        ({"ridge": -1}, "/ridge"),
        ({"colour": "red"}, ""),
        ({"generate": {"diffusion": "fast"}}, "/generate/diffusion"),
        ({"features": {"type": "concat", "maps": [{"type": "linear", "levels": "x"}]}}, "/features/maps/0/levels"),
    ],
)
def test_config_errors_carry_pointer(patch, pointer):
    with pytest.raises(ConfigError) as err:
        validate_config({**MINIMAL, **patch})
    assert err.value.pointer == pointer


def test_exactly_one_target():
    both = {**MINIMAL, "target": {"csv": "x.csv", "gaussian": {"mean": [0], "isotropic": 1}}}
    with pytest.raises(ConfigError, match="exactly one target"):
        validate_config(both)
    with pytest.raises(ConfigError, match="exactly one target"):
        validate_config({**MINIMAL, "target": {}})


def test_series_targets_and_bad_json(tmp_path):
    cfg = validate_config({**MINIMAL, "target": {"csv": {"path": "s.csv", "series": True}}})
    assert cfg.is_series
    assert validate_config({**MINIMAL, "target": {"cascade": {"length": 64}}}).is_series
    p = tmp_path / "c.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config(p)
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(tmp_path / "missing.json")
