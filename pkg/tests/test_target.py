import json
from fractions import Fraction

import pytest

from cimforge.target import CimTarget, TargetError, dumps_target, format_us, load_target, to_fraction


def _write(tmp_path, **kw):
    base = {"rows_n": 256, "cols_m": 256, "r_cell": 4, "r_dac": 1, "t_write_us": 56,
            "t_mvm_us": 1.4, "b_min": 2, "b_max": 8}
    base.update(kw)
    p = tmp_path / "target.json"
    p.write_text(json.dumps(base))
    return p


def test_load_reference_target(tmp_path):
    t = load_target(_write(tmp_path))
    assert (t.rows_n, t.cols_m, t.r_cell, t.r_dac, t.b_min, t.b_max) == (256, 256, 4, 1, 2, 8)
    assert t.t_write == 56 and t.t_mvm == Fraction(7, 5)


def test_zero_cell_resolution_names_field(tmp_path):
    with pytest.raises(TargetError, match="r_cell must be ≥ 1"):
        load_target(_write(tmp_path, r_cell=0))


def test_bit_axis_length(tmp_path):
    assert len(load_target(_write(tmp_path)).bit_range) == 7


@pytest.mark.parametrize("field,value", [("rows_n", 0), ("cols_m", -1), ("r_dac", 0), ("b_min", 9)])
def test_invalid_fields(tmp_path, field, value):
    with pytest.raises(TargetError, match=field):
        load_target(_write(tmp_path, **{field: value}))


def test_unknown_and_missing_keys(tmp_path):
    with pytest.raises(TargetError):
        load_target(_write(tmp_path, colour="red"))
    p = tmp_path / "t.json"
    p.write_text(json.dumps({"rows_n": 8}))
    with pytest.raises(TargetError):
        load_target(p)


def test_malformed_json(tmp_path):
    p = tmp_path / "t.json"
    p.write_text("{not json")
    with pytest.raises(TargetError):
        load_target(p)


def test_roundtrip_is_exact(tmp_path):
    t = CimTarget(rows_n=17, cols_m=9, r_cell=2, r_dac=2, t_write=Fraction(21, 4), t_mvm=Fraction(7, 5))
    p = tmp_path / "t.json"
    p.write_text(dumps_target(CimTarget()))
    assert load_target(p) == CimTarget()
    assert CimTarget.from_dict(t.to_dict()) == t


def test_decimal_helpers():
    assert to_fraction(1.4) == Fraction(7, 5)
    assert to_fraction("0.1") == Fraction(1, 10)
    assert format_us(Fraction(336, 5)) == "67.2"
    assert format_us(Fraction(0)) == "0"
