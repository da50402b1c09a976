"""Hardware description of a single-core RRAM crossbar target."""
from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from pathlib import Path
from typing import Any

TARGET_KEYS = ("rows_n", "cols_m", "r_cell", "r_dac", "t_write_us", "t_mvm_us", "b_min", "b_max")
_OPTIONAL_KEYS = {"b_min": 2, "b_max": 8}


class TargetError(ValueError):
    """Invalid or unparsable target description."""


def to_fraction(value: Any, field: str = "value") -> Fraction:
    """Exact conversion of a decimal string / int / float literal to a Fraction.

    Floats go through ``repr`` so ``1.4`` becomes 7/5, not the binary approximation.
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise TargetError(f"{field} must be a decimal number, got {value!r}")
    if isinstance(value, float):
        value = repr(value)
    try:
        return Fraction(Decimal(str(value)))
    except (InvalidOperation, ValueError) as exc:
        raise TargetError(f"{field} must be a decimal number, got {value!r}") from exc


def format_us(value: Fraction) -> str:
    """Render an exact microsecond value as a decimal string.

    Every latency here is built from decimal inputs, so the expansion terminates;
    anything else falls back to 12 significant digits.
    """
    value = Fraction(value)
    den = value.denominator
    k2 = k5 = 0
    while den % 2 == 0:
        den //= 2
        k2 += 1
    while den % 5 == 0:
        den //= 5
        k5 += 1
    if den != 1:
        return f"{float(value):.12g}"
    digits = max(k2, k5)
    scaled = value * 10**digits
    text = str(abs(scaled.numerator))
    if digits:
        text = text.rjust(digits + 1, "0")
        text = f"{text[:-digits]}.{text[-digits:]}".rstrip("0").rstrip(".")
    return ("-" if value < 0 else "") + text


@dataclass(frozen=True)
class CimTarget:
    """Crossbar geometry, cell/DAC resolution and timings.

    ``rows_n`` is the number of input rows (N) and ``cols_m`` the number of
    output columns (M). Timings are exact microsecond fractions.
    """

    rows_n: int = 256
    cols_m: int = 256
    r_cell: int = 4
    r_dac: int = 1
    t_write: Fraction = Fraction(56)
    t_mvm: Fraction = Fraction(7, 5)
    b_min: int = 2
    b_max: int = 8

    def __post_init__(self) -> None:
        for name in ("rows_n", "cols_m", "r_cell", "r_dac", "b_min", "b_max"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise TargetError(f"{name} must be an integer, got {value!r}")
        object.__setattr__(self, "t_write", to_fraction(self.t_write, "t_write_us"))
        object.__setattr__(self, "t_mvm", to_fraction(self.t_mvm, "t_mvm_us"))
        if self.rows_n < 1:
            raise TargetError("rows_n must be ≥ 1")
        if self.cols_m < 1:
            raise TargetError("cols_m must be ≥ 1")
        if self.r_cell < 1:
            raise TargetError("r_cell must be ≥ 1")
        if self.r_dac < 1:
            raise TargetError("r_dac must be ≥ 1")
        if self.t_write < 0:
            raise TargetError("t_write_us must be ≥ 0")
        if self.t_mvm < 0:
            raise TargetError("t_mvm_us must be ≥ 0")
        if self.b_min < 1:
            raise TargetError("b_min must be ≥ 1")
        if self.b_max > 8:
            raise TargetError("b_max must be ≤ 8")
        if self.b_min > self.b_max:
            raise TargetError("b_min must be ≤ b_max")

    @property
    def bit_range(self) -> range:
        return range(self.b_min, self.b_max + 1)

    @property
    def cell_max(self) -> int:
        return (1 << self.r_cell) - 1

    @property
    def dac_max(self) -> int:
        return (1 << self.r_dac) - 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "rows_n": self.rows_n,
            "cols_m": self.cols_m,
            "r_cell": self.r_cell,
            "r_dac": self.r_dac,
            "t_write_us": format_us(self.t_write),
            "t_mvm_us": format_us(self.t_mvm),
            "b_min": self.b_min,
            "b_max": self.b_max,
        }

    @classmethod
    def from_dict(cls, data: Any) -> "CimTarget":
        if not isinstance(data, dict):
            raise TargetError("target must be a JSON object")
        unknown = set(data) - set(TARGET_KEYS)
        if unknown:
            raise TargetError(f"unknown target keys: {sorted(unknown)}")
        missing = [k for k in TARGET_KEYS if k not in data and k not in _OPTIONAL_KEYS]
        if missing:
            raise TargetError(f"missing target keys: {missing}")
        values = {**_OPTIONAL_KEYS, **data}
        return cls(
            rows_n=values["rows_n"],
            cols_m=values["cols_m"],
            r_cell=values["r_cell"],
            r_dac=values["r_dac"],
            t_write=to_fraction(values["t_write_us"], "t_write_us"),
            t_mvm=to_fraction(values["t_mvm_us"], "t_mvm_us"),
            b_min=values["b_min"],
            b_max=values["b_max"],
        )


def load_target(path: str | Path) -> CimTarget:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TargetError(f"{path}: not valid JSON ({exc})") from exc
    return CimTarget.from_dict(data)


def dumps_target(target: CimTarget) -> str:
    return json.dumps(target.to_dict(), indent=2) + "\n"


def save_target(target: CimTarget, path: str | Path) -> None:
    Path(path).write_text(dumps_target(target))
