"""Per-layer bit-width assignment shared by the cost model, compiler and search."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping


class ConstraintMode(str, Enum):
    NONE = "none"
    INPUT_OUTPUT = "io"
    WEIGHT = "weight"
    BOTH = "both"

    @property
    def pins_io(self) -> bool:
        return self in (ConstraintMode.INPUT_OUTPUT, ConstraintMode.BOTH)

    @property
    def weight_multiple(self) -> bool:
        return self in (ConstraintMode.WEIGHT, ConstraintMode.BOTH)

    @classmethod
    def parse(cls, value) -> "ConstraintMode":
        if isinstance(value, cls):
            return value
        aliases = {"none": "none", "io": "io", "inputoutput": "io", "input_output": "io",
                   "weight": "weight", "both": "both"}
        key = str(value).lower().replace("-", "_")
        if key not in aliases:
            raise ValueError(f"unknown constraint mode {value!r}")
        return cls(aliases[key])


class ConfigError(ValueError):
    pass


@dataclass
class QuantConfig:
    """Ordered mapping ``layer_id -> (w_bit, a_bit)``."""

    bits: dict[str, tuple[int, int]] = field(default_factory=dict)
    constraint_mode: ConstraintMode = ConstraintMode.NONE

    def __post_init__(self) -> None:
        self.bits = {str(k): (int(v[0]), int(v[1])) for k, v in self.bits.items()}
        self.constraint_mode = ConstraintMode.parse(self.constraint_mode)

    @classmethod
    def uniform(cls, layer_ids: Iterable[str], w_bit: int = 8, a_bit: int = 8,
                mode=ConstraintMode.NONE) -> "QuantConfig":
        return cls({lid: (w_bit, a_bit) for lid in layer_ids}, mode)

    def __getitem__(self, layer_id: str) -> tuple[int, int]:
        try:
            return self.bits[layer_id]
        except KeyError:
            raise ConfigError(f"no bit widths for layer {layer_id!r}") from None

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self.bits

    def __len__(self) -> int:
        return len(self.bits)

    def violations(self, b_min: int, b_max: int, r_cell: int) -> list[str]:
        """Invariant violations for the active constraint mode (empty when valid)."""
        problems = []
        ids = list(self.bits)
        for i, lid in enumerate(ids):
            w, a = self.bits[lid]
            for role, b in (("w_bit", w), ("a_bit", a)):
                if not b_min <= b <= b_max and not (self.constraint_mode.pins_io and b == 8):
                    problems.append(f"{lid}: {role}={b} outside [{b_min}, {b_max}]")
            if self.constraint_mode.pins_io and i in (0, len(ids) - 1) and (w, a) != (8, 8):
                problems.append(f"{lid}: first/last layer must stay at 8 bit, got {(w, a)}")
            if self.constraint_mode.weight_multiple and w % r_cell:
                problems.append(f"{lid}: w_bit={w} is not a multiple of r_cell={r_cell}")
        return problems

    def to_dict(self) -> dict:
        return {
            "constraint_mode": self.constraint_mode.value,
            "layers": [{"id": k, "w_bit": w, "a_bit": a} for k, (w, a) in self.bits.items()],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "QuantConfig":
        bits = {row["id"]: (row["w_bit"], row["a_bit"]) for row in data["layers"]}
        return cls(bits, data.get("constraint_mode", "none"))
