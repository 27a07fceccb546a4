"""The eight taillight states and their brake/left/right decomposition."""

from __future__ import annotations

from dataclasses import dataclass

CLASS_CODES = ("OOO", "BOO", "OLO", "BLO", "OOR", "BOR", "OLR", "BLR")
NUM_CLASSES = len(CLASS_CODES)


class UnknownClassError(ValueError):
    pass


@dataclass(frozen=True)
class TaillightState:
    brake: bool
    left: bool
    right: bool

    @property
    def code(self) -> str:
        return ("B" if self.brake else "O") + ("L" if self.left else "O") + ("R" if self.right else "O")

    @property
    def index(self) -> int:
        return CLASS_CODES.index(self.code)

    @classmethod
    def from_code(cls, code: str) -> "TaillightState":
        if code not in CLASS_CODES:
            raise UnknownClassError(f"unknown class code {code!r}; expected one of {', '.join(CLASS_CODES)}")
        return cls(code[0] == "B", code[1] == "L", code[2] == "R")

    @classmethod
    def from_index(cls, idx: int) -> "TaillightState":
        return cls.from_code(CLASS_CODES[idx])

    def flipped(self) -> "TaillightState":
        """State seen in a horizontally mirrored image: left and right swap."""
        return TaillightState(self.brake, self.right, self.left)

    def __str__(self) -> str:
        return self.code


ALL_STATES = tuple(TaillightState.from_code(c) for c in CLASS_CODES)
