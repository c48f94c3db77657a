"""The four-level COC quality scale."""

from enum import IntEnum
from numbers import Integral

from .errors import ValidationError


class Grade(IntEnum):
    """Ordinal grade; ties anywhere in the pipeline resolve toward A."""

    A = 0
    B = 1
    C = 2
    D = 3

    @classmethod
    def parse(cls, token) -> "Grade":
        """Accept a Grade, an ordinal 0-3, or a letter token (case-insensitive)."""
        if isinstance(token, Grade):
            return token
        if isinstance(token, Integral) and not isinstance(token, bool):
            if 0 <= int(token) <= 3:
                return cls(int(token))
            raise ValidationError(f"grade ordinal {token} outside 0-3")
        key = str(token).strip().upper()
        if key not in cls.__members__:
            raise ValidationError(f"unknown grade {token!r}; expected one of A, B, C, D")
        return cls[key]


GRADES = tuple(Grade)
