"""Modality kinds, modality combinations and the sample record."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Optional

import numpy as np

from .errors import DataValidationError


class ModalityKind(IntEnum):
    EHR = 0
    TEXT = 1
    IMAGE = 2

    @property
    def letter(self) -> str:
        return "ETI"[self]


MODALITIES = tuple(ModalityKind)
N_MODALITIES = len(MODALITIES)


@dataclass(frozen=True, order=True)
class ModalityCombination:
    """A nonempty set of modalities, identified by a canonical key such as ``"ET"``."""

    key: str

    def __post_init__(self):
        if not self.key:
            raise DataValidationError("a modality combination must be nonempty")
        canonical = "".join(m.letter for m in MODALITIES if m.letter in self.key)
        if canonical != self.key:
            raise DataValidationError(f"non-canonical combination key {self.key!r}")

    @classmethod
    def of(cls, kinds: Iterable[ModalityKind]) -> "ModalityCombination":
        kinds = set(kinds)
        return cls("".join(m.letter for m in MODALITIES if m in kinds))

    @property
    def kinds(self) -> frozenset[ModalityKind]:
        return frozenset(m for m in MODALITIES if m.letter in self.key)

    def __contains__(self, kind: ModalityKind) -> bool:
        return kind.letter in self.key

    def __str__(self) -> str:
        return self.key


def restrict_key(key: str, visible: str) -> str:
    """Canonical key of the modalities in ``key`` that are also in ``visible`` (may be empty)."""
    return "".join(c for c in key if c in visible)


@dataclass
class Sample:
    """One admission-like record. Absent modalities are ``None``."""

    id: str
    label: int
    ehr_static: Optional[np.ndarray] = None
    ehr_series: Optional[np.ndarray] = None
    text_tokens: Optional[list[int]] = None
    image_features: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.ehr_static is not None:
            self.ehr_static = np.asarray(self.ehr_static, dtype=np.float64)
        if self.ehr_series is not None:
            self.ehr_series = np.asarray(self.ehr_series, dtype=np.float64)
        if self.image_features is not None:
            self.image_features = np.asarray(self.image_features, dtype=np.float64)
        if self.text_tokens is not None:
            self.text_tokens = [int(t) for t in self.text_tokens]

    def has(self, kind: ModalityKind) -> bool:
        if kind is ModalityKind.EHR:
            return self.ehr_static is not None
        if kind is ModalityKind.TEXT:
            return bool(self.text_tokens)
        return self.image_features is not None

    @property
    def pattern(self) -> str:
        return "".join(m.letter for m in MODALITIES if self.has(m))

    @property
    def combination(self) -> ModalityCombination:
        return ModalityCombination(self.pattern)

    def validate(self) -> None:
        if self.label not in (0, 1):
            raise DataValidationError(f"sample {self.id!r}: label must be 0 or 1, got {self.label!r}")
        if (self.ehr_static is None) != (self.ehr_series is None):
            raise DataValidationError(f"sample {self.id!r}: ehr_static and ehr_series must be present together")
        if not self.pattern:
            raise DataValidationError(f"sample {self.id!r}: no modality present")
        if self.ehr_static is not None:
            if self.ehr_static.ndim != 1:
                raise DataValidationError(f"sample {self.id!r}: ehr_static must be a vector")
            if self.ehr_series.ndim != 2 or self.ehr_series.shape[0] < 1:
                raise DataValidationError(f"sample {self.id!r}: ehr_series must be a nonempty T x F matrix")
            if not (np.all(np.isfinite(self.ehr_static)) and np.all(np.isfinite(self.ehr_series))):
                raise DataValidationError(f"sample {self.id!r}: non-finite EHR values")
        if self.text_tokens is not None and any(t < 0 for t in self.text_tokens):
            raise DataValidationError(f"sample {self.id!r}: negative token id")
        if self.image_features is not None:
            if self.image_features.ndim != 1:
                raise DataValidationError(f"sample {self.id!r}: image_features must be a vector")
            if not np.all(np.isfinite(self.image_features)):
                raise DataValidationError(f"sample {self.id!r}: non-finite image features")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(np.asarray(a), np.asarray(b))

        return (
            self.id == other.id
            and self.label == other.label
            and same(self.ehr_static, other.ehr_static)
            and same(self.ehr_series, other.ehr_series)
            and same(self.text_tokens, other.text_tokens)
            and same(self.image_features, other.image_features)
        )
