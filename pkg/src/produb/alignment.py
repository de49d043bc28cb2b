"""Monotonic phoneme-to-frame correspondence.

Alignments are hard one-hot matrices (L_pho, L_mel): every mel frame is
assigned to exactly one phoneme and assignments never move backwards.
Duration vectors are the row sums of such matrices.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError, InvariantViolationError

SYNTHETIC_INVENTORY = "synthetic-32"
INVENTORY_SIZES = {SYNTHETIC_INVENTORY: 32}


@dataclass
class PhonemeSequence:
    """Integer phoneme ids over a fixed inventory."""

    ids: np.ndarray
    inventory_id: str = SYNTHETIC_INVENTORY

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1 or len(self.ids) == 0:
            raise InvalidArgumentError("phoneme sequence must be non-empty and 1-D")
        size = INVENTORY_SIZES.get(self.inventory_id)
        if size is not None and (self.ids.min() < 0 or self.ids.max() >= size):
            raise InvalidArgumentError(
                f"phoneme ids outside inventory {self.inventory_id} of size {size}"
            )

    def __len__(self) -> int:
        return len(self.ids)


def durations_to_alignment(d: np.ndarray) -> np.ndarray:
    """Expand a duration vector into a one-hot monotonic alignment matrix."""
    d = np.asarray(d)
    if d.ndim != 1 or len(d) == 0:
        raise InvalidArgumentError("duration vector must be non-empty and 1-D")
    if np.any(d < 0) or not np.issubdtype(d.dtype, np.integer):
        raise InvalidArgumentError("durations must be non-negative integers")
    total = int(d.sum())
    if total < 1:
        raise DegenerateInputError("all-zero duration vector has no frames")
    align = np.zeros((len(d), total), dtype=np.int8)
    start = 0
    for i, di in enumerate(d):
        align[i, start:start + int(di)] = 1
        start += int(di)
    return align


def validate_alignment(a: np.ndarray) -> None:
    """Raise InvariantViolationError unless `a` is one-hot and monotonic."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise InvariantViolationError("alignment must be a 2-D matrix")
    if not np.all((a == 0) | (a == 1)):
        raise InvariantViolationError("alignment entries must be 0 or 1")
    col_sums = a.sum(axis=0)
    if np.any(col_sums != 1):
        bad = int(np.argmax(col_sums != 1))
        raise InvariantViolationError(
            f"column {bad} assigned to {int(col_sums[bad])} phonemes, expected 1"
        )
    owners = np.argmax(a, axis=0)
    if np.any(np.diff(owners) < 0):
        raise InvariantViolationError("alignment is not monotonic non-decreasing")


def alignment_to_durations(a: np.ndarray) -> np.ndarray:
    """Row sums of a validated alignment matrix."""
    validate_alignment(a)
    return np.asarray(a).sum(axis=1).astype(np.int64)


def upsample_by_alignment(features: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Gather phoneme features to frame level: row t = features[owner(t)].

    Equivalent to transpose(a) @ features for one-hot alignments.
    """
    features = np.asarray(features)
    a = np.asarray(a)
    if features.ndim != 2 or features.shape[0] != a.shape[0]:
        raise InvalidArgumentError(
            f"feature rows {features.shape} do not match alignment rows {a.shape}"
        )
    owners = np.argmax(a, axis=0)
    return features[owners]


def phoneme_pool_prosody(curve: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Per-phoneme mean of a frame-level curve; zero-duration phonemes get 0."""
    curve = np.asarray(curve, dtype=np.float64)
    a = np.asarray(a)
    if curve.ndim != 1 or len(curve) != a.shape[1]:
        raise InvalidArgumentError(
            f"curve length {curve.shape} does not match alignment columns {a.shape}"
        )
    counts = a.sum(axis=1).astype(np.float64)
    sums = a.astype(np.float64) @ curve
    out = np.zeros(a.shape[0], dtype=np.float64)
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz]
    return out


def redistribute_durations(d: np.ndarray, new_total: int) -> np.ndarray:
    """Scale durations so they sum to new_total exactly.

    Proportional scaling followed by largest-remainder rounding; ties are
    broken by position (earlier phoneme wins). Invariant to multiplying `d`
    by any positive constant, up to those rounding ties.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 1 or len(d) == 0:
        raise InvalidArgumentError("duration vector must be non-empty and 1-D")
    if np.any(d < 0):
        raise InvalidArgumentError("durations must be non-negative")
    total = d.sum()
    if total <= 0:
        raise DegenerateInputError("duration vector sums to zero")
    if new_total < 0:
        raise InvalidArgumentError("target total must be non-negative")
    scaled = d * (new_total / total)
    floors = np.floor(scaled).astype(np.int64)
    remainder = int(new_total - floors.sum())
    if remainder > 0:
        frac = scaled - floors
        # stable sort: equal remainders resolved by phoneme order
        order = np.argsort(-frac, kind="stable")
        floors[order[:remainder]] += 1
    return floors


# duration files: one record per line, "utt_id<TAB>d1,d2,...,dn"


def save_durations(path, table: dict[str, np.ndarray]) -> None:
    lines = [
        f"{utt_id}\t{','.join(str(int(v)) for v in d)}"
        for utt_id, d in table.items()
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_durations(path) -> dict[str, np.ndarray]:
    table = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            utt_id, values = line.split("\t")
            table[utt_id] = np.array([int(v) for v in values.split(",")], dtype=np.int64)
        except ValueError as exc:
            raise InvalidArgumentError(f"{path}:{lineno}: malformed duration line") from exc
    return table
