"""Frequency-domain prosody enhancement: pitch shifting and duration stretching.

Both transforms operate on mel spectrograms (time-domain manipulation is
deliberately avoided; it degrades quality). A corpus-level policy selects a
fraction of utterances, applies exactly one transform to each, re-synthesizes
the waveform, and re-derives prosody and durations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import redistribute_durations
from .errors import DegenerateInputError, InvalidArgumentError
from .signal_core import FLOOR_DB, MelSpectrogram, extract_prosody, invert_mel

KIND_PITCH_SHIFT = "pitch_shift"
KIND_DURATION_STRETCH = "duration_stretch"


@dataclass(frozen=True)
class AugmentationSpec:
    """One concrete enhancement applied to one utterance."""

    kind: str
    pitch_bins: int = 0
    stretch_factor: float = 1.0

    def __post_init__(self):
        if self.kind not in (KIND_PITCH_SHIFT, KIND_DURATION_STRETCH):
            raise InvalidArgumentError(f"unknown augmentation kind {self.kind!r}")
        if not 0.5 <= self.stretch_factor <= 2.0:
            raise InvalidArgumentError(
                f"stretch_factor {self.stretch_factor} outside [0.5, 2.0]"
            )

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "pitch_bins": int(self.pitch_bins),
            "stretch_factor": float(self.stretch_factor),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AugmentationSpec":
        return cls(
            kind=obj["kind"],
            pitch_bins=int(obj.get("pitch_bins", 0)),
            stretch_factor=float(obj.get("stretch_factor", 1.0)),
        )


@dataclass(frozen=True)
class EnhancementPolicy:
    """Corpus-level enhancement settings. Default ratio is 3%."""

    ratio: float = 0.03
    pitch_bin_range: tuple[int, int] = (-8, 8)
    stretch_range: tuple[float, float] = (0.8, 1.25)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise InvalidArgumentError(f"ratio {self.ratio} outside [0, 1]")


def pitch_shift(m: MelSpectrogram, k: int) -> MelSpectrogram:
    """Shift all mel bands by k (k > 0 moves content toward higher bands).

    Bands vacated by the shift are filled with the -80 dB floor; everything
    else is copied bit-exactly.
    """
    k = int(k)
    if abs(k) >= m.n_mels:
        raise InvalidArgumentError(f"|k|={abs(k)} must be < n_mels={m.n_mels}")
    out = np.full_like(m.frames, FLOOR_DB)
    if k >= 0:
        out[:, k:] = m.frames[:, : m.n_mels - k]
    else:
        out[:, :k] = m.frames[:, -k:]
    return MelSpectrogram(out, hop_length=m.hop_length, n_mels=m.n_mels,
                          sample_rate=m.sample_rate)


def duration_stretch(m: MelSpectrogram, r: float) -> MelSpectrogram:
    """Resample the time axis to round(L*r) frames by linear interpolation."""
    r = float(r)
    if not 0.5 <= r <= 2.0:
        raise InvalidArgumentError(f"stretch factor {r} outside [0.5, 2.0]")
    n_in = m.n_frames
    n_out = int(round(n_in * r))
    if n_out < 2:
        raise DegenerateInputError(f"stretch to {n_out} frames is degenerate")
    positions = np.linspace(0.0, n_in - 1.0, n_out)
    lo = np.floor(positions).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (positions - lo)[:, None]
    frames = m.frames.astype(np.float64)
    out = frames[lo] * (1.0 - frac) + frames[hi] * frac
    return MelSpectrogram(out.astype(np.float32), hop_length=m.hop_length,
                          n_mels=m.n_mels, sample_rate=m.sample_rate)


def draw_spec(policy: EnhancementPolicy, rng: np.random.Generator) -> AugmentationSpec:
    """Sample one augmentation from the policy's ranges (never a no-op)."""
    if rng.random() < 0.5:
        lo, hi = policy.pitch_bin_range
        bins = 0
        while bins == 0:
            bins = int(rng.integers(lo, hi + 1))
        return AugmentationSpec(KIND_PITCH_SHIFT, pitch_bins=bins)
    lo, hi = policy.stretch_range
    return AugmentationSpec(KIND_DURATION_STRETCH,
                            stretch_factor=float(rng.uniform(lo, hi)))


def apply_spec(spec: AugmentationSpec, m: MelSpectrogram) -> MelSpectrogram:
    if spec.kind == KIND_PITCH_SHIFT:
        return pitch_shift(m, spec.pitch_bins)
    return duration_stretch(m, spec.stretch_factor)


def apply_policy(corpus, policy: EnhancementPolicy):
    """Augment exactly round(ratio * N) utterances of a corpus.

    Selection and per-utterance draws are fully determined by the policy
    seed. Each augmented record gets: the augmented spectrogram, a waveform
    re-synthesized from it, prosody re-derived from the new spectrogram and
    waveform, and durations rescaled to the new frame count.
    """
    records = list(corpus)
    n_selected = int(round(policy.ratio * len(records)))
    if n_selected == 0:
        return records
    rng = np.random.default_rng(policy.seed)
    chosen = set(rng.choice(len(records), size=n_selected, replace=False).tolist())
    out = []
    for idx, record in enumerate(records):
        if idx not in chosen:
            out.append(record)
            continue
        spec = draw_spec(policy, np.random.default_rng([policy.seed, idx]))
        out.append(_augment_record(record, spec))
    return out


def _augment_record(record, spec: AugmentationSpec):
    mel_aug = apply_spec(spec, record.mel())
    wave_aug = invert_mel(mel_aug)
    prosody_aug = extract_prosody(mel_aug, wave_aug)
    durations = record.durations
    if spec.kind == KIND_DURATION_STRETCH:
        durations = redistribute_durations(durations, mel_aug.n_frames)
    return record.with_payload(
        waveform=wave_aug,
        mel=mel_aug,
        prosody=prosody_aug,
        durations=durations,
        augmentation=spec,
    )
