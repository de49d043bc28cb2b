"""Synthetic text-speech and dubbing corpora with exact ground truth.

Utterances are concatenations of per-phoneme harmonic segments: the phoneme
id selects a spectral shape, the speaker template sets f0 and envelope, and
per-utterance contours modulate pitch and energy. Dubbing clips additionally
carry visual features generated from a latent emotion trajectory that also
modulates the audio (so the visual->prosody mapping is learnable by
construction) and lip features derived from the phoneme timeline (so
lip->duration is learnable).

Manifests are JSON-lines; see README for the record schema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .adapting import VisualFeatureBundle, VIDEO_FPS, load_visual, save_visual
from .augment import AugmentationSpec
from .errors import ManifestError
from .signal_core import (
    HOP_LENGTH,
    SAMPLE_RATE,
    MelSpectrogram,
    ProsodyCurves,
    Waveform,
    energy_from_mel,
    load_mel,
    load_waveform,
    mel_spectrogram,
    peek_mel_frames,
    save_mel,
    save_waveform,
)

N_PHONEMES = 32
SILENCE_ID = 0
N_HARMONICS = 8
FRAMES_PER_VIDEO_FRAME = SAMPLE_RATE / HOP_LENGTH / VIDEO_FPS  # 3.2

# how strongly the latent emotion trajectory drives pitch (octaves at e=1),
# plus a per-clip pitch offset that is hidden from the visual channel so the
# prosodic style encoder has something only the audio can explain
EMOTION_PITCH_OCTAVES = 0.7
HIDDEN_PITCH_OCTAVES = 0.25


def _phoneme_table() -> np.ndarray:
    """Harmonic amplitude templates (N_PHONEMES, N_HARMONICS); row 0 = silence.

    The fundamental is kept dominant so autocorrelation pitch tracking on
    the synthetic audio is unambiguous.
    """
    rng = np.random.default_rng(20240)
    rolloff = np.arange(1, N_HARMONICS + 1) ** -0.7
    amps = rng.uniform(0.4, 1.0, (N_PHONEMES, N_HARMONICS)) * rolloff
    amps[:, 0] = np.maximum(amps[:, 0], 0.95 * amps.max(axis=1))
    amps /= amps.max(axis=1, keepdims=True)
    amps[SILENCE_ID] = 0.0
    return amps


_PHONEME_AMPS = _phoneme_table()


@dataclass(frozen=True)
class SpeakerTemplate:
    """Synthetic speaker timbre: base pitch plus a harmonic envelope."""

    speaker_id: str
    base_f0: float
    tilt: float
    brightness: float
    energy_base: float

    def __post_init__(self):
        if not 80.0 <= self.base_f0 <= 400.0:
            raise ValueError(f"base_f0 {self.base_f0} outside [80, 400] Hz")

    def harmonic_envelope(self) -> np.ndarray:
        k = np.arange(1, N_HARMONICS + 1)
        env = (k ** -self.tilt) * (1.0 + 0.35 * np.sin(k * self.brightness))
        return np.maximum(env, 0.1)


def make_speakers(n_speakers: int, seed: int, f0_range=(120.0, 280.0)) -> list[SpeakerTemplate]:
    if n_speakers < 2:
        raise ManifestError("need at least 2 speakers")
    rng = np.random.default_rng([seed, 11])
    lo, hi = f0_range
    # log-spaced base pitches with jitter keep templates pairwise distinct
    bases = np.exp(np.linspace(np.log(lo), np.log(hi), n_speakers))
    bases *= np.exp(rng.uniform(-0.03, 0.03, n_speakers))
    speakers = []
    for i in range(n_speakers):
        speakers.append(SpeakerTemplate(
            speaker_id=f"spk{i}",
            base_f0=float(np.clip(bases[i], 80.0, 400.0)),
            tilt=float(rng.uniform(0.1, 0.9)),
            brightness=float(rng.uniform(0.5, 2.5)),
            energy_base=float(rng.uniform(0.35, 0.65)),
        ))
    return speakers


# ---------------------------------------------------------------------------
# records and manifests
# ---------------------------------------------------------------------------


@dataclass
class UtteranceRecord:
    """One corpus item; payloads load lazily from files when path-backed."""

    utt_id: str
    speaker_id: str
    phonemes: np.ndarray
    durations: np.ndarray
    wav_path: Path | None = None
    mel_path: Path | None = None
    prosody_path: Path | None = None
    visual_path: Path | None = None
    augmentation: AugmentationSpec | None = None
    emotion_label: int | None = None
    emotion_latent_mean: float | None = None
    _waveform: Waveform | None = None
    _mel: MelSpectrogram | None = None
    _prosody: ProsodyCurves | None = None
    _visual: VisualFeatureBundle | None = None

    def __post_init__(self):
        self.phonemes = np.asarray(self.phonemes, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)

    def waveform(self) -> Waveform:
        if self._waveform is None:
            self._waveform = load_waveform(self.wav_path)
        return self._waveform

    def mel(self) -> MelSpectrogram:
        if self._mel is None:
            self._mel = load_mel(self.mel_path)
        return self._mel

    def prosody(self) -> ProsodyCurves:
        if self._prosody is None:
            obj = json.loads(Path(self.prosody_path).read_text())
            self._prosody = ProsodyCurves(np.array(obj["pitch"], dtype=np.float32),
                                          np.array(obj["energy"], dtype=np.float32))
        return self._prosody

    def visual(self) -> VisualFeatureBundle | None:
        if self._visual is None and self.visual_path is not None:
            self._visual = load_visual(self.visual_path)
        return self._visual

    def with_payload(self, waveform=None, mel=None, prosody=None,
                     durations=None, augmentation=None) -> "UtteranceRecord":
        """Copy with replaced in-memory payloads; stale paths are dropped."""
        new = replace(self)
        if waveform is not None:
            new._waveform, new.wav_path = waveform, None
        if mel is not None:
            new._mel, new.mel_path = mel, None
        if prosody is not None:
            new._prosody, new.prosody_path = prosody, None
        if durations is not None:
            new.durations = np.asarray(durations, dtype=np.int64)
        if augmentation is not None:
            new.augmentation = augmentation
        new._visual = self._visual
        return new


_REQUIRED_FIELDS = ("utt_id", "speaker_id", "phonemes", "durations", "wav", "mel", "prosody")


def _record_from_json(obj: dict, base: Path, lineno: int) -> UtteranceRecord:
    for fieldname in _REQUIRED_FIELDS:
        if fieldname not in obj:
            raise ManifestError(f"line {lineno}: missing field {fieldname!r}")
    try:
        durations = np.array([int(v) for v in str(obj["durations"]).split(",")],
                             dtype=np.int64)
    except ValueError as exc:
        raise ManifestError(f"line {lineno}: bad durations string") from exc
    aug = obj.get("augmentation")
    return UtteranceRecord(
        utt_id=str(obj["utt_id"]),
        speaker_id=str(obj["speaker_id"]),
        phonemes=np.asarray(obj["phonemes"], dtype=np.int64),
        durations=durations,
        wav_path=base / obj["wav"],
        mel_path=base / obj["mel"],
        prosody_path=base / obj["prosody"],
        visual_path=(base / obj["visual"]) if obj.get("visual") else None,
        augmentation=AugmentationSpec.from_json(aug) if aug else None,
        emotion_label=obj.get("emotion_label"),
        emotion_latent_mean=obj.get("emotion_latent_mean"),
    )


def ingest_manifest(path, validate: bool = True):
    """Yield validated records from a JSON-lines manifest.

    Validation checks per record: referenced files exist and the duration
    sum matches the cached mel frame count. Failures name the utt_id (or
    line) and the offending field.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist")
    base = path.parent
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: line {lineno}: invalid JSON record") from exc
        record = _record_from_json(obj, base, lineno)
        if validate:
            _validate_record(record)
        yield record


def _validate_record(record: UtteranceRecord) -> None:
    for name, p in (("wav", record.wav_path), ("mel", record.mel_path),
                    ("prosody", record.prosody_path)):
        if not Path(p).exists():
            raise ManifestError(f"{record.utt_id}: {name} file missing: {p}")
    if record.visual_path is not None and not Path(record.visual_path).exists():
        raise ManifestError(
            f"{record.utt_id}: visual file missing: {record.visual_path}"
        )
    n_frames = peek_mel_frames(record.mel_path)
    if int(record.durations.sum()) != n_frames:
        raise ManifestError(
            f"{record.utt_id}: durations sum {int(record.durations.sum())} "
            f"!= mel frames {n_frames}"
        )


def _record_to_json(record: UtteranceRecord) -> dict:
    obj = {
        "utt_id": record.utt_id,
        "speaker_id": record.speaker_id,
        "phonemes": [int(p) for p in record.phonemes],
        "durations": ",".join(str(int(d)) for d in record.durations),
        "wav": f"wav/{record.utt_id}.wav",
        "mel": f"mel/{record.utt_id}.mel",
        "prosody": f"prosody/{record.utt_id}.json",
    }
    if record.visual_path is not None or record._visual is not None:
        obj["visual"] = f"visual/{record.utt_id}.vis"
    if record.augmentation is not None:
        obj["augmentation"] = record.augmentation.to_json()
    if record.emotion_label is not None:
        obj["emotion_label"] = int(record.emotion_label)
    if record.emotion_latent_mean is not None:
        obj["emotion_latent_mean"] = float(record.emotion_latent_mean)
    return obj


def write_corpus(records, out_dir) -> Path:
    """Persist records under out_dir and write manifest.jsonl; returns its path."""
    out_dir = Path(out_dir)
    for sub in ("wav", "mel", "prosody"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    if any(r.visual_path is not None or r._visual is not None for r in records):
        (out_dir / "visual").mkdir(exist_ok=True)
    lines = []
    for record in records:
        save_waveform(out_dir / "wav" / f"{record.utt_id}.wav", record.waveform())
        save_mel(out_dir / "mel" / f"{record.utt_id}.mel", record.mel())
        pros = record.prosody()
        (out_dir / "prosody" / f"{record.utt_id}.json").write_text(json.dumps({
            "pitch": [round(float(v), 4) for v in pros.pitch],
            "energy": [round(float(v), 6) for v in pros.energy],
        }))
        visual = record.visual()
        if visual is not None:
            save_visual(out_dir / "visual" / f"{record.utt_id}.vis", visual)
        lines.append(json.dumps(_record_to_json(record), sort_keys=True))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


def _draw_phonemes(rng: np.random.Generator, n_min: int, n_max: int,
                   dur_lo: int = 8, dur_hi: int = 20):
    n = int(rng.integers(n_min, n_max + 1))
    ids = rng.integers(1, N_PHONEMES, n)
    for i in range(1, n - 1):
        if rng.random() < 0.18:
            ids[i] = SILENCE_ID
    if len(np.unique(ids[ids != SILENCE_ID])) < 2:
        ids[0], ids[-1] = 1, 2
    durations = rng.integers(dur_lo, dur_hi + 1, n)
    durations[ids == SILENCE_ID] = rng.integers(6, 12)
    return ids.astype(np.int64), durations.astype(np.int64)


def _smooth_gate(gate: np.ndarray, width: int = 96) -> np.ndarray:
    # short fade at segment boundaries; avoids clicks in the rendered audio
    kernel = np.hanning(width)
    kernel /= kernel.sum()
    return np.convolve(gate, kernel, mode="same")


def _render_audio(phonemes, durations, f0_frame, amp_frame,
                  speaker: SpeakerTemplate) -> np.ndarray:
    owners = np.repeat(np.arange(len(phonemes)), durations)
    phoneme_per_frame = phonemes[owners]
    n_samples = int(durations.sum()) * HOP_LENGTH

    f0_s = np.repeat(f0_frame, HOP_LENGTH)
    phase = 2.0 * np.pi * np.cumsum(f0_s) / SAMPLE_RATE
    amp_s = np.repeat(amp_frame, HOP_LENGTH)
    gate = _smooth_gate((phoneme_per_frame != SILENCE_ID).astype(np.float64)
                        .repeat(HOP_LENGTH))

    env = speaker.harmonic_envelope()
    amps = _PHONEME_AMPS[phoneme_per_frame].repeat(HOP_LENGTH, axis=0)  # (n, K)
    wave = np.zeros(n_samples)
    for k in range(1, N_HARMONICS + 1):
        wave += amps[:, k - 1] * env[k - 1] * np.sin(k * phase)
    wave *= amp_s * gate
    peak = np.abs(wave).max()
    if peak > 0:
        wave *= 0.75 / peak
    return wave.astype(np.float32)


def _pitch_contour(rng, length: int, base_f0: float):
    depth = rng.uniform(0.05, 0.2)
    freq = rng.uniform(0.3, 0.8)
    phase = rng.uniform(0, 2 * np.pi)
    slope = rng.uniform(-0.15, 0.15)
    t = np.arange(length) / 80.0
    octaves = depth * np.sin(2 * np.pi * freq * t + phase) + slope * (t / max(t[-1], 1e-9) - 0.5)
    return base_f0 * 2.0 ** octaves


def _amp_contour(rng, length: int, base: float):
    depth = rng.uniform(0.1, 0.3)
    freq = rng.uniform(0.2, 0.6)
    phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(length) / 80.0
    return base * 2.0 ** (depth * np.sin(2 * np.pi * freq * t + phase))


def _finish_record(utt_id, speaker, phonemes, durations, f0_frame, amp_frame,
                   visual=None, emotion_label=None, latent_mean=None) -> UtteranceRecord:
    voiced = np.repeat(phonemes != SILENCE_ID, durations)
    gt_pitch = np.where(voiced, f0_frame, 0.0).astype(np.float32)
    wave = Waveform(_render_audio(phonemes, durations, f0_frame, amp_frame, speaker))
    mel = mel_spectrogram(wave)
    prosody = ProsodyCurves(gt_pitch, energy_from_mel(mel))
    record = UtteranceRecord(
        utt_id=utt_id, speaker_id=speaker.speaker_id,
        phonemes=phonemes, durations=durations,
        emotion_label=emotion_label, emotion_latent_mean=latent_mean,
    )
    record._waveform, record._mel, record._prosody, record._visual = \
        wave, mel, prosody, visual
    return record


def generate_speech_corpus(n_speakers: int, n_utts: int, seed: int, out_dir) -> Path:
    """Text-speech pretraining corpus; returns the manifest path."""
    speakers = make_speakers(n_speakers, seed)
    records = []
    for i in range(n_utts):
        rng = np.random.default_rng([seed, 2, i])
        speaker = speakers[i % n_speakers]
        phonemes, durations = _draw_phonemes(rng, 4, 10)
        n_frames = int(durations.sum())
        f0 = _pitch_contour(rng, n_frames, speaker.base_f0)
        amp = _amp_contour(rng, n_frames, speaker.energy_base)
        records.append(_finish_record(f"{speaker.speaker_id}_u{i:04d}",
                                      speaker, phonemes, durations, f0, amp))
    return write_corpus(records, out_dir)


def _emotion_trajectory(rng, n_video: int):
    c0 = rng.uniform(-0.8, 0.8)
    c1 = rng.uniform(0.1, 0.35)
    freq = rng.uniform(0.2, 0.6)
    phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(n_video) / VIDEO_FPS
    return c0 + c1 * np.sin(2 * np.pi * freq * t + phase)


def _visual_bundle(rng_corpus_dirs, rng, emotion, phonemes, durations, d_m):
    u_emo, lip_emb, u_prog = rng_corpus_dirs
    n_video = len(emotion)
    noise = rng.normal(0.0, 0.05, (n_video, d_m))
    core = emotion[:, None] * u_emo[None, :] + noise
    scale = rng.uniform(0.7, 1.4, d_m)
    bias = rng.normal(0.0, 0.3 / np.sqrt(d_m), d_m)
    v_emo = core * scale[None, :] + bias[None, :]
    atmosphere = v_emo.mean(axis=0)

    owners = np.repeat(np.arange(len(phonemes)), durations)
    starts = np.concatenate(([0], np.cumsum(durations)[:-1]))
    audio_pos = np.minimum((np.arange(n_video) * FRAMES_PER_VIDEO_FRAME + 1.6)
                           .astype(np.int64), len(owners) - 1)
    owner_v = owners[audio_pos]
    progress = (audio_pos - starts[owner_v]) / np.maximum(durations[owner_v], 1)
    lip = lip_emb[phonemes[owner_v]] + 0.5 * progress[:, None] * u_prog[None, :]
    lip = lip + rng.normal(0.0, 0.05, lip.shape)
    return VisualFeatureBundle(v_emo.astype(np.float32),
                               atmosphere.astype(np.float32),
                               lip.astype(np.float32))


def generate_dub_corpus(n_speakers: int, n_clips: int, seed: int, out_dir,
                        d_m: int = 128) -> Path:
    """Dubbing corpus: audio plus correlated visual features per clip.

    The latent emotion trajectory drives both the emotion features and the
    audio pitch/energy; lip features encode the phoneme timeline. Clip
    frame counts are multiples of 16 so video length maps exactly to mel
    length (25 fps x 3.2 frames per video frame).
    """
    speakers = make_speakers(n_speakers, seed, f0_range=(140.0, 260.0))
    dir_rng = np.random.default_rng([seed, 3])
    u_emo = dir_rng.normal(0.0, 1.0, d_m)
    u_emo /= np.linalg.norm(u_emo)
    lip_emb = dir_rng.normal(0.0, 0.6, (N_PHONEMES, d_m))
    u_prog = dir_rng.normal(0.0, 1.0, d_m)
    u_prog /= np.linalg.norm(u_prog)
    dirs = (u_emo, lip_emb, u_prog)

    records = []
    for i in range(n_clips):
        rng = np.random.default_rng([seed, 4, i])
        speaker = speakers[i % n_speakers]
        # wide clip-length spread mirrors real movie lines and makes the
        # speech-length penalty informative
        phonemes, durations = _draw_phonemes(rng, 3, 10, dur_lo=6, dur_hi=24)
        # pad the longest phoneme so L_mel is a multiple of 16 (=> integer L_v)
        shortfall = (-int(durations.sum())) % 16
        durations[int(np.argmax(durations))] += shortfall
        n_frames = int(durations.sum())
        n_video = int(round(n_frames / FRAMES_PER_VIDEO_FRAME))

        emotion = _emotion_trajectory(rng, n_video)
        video_idx = np.minimum((np.arange(n_frames) / FRAMES_PER_VIDEO_FRAME)
                               .astype(np.int64), n_video - 1)
        e_audio = emotion[video_idx]
        hidden_shift = rng.uniform(-HIDDEN_PITCH_OCTAVES, HIDDEN_PITCH_OCTAVES)
        f0 = speaker.base_f0 * 2.0 ** (EMOTION_PITCH_OCTAVES * e_audio + hidden_shift)
        amp = speaker.energy_base * 2.0 ** (0.5 * e_audio)

        visual = _visual_bundle(dirs, rng, emotion, phonemes, durations, d_m)
        mean_e = float(emotion.mean())
        label = 0 if mean_e < -0.25 else (2 if mean_e > 0.25 else 1)
        records.append(_finish_record(f"{speaker.speaker_id}_c{i:04d}", speaker,
                                      phonemes, durations, f0, amp,
                                      visual=visual, emotion_label=label,
                                      latent_mean=mean_e))
    return write_corpus(records, out_dir)
