"""Audio I/O, mel-spectrogram analysis/inversion, and prosody extraction.

Conventions used throughout the package:

* audio is mono float32 in [-1, 1] at 24 kHz
* mel spectrograms are time-major float32 matrices (L_mel, 80) in dB,
  floored at -80 dB, computed with FFT 2048 / hop 300 / window 1200
* frame count is always ceil(n_samples / hop), i.e. 80 frames per second
* pitch is reported in Hz with 0.0 meaning unvoiced; energy is the log of
  the L2 norm of the linear-magnitude mel frame
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import DegenerateInputError, FormatError, InvalidArgumentError

SAMPLE_RATE = 24000
N_FFT = 2048
HOP_LENGTH = 300
WIN_LENGTH = 1200
N_MELS = 80
FLOOR_DB = -80.0
ENERGY_EPS = 1e-5
PITCH_MIN_HZ = 50.0
PITCH_MAX_HZ = 800.0

# accepted input rates for the PCM reader
_SUPPORTED_RATES = (16000, 22050, 24000, 44100, 48000)

MEL_MAGIC = b"PDMEL1"


@dataclass
class Waveform:
    """Mono audio signal. Samples are float32, |sample| <= 1 after load."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise InvalidArgumentError("waveform samples must be 1-D")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidArgumentError("waveform contains non-finite samples")

    @property
    def duration_seconds(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class MelSpectrogram:
    """Log-magnitude mel spectrogram, shape (L_mel, n_mels), values >= -80 dB."""

    frames: np.ndarray
    hop_length: int = HOP_LENGTH
    n_mels: int = N_MELS
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise InvalidArgumentError("mel frames must be a 2-D matrix")
        if self.frames.shape[1] != self.n_mels:
            raise InvalidArgumentError(
                f"mel frame width {self.frames.shape[1]} != n_mels {self.n_mels}"
            )

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def hop_seconds(self) -> float:
        return self.hop_length / self.sample_rate


@dataclass
class ProsodyCurves:
    """Frame-level pitch (Hz, 0 = unvoiced) and energy (log-norm units)."""

    pitch: np.ndarray
    energy: np.ndarray

    def __post_init__(self):
        self.pitch = np.asarray(self.pitch, dtype=np.float32)
        self.energy = np.asarray(self.energy, dtype=np.float32)
        if self.pitch.shape != self.energy.shape or self.pitch.ndim != 1:
            raise InvalidArgumentError("pitch and energy must be equal-length 1-D")

    def __len__(self) -> int:
        return len(self.pitch)


# ---------------------------------------------------------------------------
# waveform I/O
# ---------------------------------------------------------------------------


def load_waveform(path) -> Waveform:
    """Read a 16-bit PCM mono RIFF file, resample to 24 kHz, bound peak at 1.

    Raises FormatError for non-PCM16/mono/empty files or unsupported rates;
    OSError propagates for unreadable paths.
    """
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except wave.Error as exc:
        raise FormatError(f"{path}: not a readable RIFF/WAVE file ({exc})") from exc
    except EOFError as exc:
        raise FormatError(f"{path}: truncated or empty WAVE file") from exc

    if n_channels != 1:
        raise FormatError(f"{path}: expected mono audio, got {n_channels} channels")
    if sampwidth != 2:
        raise FormatError(f"{path}: expected 16-bit PCM, got {8 * sampwidth}-bit")
    if n_frames == 0:
        raise FormatError(f"{path}: file contains no audio frames")
    if rate not in _SUPPORTED_RATES:
        raise FormatError(f"{path}: unsupported sample rate {rate} Hz")

    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    if rate != SAMPLE_RATE:
        g = np.gcd(SAMPLE_RATE, rate)
        samples = resample_poly(samples, SAMPLE_RATE // g, rate // g).astype(np.float32)
    peak = float(np.max(np.abs(samples))) if len(samples) else 0.0
    if peak > 1.0:
        samples = samples / peak
    return Waveform(samples, SAMPLE_RATE)


def save_waveform(path, w: Waveform) -> None:
    """Write a Waveform as 16-bit PCM mono RIFF."""
    samples = np.clip(w.samples, -1.0, 1.0)
    pcm = (samples * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# STFT / mel machinery
# ---------------------------------------------------------------------------


def _hann(length: int) -> np.ndarray:
    # periodic Hann window
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def _padded_window() -> np.ndarray:
    win = _hann(WIN_LENGTH)
    pad = (N_FFT - WIN_LENGTH) // 2
    return np.pad(win, (pad, pad))


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT,
                   sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular mel filterbank (n_mels, n_fft//2+1), peak-normalized to 1."""
    if fmax is None:
        fmax = sample_rate / 2.0
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_fft // 2 + 1)
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, len(fft_freqs)), dtype=np.float64)
    for i in range(n_mels):
        lo, center, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        rising = (fft_freqs - lo) / max(center - lo, 1e-9)
        falling = (hi - fft_freqs) / max(hi - center, 1e-9)
        fb[i] = np.maximum(0.0, np.minimum(rising, falling))
    return fb.astype(np.float32)


_FILTERBANK = mel_filterbank()
# amplitude normalization: a full-scale sine maps to roughly 0 dB
_WINDOW = _padded_window()
_MAG_SCALE = 2.0 / _hann(WIN_LENGTH).sum()


def mel_band_for_frequency(freq_hz: float) -> int:
    """Index of the mel band whose triangle peaks closest to freq_hz."""
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(SAMPLE_RATE / 2.0), N_MELS + 2)
    centers = _mel_to_hz(mel_pts[1:-1])
    return int(np.argmin(np.abs(centers - freq_hz)))


def _frame_signal(samples: np.ndarray) -> np.ndarray:
    """Center-padded frames of length N_FFT at every hop; count = ceil(n/hop)."""
    n_frames = -(-len(samples) // HOP_LENGTH)
    pad = N_FFT // 2
    padded = np.pad(samples.astype(np.float64), (pad, pad), mode="reflect")
    idx = np.arange(N_FFT)[None, :] + HOP_LENGTH * np.arange(n_frames)[:, None]
    return padded[idx]


def _stft_magnitude(samples: np.ndarray) -> np.ndarray:
    frames = _frame_signal(samples) * _WINDOW[None, :]
    return np.abs(np.fft.rfft(frames, axis=1))


def mel_spectrogram(w: Waveform) -> MelSpectrogram:
    """Log-mel analysis of a waveform; deterministic for identical input.

    Output has ceil(len/300) frames, 80 bands, values clamped to >= -80 dB.
    """
    if len(w.samples) < HOP_LENGTH:
        raise DegenerateInputError(
            f"waveform of {len(w.samples)} samples is shorter than one hop"
        )
    mag = _stft_magnitude(w.samples) * _MAG_SCALE
    mel = mag @ _FILTERBANK.T
    db = 20.0 * np.log10(np.maximum(mel, 1e-10))
    db = np.maximum(db, FLOOR_DB)
    return MelSpectrogram(db.astype(np.float32))


def _istft(stft: np.ndarray, length: int) -> np.ndarray:
    """Inverse STFT by windowed overlap-add, trimmed to `length` samples."""
    n_frames = stft.shape[0]
    frames = np.fft.irfft(stft, n=N_FFT, axis=1) * _WINDOW[None, :]
    pad = N_FFT // 2
    total = (n_frames - 1) * HOP_LENGTH + N_FFT
    out = np.zeros(total)
    norm = np.zeros(total)
    win_sq = _WINDOW * _WINDOW
    for t in range(n_frames):
        start = t * HOP_LENGTH
        out[start:start + N_FFT] += frames[t]
        norm[start:start + N_FFT] += win_sq
    out = out / np.maximum(norm, 1e-8)
    out = out[pad:pad + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out


_PINV_FILTERBANK = np.linalg.pinv(_FILTERBANK.astype(np.float64))


def invert_mel(m: MelSpectrogram, iterations: int = 64) -> Waveform:
    """Reconstruct a waveform by mel pseudo-inversion plus Griffin-Lim.

    Zero-phase initialization makes the result deterministic. Output length
    is exactly L_mel * hop samples. This is a fidelity-limited stand-in for
    a neural vocoder, good enough for round-trip checks and listening.
    """
    mel_linear = 10.0 ** (m.frames.astype(np.float64) / 20.0)
    # the -80 dB floor means "nothing here"; map it back to exact silence
    mel_linear = np.maximum(mel_linear - 10.0 ** (FLOOR_DB / 20.0), 0.0)
    mag = np.maximum(mel_linear @ _PINV_FILTERBANK.T, 0.0) / _MAG_SCALE
    length = m.n_frames * HOP_LENGTH

    stft = mag.astype(np.complex128)  # zero initial phase
    x = _istft(stft, length)
    for _ in range(iterations):
        spec = np.fft.rfft(_frame_signal(x) * _WINDOW[None, :], axis=1)
        phase = spec / np.maximum(np.abs(spec), 1e-12)
        x = _istft(mag * phase, length)
    x = np.clip(x, -1.0, 1.0)
    return Waveform(x.astype(np.float32), m.sample_rate)


# ---------------------------------------------------------------------------
# prosody extraction
# ---------------------------------------------------------------------------

_VOICING_THRESHOLD = 0.70
_SILENCE_RMS = 1e-3
# prefer the shortest lag whose correlation is close to the global max;
# guards against subharmonic (octave-down) picks on harmonic-rich frames
_PEAK_TOLERANCE = 0.95


def _frame_pitch(frame: np.ndarray, tau_min: int, tau_max: int) -> float:
    if np.sqrt(np.mean(frame * frame)) < _SILENCE_RMS:
        return 0.0
    n = len(frame)
    # FFT autocorrelation
    size = 1
    while size < 2 * n:
        size *= 2
    spec = np.fft.rfft(frame, size)
    ac = np.fft.irfft(spec * np.conj(spec))[:n]
    # normalized cross-correlation denominators from prefix/suffix energies
    sq = frame * frame
    prefix = np.concatenate(([0.0], np.cumsum(sq)))
    total = prefix[-1]
    taus = np.arange(tau_min, tau_max + 1)
    e_head = prefix[n - taus]           # energy of x[0 : n-tau]
    e_tail = total - prefix[taus]       # energy of x[tau : n]
    denom = np.sqrt(np.maximum(e_head * e_tail, 1e-12))
    r = ac[taus] / denom
    best = float(np.max(r))
    if best < _VOICING_THRESHOLD:
        return 0.0
    # local maxima only; the shoulder of a smooth peak must not win
    interior = (r[1:-1] >= r[:-2]) & (r[1:-1] > r[2:])
    peaks = np.flatnonzero(interior) + 1
    peaks = peaks[r[peaks] >= _PEAK_TOLERANCE * best]
    if len(peaks) == 0:
        # no periodicity peak inside the 50-800 Hz lag range
        return 0.0
    cand = int(taus[peaks[0]])
    # parabolic refinement around the chosen lag
    i = cand - tau_min
    if 0 < i < len(taus) - 1:
        y0, y1, y2 = r[i - 1], r[i], r[i + 1]
        denom2 = y0 - 2.0 * y1 + y2
        if abs(denom2) > 1e-12:
            delta = 0.5 * (y0 - y2) / denom2
            cand = cand + float(np.clip(delta, -1.0, 1.0))
    f0 = SAMPLE_RATE / float(cand)
    return float(np.clip(f0, PITCH_MIN_HZ, PITCH_MAX_HZ))


def energy_from_mel(m: MelSpectrogram) -> np.ndarray:
    """Per-frame energy: log(eps + L2 norm of the linear-magnitude frame)."""
    linear = 10.0 ** (m.frames.astype(np.float64) / 20.0)
    return np.log(ENERGY_EPS + np.linalg.norm(linear, axis=1)).astype(np.float32)


def extract_prosody(m: MelSpectrogram, w: Waveform) -> ProsodyCurves:
    """Frame-level pitch and energy aligned with the mel frames of `m`.

    Pitch: normalized autocorrelation over 50-800 Hz with a voicing
    threshold (0 = unvoiced). Energy: log(eps + L2 norm) of the
    linear-magnitude mel frame.
    """
    n_frames = m.n_frames
    # search slightly beyond the reporting range so boundary periods still
    # produce an interior correlation peak; the result is clipped afterwards
    tau_min = int(round(SAMPLE_RATE / PITCH_MAX_HZ)) - 3
    tau_max = int(round(SAMPLE_RATE / PITCH_MIN_HZ)) + 3
    half = WIN_LENGTH // 2
    padded = np.pad(w.samples.astype(np.float64), (half, half))
    pitch = np.zeros(n_frames, dtype=np.float32)
    for t in range(n_frames):
        center = t * HOP_LENGTH + half
        frame = padded[center - half:center + half]
        pitch[t] = _frame_pitch(frame, tau_min, tau_max)

    return ProsodyCurves(pitch, energy_from_mel(m))


# ---------------------------------------------------------------------------
# mel cache files: "PDMEL1" | u32 L_mel | u32 n_mels | f32 hop_seconds | data
# ---------------------------------------------------------------------------


def save_mel(path, m: MelSpectrogram) -> None:
    header = MEL_MAGIC + struct.pack("<IIf", m.n_frames, m.n_mels, m.hop_seconds)
    data = np.ascontiguousarray(m.frames, dtype="<f4").tobytes()
    Path(path).write_bytes(header + data)


def peek_mel_frames(path) -> int:
    """Frame count from a mel cache header without loading the data."""
    with open(path, "rb") as f:
        head = f.read(18)
    if len(head) < 18 or head[:6] != MEL_MAGIC:
        raise FormatError(f"{path}: not a {MEL_MAGIC.decode()} mel cache file")
    n_frames, _, _ = struct.unpack("<IIf", head[6:])
    return n_frames


def load_mel(path) -> MelSpectrogram:
    blob = Path(path).read_bytes()
    if len(blob) < 18 or blob[:6] != MEL_MAGIC:
        raise FormatError(f"{path}: not a {MEL_MAGIC.decode()} mel cache file")
    n_frames, n_mels, hop_seconds = struct.unpack("<IIf", blob[6:18])
    expected = 18 + 4 * n_frames * n_mels
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    frames = np.frombuffer(blob, dtype="<f4", offset=18).reshape(n_frames, n_mels)
    hop_length = int(round(hop_seconds * SAMPLE_RATE))
    return MelSpectrogram(frames.copy(), hop_length=hop_length, n_mels=n_mels)
