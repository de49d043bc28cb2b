"""Stage-I acoustic stack: text encoder, style encoder, AdaIN, audio decoder.

All sequence tensors at module boundaries are time-major, shape (L, dim),
single utterance (batching happens by looping in the trainer). The stack is
trained once with a reconstruction objective and frozen afterwards; freezing
is enforced via a content hash of the parameters.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .errors import DegenerateInputError, InvalidArgumentError
from .signal_core import FLOOR_DB, MelSpectrogram

STYLE_ROLE_ACOUSTIC = "acoustic"
STYLE_ROLE_PROSODIC = "prosodic"

ADAIN_EPS = 1e-5
# style encoders consume per-utterance-centered mel scaled to roughly [-1, 1]
MEL_INPUT_SCALE = 25.0
# decoder output affine: raw head output near 0 maps to mid-range dB
DECODER_OUT_SCALE = 40.0
DECODER_OUT_BIAS = -40.0
# predicted pitch below this log-Hz value is treated as unvoiced
UNVOICED_LOG_HZ = float(np.log(50.0))


@dataclass
class StyleVector:
    """Fixed-dimension style embedding with an acoustic or prosodic role."""

    values: np.ndarray
    role: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 1:
            raise InvalidArgumentError("style vector must be 1-D")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("style vector contains non-finite values")
        if self.role not in (STYLE_ROLE_ACOUSTIC, STYLE_ROLE_PROSODIC):
            raise InvalidArgumentError(f"unknown style role {self.role!r}")


def adain_channel(c: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Standardize one channel and re-style it: gain * (c - mu)/sigma + bias.

    sigma uses a variance guard of ADAIN_EPS**2 so constant channels stay
    finite (they collapse onto the bias).
    """
    if c.numel() < 2:
        raise InvalidArgumentError("AdaIN channel needs at least 2 elements")
    mu = c.mean()
    sigma = torch.sqrt(c.var(unbiased=False) + ADAIN_EPS**2)
    return gain * (c - mu) / sigma + bias


class AdaIN(nn.Module):
    """Adaptive instance normalization over the time axis of an (L, C) map."""

    def __init__(self, channels: int, style_dim: int):
        super().__init__()
        self.gain_proj = nn.Linear(style_dim, channels)
        self.bias_proj = nn.Linear(style_dim, channels)
        # near-identity start (unit gain, zero bias) with small style
        # projections so conditioning is active from the first step
        nn.init.normal_(self.gain_proj.weight, std=0.02)
        nn.init.ones_(self.gain_proj.bias)
        nn.init.normal_(self.bias_proj.weight, std=0.02)
        nn.init.zeros_(self.bias_proj.bias)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        gain = self.gain_proj(style)
        bias = self.bias_proj(style)
        mu = x.mean(dim=0, keepdim=True)
        sigma = torch.sqrt(x.var(dim=0, unbiased=False, keepdim=True) + ADAIN_EPS**2)
        return gain * (x - mu) / sigma + bias


class AcousticTextEncoder(nn.Module):
    """Bidirectional recurrent phoneme encoder producing (L_pho, d_m)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_phonemes = cfg.n_phonemes
        self.embedding = nn.Embedding(cfg.n_phonemes, cfg.d_m)
        self.rnn = nn.LSTM(cfg.d_m, cfg.d_m // 2, bidirectional=True)
        self.proj = nn.Linear(cfg.d_m, cfg.d_m)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        x = self.embedding(ids).unsqueeze(1)  # (L, 1, d)
        out, _ = self.rnn(x)
        return self.proj(out.squeeze(1))


class StyleEncoder(nn.Module):
    """Strided conv encoder over mel frames; outputs a unit-norm vector."""

    def __init__(self, cfg: ModelConfig, role: str):
        super().__init__()
        self.role = role
        d = cfg.d_m
        self.conv1 = nn.Conv1d(cfg.n_mels, d, kernel_size=5, stride=2, padding=2)
        self.conv2 = nn.Conv1d(d, d, kernel_size=5, stride=2, padding=2)
        self.act = nn.LeakyReLU(0.2)
        self.proj = nn.Linear(d, d)

    def forward(self, mel_db: torch.Tensor) -> torch.Tensor:
        # center per utterance: timbre/prosody live in the spectral shape,
        # not the absolute level, and this keeps SECS gain-invariant
        x = (mel_db - mel_db.mean()) / MEL_INPUT_SCALE
        x = x.t().unsqueeze(0)  # (1, n_mels, L)
        x = self.act(self.conv1(x))
        x = self.act(self.conv2(x))
        pooled = x.mean(dim=2).squeeze(0)
        v = self.proj(pooled)
        return v / torch.linalg.vector_norm(v).clamp_min(1e-8)


class _DecoderBlock(nn.Module):
    def __init__(self, channels: int, style_dim: int):
        super().__init__()
        self.conv = nn.Conv1d(channels, channels, kernel_size=5, padding=2)
        self.adain = AdaIN(channels, style_dim)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        h = self.conv(x.t().unsqueeze(0)).squeeze(0).t()
        return x + self.act(self.adain(h, style))


class AudioDecoder(nn.Module):
    """Conv decoder from upsampled text + prosody channels to mel frames.

    Pitch enters as a log-Hz channel with a learned embedding added on
    unvoiced frames; every block is AdaIN-conditioned on the style vector.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_m
        self.text_proj = nn.Linear(d, d)
        self.pitch_proj = nn.Linear(1, d)
        self.energy_proj = nn.Linear(1, d)
        self.unvoiced_embedding = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(
            _DecoderBlock(d, d) for _ in range(cfg.decoder_blocks)
        )
        self.out = nn.Linear(d, cfg.n_mels)

    def forward(self, text_up, log_pitch, voiced, energy, style) -> torch.Tensor:
        x = self.text_proj(text_up)
        x = x + self.pitch_proj(log_pitch.unsqueeze(-1))
        x = x + self.energy_proj(energy.unsqueeze(-1))
        x = x + (~voiced).to(x.dtype).unsqueeze(-1) * self.unvoiced_embedding
        for block in self.blocks:
            x = block(x, style)
        return DECODER_OUT_SCALE * self.out(x) + DECODER_OUT_BIAS


class AcousticSystem(nn.Module):
    """Container for the frozen-after-Stage-I acoustic subsystem."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.text_encoder = AcousticTextEncoder(cfg)
        self.style_encoder = StyleEncoder(cfg, STYLE_ROLE_ACOUSTIC)
        self.decoder = AudioDecoder(cfg)


def pitch_to_channels(pitch_hz: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split an Hz curve (0 = unvoiced) into (log-Hz channel, voiced mask)."""
    voiced = pitch_hz > 0
    log_pitch = torch.where(voiced, torch.log(pitch_hz.clamp_min(1e-3)),
                            torch.zeros_like(pitch_hz))
    return log_pitch, voiced


# ---------------------------------------------------------------------------
# public operations on domain types (inference paths, eval mode, no grad)
# ---------------------------------------------------------------------------


def _check_ids(ids: np.ndarray, n_phonemes: int) -> torch.Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or len(ids) == 0:
        raise InvalidArgumentError("phoneme ids must be a non-empty 1-D sequence")
    if ids.min() < 0 or ids.max() >= n_phonemes:
        raise InvalidArgumentError(
            f"phoneme id outside inventory of size {n_phonemes}"
        )
    return torch.from_numpy(ids)


def encode_text_acoustic(ids, system: AcousticSystem) -> np.ndarray:
    """Acoustic text features, shape (L_pho, d_m). Deterministic in eval."""
    ids_t = _check_ids(getattr(ids, "ids", ids), system.cfg.n_phonemes)
    system.eval()
    with torch.no_grad():
        return system.text_encoder(ids_t).numpy()


def _mel_to_tensor(m: MelSpectrogram, min_frames: int = 4) -> torch.Tensor:
    if m.n_frames < min_frames:
        raise DegenerateInputError(
            f"mel of {m.n_frames} frames is too short (need >= {min_frames})"
        )
    return torch.from_numpy(np.asarray(m.frames, dtype=np.float32))


def encode_style_acoustic(m: MelSpectrogram, system: AcousticSystem) -> StyleVector:
    """Unit-norm acoustic style (timbre) vector of a mel spectrogram."""
    x = _mel_to_tensor(m)
    system.eval()
    with torch.no_grad():
        v = system.style_encoder(x)
    return StyleVector(v.numpy(), STYLE_ROLE_ACOUSTIC)


def decode_audio(upsampled_text: np.ndarray, pitch_hz: np.ndarray,
                 energy: np.ndarray, s_a: StyleVector,
                 system: AcousticSystem) -> MelSpectrogram:
    """Run the decoder on frame-level inputs; returns a floored-dB mel."""
    text = np.asarray(upsampled_text, dtype=np.float32)
    pitch = np.asarray(pitch_hz, dtype=np.float32)
    en = np.asarray(energy, dtype=np.float32)
    if not (text.shape[0] == len(pitch) == len(en)):
        raise InvalidArgumentError(
            f"length mismatch: text {text.shape[0]}, pitch {len(pitch)}, energy {len(en)}"
        )
    if s_a.role != STYLE_ROLE_ACOUSTIC:
        raise InvalidArgumentError("decoder style vector must have acoustic role")
    system.eval()
    with torch.no_grad():
        log_pitch, voiced = pitch_to_channels(torch.from_numpy(pitch))
        out = system.decoder(torch.from_numpy(text), log_pitch, voiced,
                             torch.from_numpy(en), torch.from_numpy(s_a.values))
    frames = np.maximum(out.numpy(), FLOOR_DB)
    return MelSpectrogram(frames)


def reconstruction_loss(pred, target) -> float:
    """Mean absolute difference over all spectrogram cells."""
    p = np.asarray(getattr(pred, "frames", pred), dtype=np.float64)
    t = np.asarray(getattr(target, "frames", target), dtype=np.float64)
    if p.shape != t.shape:
        raise InvalidArgumentError(f"shape mismatch {p.shape} vs {t.shape}")
    return float(np.mean(np.abs(p - t)))


def params_hash(module: nn.Module) -> str:
    """Stable content digest of all parameters (canonical f32, name order)."""
    h = hashlib.sha256()
    for name, param in sorted(module.named_parameters()):
        data = param.detach().cpu().numpy().astype("<f4")
        h.update(name.encode())
        h.update(str(tuple(data.shape)).encode())
        h.update(np.ascontiguousarray(data).tobytes())
    return h.hexdigest()
