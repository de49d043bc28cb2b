"""Stage-II disentangled prosody adaptation.

The pre-trained acoustic system stays frozen; these modules model prosody
only: a prosodic text encoder, a prosodic style encoder, in-domain emotion
analysis (whitening + atmosphere-conditioned affine), cross-attention
fusion, a diffusion sampler for the prosodic style vector, and phoneme-level
prosody/duration predictors. Durations are scaled to the movie-clip length
before upsampling into the frozen decoder.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .acoustic import (
    STYLE_ROLE_PROSODIC,
    AcousticSystem,
    AdaIN,
    StyleEncoder,
    StyleVector,
    UNVOICED_LOG_HZ,
)
from .alignment import redistribute_durations
from .config import ModelConfig
from .errors import DegenerateInputError, FormatError, InvalidArgumentError
from .signal_core import (
    FLOOR_DB,
    HOP_LENGTH,
    SAMPLE_RATE,
    MelSpectrogram,
    Waveform,
    invert_mel,
    mel_spectrogram,
)

VIDEO_FPS = 25
VISUAL_MAGIC = b"PDVIS1"
IDEA_RIDGE = 1e-5


@dataclass
class VisualFeatureBundle:
    """Per-clip visual features: frame emotion, clip atmosphere, lip motion."""

    emotion: np.ndarray      # (L_v, d_m)
    atmosphere: np.ndarray   # (d_m,)
    lip: np.ndarray          # (L_v, d_m)
    fps: int = VIDEO_FPS

    def __post_init__(self):
        self.emotion = np.asarray(self.emotion, dtype=np.float32)
        self.atmosphere = np.asarray(self.atmosphere, dtype=np.float32)
        self.lip = np.asarray(self.lip, dtype=np.float32)
        if self.fps != VIDEO_FPS:
            raise InvalidArgumentError(f"visual fps must be {VIDEO_FPS}, got {self.fps}")
        if self.emotion.ndim != 2 or self.lip.shape != self.emotion.shape:
            raise InvalidArgumentError("emotion and lip must share shape (L_v, d_m)")
        if self.atmosphere.shape != (self.emotion.shape[1],):
            raise InvalidArgumentError("atmosphere must be a (d_m,) vector")
        for name, a in (("emotion", self.emotion), ("atmosphere", self.atmosphere),
                        ("lip", self.lip)):
            if not np.all(np.isfinite(a)):
                raise InvalidArgumentError(f"visual {name} contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.emotion.shape[0]


def save_visual(path, bundle: VisualFeatureBundle) -> None:
    """PDVIS1 | u32 L_v | u32 d_m | f32 emotion | f32 atmosphere | f32 lip."""
    l_v, d_m = bundle.emotion.shape
    parts = [VISUAL_MAGIC, struct.pack("<II", l_v, d_m)]
    for block in (bundle.emotion, bundle.atmosphere, bundle.lip):
        parts.append(np.ascontiguousarray(block, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_visual(path) -> VisualFeatureBundle:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 14 or blob[:6] != VISUAL_MAGIC:
        raise FormatError(f"{path}: not a {VISUAL_MAGIC.decode()} visual feature file")
    l_v, d_m = struct.unpack("<II", blob[6:14])
    expected = 14 + 4 * (l_v * d_m + d_m + l_v * d_m)
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=14)
    emotion = data[: l_v * d_m].reshape(l_v, d_m).copy()
    atmosphere = data[l_v * d_m: l_v * d_m + d_m].copy()
    lip = data[l_v * d_m + d_m:].reshape(l_v, d_m).copy()
    return VisualFeatureBundle(emotion, atmosphere, lip)


# ---------------------------------------------------------------------------
# in-domain emotion analysis
# ---------------------------------------------------------------------------


def _whiten(v: torch.Tensor, ridge: float) -> torch.Tensor:
    if v.shape[0] < 2:
        raise DegenerateInputError("whitening needs at least 2 time steps")
    mu = v.mean(dim=0, keepdim=True)
    x = v - mu
    cov = x.t() @ x / v.shape[0]
    evals, evecs = torch.linalg.eigh(cov)
    inv_sqrt = (evecs * evals.clamp_min(ridge).rsqrt()) @ evecs.t()
    return x @ inv_sqrt


def idea_normalize(v: np.ndarray, ridge: float = IDEA_RIDGE) -> np.ndarray:
    """Whiten an emotion sequence: zero temporal mean, ~identity covariance.

    Uses the symmetric inverse square root of the biased sample covariance,
    with eigenvalues clamped at `ridge` so constant sequences stay finite.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2:
        raise InvalidArgumentError("emotion sequence must be (L_v, d_m)")
    out = _whiten(torch.from_numpy(v), ridge)
    return out.numpy()


def idea_modulate(v_norm, atmosphere, f_alpha, f_beta):
    """Atmosphere-conditioned affine: f_alpha(ato) * v_norm + f_beta(ato).

    Gain and bias are per-dimension and broadcast across time; f_alpha and
    f_beta are callables (normally learnable linear projections).
    """
    to_torch = not isinstance(v_norm, torch.Tensor)
    v = torch.as_tensor(np.asarray(v_norm), dtype=torch.float32) if to_torch else v_norm
    ato = torch.as_tensor(np.asarray(atmosphere), dtype=v.dtype) \
        if not isinstance(atmosphere, torch.Tensor) else atmosphere
    if ato.ndim != 1 or v.ndim != 2 or v.shape[1] != ato.shape[0]:
        raise InvalidArgumentError(
            f"shape mismatch: emotion {tuple(v.shape)}, atmosphere {tuple(ato.shape)}"
        )
    out = f_alpha(ato) * v + f_beta(ato)
    return out.detach().numpy() if to_torch else out


class IdeaModule(nn.Module):
    """Whitening plus learnable atmosphere-conditioned re-modulation."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.f_alpha = nn.Linear(cfg.d_m, cfg.d_m)
        self.f_beta = nn.Linear(cfg.d_m, cfg.d_m)
        # start near identity modulation
        nn.init.zeros_(self.f_alpha.weight)
        nn.init.ones_(self.f_alpha.bias)
        nn.init.zeros_(self.f_beta.weight)
        nn.init.zeros_(self.f_beta.bias)

    def forward(self, emotion: torch.Tensor, atmosphere: torch.Tensor) -> torch.Tensor:
        v_norm = _whiten(emotion, IDEA_RIDGE)
        return self.f_alpha(atmosphere) * v_norm + self.f_beta(atmosphere)


# ---------------------------------------------------------------------------
# cross-attention
# ---------------------------------------------------------------------------


class CrossAttention(nn.Module):
    """Multi-head scaled dot-product attention between two sequences.

    Scores are scaled by 1/sqrt(d_m) (the full model width, following the
    fusion formulation) and heads are concatenated then projected back.
    """

    def __init__(self, d_m: int, n_head: int):
        super().__init__()
        if d_m % n_head != 0:
            raise InvalidArgumentError(f"n_head={n_head} must divide d_m={d_m}")
        self.n_head = n_head
        self.d_head = d_m // n_head
        self.scale = 1.0 / math.sqrt(d_m)
        self.w_q = nn.Linear(d_m, d_m, bias=False)
        self.w_k = nn.Linear(d_m, d_m, bias=False)
        self.w_v = nn.Linear(d_m, d_m, bias=False)
        self.out_proj = nn.Linear(d_m, d_m)

    def attention_weights(self, q_seq: torch.Tensor, kv_seq: torch.Tensor) -> torch.Tensor:
        l_q, l_kv = q_seq.shape[0], kv_seq.shape[0]
        q = self.w_q(q_seq).view(l_q, self.n_head, self.d_head).transpose(0, 1)
        k = self.w_k(kv_seq).view(l_kv, self.n_head, self.d_head).transpose(0, 1)
        return torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)

    def forward(self, q_seq: torch.Tensor, kv_seq: torch.Tensor) -> torch.Tensor:
        if q_seq.shape[1] != kv_seq.shape[1]:
            raise InvalidArgumentError(
                f"query dim {q_seq.shape[1]} != key/value dim {kv_seq.shape[1]}"
            )
        l_q, l_kv = q_seq.shape[0], kv_seq.shape[0]
        weights = self.attention_weights(q_seq, kv_seq)           # (H, Lq, Lkv)
        v = self.w_v(kv_seq).view(l_kv, self.n_head, self.d_head).transpose(0, 1)
        mixed = weights @ v                                        # (H, Lq, dh)
        mixed = mixed.transpose(0, 1).reshape(l_q, -1)
        return self.out_proj(mixed)


def cross_attend(query_seq: np.ndarray, kv_seq: np.ndarray,
                 attn: CrossAttention) -> np.ndarray:
    """Public wrapper: (L_q, d_m) query attends over (L_kv, d_m) keys/values."""
    q = torch.as_tensor(np.asarray(query_seq, dtype=np.float32))
    kv = torch.as_tensor(np.asarray(kv_seq, dtype=np.float32))
    if q.ndim != 2 or kv.ndim != 2:
        raise InvalidArgumentError("attention inputs must be 2-D matrices")
    attn.eval()
    with torch.no_grad():
        return attn(q, kv).numpy()


# ---------------------------------------------------------------------------
# prosodic encoders and predictors
# ---------------------------------------------------------------------------


def _sinusoidal_positions(length: int, dim: int, dtype, device) -> torch.Tensor:
    pos = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=dtype, device=device)
    freq = torch.exp(-math.log(10000.0) * idx / dim)
    table = torch.zeros(length, dim, dtype=dtype, device=device)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)
    return table


class ProsodicTextEncoder(nn.Module):
    """Small self-attention phoneme encoder for prosodic text features.

    Stands in for a pretrained phoneme-level language model: two
    pre-norm self-attention blocks over phoneme embeddings with
    sinusoidal positions.
    """

    def __init__(self, cfg: ModelConfig, n_layers: int = 2):
        super().__init__()
        self.n_phonemes = cfg.n_phonemes
        d = cfg.d_m
        self.embedding = nn.Embedding(cfg.n_phonemes, d)
        self.layers = nn.ModuleList()
        for _ in range(n_layers):
            self.layers.append(nn.ModuleDict({
                "norm1": nn.LayerNorm(d),
                "attn": CrossAttention(d, cfg.n_head),
                "norm2": nn.LayerNorm(d),
                "ffn": nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(),
                                     nn.Linear(2 * d, d)),
            }))

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        x = self.embedding(ids)
        x = x + _sinusoidal_positions(x.shape[0], x.shape[1], x.dtype, x.device)
        for layer in self.layers:
            h = layer["norm1"](x)
            x = x + layer["attn"](h, h)
            x = x + layer["ffn"](layer["norm2"](x))
        return x


class ProsodyPredictor(nn.Module):
    """Phoneme-level pitch/energy heads, style-conditioned through AdaIN."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, h = cfg.d_m, cfg.predictor_hidden
        self.in_proj = nn.Linear(d, h)
        self.adain1 = AdaIN(h, d)
        self.conv = nn.Conv1d(h, h, kernel_size=3, padding=1)
        self.adain2 = AdaIN(h, d)
        self.act = nn.LeakyReLU(0.2)
        self.pitch_head = nn.Linear(h, 1)
        self.energy_head = nn.Linear(h, 1)

    def forward(self, fusion: torch.Tensor, style: torch.Tensor):
        x = self.act(self.adain1(self.in_proj(fusion), style))
        h = self.conv(x.t().unsqueeze(0)).squeeze(0).t()
        x = x + self.act(self.adain2(h, style))
        return self.pitch_head(x).squeeze(-1), self.energy_head(x).squeeze(-1)


class DurationPredictor(nn.Module):
    """Per-phoneme frame counts from text prosody attending over lip motion."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, h = cfg.d_m, cfg.predictor_hidden
        self.attn = CrossAttention(d, cfg.n_head)
        self.mlp = nn.Sequential(nn.Linear(d, h), nn.LeakyReLU(0.2),
                                 nn.Linear(h, 1))

    def forward(self, t_p: torch.Tensor, lip: torch.Tensor) -> torch.Tensor:
        x = t_p + self.attn(t_p, lip)
        raw = self.mlp(x).squeeze(-1)
        return nn.functional.softplus(raw)


# ---------------------------------------------------------------------------
# prosodic style diffusion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionSchedule:
    """Beta schedule with cached alpha products; terminal state ~ pure noise."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) == 0:
            raise InvalidArgumentError("betas must be a non-empty 1-D sequence")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise InvalidArgumentError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(betas) <= 0) and len(betas) > 1:
            raise InvalidArgumentError("betas must be strictly increasing")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))
        if self.alpha_bars[-1] >= 0.01:
            raise InvalidArgumentError(
                f"terminal alpha_bar {self.alpha_bars[-1]:.4f} >= 0.01; "
                "schedule does not reach (near) pure noise"
            )

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    @classmethod
    def linear(cls, n_steps: int = 50, beta_start: float = 1e-4,
               beta_end: float = 0.2) -> "DiffusionSchedule":
        return cls(np.linspace(beta_start, beta_end, n_steps))


def diffusion_forward(s0: np.ndarray, t: int, noise: np.ndarray,
                      sched: DiffusionSchedule) -> np.ndarray:
    """Closed-form forward noising: sqrt(abar_t)*s0 + sqrt(1-abar_t)*noise."""
    if not 1 <= t <= sched.n_steps:
        raise InvalidArgumentError(f"step {t} outside [1, {sched.n_steps}]")
    abar = sched.alpha_bars[t - 1]
    s0 = np.asarray(s0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    return np.sqrt(abar) * s0 + np.sqrt(1.0 - abar) * noise


def _timestep_embedding(t: int, dim: int, dtype, device) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) *
                      torch.arange(half, dtype=dtype, device=device) / half)
    args = t * freqs
    return torch.cat([torch.sin(args), torch.cos(args)])


class StyleDenoiser(nn.Module):
    """Residual MLP predicting the forward noise from (s_t, t, condition)."""

    TIME_DIM = 32

    def __init__(self, cfg: ModelConfig, hidden: int = 128):
        super().__init__()
        d = cfg.d_m
        h = max(hidden, d)
        self.in_proj = nn.Linear(2 * d, h)
        self.time_proj = nn.Linear(self.TIME_DIM, h)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.Linear(h, h), nn.SiLU(), nn.Linear(h, h))
            for _ in range(3)
        )
        self.out = nn.Linear(h, d)

    def forward(self, s_t: torch.Tensor, t: int, cond: torch.Tensor) -> torch.Tensor:
        temb = _timestep_embedding(t, self.TIME_DIM, s_t.dtype, s_t.device)
        x = self.in_proj(torch.cat([s_t, cond])) + self.time_proj(temb)
        for block in self.blocks:
            x = x + block(x)
        return self.out(x)


def diffusion_sample(condition: np.ndarray, sched: DiffusionSchedule,
                     denoiser: StyleDenoiser, seed: int = 0) -> StyleVector:
    """Ancestral sampling of a prosodic style vector, conditioned on the
    temporal mean of the fusion features. Deterministic per seed; output is
    unit-norm."""
    cond_mat = np.asarray(condition, dtype=np.float32)
    cond = cond_mat.mean(axis=0) if cond_mat.ndim == 2 else cond_mat
    cond_t = torch.from_numpy(np.ascontiguousarray(cond, dtype=np.float32))
    gen = torch.Generator().manual_seed(seed)
    d = cond_t.shape[0]
    denoiser.eval()
    with torch.no_grad():
        s = torch.randn(d, generator=gen)
        for t in range(sched.n_steps, 0, -1):
            eps = denoiser(s, t, cond_t)
            alpha = float(sched.alphas[t - 1])
            abar = float(sched.alpha_bars[t - 1])
            beta = float(sched.betas[t - 1])
            mean = (s - beta / math.sqrt(1.0 - abar) * eps) / math.sqrt(alpha)
            if t > 1:
                abar_prev = float(sched.alpha_bars[t - 2])
                sigma = math.sqrt(beta * (1.0 - abar_prev) / (1.0 - abar))
                s = mean + sigma * torch.randn(d, generator=gen)
            else:
                s = mean
    v = s.numpy()
    v = v / max(float(np.linalg.norm(v)), 1e-8)
    return StyleVector(v, STYLE_ROLE_PROSODIC)


# ---------------------------------------------------------------------------
# container + public ops
# ---------------------------------------------------------------------------


class ProsodicAdapter(nn.Module):
    """All trainable Stage-II modules plus the diffusion schedule."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.text_encoder = ProsodicTextEncoder(cfg)
        self.style_encoder = StyleEncoder(cfg, STYLE_ROLE_PROSODIC)
        self.idea = IdeaModule(cfg)
        self.fusion_attn = CrossAttention(cfg.d_m, cfg.n_head)
        self.prosody_predictor = ProsodyPredictor(cfg)
        self.duration_predictor = DurationPredictor(cfg)
        self.denoiser = StyleDenoiser(cfg)
        self.schedule = DiffusionSchedule.linear(
            cfg.diffusion_steps, cfg.beta_start, cfg.beta_end
        )

    def fuse(self, t_p: torch.Tensor, emotion: torch.Tensor,
             atmosphere: torch.Tensor) -> torch.Tensor:
        """Bridge text prosody with emotion: t_p + CA(t_p, IDEA(emotion))."""
        v_p = self.idea(emotion.to(t_p.dtype), atmosphere.to(t_p.dtype))
        return t_p + self.fusion_attn(t_p, v_p)


def encode_text_prosodic(ids, adapter: ProsodicAdapter) -> np.ndarray:
    """Prosodic text features, shape (L_pho, d_m). Deterministic in eval."""
    from .acoustic import _check_ids

    ids_t = _check_ids(getattr(ids, "ids", ids), adapter.cfg.n_phonemes)
    adapter.eval()
    with torch.no_grad():
        return adapter.text_encoder(ids_t).numpy()


def encode_style_prosodic(m: MelSpectrogram, adapter: ProsodicAdapter) -> StyleVector:
    """Unit-norm prosodic (non-timbre) style vector of a dubbing mel."""
    from .acoustic import _mel_to_tensor

    x = _mel_to_tensor(m)
    adapter.eval()
    with torch.no_grad():
        v = adapter.style_encoder(x)
    return StyleVector(v.numpy(), STYLE_ROLE_PROSODIC)


def predict_prosody(fusion: np.ndarray, style: StyleVector,
                    adapter: ProsodicAdapter) -> tuple[np.ndarray, np.ndarray]:
    """Phoneme-level (pitch log-Hz, energy) from fusion features + style."""
    if style.role != STYLE_ROLE_PROSODIC:
        raise InvalidArgumentError("prosody predictor needs a prosodic style vector")
    f = torch.as_tensor(np.asarray(fusion, dtype=np.float32))
    s = torch.from_numpy(style.values)
    adapter.eval()
    with torch.no_grad():
        pitch, energy = adapter.prosody_predictor(f, s)
    return pitch.numpy(), energy.numpy()


def predict_duration(t_p: np.ndarray, lip: np.ndarray,
                     adapter: ProsodicAdapter) -> np.ndarray:
    """Non-negative per-phoneme duration predictions (frames, real-valued)."""
    t = torch.as_tensor(np.asarray(t_p, dtype=np.float32))
    l = torch.as_tensor(np.asarray(lip, dtype=np.float32))
    adapter.eval()
    with torch.no_grad():
        return adapter.duration_predictor(t, l).numpy()


def scale_durations(d_pred: np.ndarray, clip_frames: int, fps: int = VIDEO_FPS,
                    hop_seconds: float = HOP_LENGTH / SAMPLE_RATE) -> np.ndarray:
    """Integer durations summing exactly to the clip-equivalent frame count."""
    l_target = int(round(clip_frames / (fps * hop_seconds)))
    return redistribute_durations(np.asarray(d_pred, dtype=np.float64), l_target)


class DubbingModel:
    """Frozen acoustic system + trained prosodic adapter, end to end."""

    def __init__(self, acoustic: AcousticSystem, adapter: ProsodicAdapter):
        self.acoustic = acoustic
        self.adapter = adapter

    def synthesize_details(self, script, reference, visual: VisualFeatureBundle,
                           seed: int = 0) -> dict:
        """Full dubbing pass; returns intermediate artifacts for evaluation."""
        ids = np.asarray(getattr(script, "ids", script), dtype=np.int64)
        from .acoustic import _check_ids

        ids_t = _check_ids(ids, self.acoustic.cfg.n_phonemes)
        if visual.emotion.shape[1] != self.acoustic.cfg.d_m:
            raise InvalidArgumentError(
                f"visual d_m {visual.emotion.shape[1]} != model d_m {self.acoustic.cfg.d_m}"
            )
        mel_ref = reference if isinstance(reference, MelSpectrogram) \
            else mel_spectrogram(reference)

        self.acoustic.eval()
        self.adapter.eval()
        with torch.no_grad():
            s_a = self.acoustic.style_encoder(torch.from_numpy(mel_ref.frames))
            t_a = self.acoustic.text_encoder(ids_t)
            t_p = self.adapter.text_encoder(ids_t)
            fusion = self.adapter.fuse(t_p, torch.from_numpy(visual.emotion),
                                       torch.from_numpy(visual.atmosphere))

            s_p = diffusion_sample(fusion.numpy(), self.adapter.schedule,
                                   self.adapter.denoiser, seed=seed)
            pitch_log, energy = self.adapter.prosody_predictor(
                fusion, torch.from_numpy(s_p.values)
            )
            d_pred = self.adapter.duration_predictor(
                t_p, torch.from_numpy(visual.lip)
            )
            durations = scale_durations(d_pred.numpy(), visual.n_frames)

            owners = np.repeat(np.arange(len(ids)), durations)
            owners_t = torch.from_numpy(owners)
            up_text = t_a[owners_t]
            up_pitch = pitch_log[owners_t]
            up_energy = energy[owners_t]
            voiced = up_pitch > UNVOICED_LOG_HZ
            log_pitch = torch.where(voiced, up_pitch, torch.zeros_like(up_pitch))
            out = self.acoustic.decoder(up_text, log_pitch, voiced, up_energy, s_a)

        mel_out = MelSpectrogram(np.maximum(out.numpy(), FLOOR_DB))
        return {
            "mel": mel_out,
            "durations": durations,
            "pitch_log_hz": pitch_log.numpy(),
            "energy": energy.numpy(),
            "duration_pred": d_pred.numpy(),
            "prosodic_style": s_p,
        }

    def synthesize_dub(self, script, reference, visual: VisualFeatureBundle,
                       seed: int = 0, vocoder_iterations: int = 64) -> Waveform:
        details = self.synthesize_details(script, reference, visual, seed=seed)
        return invert_mel(details["mel"], iterations=vocoder_iterations)
