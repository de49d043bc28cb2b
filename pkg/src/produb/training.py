"""Two-stage training: acoustic pre-training, then frozen-acoustic adaptation.

Stage I optimizes the acoustic system with a reconstruction objective using
ground-truth alignment and prosody. Stage II freezes the acoustic system
(enforced by parameter hashing every epoch) and trains the prosodic modules:
the first half of the epochs trains encoders/predictors with the teacher
prosodic style from the prosodic style encoder; the second half additionally
trains the style diffusion with a noise-prediction loss.

Per-item loss functions are exposed separately so gradient checks can run
against the exact training objective.
"""

from __future__ import annotations

import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .acoustic import AcousticSystem, params_hash, pitch_to_channels
from .adapting import DubbingModel, ProsodicAdapter
from .config import STAGE_ADAPT, STAGE_PRETRAIN, TrainConfig
from .errors import (
    CheckpointVersionError,
    FormatError,
    FreezeViolationError,
    InvalidArgumentError,
    TrainingFailureError,
)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "loss", "L_p", "L_n", "L_d", "L_Sp")


@dataclass
class Checkpoint:
    """Serializable training state; see save_checkpoint/load_checkpoint."""

    config: TrainConfig
    acoustic_state: dict
    prosodic_state: dict | None
    optimizer_state: dict | None
    epoch: int
    rng_state: torch.Tensor
    acoustic_hash: str
    history: list = field(default_factory=list)

    def build_acoustic(self) -> AcousticSystem:
        system = AcousticSystem(self.config.model_config())
        system.load_state_dict(self.acoustic_state)
        system.eval()
        return system

    def build_adapter(self) -> ProsodicAdapter:
        if self.prosodic_state is None:
            raise InvalidArgumentError("checkpoint has no prosodic parameters")
        adapter = ProsodicAdapter(self.config.model_config())
        adapter.load_state_dict(self.prosodic_state)
        adapter.eval()
        return adapter

    def build_model(self) -> DubbingModel:
        return DubbingModel(self.build_acoustic(), self.build_adapter())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "config": ckpt.config.to_dict(),
        "acoustic_state": ckpt.acoustic_state,
        "prosodic_state": ckpt.prosodic_state,
        "optimizer_state": ckpt.optimizer_state,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "acoustic_hash": ckpt.acoustic_hash,
        "history": ckpt.history,
    }, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except (zipfile.BadZipFile, RuntimeError, EOFError, KeyError) as exc:
        raise FormatError(f"{path}: corrupt or truncated checkpoint ({exc})") from exc
    if not isinstance(blob, dict) or "format_version" not in blob:
        raise FormatError(f"{path}: not a produb checkpoint")
    version = blob["format_version"]
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format v{version}, this build reads v{CHECKPOINT_VERSION}"
        )
    return Checkpoint(
        config=TrainConfig.from_dict(blob["config"]),
        acoustic_state=blob["acoustic_state"],
        prosodic_state=blob["prosodic_state"],
        optimizer_state=blob["optimizer_state"],
        epoch=blob["epoch"],
        rng_state=blob["rng_state"],
        acoustic_hash=blob["acoustic_hash"],
        history=blob.get("history", []),
    )


# ---------------------------------------------------------------------------
# loss assembly
# ---------------------------------------------------------------------------


def compute_dub_loss(preds: dict, targets: dict, weights=(1.0, 1.0, 1.0, 0.2)):
    """Weighted prosody loss: l1*L_p + l2*L_n + l3*L_d + l4*L_Sp.

    L_p/L_n/L_d are mean absolute errors on pitch, energy, duration;
    L_Sp is the diffusion noise-prediction mean squared error computed from
    preds["noise"] vs targets["noise"] (0 when absent). Returns
    (total, components) with components keyed L_p, L_n, L_d, L_Sp.
    """
    def pair(key):
        p, t = torch.as_tensor(preds[key]), torch.as_tensor(targets[key])
        if p.shape != t.shape:
            raise InvalidArgumentError(
                f"{key}: shape mismatch {tuple(p.shape)} vs {tuple(t.shape)}"
            )
        return p, t

    components = {}
    for key, name in (("pitch", "L_p"), ("energy", "L_n"), ("duration", "L_d")):
        p, t = pair(key)
        components[name] = (p - t).abs().mean()
    if "noise" in preds or "noise" in targets:
        if not ("noise" in preds and "noise" in targets):
            raise InvalidArgumentError("noise must be present in both preds and targets")
        p, t = pair("noise")
        components["L_Sp"] = ((p - t) ** 2).mean()
    else:
        components["L_Sp"] = torch.zeros((), dtype=torch.float64)
    l1, l2, l3, l4 = weights
    total = (l1 * components["L_p"] + l2 * components["L_n"]
             + l3 * components["L_d"] + l4 * components["L_Sp"])
    return total, components


# ---------------------------------------------------------------------------
# stage I
# ---------------------------------------------------------------------------


@dataclass
class Stage1Item:
    utt_id: str
    speaker_id: str
    ids: torch.Tensor
    owners: torch.Tensor
    log_pitch: torch.Tensor
    voiced: torch.Tensor
    energy: torch.Tensor
    mel: torch.Tensor
    style_mel: torch.Tensor  # same-speaker style source (often the target)


def prepare_stage1_item(record) -> Stage1Item:
    prosody = record.prosody()
    owners = np.repeat(np.arange(len(record.phonemes)), record.durations)
    log_pitch, voiced = pitch_to_channels(torch.from_numpy(prosody.pitch))
    mel = torch.from_numpy(np.asarray(record.mel().frames, dtype=np.float32))
    return Stage1Item(
        utt_id=record.utt_id,
        speaker_id=record.speaker_id,
        ids=torch.from_numpy(record.phonemes),
        owners=torch.from_numpy(owners),
        log_pitch=log_pitch,
        voiced=voiced,
        energy=torch.from_numpy(prosody.energy),
        mel=mel,
        style_mel=mel,
    )


def _assign_style_sources(items: list[Stage1Item], rng) -> None:
    """Half the items take their style from another same-speaker utterance.

    Cross-utterance style sources push the style encoder toward features
    that transfer within a speaker (timbre) rather than per-utterance
    prosody.
    """
    by_speaker: dict[str, list[int]] = {}
    for i, item in enumerate(items):
        by_speaker.setdefault(item.speaker_id, []).append(i)
    for i, item in enumerate(items):
        peers = [j for j in by_speaker[item.speaker_id] if j != i]
        if peers and rng.random() < 0.5:
            item.style_mel = items[int(rng.choice(peers))].mel


def stage1_item_loss(system: AcousticSystem, item: Stage1Item) -> torch.Tensor:
    """Reconstruction L1 for one utterance, ground-truth alignment/prosody."""
    t_a = system.text_encoder(item.ids)
    up = t_a[item.owners]
    s_a = system.style_encoder(item.style_mel)
    pred = system.decoder(up, item.log_pitch, item.voiced, item.energy, s_a)
    return (pred - item.mel).abs().mean()


def _write_log(log_path, history):
    if log_path is None:
        return
    lines = ["\t".join(LOG_COLUMNS)]
    for row in history:
        lines.append("\t".join(
            str(row["step"]) if c == "step" else f"{row[c]:.6f}" for c in LOG_COLUMNS
        ))
    Path(log_path).write_text("\n".join(lines) + "\n")


def _epoch_batches(n_items, batch_size, rng):
    order = rng.permutation(n_items)
    return [order[i:i + batch_size] for i in range(0, n_items, batch_size)]


def pretrain(corpus, config: TrainConfig, log_path=None) -> Checkpoint:
    """Stage-I acoustic pre-training. Deterministic per seed."""
    records = list(corpus)
    if not records:
        raise InvalidArgumentError("pretraining corpus is empty")
    if config.stage != STAGE_PRETRAIN:
        config = TrainConfig.from_dict({**config.to_dict(), "stage": STAGE_PRETRAIN})
    torch.manual_seed(config.seed)
    system = AcousticSystem(config.model_config())
    items = [prepare_stage1_item(r) for r in records]
    _assign_style_sources(items, np.random.default_rng([config.seed, 303]))
    optimizer = torch.optim.Adam(system.parameters(), lr=config.lr,
                                 betas=config.adam_betas, eps=config.adam_eps)
    data_rng = np.random.default_rng([config.seed, 101])
    history = []
    step = 0
    last_good = None

    def snapshot(epoch):
        return Checkpoint(
            config=config,
            acoustic_state={k: v.detach().clone() for k, v in system.state_dict().items()},
            prosodic_state=None,
            optimizer_state=None,
            epoch=epoch,
            rng_state=torch.get_rng_state(),
            acoustic_hash=params_hash(system),
            history=list(history),
        )

    system.train()
    for epoch in range(config.epochs):
        for batch in _epoch_batches(len(items), config.batch_size, data_rng):
            optimizer.zero_grad()
            loss = torch.stack([stage1_item_loss(system, items[i]) for i in batch]).mean()
            if not torch.isfinite(loss):
                _write_log(log_path, history)
                raise TrainingFailureError(
                    f"stage I diverged at step {step} (loss not finite)",
                    last_checkpoint=last_good,
                )
            loss.backward()
            optimizer.step()
            step += 1
            history.append({"step": step, "loss": loss.item(),
                            "L_p": 0.0, "L_n": 0.0, "L_d": 0.0, "L_Sp": 0.0})
        last_good = snapshot(epoch + 1)

    _write_log(log_path, history)
    final = snapshot(config.epochs)
    final.optimizer_state = optimizer.state_dict()
    return final


# ---------------------------------------------------------------------------
# stage II
# ---------------------------------------------------------------------------


@dataclass
class Stage2Item:
    utt_id: str
    ids: torch.Tensor
    mel: torch.Tensor
    emotion: torch.Tensor
    atmosphere: torch.Tensor
    lip: torch.Tensor
    pitch_target: torch.Tensor   # (L_pho,) log-Hz, 0 where never voiced
    energy_target: torch.Tensor  # (L_pho,)
    duration_target: torch.Tensor  # (L_pho,) float frames


def pool_pitch_log(pitch_hz: np.ndarray, phonemes_len: int,
                   durations: np.ndarray) -> np.ndarray:
    """Per-phoneme mean of log pitch over the phoneme's voiced frames."""
    owners = np.repeat(np.arange(phonemes_len), durations)
    voiced = pitch_hz > 0
    log_pitch = np.where(voiced, np.log(np.maximum(pitch_hz, 1e-3)), 0.0)
    sums = np.bincount(owners, weights=log_pitch * voiced, minlength=phonemes_len)
    counts = np.bincount(owners, weights=voiced.astype(np.float64),
                         minlength=phonemes_len)
    out = np.zeros(phonemes_len)
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz]
    return out


def prepare_stage2_item(record) -> Stage2Item:
    visual = record.visual()
    if visual is None:
        raise InvalidArgumentError(f"{record.utt_id} has no visual features")
    prosody = record.prosody()
    n_pho = len(record.phonemes)
    owners = np.repeat(np.arange(n_pho), record.durations)
    energy_tgt = np.bincount(owners, weights=prosody.energy.astype(np.float64),
                             minlength=n_pho)
    counts = np.maximum(np.bincount(owners, minlength=n_pho), 1)
    energy_tgt = energy_tgt / counts
    pitch_tgt = pool_pitch_log(prosody.pitch, n_pho, record.durations)
    return Stage2Item(
        utt_id=record.utt_id,
        ids=torch.from_numpy(record.phonemes),
        mel=torch.from_numpy(np.asarray(record.mel().frames, dtype=np.float32)),
        emotion=torch.from_numpy(visual.emotion),
        atmosphere=torch.from_numpy(visual.atmosphere),
        lip=torch.from_numpy(visual.lip),
        pitch_target=torch.from_numpy(pitch_tgt.astype(np.float32)),
        energy_target=torch.from_numpy(energy_tgt.astype(np.float32)),
        duration_target=torch.from_numpy(record.durations.astype(np.float32)),
    )


def stage2_item_losses(adapter: ProsodicAdapter, item: Stage2Item,
                       train_diffusion: bool = False,
                       noise_draw=None) -> tuple[torch.Tensor, dict]:
    """Prosody losses for one clip; optionally also the diffusion loss.

    The prosody predictor is conditioned on the teacher style from the
    prosodic style encoder; the diffusion loss (when enabled) is computed
    on detached style/condition so it trains the denoiser only.
    """
    t_p = adapter.text_encoder(item.ids)
    fusion = adapter.fuse(t_p, item.emotion, item.atmosphere)
    s_p = adapter.style_encoder(item.mel)
    pitch_hat, energy_hat = adapter.prosody_predictor(fusion, s_p)
    d_hat = adapter.duration_predictor(t_p, item.lip)

    preds = {"pitch": pitch_hat, "energy": energy_hat, "duration": d_hat}
    targets = {"pitch": item.pitch_target, "energy": item.energy_target,
               "duration": item.duration_target}
    if train_diffusion:
        t, noise = noise_draw
        sched = adapter.schedule
        abar = float(sched.alpha_bars[t - 1])
        s_t = abar ** 0.5 * s_p.detach() + (1.0 - abar) ** 0.5 * noise
        eps_hat = adapter.denoiser(s_t, t, fusion.mean(dim=0).detach())
        preds["noise"] = eps_hat
        targets["noise"] = noise
    return compute_dub_loss(preds, targets, (1.0, 1.0, 1.0, 1.0))[1], fusion


def adapt(corpus_dub, acoustic_ckpt: Checkpoint, config: TrainConfig,
          log_path=None) -> Checkpoint:
    """Stage-II prosody adaptation with the acoustic system frozen.

    Epochs [0, E//2) train encoders and predictors; [E//2, E) additionally
    train the style diffusion. A parameter-hash mismatch on the acoustic
    system at any epoch boundary is a hard failure.
    """
    records = list(corpus_dub)
    if not records:
        raise InvalidArgumentError("adaptation corpus is empty")
    if config.stage != STAGE_ADAPT:
        config = TrainConfig.from_dict({**config.to_dict(), "stage": STAGE_ADAPT})

    acoustic = acoustic_ckpt.build_acoustic()
    for p in acoustic.parameters():
        p.requires_grad_(False)
    acoustic.eval()
    hash_before = params_hash(acoustic)

    torch.manual_seed(config.seed)
    adapter = ProsodicAdapter(config.model_config())
    items = [prepare_stage2_item(r) for r in records]
    optimizer = torch.optim.Adam(adapter.parameters(), lr=config.lr,
                                 betas=config.adam_betas, eps=config.adam_eps)
    data_rng = np.random.default_rng([config.seed, 202])
    diff_rng = torch.Generator().manual_seed(config.seed + 77)
    l1, l2, l3, l4 = config.loss_weights
    diffusion_start = config.epochs // 2
    history = []
    step = 0
    last_good = None

    def snapshot(epoch):
        return Checkpoint(
            config=config,
            acoustic_state={k: v.detach().clone()
                            for k, v in acoustic.state_dict().items()},
            prosodic_state={k: v.detach().clone()
                            for k, v in adapter.state_dict().items()},
            optimizer_state=None,
            epoch=epoch,
            rng_state=torch.get_rng_state(),
            acoustic_hash=hash_before,
            history=list(history),
        )

    adapter.train()
    for epoch in range(config.epochs):
        train_diffusion = epoch >= diffusion_start
        for batch in _epoch_batches(len(items), config.batch_size, data_rng):
            optimizer.zero_grad()
            totals, comps = [], []
            for i in batch:
                item = items[i]
                draw = None
                if train_diffusion:
                    t = int(torch.randint(1, adapter.schedule.n_steps + 1, (1,),
                                          generator=diff_rng))
                    noise = torch.randn(config.d_m, generator=diff_rng)
                    draw = (t, noise)
                c, _ = stage2_item_losses(adapter, item,
                                          train_diffusion=train_diffusion,
                                          noise_draw=draw)
                total = l1 * c["L_p"] + l2 * c["L_n"] + l3 * c["L_d"]
                if train_diffusion:
                    total = total + l4 * c["L_Sp"]
                totals.append(total)
                comps.append(c)
            loss = torch.stack(totals).mean()
            if not torch.isfinite(loss):
                _write_log(log_path, history)
                raise TrainingFailureError(
                    f"stage II diverged at step {step} (loss not finite)",
                    last_checkpoint=last_good,
                )
            loss.backward()
            optimizer.step()
            step += 1
            row = {"step": step, "loss": loss.item()}
            for name in ("L_p", "L_n", "L_d", "L_Sp"):
                row[name] = torch.stack([c[name] for c in comps]).mean().item()
            history.append(row)
        if params_hash(acoustic) != hash_before:
            raise FreezeViolationError(
                f"acoustic parameters changed during epoch {epoch}"
            )
        last_good = snapshot(epoch + 1)

    _write_log(log_path, history)
    final = snapshot(config.epochs)
    final.optimizer_state = optimizer.state_dict()
    if params_hash(acoustic) != hash_before:
        raise FreezeViolationError("acoustic parameters changed during adaptation")
    return final
