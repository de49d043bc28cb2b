"""Objective metrics: MCD-DTW, MCD-DTW-SL, SECS, duration error.

Mel cepstra are the orthonormal cosine transform of the dB mel frames,
coefficients 1..13 (c0 excluded). MCD-DTW is the mean local cost along the
optimal dynamic-time-warping path with unit steps {(1,0),(0,1),(1,1)}; the
SL variant multiplies by the length ratio max(L_a,L_b)/min(L_a,L_b).

SECS embeds both signals with the trained acoustic style encoder and takes
the cosine; scores are internally consistent, not comparable across
publications that use external speaker encoders.
"""

from __future__ import annotations

import os
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .acoustic import AcousticSystem, encode_style_acoustic
from .adapting import DubbingModel
from .corpus import UtteranceRecord, ingest_manifest
from .errors import DegenerateInputError, FormatError, InvalidArgumentError, ManifestError, ProdubError
from .signal_core import MelSpectrogram, Waveform, mel_spectrogram

MCD_CONST = 10.0 / np.log(10.0)
N_CEPSTRA = 13

SETTING_DUB1 = "dub1"
SETTING_DUB2 = "dub2"
SETTING_ZERO_SHOT = "zero_shot"
SETTINGS = (SETTING_DUB1, SETTING_DUB2, SETTING_ZERO_SHOT)


def worker_count() -> int:
    """Thread cap from PRODUB_NUM_WORKERS (default 1 = serial)."""
    try:
        return max(1, int(os.environ.get("PRODUB_NUM_WORKERS", "1")))
    except ValueError:
        return 1


# dB frames -> natural-log magnitude, the scale the MCD constant expects
_DB_TO_LN = np.log(10.0) / 20.0


def mel_cepstra(m: MelSpectrogram, n_coeffs: int = N_CEPSTRA) -> np.ndarray:
    """Cepstral coefficients 1..n_coeffs per frame (orthonormal DCT-II)."""
    log_mel = np.asarray(m.frames, dtype=np.float64) * _DB_TO_LN
    coeffs = dct(log_mel, type=2, norm="ortho", axis=1)
    return coeffs[:, 1:n_coeffs + 1]


def _local_costs(ca: np.ndarray, cb: np.ndarray) -> np.ndarray:
    diff = ca[:, None, :] - cb[None, :, :]
    return MCD_CONST * np.sqrt(2.0 * np.sum(diff * diff, axis=2))


def _dtw_mean_cost(cost: np.ndarray) -> float:
    """Min-total-cost DTW path, then mean cost per path cell."""
    la, lb = cost.shape
    acc = np.full((la, lb), np.inf)
    move = np.zeros((la, lb), dtype=np.int8)  # 0=diag, 1=up, 2=left
    acc[0, 0] = cost[0, 0]
    for j in range(1, lb):
        acc[0, j] = acc[0, j - 1] + cost[0, j]
        move[0, j] = 2
    for i in range(1, la):
        acc[i, 0] = acc[i - 1, 0] + cost[i, 0]
        move[i, 0] = 1
        row_prev, row = acc[i - 1], acc[i]
        for j in range(1, lb):
            best = row_prev[j - 1]
            m = 0
            if row_prev[j] < best:
                best, m = row_prev[j], 1
            if row[j - 1] < best:
                best, m = row[j - 1], 2
            row[j] = best + cost[i, j]
            move[i, j] = m
    # backtrack to count path cells
    i, j, length = la - 1, lb - 1, 1
    while i > 0 or j > 0:
        m = move[i, j]
        if m == 0 and i > 0 and j > 0:
            i, j = i - 1, j - 1
        elif m == 1 and i > 0:
            i -= 1
        else:
            j -= 1
        length += 1
    return float(acc[la - 1, lb - 1] / length)


def _check_pair(a: MelSpectrogram, b: MelSpectrogram) -> None:
    if a.n_frames < 2 or b.n_frames < 2:
        raise DegenerateInputError("MCD needs at least 2 frames per input")


def mcd_dtw(a: MelSpectrogram, b: MelSpectrogram) -> float:
    """Mel-cepstral distortion (dB) under DTW alignment."""
    _check_pair(a, b)
    return _dtw_mean_cost(_local_costs(mel_cepstra(a), mel_cepstra(b)))


def mcd_dtw_sl(a: MelSpectrogram, b: MelSpectrogram) -> float:
    """MCD-DTW scaled by the speech-length penalty max(L)/min(L)."""
    _check_pair(a, b)
    penalty = max(a.n_frames, b.n_frames) / min(a.n_frames, b.n_frames)
    return mcd_dtw(a, b) * penalty


def secs(generated: Waveform, reference: Waveform, system: AcousticSystem) -> float:
    """Speaker-encoder cosine similarity between two waveforms."""
    va = encode_style_acoustic(mel_spectrogram(generated), system).values
    vb = encode_style_acoustic(mel_spectrogram(reference), system).values
    return float(np.dot(va, vb))


def duration_error(d_pred: np.ndarray, d_gt: np.ndarray) -> float:
    """Mean absolute per-phoneme duration difference, in frames."""
    p = np.asarray(d_pred, dtype=np.float64)
    g = np.asarray(d_gt, dtype=np.float64)
    if p.shape != g.shape:
        raise InvalidArgumentError(f"length mismatch {p.shape} vs {g.shape}")
    return float(np.mean(np.abs(p - g)))


# ---------------------------------------------------------------------------
# corpus evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    setting: str
    rows: list[dict]

    @property
    def means(self) -> dict:
        keys = ("mcd_dtw", "mcd_dtw_sl", "secs", "duration_error")
        return {k: float(np.mean([r[k] for r in self.rows])) for k in keys}


def _pick_reference(record: UtteranceRecord, records, setting: str,
                    rng: np.random.Generator, ref_pool):
    if setting == SETTING_DUB1:
        return record.waveform()
    if setting == SETTING_DUB2:
        same = [r for r in records
                if r.speaker_id == record.speaker_id and r.utt_id != record.utt_id]
        if not same:
            raise ManifestError(
                f"{record.utt_id}: dub2 needs another utterance from "
                f"speaker {record.speaker_id}"
            )
        return same[int(rng.integers(len(same)))].waveform()
    if setting == SETTING_ZERO_SHOT:
        if not ref_pool:
            raise ManifestError(
                f"{record.utt_id}: zero_shot needs an out-of-domain reference pool"
            )
        ref = ref_pool[int(rng.integers(len(ref_pool)))]
        if isinstance(ref, Waveform):
            return ref
        from .signal_core import load_waveform

        return load_waveform(ref)
    raise InvalidArgumentError(f"unknown setting {setting!r}; expected one of {SETTINGS}")


def _default_synthesizer(model: DubbingModel):
    def run(record: UtteranceRecord, reference: Waveform, seed: int) -> dict:
        details = model.synthesize_details(record.phonemes, reference,
                                           record.visual(), seed=seed)
        return {"mel": details["mel"], "durations": details["durations"]}
    return run


def evaluate_corpus(manifest, model: DubbingModel | None, setting: str,
                    seed: int = 0, ref_pool=None, synthesizer=None) -> MetricReport:
    """Synthesize every clip in a manifest and aggregate objective metrics.

    `setting` picks the reference audio: dub1 = the ground-truth audio,
    dub2 = a different utterance of the same speaker, zero_shot = a sample
    from `ref_pool`. A custom `synthesizer(record, reference, seed) -> dict`
    may replace the model (used to score ground truth against itself).
    SECS is computed from the generated mel directly, skipping the vocoder
    round trip. Deterministic for a fixed seed.
    """
    records = list(ingest_manifest(manifest)) if not isinstance(manifest, list) \
        else manifest
    for r in records:
        if r.visual() is None:
            raise ManifestError(f"{r.utt_id}: dubbing evaluation needs visual features")
    if synthesizer is None:
        if model is None:
            raise InvalidArgumentError("either a model or a synthesizer is required")
        synthesizer = _default_synthesizer(model)
    rng = np.random.default_rng([seed, 9])
    refs = [_pick_reference(r, records, setting, rng, ref_pool) for r in records]
    system = model.acoustic if model is not None else None

    def score(idx: int) -> dict:
        record, reference = records[idx], refs[idx]
        out = synthesizer(record, reference, seed + idx)
        mel_gen, d_pred = out["mel"], out["durations"]
        mel_gt = record.mel()
        row = {
            "utt_id": record.utt_id,
            "mcd_dtw": mcd_dtw(mel_gen, mel_gt),
            "mcd_dtw_sl": mcd_dtw_sl(mel_gen, mel_gt),
            "duration_error": duration_error(d_pred, record.durations),
        }
        if system is not None:
            v_gen = encode_style_acoustic(mel_gen, system).values
            v_ref = encode_style_acoustic(mel_spectrogram(reference), system).values
            row["secs"] = float(np.dot(v_gen, v_ref))
        else:
            row["secs"] = 1.0 if mel_gen is mel_gt else 0.0
        return row

    n_workers = worker_count()
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            rows = list(pool.map(score, range(len(records))))
    else:
        rows = [score(i) for i in range(len(records))]
    return MetricReport(setting=setting, rows=rows)


def write_report(report: MetricReport, path) -> None:
    """Tab-separated per-utterance rows followed by a summary block."""
    cols = ("utt_id", "mcd_dtw", "mcd_dtw_sl", "secs", "duration_error")
    lines = ["\t".join(cols)]
    for row in report.rows:
        lines.append("\t".join(
            row["utt_id"] if c == "utt_id" else f"{row[c]:.6f}" for c in cols
        ))
    lines.append("")
    lines.append(f"# setting\t{report.setting}")
    lines.append(f"# utterances\t{len(report.rows)}")
    for key, value in report.means.items():
        shown = value * 100.0 if key == "secs" else value
        suffix = "_pct" if key == "secs" else ""
        lines.append(f"# mean_{key}{suffix}\t{shown:.4f}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# external evaluator subprocess contract
# ---------------------------------------------------------------------------


def run_external_evaluator(command: list[str], wav_paths) -> dict[str, float]:
    """Out-of-scope metrics (WER, MOS prediction, ...) via subprocess.

    The evaluator receives one argument: a manifest file with one absolute
    audio path per line. It must print one line per input on stdout:
    `<path>\\t<score>`. Nonzero exit or malformed output is an error.
    """
    paths = [str(Path(p).resolve()) for p in wav_paths]
    with tempfile.NamedTemporaryFile("w", suffix=".list", delete=False) as f:
        f.write("\n".join(paths) + "\n")
        manifest = f.name
    try:
        proc = subprocess.run(list(command) + [manifest], capture_output=True,
                              text=True)
        if proc.returncode != 0:
            raise ProdubError(
                f"external evaluator failed (exit {proc.returncode}): "
                f"{proc.stderr.strip()[:200]}"
            )
        scores = {}
        for line in proc.stdout.splitlines():
            if not line.strip():
                continue
            try:
                path, value = line.split("\t")
                scores[path] = float(value)
            except ValueError as exc:
                raise FormatError(
                    f"external evaluator output line not 'path<TAB>score': {line!r}"
                ) from exc
        missing = set(paths) - set(scores)
        if missing:
            raise FormatError(
                f"external evaluator returned no score for {len(missing)} inputs"
            )
        return scores
    finally:
        os.unlink(manifest)
