import sys

import numpy as np
import pytest

from produb import evaluation as ev
from produb import signal_core as sc
from produb.errors import DegenerateInputError, FormatError, InvalidArgumentError, ManifestError
from produb.signal_core import MelSpectrogram, Waveform


def random_mel(rng, n=10):
    return MelSpectrogram(rng.uniform(-80, 0, (n, 80)).astype(np.float32))


# --- independent oracle implementations -----------------------------------


def oracle_cepstra(frames_db):
    """From-scratch orthonormal DCT-II via an explicit cosine matrix."""
    n = frames_db.shape[1]
    k = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    basis = np.cos(np.pi * k * (2 * j + 1) / (2 * n))
    basis *= np.sqrt(2.0 / n)
    basis[0] *= np.sqrt(0.5)
    log_mel = frames_db.astype(np.float64) * np.log(10.0) / 20.0
    return (basis @ log_mel.T).T[:, 1:14]


def oracle_costs(a, b):
    ca, cb = oracle_cepstra(a), oracle_cepstra(b)
    out = np.zeros((len(ca), len(cb)))
    for i in range(len(ca)):
        for j in range(len(cb)):
            d = ca[i] - cb[j]
            out[i, j] = (10.0 / np.log(10.0)) * np.sqrt(2.0 * np.sum(d * d))
    return out


def oracle_mcd_dtw(a, b):
    """Exhaustive enumeration of every monotone path; min total cost wins."""
    cost = oracle_costs(a, b)
    la, lb = cost.shape
    best = {"sum": np.inf, "len": None}

    def walk(i, j, total, length):
        total += cost[i, j]
        if i == la - 1 and j == lb - 1:
            if total < best["sum"]:
                best["sum"], best["len"] = total, length + 1
            return
        if total >= best["sum"]:
            return  # costs are non-negative; prune
        if i + 1 < la and j + 1 < lb:
            walk(i + 1, j + 1, total, length + 1)
        if i + 1 < la:
            walk(i + 1, j, total, length + 1)
        if j + 1 < lb:
            walk(i, j + 1, total, length + 1)

    sys.setrecursionlimit(10000)
    walk(0, 0, 0.0, 0)
    return best["sum"] / best["len"]


# --- MCD ------------------------------------------------------------------


def test_mcd_zero_on_identity():
    m = random_mel(np.random.default_rng(0))
    assert ev.mcd_dtw(m, m) == 0.0


def test_mcd_absorbs_frame_duplication():
    m = random_mel(np.random.default_rng(1), n=8)
    doubled = MelSpectrogram(np.repeat(m.frames, 2, axis=0))
    assert ev.mcd_dtw(m, doubled) < 1e-9


def test_mcd_matches_exhaustive_oracle():
    rng = np.random.default_rng(2)
    for _ in range(4):
        a = random_mel(rng, n=10)
        b = random_mel(rng, n=10)
        assert abs(ev.mcd_dtw(a, b) - oracle_mcd_dtw(a.frames, b.frames)) <= 1e-6


def test_mcd_symmetric_and_nonnegative():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = random_mel(rng, n=int(rng.integers(4, 20)))
        b = random_mel(rng, n=int(rng.integers(4, 20)))
        ab, ba = ev.mcd_dtw(a, b), ev.mcd_dtw(b, a)
        assert ab >= 0
        assert abs(ab - ba) <= 1e-6


def test_mcd_warped_not_above_unwarped():
    rng = np.random.default_rng(4)
    for _ in range(10):
        a = random_mel(rng, n=12)
        b = random_mel(rng, n=12)
        unwarped = float(np.mean(np.diag(oracle_costs(a.frames, b.frames))))
        assert ev.mcd_dtw(a, b) <= unwarped + 1e-9


def test_mcd_degenerate_inputs():
    tiny = MelSpectrogram(np.zeros((1, 80), dtype=np.float32))
    ok = random_mel(np.random.default_rng(5))
    with pytest.raises(DegenerateInputError):
        ev.mcd_dtw(tiny, ok)


def test_sl_penalty():
    rng = np.random.default_rng(6)
    a = random_mel(rng, n=10)
    b = random_mel(rng, n=10)
    assert abs(ev.mcd_dtw_sl(a, b) - ev.mcd_dtw(a, b)) <= 1e-9  # equal lengths
    assert ev.mcd_dtw_sl(a, a) == 0.0
    halved = MelSpectrogram(a.frames[:5])
    assert abs(ev.mcd_dtw_sl(a, halved) - 2.0 * ev.mcd_dtw(a, halved)) <= 1e-9


def test_sl_always_at_least_mcd():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a = random_mel(rng, n=int(rng.integers(4, 25)))
        b = random_mel(rng, n=int(rng.integers(4, 25)))
        assert ev.mcd_dtw_sl(a, b) >= ev.mcd_dtw(a, b) - 1e-12


# --- SECS -----------------------------------------------------------------


def tone(freq, seconds=0.6, amp=0.5):
    t = np.arange(int(seconds * sc.SAMPLE_RATE)) / sc.SAMPLE_RATE
    return Waveform((amp * np.sin(2 * np.pi * freq * t)).astype(np.float32))


def test_secs_identity_and_symmetry(stage1_result):
    system = stage1_result["checkpoint"].build_acoustic()
    x, y = tone(220), tone(300)
    assert abs(ev.secs(x, x, system) - 1.0) <= 1e-6
    assert abs(ev.secs(x, y, system) - ev.secs(y, x, system)) <= 1e-7
    assert -1.0 <= ev.secs(x, y, system) <= 1.0


def test_secs_amplitude_scaling_tolerance(stage1_result):
    system = stage1_result["checkpoint"].build_acoustic()
    x = tone(220, amp=0.6)
    half = Waveform(x.samples * 0.5)
    assert ev.secs(x, half, system) > 0.98


def test_secs_speaker_discrimination(stage1_result, speech_records):
    # trained style encoder: same-speaker pairs beat cross-speaker pairs
    system = stage1_result["checkpoint"].build_acoustic()
    by_speaker = {}
    for record in speech_records:
        by_speaker.setdefault(record.speaker_id, []).append(record.waveform())
    same, cross = [], []
    speakers = sorted(by_speaker)
    for s in speakers:
        waves = by_speaker[s][:4]
        for i in range(len(waves)):
            for j in range(i + 1, len(waves)):
                same.append(ev.secs(waves[i], waves[j], system))
    for a in range(len(speakers)):
        for b in range(a + 1, len(speakers)):
            cross.append(ev.secs(by_speaker[speakers[a]][0],
                                 by_speaker[speakers[b]][0], system))
    assert np.mean(same) > np.mean(cross)


# --- duration error -------------------------------------------------------


def test_duration_error_cases():
    assert ev.duration_error(np.array([2, 3]), np.array([2, 3])) == 0.0
    assert ev.duration_error(np.array([2, 3]), np.array([3, 2])) == 1.0
    rng = np.random.default_rng(8)
    for _ in range(50):
        n = int(rng.integers(1, 12))
        a, b = rng.integers(0, 30, n), rng.integers(0, 30, n)
        expected = sum(abs(int(x) - int(y)) for x, y in zip(a, b)) / n
        assert abs(ev.duration_error(a, b) - expected) <= 1e-9
    with pytest.raises(InvalidArgumentError):
        ev.duration_error(np.array([1]), np.array([1, 2]))


# --- corpus evaluation ----------------------------------------------------


def gt_synthesizer(record, reference, seed):
    return {"mel": record.mel(), "durations": record.durations}


def test_evaluate_ground_truth_scores_perfect(dub_records, dubbing_model):
    report = ev.evaluate_corpus(dub_records[:6], dubbing_model, "dub1",
                                synthesizer=gt_synthesizer)
    means = report.means
    assert means["mcd_dtw"] == 0.0
    assert means["mcd_dtw_sl"] == 0.0
    assert abs(means["secs"] - 1.0) <= 1e-6
    assert means["duration_error"] == 0.0


def test_evaluate_dub2_needs_second_utterance(dub_records, dubbing_model):
    lonely = [r for r in dub_records if r.speaker_id == dub_records[0].speaker_id][:1]
    others = [r for r in dub_records if r.speaker_id != lonely[0].speaker_id][:2]
    with pytest.raises(ManifestError, match=lonely[0].utt_id):
        ev.evaluate_corpus(lonely + others, dubbing_model, "dub2",
                           synthesizer=gt_synthesizer)


def test_evaluate_zero_shot_needs_pool(dub_records, dubbing_model):
    with pytest.raises(ManifestError, match="zero_shot"):
        ev.evaluate_corpus(dub_records[:2], dubbing_model, "zero_shot",
                           synthesizer=gt_synthesizer)


def test_evaluate_zero_shot_uses_pool(dub_records, speech_records, dubbing_model):
    pool = [r.waveform() for r in speech_records[:3]]
    report = ev.evaluate_corpus(dub_records[:3], dubbing_model, "zero_shot",
                                seed=1, ref_pool=pool, synthesizer=gt_synthesizer)
    assert len(report.rows) == 3
    # out-of-domain references: similarity must be below the dub1 identity case
    assert report.means["secs"] < 1.0
    assert report.means["mcd_dtw"] == 0.0  # gt synthesizer, content unchanged


def test_evaluate_parallel_workers_match_serial(dub_records, dubbing_model,
                                                monkeypatch):
    serial = ev.evaluate_corpus(dub_records[:4], dubbing_model, "dub1", seed=2)
    monkeypatch.setenv("PRODUB_NUM_WORKERS", "3")
    parallel = ev.evaluate_corpus(dub_records[:4], dubbing_model, "dub1", seed=2)
    assert serial.rows == parallel.rows


def test_evaluate_deterministic_with_seed(dub_records, dubbing_model):
    a = ev.evaluate_corpus(dub_records[:3], dubbing_model, "dub1", seed=4)
    b = ev.evaluate_corpus(dub_records[:3], dubbing_model, "dub1", seed=4)
    assert a.rows == b.rows


def test_report_file_format(dub_records, dubbing_model, tmp_path):
    report = ev.evaluate_corpus(dub_records[:3], dubbing_model, "dub1",
                                synthesizer=gt_synthesizer)
    path = tmp_path / "report.tsv"
    ev.write_report(report, path)
    lines = path.read_text().splitlines()
    assert lines[0].split("\t") == ["utt_id", "mcd_dtw", "mcd_dtw_sl", "secs",
                                    "duration_error"]
    assert len([l for l in lines if l and not l.startswith("#")]) == 4  # header + 3
    assert any(l.startswith("# mean_mcd_dtw\t") for l in lines)
    assert any(l.startswith("# setting\tdub1") for l in lines)


# --- external evaluator contract ------------------------------------------


def test_external_evaluator_roundtrip(tmp_path):
    script = tmp_path / "scorer.py"
    script.write_text(
        "import sys\n"
        "for line in open(sys.argv[1]):\n"
        "    path = line.strip()\n"
        "    if path:\n"
        "        print(f'{path}\\t{float(len(path))}')\n"
    )
    wavs = [tmp_path / "a.wav", tmp_path / "b.wav"]
    for w in wavs:
        w.write_bytes(b"")
    scores = ev.run_external_evaluator([sys.executable, str(script)], wavs)
    assert set(scores) == {str(w.resolve()) for w in wavs}
    for path, value in scores.items():
        assert value == float(len(path))


def test_external_evaluator_failure_raises(tmp_path):
    script = tmp_path / "broken.py"
    script.write_text("import sys; sys.exit(3)\n")
    with pytest.raises(ev.ProdubError):
        ev.run_external_evaluator([sys.executable, str(script)], [tmp_path / "a.wav"])


def test_external_evaluator_bad_output(tmp_path):
    script = tmp_path / "chatty.py"
    script.write_text("print('hello world no tabs')\n")
    with pytest.raises(FormatError):
        ev.run_external_evaluator([sys.executable, str(script)], [tmp_path / "a.wav"])
