import numpy as np
import pytest
import torch

from produb import acoustic as ac
from produb.config import ModelConfig
from produb.errors import DegenerateInputError, InvalidArgumentError
from produb.signal_core import FLOOR_DB, MelSpectrogram

CFG = ModelConfig(d_m=32, n_head=4, predictor_hidden=32)


@pytest.fixture(scope="module")
def system():
    torch.manual_seed(0)
    return ac.AcousticSystem(CFG)


def random_mel(rng, n=24):
    return MelSpectrogram(rng.uniform(FLOOR_DB, 0, (n, 80)).astype(np.float32))


# --- text encoder ---------------------------------------------------------


def test_text_encoder_shape(system):
    out = ac.encode_text_acoustic(np.arange(12) % 32, system)
    assert out.shape == (12, 32)
    assert np.all(np.isfinite(out))


def test_text_encoder_deterministic(system):
    ids = np.array([3, 7, 1, 1, 30])
    a = ac.encode_text_acoustic(ids, system)
    b = ac.encode_text_acoustic(ids, system)
    assert np.array_equal(a, b)


def test_text_encoder_order_sensitivity(system):
    # oracle: direct comparison of permutation pairs; a bag-of-symbols
    # encoder would produce permuted-identical rows
    rng = np.random.default_rng(0)
    for _ in range(5):
        ids = rng.integers(0, 32, 8)
        perm = rng.permutation(8)
        if np.array_equal(perm, np.arange(8)):
            continue
        out1 = ac.encode_text_acoustic(ids, system)
        out2 = ac.encode_text_acoustic(ids[perm], system)
        assert not np.allclose(out1[perm], out2, atol=1e-6)


def test_text_encoder_rejects_unknown_ids(system):
    with pytest.raises(InvalidArgumentError):
        ac.encode_text_acoustic(np.array([0, 99]), system)


# --- style encoder --------------------------------------------------------


def test_style_vector_unit_norm(system):
    rng = np.random.default_rng(1)
    for _ in range(5):
        v = ac.encode_style_acoustic(random_mel(rng), system)
        assert abs(np.linalg.norm(v.values) - 1.0) < 1e-5
        assert v.role == ac.STYLE_ROLE_ACOUSTIC


def test_style_encoder_deterministic(system):
    m = random_mel(np.random.default_rng(2))
    a = ac.encode_style_acoustic(m, system)
    b = ac.encode_style_acoustic(m, system)
    assert np.array_equal(a.values, b.values)


def test_style_encoder_too_short_input(system):
    m = MelSpectrogram(np.full((3, 80), -40.0, dtype=np.float32))
    with pytest.raises(DegenerateInputError):
        ac.encode_style_acoustic(m, system)


def test_style_encoder_gain_invariant(system):
    # +6 dB offset (amplitude doubling) barely moves the embedding because
    # the encoder centers its input per utterance
    rng = np.random.default_rng(3)
    frames = rng.uniform(-50, -10, (32, 80)).astype(np.float32)
    a = ac.encode_style_acoustic(MelSpectrogram(frames), system)
    b = ac.encode_style_acoustic(MelSpectrogram(frames + 6.0), system)
    assert float(np.dot(a.values, b.values)) > 0.999


# --- AdaIN ----------------------------------------------------------------


def test_adain_identity_case():
    rng = np.random.default_rng(4)
    c = torch.tensor(rng.normal(size=64))
    c = (c - c.mean()) / c.std(unbiased=False)
    out = ac.adain_channel(c, torch.tensor(1.0), torch.tensor(0.0))
    assert torch.allclose(out, c, atol=1e-6)


def test_adain_statistics_match_projection():
    rng = np.random.default_rng(5)
    for _ in range(100):
        c = torch.tensor(rng.normal(rng.uniform(-3, 3), rng.uniform(0.5, 3.0),
                                    size=int(rng.integers(16, 200))))
        g = torch.tensor(rng.uniform(-2.0, 2.0))
        b = torch.tensor(rng.uniform(-2.0, 2.0))
        out = ac.adain_channel(c, g, b)
        assert abs(out.mean().item() - b.item()) <= 1e-5
        assert abs(out.std(unbiased=False).item() - abs(g.item())) <= 1e-5


def test_adain_constant_channel_guarded():
    c = torch.full((32,), 3.5, dtype=torch.float64)
    out = ac.adain_channel(c, torch.tensor(2.0, dtype=torch.float64),
                           torch.tensor(0.25, dtype=torch.float64))
    assert torch.all(torch.isfinite(out))
    assert torch.allclose(out, torch.full_like(c, 0.25))


def test_adain_matches_scalar_loop_oracle():
    rng = np.random.default_rng(6)
    module = ac.AdaIN(channels=6, style_dim=8)
    with torch.no_grad():
        module.gain_proj.weight.normal_(0, 0.5)
        module.bias_proj.weight.normal_(0, 0.5)
    x = torch.tensor(rng.normal(size=(20, 6)), dtype=torch.float32)
    style = torch.tensor(rng.normal(size=8), dtype=torch.float32)
    out = module(x, style)

    gains = module.gain_proj(style).detach().numpy()
    biases = module.bias_proj(style).detach().numpy()
    xn = x.numpy()
    for ch in range(6):
        col = xn[:, ch].astype(np.float64)
        mu, var = col.mean(), col.var()
        ref = gains[ch] * (col - mu) / np.sqrt(var + ac.ADAIN_EPS**2) + biases[ch]
        assert np.max(np.abs(out[:, ch].detach().numpy() - ref)) < 1e-5


# --- decoder --------------------------------------------------------------


def _decoder_inputs(rng, n=40):
    text = rng.normal(size=(n, 32)).astype(np.float32)
    pitch = np.where(rng.random(n) > 0.2, rng.uniform(80, 300, n), 0.0).astype(np.float32)
    energy = rng.uniform(-7, 1, n).astype(np.float32)
    return text, pitch, energy


def test_decode_shape_and_floor(system):
    rng = np.random.default_rng(7)
    text, pitch, energy = _decoder_inputs(rng, n=160)
    s = ac.encode_style_acoustic(random_mel(rng), system)
    out = ac.decode_audio(text, pitch, energy, s, system)
    assert out.frames.shape == (160, 80)
    assert out.frames.min() >= FLOOR_DB


def test_decode_sensitivity(system):
    rng = np.random.default_rng(8)
    text, pitch, energy = _decoder_inputs(rng)
    s1 = ac.encode_style_acoustic(random_mel(rng), system)
    s2 = ac.encode_style_acoustic(random_mel(rng), system)
    base = ac.decode_audio(text, pitch, energy, s1, system)
    doubled = ac.decode_audio(text, pitch, energy + 1.0, s1, system)
    restyled = ac.decode_audio(text, pitch, energy, s2, system)
    assert not np.array_equal(base.frames, doubled.frames)
    assert not np.array_equal(base.frames, restyled.frames)


def test_decode_length_mismatch(system):
    rng = np.random.default_rng(9)
    text, pitch, energy = _decoder_inputs(rng)
    s = ac.encode_style_acoustic(random_mel(rng), system)
    with pytest.raises(InvalidArgumentError):
        ac.decode_audio(text, pitch[:-1], energy, s, system)


def test_decode_requires_acoustic_role(system):
    rng = np.random.default_rng(10)
    text, pitch, energy = _decoder_inputs(rng)
    s = ac.StyleVector(np.ones(32) / np.sqrt(32), ac.STYLE_ROLE_PROSODIC)
    with pytest.raises(InvalidArgumentError):
        ac.decode_audio(text, pitch, energy, s, system)


# --- reconstruction loss --------------------------------------------------


def test_reconstruction_loss_zero_on_identity():
    m = random_mel(np.random.default_rng(11))
    assert ac.reconstruction_loss(m, m) == 0.0


def test_reconstruction_loss_constant_offset():
    m = random_mel(np.random.default_rng(12))
    shifted = MelSpectrogram(m.frames + 1.0)
    assert abs(ac.reconstruction_loss(shifted, m) - 1.0) < 1e-6


def test_reconstruction_loss_matches_scalar_loop():
    rng = np.random.default_rng(13)
    a = rng.normal(size=(9, 11))
    b = rng.normal(size=(9, 11))
    expected = 0.0
    for i in range(9):
        for j in range(11):
            expected += abs(a[i, j] - b[i, j])
    expected /= 99
    assert abs(ac.reconstruction_loss(a, b) - expected) < 1e-7


def test_reconstruction_loss_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        ac.reconstruction_loss(np.zeros((3, 4)), np.zeros((4, 3)))


# --- params hash ----------------------------------------------------------


def test_params_hash_stable_and_sensitive(system):
    h1 = ac.params_hash(system)
    h2 = ac.params_hash(system)
    assert h1 == h2
    with torch.no_grad():
        system.decoder.out.bias[0] += 1e-6
    try:
        assert ac.params_hash(system) != h1
    finally:
        with torch.no_grad():
            system.decoder.out.bias[0] -= 1e-6


def test_params_hash_differs_between_inits():
    torch.manual_seed(1)
    other = ac.AcousticSystem(CFG)
    torch.manual_seed(2)
    another = ac.AcousticSystem(CFG)
    assert ac.params_hash(other) != ac.params_hash(another)
