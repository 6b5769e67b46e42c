import numpy as np
import pytest

from toneflow import dsp, latents


def test_mel_latent_fixed_shape_and_padding():
    # a full-length clip fills all 256 frames; short clips pad with the floor
    full = dsp.Signal(0.1 * np.sin(np.linspace(0, 2000, 66304)))
    lat = latents.mel_latent(full)
    assert lat.shape == (16, 256)

    short = dsp.Signal(0.1 * np.sin(np.linspace(0, 1000, 32000)))
    lat_short = latents.mel_latent(short)
    assert lat_short.shape == (16, 256)
    assert np.allclose(lat_short[:, -5:], np.log(1e-10))


def test_token_round_trip_exact():
    rng = np.random.default_rng(0)
    lat = rng.normal(size=(16, 256))
    tokens = latents.tokens_from_latent(lat)
    assert tokens.shape == (64, 64)
    assert np.array_equal(latents.latent_from_tokens(tokens), lat)


def test_token_grouping_locality():
    # token i must hold bands x frames [4i, 4i+4)
    lat = np.zeros((16, 256))
    lat[3, 8] = 7.0  # frame 8 -> token 2
    tokens = latents.tokens_from_latent(lat)
    assert np.count_nonzero(tokens) == 1
    assert tokens[2].reshape(16, 4)[3, 0] == 7.0


def test_flow_space_round_trip():
    rng = np.random.default_rng(1)
    lat = rng.normal(size=(16, 256)) * 3 + 1
    tokens = latents.flow_tokens(lat)
    back = latents.latent_from_flow_tokens(tokens)
    assert np.max(np.abs(back - lat)) <= 1e-12


def test_flow_space_scale_is_sane():
    from toneflow import synth

    clip = synth.make_corpus(1, seed=3).clips[0]
    flow = latents.flow_tokens(clip.latent)
    assert np.abs(flow).max() < 5.0
    assert 0.3 < flow.std() < 3.0


def test_latent_file_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    arr = rng.normal(size=(16, 256))
    path = tmp_path / "x.lat"
    latents.save_latent(path, arr)
    assert np.array_equal(latents.load_latent(path), arr)


def test_latent_file_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.lat"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError, match="magic"):
        latents.load_latent(path)


def test_latent_file_rejects_truncation(tmp_path):
    path = tmp_path / "trunc.lat"
    latents.save_latent(path, np.ones((8, 8)))
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 16])
    with pytest.raises(ValueError, match="truncated"):
        latents.load_latent(path)
