import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pydantic import ValidationError as PydanticValidationError

from conftest import random_latent, random_mask
from pnpmix.blending import (
    BlendConfig,
    LatentBank,
    background_dilution_legacy,
    background_dilution_pp,
    clone_background,
    mix_noise,
    resynthesize_ref_noise,
)
from pnpmix.errors import DimensionError, ParameterError
from pnpmix.masks import MaskSet
from pnpmix.tensor import BinaryMask, LatentTensor


def random_maskset(rng, shape, n):
    labels = rng.integers(0, n + 1, size=shape)
    labels[0, : n + 1] = np.arange(n + 1)
    return MaskSet.from_objects([BinaryMask(labels == i) for i in range(1, n + 1)])


def test_mix_noise_example():
    ms = MaskSet.from_objects([BinaryMask([[0, 1], [1, 0]])])
    out = mix_noise(LatentTensor.full((1, 2, 2), 1.0), [LatentTensor.full((1, 2, 2), 2.0)], ms)
    assert_array_equal(out.data, [[[1, 2], [2, 1]]])


@pytest.mark.parametrize("seed", range(100))
def test_mix_noise_matches_pixel_loop(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    ms = random_maskset(rng, (5, 6), n)
    back = random_latent(rng, (2, 5, 6))
    refs = [random_latent(rng, (2, 5, 6)) for _ in range(n)]
    out = mix_noise(back, refs, ms)
    expected = np.empty((2, 5, 6), dtype=np.float32)
    for r in range(5):
        for c in range(6):
            k = ms.label_map[r, c]
            expected[:, r, c] = back.data[:, r, c] if k == 0 else refs[k - 1].data[:, r, c]
    assert out.bit_equal(LatentTensor(expected))


def test_mix_noise_errors():
    ms = MaskSet.from_objects([BinaryMask([[1, 0]])])
    one = LatentTensor.zeros(1, 1, 2)
    with pytest.raises(ParameterError):
        mix_noise(one, [], ms)
    with pytest.raises(ParameterError):
        mix_noise(one, [one, one], ms)
    with pytest.raises(ParameterError):
        mix_noise(one, [LatentTensor.zeros(2, 1, 2)], ms)
    with pytest.raises(ParameterError):
        mix_noise(LatentTensor.zeros(1, 2, 2), [LatentTensor.zeros(1, 2, 2)], ms)


def test_resynthesize_ref_noise():
    rng = np.random.default_rng(1)
    ref, back = random_latent(rng, (3, 4, 4)), random_latent(rng, (3, 4, 4))
    m = random_mask(rng, (4, 4))
    out = resynthesize_ref_noise(ref, back, m)
    assert_array_equal(out.data[:, m.bits], ref.data[:, m.bits])
    assert_array_equal(out.data[:, ~m.bits], back.data[:, ~m.bits])
    with pytest.raises(DimensionError):
        resynthesize_ref_noise(ref, LatentTensor.zeros(3, 4, 5), m)


def test_dilution_example():
    z_inpaint = LatentTensor(np.array([[[4.0, 4.0]]]))
    z_ref = LatentTensor(np.array([[[1.0, 2.0]]]))
    m_e = BinaryMask([[1, 0]])
    out = background_dilution_pp(z_inpaint, z_ref, m_e, 0.8)
    assert_allclose(out.data, [[[1.0, 3.2]]], rtol=1e-6)
    convex = background_dilution_pp(z_inpaint, z_ref, m_e, 0.8, convex=True)
    assert_allclose(convex.data, [[[1.0, 0.8 * 4 + 0.2 * 2]]], rtol=1e-6)


@pytest.mark.parametrize("seed", range(100))
def test_dilution_matches_pixel_loop(seed):
    rng = np.random.default_rng(seed)
    bg, ref = random_latent(rng, (2, 4, 5)), random_latent(rng, (2, 4, 5))
    m_e = random_mask(rng, (4, 5))
    beta = float(rng.uniform(0, 1))
    expected = np.where(m_e.bits[None], ref.data, np.float32(beta) * bg.data)
    assert_array_equal(background_dilution_pp(bg, ref, m_e, beta).data, expected)
    assert_array_equal(background_dilution_legacy(bg, ref, m_e, beta).data, expected)


def test_dilution_edge_values():
    rng = np.random.default_rng(2)
    bg, ref = random_latent(rng, (1, 3, 3)), random_latent(rng, (1, 3, 3))
    m_e = random_mask(rng, (3, 3))
    assert background_dilution_pp(bg, ref, BinaryMask.ones(3, 3), 0.3).bit_equal(ref)
    outside = background_dilution_pp(bg, ref, m_e, 0.0).data[:, ~m_e.bits]
    assert_array_equal(outside, 0.0)
    assert background_dilution_pp(bg, ref, BinaryMask.zeros(3, 3), 1.0).bit_equal(bg)
    with pytest.raises(ParameterError):
        background_dilution_pp(bg, ref, m_e, 1.5)
    with pytest.raises(DimensionError):
        background_dilution_pp(bg, LatentTensor.zeros(2, 3, 3), m_e, 0.5)


def test_clone_background():
    z = random_latent(np.random.default_rng(3), (1, 2, 2))
    out, refs = clone_background(z, 3)
    assert len(refs) == 3
    assert all(r.bit_equal(z) for r in [out, *refs])
    assert len({id(r.data) for r in [out, *refs]}) == 4
    with pytest.raises(ParameterError):
        clone_background(z, 0)


def test_latent_bank_checks_shapes():
    z = LatentTensor.zeros(1, 2, 2)
    bank = LatentBank(z, [z, z], z, z, [z, z], t=5)
    assert bank.n == 2
    with pytest.raises(DimensionError):
        LatentBank(z, [z], z, LatentTensor.zeros(1, 2, 3), [z], t=5)
    with pytest.raises(ParameterError):
        LatentBank(z, [z, z], z, z, [z], t=5)


def test_blend_config():
    cfg = BlendConfig()
    assert (cfg.alpha, cfg.beta) == (0.15, 0.8)
    assert cfg.dilution == "pp"
    assert BlendConfig(value_guidance=False).effective_alpha == 0.0
    assert BlendConfig(dilution_pp=False, dilution_legacy=True).dilution == "legacy"
    assert BlendConfig(dilution_pp=False).dilution is None
    for bad in (
        {"alpha": -0.1},
        {"alpha": float("inf")},
        {"beta": 1.2},
        {"me_margin": -1},
        {"dilution_legacy": True},
    ):
        with pytest.raises(PydanticValidationError):
            BlendConfig(**bad)


def test_blend_config_warns_on_large_alpha(caplog):
    BlendConfig(alpha=3.0)
    assert "guidance range" in caplog.text
