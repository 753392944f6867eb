import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dckd.degradation import (DEFAULT_POLICY, KINDS, DegradationRanges, DegradationSpec, apply_blur, apply_noise,
                              apply_resize, apply_spec, sample_spec)
from dckd.errors import ParameterError


def blur_by_loops(img2d, sigma):
    """Oracle: explicit 2-D kernel and nested-loop convolution with reflect padding."""
    r = math.ceil(3 * sigma)
    k = np.array([[math.exp(-(i * i + j * j) / (2 * sigma**2)) for j in range(-r, r + 1)] for i in range(-r, r + 1)])
    k /= k.sum()
    h, w = img2d.shape
    pad = np.pad(img2d, r, mode="reflect")
    out = np.zeros_like(img2d)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for i in range(2 * r + 1):
                for j in range(2 * r + 1):
                    acc += k[i, j] * pad[y + i, x + j]
            out[y, x] = acc
    return out, k


def test_blur_impulse_center_weight():
    img = np.zeros((9, 9))
    img[4, 4] = 1.0
    expected, k = blur_by_loops(img, 1.0)
    out = apply_blur(torch.from_numpy(img).view(1, 1, 9, 9), 1.0)[0, 0].numpy()
    assert out[4, 4] == pytest.approx(k[3, 3], abs=1e-12)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_blur_matches_loop_oracle_on_random_image(rng):
    img = rng.uniform(size=(10, 12))
    expected, _ = blur_by_loops(img, 1.3)
    out = apply_blur(torch.from_numpy(img).view(1, 1, 10, 12), 1.3)[0, 0].numpy()
    np.testing.assert_allclose(out, np.clip(expected, 0, 1), atol=1e-12)


def test_blur_constant_and_small_sigma():
    c = torch.full((1, 3, 8, 8), 0.37, dtype=torch.float64)
    torch.testing.assert_close(apply_blur(c, 1.7), c, rtol=0, atol=1e-15)
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    torch.testing.assert_close(apply_blur(x, 1e-3), x, rtol=0, atol=1e-12)


def test_blur_rejects_nonpositive_sigma():
    with pytest.raises(ParameterError):
        apply_blur(torch.rand(1, 1, 4, 4), 0.0)


def test_noise_zero_sigma_identity():
    x = torch.rand(1, 3, 5, 5)
    assert torch.equal(apply_noise(x, 0.0, torch.Generator().manual_seed(0)), x)


def test_noise_statistics():
    # law of large numbers on 10^6 samples; clamping is negligible at 0.5 +- 10 sigma
    x = torch.full((1, 1, 1000, 1000), 0.5, dtype=torch.float64)
    d = apply_noise(x, 0.05, torch.Generator().manual_seed(7)) - x
    assert abs(d.mean().item()) < 1e-3
    assert d.std().item() == pytest.approx(0.05, rel=0.02)


def test_noise_seeded_determinism():
    x = torch.rand(2, 3, 8, 8)
    a = apply_spec(x, DegradationSpec("noise", 0.1, seed=11))
    b = apply_spec(x, DegradationSpec("noise", 0.1, seed=11))
    assert torch.equal(a, b)
    assert not torch.equal(a, apply_spec(x, DegradationSpec("noise", 0.1, seed=12)))


def test_resize_checkerboard_oracle():
    # scale 0.5 with half-pixel-centred bilinear sampling lands exactly between 4 pixels,
    # so each coarse pixel is the mean 0.5 and upsampling a constant stays constant
    y, x = np.mgrid[0:8, 0:8]
    board = torch.from_numpy(((x + y) % 2).astype(np.float64)).view(1, 1, 8, 8)
    out = apply_resize(board, 0.5)
    assert out.shape == board.shape
    torch.testing.assert_close(out, torch.full_like(board, 0.5), rtol=0, atol=1e-12)
    assert out.max() < board.max()


def test_resize_constant_and_errors():
    c = torch.full((1, 3, 9, 7), 0.25, dtype=torch.float64)
    torch.testing.assert_close(apply_resize(c, 0.6), c, rtol=0, atol=1e-15)
    with pytest.raises(ParameterError):
        apply_resize(c, 1.0)
    with pytest.raises(ParameterError):
        apply_resize(torch.rand(1, 1, 2, 2), 0.3)


@settings(max_examples=30, deadline=None)
@given(kind=st.sampled_from(KINDS), seed=st.integers(0, 2**31 - 2), h=st.integers(4, 12), w=st.integers(4, 12))
def test_operators_preserve_shape_and_range(kind, seed, h, w):
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.uniform(size=(1, 3, h, w)))
    spec = sample_spec(kind, rng)
    out = apply_spec(x, spec)
    assert out.shape == x.shape
    assert out.min() >= 0 and out.max() <= 1
    assert torch.equal(out, apply_spec(x, spec))


def test_sample_spec_policy_and_ranges(rng):
    ranges = DegradationRanges()
    for kind in KINDS:
        for _ in range(200):
            s = sample_spec(kind, rng)
            lo, hi = ranges.of(kind)
            assert s.kind == kind and lo <= s.value <= hi


def test_mix_frequencies(rng):
    counts = {k: 0 for k in KINDS}
    for _ in range(10_000):
        counts[sample_spec("mix", rng).kind] += 1
    for k in KINDS:
        assert abs(counts[k] / 10_000 - 1 / 3) < 0.02


def test_default_policy_is_noise():
    assert DEFAULT_POLICY == "noise"


def test_distinct_seeds_distinct_outputs(rng):
    x = torch.from_numpy(rng.uniform(0.2, 0.8, size=(1, 3, 8, 8)))
    for policy in ("noise", "blur", "resize", "mix"):
        outs = [apply_spec(x, sample_spec(policy, rng)) for _ in range(5)]
        for i in range(5):
            for j in range(i + 1, 5):
                assert not torch.equal(outs[i], outs[j])


def test_unknown_policy():
    with pytest.raises(ParameterError):
        sample_spec("jpeg", np.random.default_rng(0))
