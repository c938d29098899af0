import cmath
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from mbmamba.errors import ConfigError, NumericError
from mbmamba.gradcheck import check_losses, run_gradcheck
from mbmamba.losses import (NEIGHBORHOODS, LossWeights, charbonnier_loss, edge_loss,
                            frequency_loss, ising_loss, ising_loss_oracle, laplacian, total_loss)


# ---------------------------------------------------------------- Ising

def test_ising_constant_image_is_zero():
    for nb in NEIGHBORHOODS:
        assert ising_loss(torch.full((3, 7, 5), 0.37), nb).item() == 0.0


def test_ising_single_pair():
    # one unordered pair counted from both ends: 2 * |1 - 0| / (1 * 1 * 2)
    img = torch.tensor([[[0.0, 1.0]]], dtype=torch.float64)
    assert ising_loss(img).item() == 1.0
    assert ising_loss_oracle(img) == 1.0


def test_ising_checkerboard_four_connected():
    img = torch.tensor([[[0.0, 1.0], [1.0, 0.0]]], dtype=torch.float64)
    assert abs(ising_loss(img, "four_connected").item() - 2.0) < 1e-9
    assert abs(ising_loss_oracle(img, "four_connected") - 2.0) < 1e-9


def test_ising_checkerboard_eight_connected_diagonals_agree():
    # diagonals pair equal values, so they add nothing
    img = torch.tensor([[[0.0, 1.0], [1.0, 0.0]]], dtype=torch.float64)
    assert ising_loss(img, "eight_connected").item() == pytest.approx(2.0, abs=1e-12)


def test_ising_single_pixel_has_no_neighbours():
    assert ising_loss(torch.rand(3, 1, 1)).item() == 0.0


@pytest.mark.parametrize("nb", NEIGHBORHOODS)
def test_ising_matches_loop_oracle(nb):
    rng = np.random.default_rng(11)
    for _ in range(20):
        c, h, w = rng.integers(1, 4), rng.integers(1, 17), rng.integers(1, 17)
        img = torch.from_numpy(rng.random((c, h, w)))
        got = ising_loss(img, nb).item()
        want = ising_loss_oracle(img, nb)
        assert got == pytest.approx(want, rel=1e-6, abs=1e-12)


def test_ising_batched_is_mean_of_samples():
    x = torch.rand(3, 2, 6, 5, dtype=torch.float64)
    per = [ising_loss(s).item() for s in x]
    assert ising_loss(x).item() == pytest.approx(np.mean(per), rel=1e-12)


@given(st.floats(-5, 5), st.floats(0.1, 10))
def test_ising_affine_behaviour(shift, scale):
    x = torch.rand(2, 5, 4, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    base = ising_loss(x).item()
    assert ising_loss(x + shift).item() == pytest.approx(base, rel=1e-9)
    assert ising_loss(scale * x).item() == pytest.approx(scale * base, rel=1e-9)
    assert base >= 0


def test_ising_rejects_nonfinite_and_unknown_neighbourhood():
    x = torch.zeros(1, 3, 3)
    x[0, 1, 1] = float("inf")
    with pytest.raises(NumericError):
        ising_loss(x)
    with pytest.raises(ConfigError):
        ising_loss(torch.zeros(1, 3, 3), "hexagonal")


# ---------------------------------------------------------------- reconstruction terms

def test_charbonnier_identical_is_epsilon():
    x = torch.rand(3, 4, 4, dtype=torch.float64)
    assert charbonnier_loss(x, x).item() == pytest.approx(1e-3, abs=1e-15)


def test_charbonnier_uniform_offset():
    x = torch.zeros(3, 4, 4, dtype=torch.float64)
    assert charbonnier_loss(x + 0.1, x).item() == pytest.approx(math.sqrt(0.01 + 1e-6), rel=1e-12)


def test_charbonnier_shape_mismatch():
    with pytest.raises(ConfigError):
        charbonnier_loss(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))


def laplacian_oracle(img: np.ndarray) -> np.ndarray:
    c, h, w = img.shape
    out = np.zeros_like(img)
    clamp = lambda v, n: min(max(v, 0), n - 1)  # noqa: E731
    for k in range(c):
        for i in range(h):
            for j in range(w):
                s = -4 * img[k, i, j]
                for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    s += img[k, clamp(i + di, h), clamp(j + dj, w)]
                out[k, i, j] = s
    return out


def test_laplacian_matches_replicate_loop():
    x = np.random.default_rng(2).random((2, 5, 6))
    got = laplacian(torch.from_numpy(x))[0].numpy()
    np.testing.assert_allclose(got, laplacian_oracle(x), rtol=1e-12, atol=1e-14)


def test_edge_loss_matches_loop_oracle():
    rng = np.random.default_rng(4)
    a, b = rng.random((3, 6, 6)), rng.random((3, 6, 6))
    d = laplacian_oracle(a) - laplacian_oracle(b)
    want = np.mean(np.sqrt(d ** 2 + 1e-6))
    assert edge_loss(torch.from_numpy(a), torch.from_numpy(b)).item() == pytest.approx(want, rel=1e-12)


def test_edge_loss_constant_images_is_epsilon():
    a, b = torch.full((3, 5, 5), 0.2), torch.full((3, 5, 5), 0.9)
    assert edge_loss(a, b).item() == pytest.approx(1e-3, rel=1e-6)


def test_frequency_loss_matches_naive_dft():
    rng = np.random.default_rng(5)
    a, b = rng.random((2, 4, 3)), rng.random((2, 4, 3))
    d = a - b
    c, h, w = d.shape
    acc = 0.0
    for k in range(c):
        for u in range(h):
            for v in range(w):
                z = sum(d[k, i, j] * cmath.exp(-2j * math.pi * (u * i / h + v * j / w))
                        for i in range(h) for j in range(w))
                acc += abs(z)
    want = acc / d.size
    got = frequency_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
    assert got == pytest.approx(want, rel=1e-12)


def test_frequency_loss_of_constant_offset():
    # only the DC coefficient is nonzero: |c| * H * W spread over H * W entries
    x = torch.rand(3, 8, 8, dtype=torch.float64)
    assert frequency_loss(x + 0.25, x).item() == pytest.approx(0.25, rel=1e-12)


def test_frequency_loss_is_symmetric():
    a, b = torch.rand(2, 3, 6, 6, dtype=torch.float64).unbind(0)
    assert frequency_loss(a, b).item() == pytest.approx(frequency_loss(b, a).item(), rel=1e-14)


# ---------------------------------------------------------------- total

def test_total_loss_identical_images():
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    rep = total_loss(x, x, LossWeights(ising_weight=0.0))
    assert abs(rep.total.item() - 0.00105) < 1e-9


def test_total_loss_report_is_weighted_sum():
    w = LossWeights(lambda_freq=0.3, delta_edge=0.2, ising_weight=0.7, neighborhood="eight_connected")
    a, b = torch.rand(2, 3, 8, 8, dtype=torch.float64).unbind(0)
    rep = total_loss(a, b, w)
    want = rep.charbonnier + 0.2 * rep.edge + 0.3 * rep.frequency + 0.7 * rep.ising
    assert rep.total.item() == pytest.approx(want.item(), rel=1e-14)
    assert set(rep.as_dict()) == {"total", "charbonnier", "edge", "frequency", "ising"}


@pytest.mark.parametrize("kw", [dict(epsilon=0.0), dict(lambda_freq=-1.0),
                                dict(ising_weight=float("nan")), dict(neighborhood="x")])
def test_loss_weights_validation(kw):
    with pytest.raises(ConfigError):
        LossWeights(**kw)


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_gradients(seed):
    rep = run_gradcheck("losses", seed)
    assert rep.passed, rep.summary()
    assert not any(e.skipped for e in rep.entries)


def test_ising_gradient_skipped_at_kink():
    pred = torch.rand(3, 8, 8, dtype=torch.float64)
    pred[0, 2, 3] = pred[0, 2, 4]
    entries = {e.name: e for e in check_losses(pred, torch.rand(3, 8, 8, dtype=torch.float64))}
    assert entries["ising[four_connected].pred"].skipped
    assert entries["ising[eight_connected].pred"].skipped
    assert not entries["charbonnier.pred"].skipped
