import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from eyesynth.losses import (
    LossInputError,
    LossWeights,
    cycle_loss,
    gaze_cycle_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    total_loss,
    weighted_objective,
)
from eyesynth.nets import freeze
from helpers import finite_difference_check

T = lambda *v: torch.tensor(v, dtype=torch.float64)  # noqa: E731


def close(a, b, tol=1e-9):
    return abs(float(a) - b) <= tol


def test_discriminator_examples():
    assert close(lsgan_discriminator_loss(T(0.9, 0.9), T(0.0, 0.0)), 0.0)
    assert close(lsgan_discriminator_loss(T(0.4), T(0.5)), 0.5)
    assert close(lsgan_discriminator_loss(T(1.0), T(0.0), real_label=1.0), 0.0)


def test_generator_examples():
    assert close(lsgan_generator_loss(T(0.9, 0.9, 0.9)), 0.0)
    assert close(lsgan_generator_loss(T(0.0)), 0.81)
    assert close(lsgan_generator_loss(T(0.9, 0.4)), 0.125)


def test_empty_scores_rejected():
    with pytest.raises(LossInputError):
        lsgan_discriminator_loss(T(), T(0.1))
    with pytest.raises(LossInputError):
        lsgan_generator_loss(T())


def test_cycle_examples():
    g = torch.Generator().manual_seed(0)
    s = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64)
    r = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64)
    assert close(cycle_loss(s, s, r, r), 0.0)
    assert close(cycle_loss(s, s + 0.1, r, r), 0.1)
    assert close(cycle_loss(s, s - 0.2, r, r + 0.3), 0.5)
    with pytest.raises(LossInputError):
        cycle_loss(s, s[:1], r, r)


class PixelProbe(torch.nn.Module):
    """Returns the RGB value of the top-left pixel."""

    def forward(self, x):
        return x[:, :, 0, 0]


def test_gaze_cycle_examples():
    E = PixelProbe()
    s = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    assert close(gaze_cycle_loss(E, s, s.clone()), 0.0)
    s_rec = s.clone()
    s_rec[0, 0, 0, 0] = 1.0
    assert close(gaze_cycle_loss(E, s, s_rec), 1.0)
    # mean over the batch: one differing sample out of two
    s2 = torch.zeros(2, 3, 4, 4, dtype=torch.float64)
    r2 = s2.clone()
    r2[1, 2, 0, 0] = 1.0
    assert close(gaze_cycle_loss(E, s2, r2), 0.5)


def test_gaze_cycle_frozen_contract():
    torch.manual_seed(0)
    E = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(48, 3)).double()
    s = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    s_rec = (s + 0.1).requires_grad_(True)
    with pytest.raises(LossInputError, match="frozen"):
        gaze_cycle_loss(E, s, s_rec)
    freeze(E)
    before = [p.clone() for p in E.parameters()]
    gaze_cycle_loss(E, s, s_rec).backward()
    assert all(p.grad is None for p in E.parameters())
    assert all(torch.equal(a, b) for a, b in zip(before, E.parameters()))
    assert s_rec.grad is not None and float(s_rec.grad.abs().sum()) > 0
    with pytest.raises(LossInputError):
        gaze_cycle_loss(E, s, s_rec[:1])


def test_total_loss_examples():
    assert close(total_loss(0, 0, 0, 0).total, 0.0)
    assert close(total_loss(0.5, 0.3, 0.2, 0.1).total, 1.1)
    b = total_loss(0.5, 0.3, 0.2, 0.1, LossWeights(gaze_cycle=0.0))
    assert close(b.total, 1.0) and b.gaze_cycle == 0.1
    zero = LossWeights(0, 0, 0, 0)
    assert total_loss(math.inf, 2.0, math.nan, 4.0, zero).total == 0.0
    with pytest.raises(ValueError):
        LossWeights(cycle=-1.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.lists(st.floats(0, 3), min_size=4, max_size=4))
def test_total_is_weighted_sum(components, weights):
    w = LossWeights(*weights)
    expected = sum(a * b for a, b in zip(components, weights))
    assert abs(total_loss(*components, w).total - expected) <= 1e-9 * max(1.0, abs(expected))


def test_permutation_invariance(rng):
    a = torch.from_numpy(rng.normal(size=7))
    b = torch.from_numpy(rng.normal(size=5))
    pa, pb = torch.randperm(7), torch.randperm(5)
    assert close(lsgan_discriminator_loss(a, b), float(lsgan_discriminator_loss(a[pa], b[pb])), 1e-12)
    assert close(lsgan_generator_loss(a), float(lsgan_generator_loss(a[pa])), 1e-12)
    s, sr, r, rr = (torch.from_numpy(rng.normal(size=(4, 3, 2, 2))) for _ in range(4))
    p = torch.randperm(4)
    assert close(cycle_loss(s, sr, r, rr), float(cycle_loss(s[p], sr[p], r[p], rr[p])), 1e-12)


def test_loss_gradients_match_finite_differences(rng):
    torch.manual_seed(1)
    fake = torch.from_numpy(rng.normal(size=24)).requires_grad_(True)
    true = torch.from_numpy(rng.normal(size=24)).requires_grad_(True)
    s = torch.from_numpy(rng.normal(size=(2, 3, 4, 4)))
    r = torch.from_numpy(rng.normal(size=(2, 3, 4, 4)))
    s_rec = torch.from_numpy(rng.normal(size=(2, 3, 4, 4))).requires_grad_(True)
    r_rec = torch.from_numpy(rng.normal(size=(2, 3, 4, 4))).requires_grad_(True)
    E = freeze(torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(48, 3)).double())
    checks = [
        (lambda: lsgan_discriminator_loss(true, fake), [true, fake]),
        (lambda: lsgan_generator_loss(fake), [fake]),
        (lambda: cycle_loss(s, s_rec, r, r_rec), [s_rec, r_rec]),
        (lambda: gaze_cycle_loss(E, s, s_rec), [s_rec]),
        (lambda: weighted_objective(lsgan_generator_loss(fake), lsgan_generator_loss(true),
                                    cycle_loss(s, s_rec, r, r_rec), gaze_cycle_loss(E, s, s_rec),
                                    LossWeights(0.5, 2.0, 1.5, 3.0)), [fake, true, s_rec, r_rec]),
    ]
    for fn, params in checks:
        errs = finite_difference_check(fn, params, n_samples=20)
        assert len(errs) == 20 and max(errs) <= 1e-3
