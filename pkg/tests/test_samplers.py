import csv
import math

import pytest
import torch

from dualvdt.core import Rng
from dualvdt.diffusion import NoiseSchedule, make_schedule
from dualvdt.samplers import (
    SamplerSpec,
    ancestral_step,
    probability_flow_step,
    reverse_sde_step,
    sample_prior,
    write_trajectory_csv,
)
from oracles import gaussian_score, propagated_moments


def zero_score(z, i):
    return torch.zeros_like(z)


def tensor(x):
    return torch.tensor(x, dtype=torch.float64)


# --- ancestral -------------------------------------------------------------------


def test_ancestral_identity_limit():
    s = NoiseSchedule(3, 1e-14, 2e-14)
    z = Rng(0).normal((5, 2))
    out = ancestral_step(z, 2, zero_score, s, Rng(1))
    assert torch.max(torch.abs(out - z)).item() < 1e-6


def test_ancestral_plug_in_mean():
    s = make_schedule(1, 0.19, 0.5)
    out = ancestral_step(tensor([[0.9]]), 1, lambda z, i: torch.full_like(z, -1.0), s)
    assert math.isclose(out.item(), 0.71 / 0.9, rel_tol=1e-14)


def test_ancestral_mean_then_noise():
    s = make_schedule(5, 0.1, 0.3)
    z = tensor([[0.4, -1.0]])
    e = tensor([[0.5, 2.0]])
    beta = s.beta(3).item()
    expected = z / math.sqrt(1 - beta) + math.sqrt(beta) * e
    assert torch.allclose(ancestral_step(z, 3, zero_score, s, eps=e), expected, rtol=1e-14)


def test_final_ancestral_step_is_noise_free():
    s = make_schedule(5, 0.1, 0.3)
    z1 = tensor([[0.3, -0.2]]).expand(1000, 2)
    fn = gaussian_score([0.0, 1.0], [1.0, 1.0], s)
    out = ancestral_step(z1, 1, fn, s, Rng(3))
    assert torch.var(out, dim=0).max().item() == 0.0


def test_one_ancestral_step_moves_between_marginals():
    s = make_schedule(20, 1e-3, 0.2)
    m, v = tensor([0.5, -1.0]), tensor([0.5, 2.0])
    i = 12
    ab = s.abar(i)
    rng = Rng(4)
    z = torch.sqrt(ab) * m + torch.sqrt(ab * v + 1 - ab) * rng.normal((10_000, 2))
    out = ancestral_step(z, i, gaussian_score(m, v, s), s, rng)
    ab_prev = s.abar(i - 1)
    mean_t = torch.sqrt(ab_prev) * m
    var_t = ab_prev * v + 1 - ab_prev
    n = out.shape[0]
    assert torch.all(torch.abs(out.mean(0) - mean_t) < 3 * torch.sqrt(var_t / n))
    var_se = var_t * math.sqrt(2 / (n - 1))
    assert torch.all(torch.abs(out.var(0) - var_t) < 3 * var_se)


def test_index_out_of_range():
    s = make_schedule(5)
    z = torch.zeros(1, 1, dtype=torch.float64)
    for step in (ancestral_step, reverse_sde_step):
        with pytest.raises(IndexError):
            step(z, 0, zero_score, s, Rng(0))
    with pytest.raises(IndexError):
        probability_flow_step(z, 6, zero_score, s)


# --- reverse SDE / probability flow ----------------------------------------------


def test_reverse_sde_without_noise_contracts_by_drift():
    s = make_schedule(5, 0.1, 0.3)
    z = tensor([[1.0, -2.0]])
    beta = s.beta(4).item()
    out = reverse_sde_step(z, 4, zero_score, s, sub_steps=4, eps=torch.zeros(4, 1, 2, dtype=torch.float64))
    assert torch.allclose(out, z * (1 + beta / 8) ** 4, rtol=1e-14)


def test_reverse_sde_minus_flow_is_half_score_term():
    s = make_schedule(5, 0.1, 0.3)
    z = Rng(5).normal((6, 3))
    fn = gaussian_score([0.1, 0.2, 0.3], [1.0, 0.5, 2.0], s)
    sde = reverse_sde_step(z, 3, fn, s, sub_steps=1, eps=torch.zeros(1, 6, 3, dtype=torch.float64))
    flow = probability_flow_step(z, 3, fn, s)
    assert torch.allclose(sde - flow, 0.5 * s.beta(3) * fn(z, 3), atol=1e-15)


def test_sub_steps_validated():
    s = make_schedule(5)
    z = torch.zeros(1, 1, dtype=torch.float64)
    with pytest.raises(ValueError):
        reverse_sde_step(z, 1, zero_score, s, Rng(0), sub_steps=0)
    with pytest.raises(ValueError):
        probability_flow_step(z, 1, zero_score, s, sub_steps=0)
    with pytest.raises(ValueError):
        SamplerSpec("PF", sub_steps=0)
    with pytest.raises(ValueError):
        SamplerSpec("XX")


def test_flow_identity_with_zero_schedule_and_score():
    s = NoiseSchedule(3, 1e-15, 2e-15)
    z = Rng(6).normal((4, 2))
    assert torch.max(torch.abs(probability_flow_step(z, 2, zero_score, s) - z)).item() < 1e-12


def test_flow_is_deterministic_and_draws_nothing():
    s = make_schedule(30, 1e-3, 0.2)
    fn = gaussian_score([1.0], [0.5], s)
    init = Rng(7).normal((100, 1))
    rng = Rng(8)
    a = sample_prior(fn, s, SamplerSpec("PF", sub_steps=4), rng, init=init)
    # an untouched stream yields the same next draw as a fresh one
    assert torch.equal(rng.normal(8), Rng(8).normal(8))
    b = sample_prior(fn, s, SamplerSpec("PF", sub_steps=4), Rng(99), init=init)
    assert torch.equal(a, b)


def test_flow_recovers_one_dim_gaussian():
    s = make_schedule(1000, 1e-4, 0.02)
    fn = gaussian_score([0.7], [0.3], s)
    z = sample_prior(fn, s, SamplerSpec("PF", sub_steps=8), Rng(10), 10_000, k=1)
    assert abs(z.mean().item() - 0.7) < 0.05
    assert abs(z.std().item() - math.sqrt(0.3)) < 0.05


@pytest.mark.parametrize("kind", ["PF", "RD"])
@pytest.mark.parametrize("sub", [1, 8])
def test_sampler_matches_propagated_moments(kind, sub):
    s = make_schedule(40, 1e-3, 0.4)
    mean, var = tensor([1.5, -1.0]), tensor([0.2, 0.5])
    n = 20_000
    z = sample_prior(gaussian_score(mean, var, s), s, SamplerSpec(kind, sub_steps=sub), Rng(11), n, k=2)
    mu, v = propagated_moments(kind, sub, s, mean, var)
    assert torch.all(torch.abs(z.mean(0) - mu) < 3 * torch.sqrt(v / n))
    assert torch.all(torch.abs(z.var(0) - v) < 3 * v * math.sqrt(2 / (n - 1)))


@pytest.mark.parametrize("kind", ["PF", "RD"])
def test_integration_error_nonincreasing_in_sub_steps(kind):
    # error against the refined (256 sub-step) limit of the same chain; the gap between
    # that limit and the target comes from the discrete vs continuous schedule reading
    s = make_schedule(40, 1e-3, 0.4)
    mean, var = tensor([1.5, -1.0]), tensor([0.2, 0.5])
    ref_mu, ref_v = propagated_moments(kind, 256, s, mean, var)
    errs = []
    for sub in (1, 2, 4, 8):
        mu, v = propagated_moments(kind, sub, s, mean, var)
        errs.append((torch.abs(mu - ref_mu).sum() + torch.abs(v - ref_v).sum()).item())
    assert all(b < a for a, b in zip(errs, errs[1:])), errs


# --- chain driver ----------------------------------------------------------------


def test_single_step_chain_is_a_rescaling():
    s = make_schedule(1, 0.3, 0.5)
    rng = Rng(12)
    init = Rng(12).normal((5, 3))
    out = sample_prior(zero_score, s, SamplerSpec("AS"), rng, 5, k=3)
    assert torch.allclose(out, init / math.sqrt(0.7), rtol=1e-14)


def test_start_index_controls_chain_length():
    s = make_schedule(10)
    traj = []
    sample_prior(zero_score, s, SamplerSpec("PF", steps=4), Rng(0), 2, k=3, trajectory=traj)
    assert [step for step, _ in traj] == [4, 3, 2, 1, 0]
    with pytest.raises(IndexError):
        sample_prior(zero_score, s, SamplerSpec("PF", steps=11), Rng(0), 2, k=3)


def test_chain_needs_dimension_or_init():
    with pytest.raises(ValueError):
        sample_prior(zero_score, make_schedule(3), SamplerSpec(), Rng(0), 2)


def test_chain_from_given_initial_latent():
    s = make_schedule(5)
    init = Rng(1).normal((3, 2))
    out = sample_prior(zero_score, s, SamplerSpec("PF"), Rng(0), init=init)
    expected = init * torch.prod(1 + 0.5 * s.sigma_sq)
    assert torch.allclose(out, expected, rtol=1e-13)


def test_trajectory_csv(tmp_path):
    s = make_schedule(3)
    traj = []
    sample_prior(zero_score, s, SamplerSpec("AS"), Rng(0), 2, k=2, trajectory=traj)
    write_trajectory_csv(tmp_path / "t.csv", traj)
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["sample_id", "step", "z0", "z1"]
    assert len(rows) == 1 + 4 * 2
    assert float(rows[-1][2]) == traj[-1][1][1, 0].item()


def test_spec_round_trip():
    spec = SamplerSpec("RD", 20, 8)
    assert SamplerSpec(**spec.to_dict()) == spec
