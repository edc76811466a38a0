"""Reverse-time samplers for the latent diffusion prior.

AS is the ancestral chain, RD is Euler-Maruyama on the reverse SDE and PF the
Euler discretisation of the probability-flow ODE.  In the continuum reading
of the discrete schedule each diffusion step lasts one time unit with
``f = -beta_i / 2`` and ``g^2 = beta_i``.

``score_fn(z, i)`` takes a (B, k) latent and an integer step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import torch

from .core import Rng
from .diffusion import NoiseSchedule

KINDS = ("AS", "RD", "PF")


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "AS"
    steps: int | None = None  # starting index; None means the schedule's N
    sub_steps: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"sampler kind must be one of {KINDS}, got {self.kind!r}")
        if self.sub_steps < 1:
            raise ValueError(f"sub_steps must be >= 1, got {self.sub_steps}")
        if self.steps is not None and self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "steps": self.steps, "sub_steps": self.sub_steps}


def _check_index(i, schedule):
    if not 1 <= i <= schedule.N:
        raise IndexError(f"step index {i} outside 1..{schedule.N}")


def ancestral_step(z, i: int, score_fn, schedule: NoiseSchedule, rng: Rng | None = None, eps=None):
    """``(z + beta s(z, i)) / sqrt(1 - beta) + sqrt(beta) eps``; no noise at i = 1."""
    _check_index(i, schedule)
    beta = schedule.beta(i)
    mean = (z + beta * score_fn(z, i)) / torch.sqrt(1 - beta)
    if i == 1:
        return mean
    if eps is None:
        eps = rng.normal(z.shape)
    return mean + torch.sqrt(beta) * eps


def reverse_sde_step(z, i: int, score_fn, schedule: NoiseSchedule, rng: Rng | None = None, sub_steps: int = 1, eps=None):
    """Euler-Maruyama across one diffusion step, run backwards in time.

    Each sub-step: ``z += (beta/2 z + beta s) dt + sqrt(beta dt) eps``.
    ``eps`` may be given as a (sub_steps, B, k) tensor.
    """
    _check_index(i, schedule)
    if sub_steps < 1:
        raise ValueError(f"sub_steps must be >= 1, got {sub_steps}")
    beta = schedule.beta(i)
    dt = 1.0 / sub_steps
    for j in range(sub_steps):
        e = rng.normal(z.shape) if eps is None else eps[j]
        z = z + (0.5 * beta * z + beta * score_fn(z, i)) * dt + torch.sqrt(beta * dt) * e
    return z


def probability_flow_step(z, i: int, score_fn, schedule: NoiseSchedule, sub_steps: int = 1):
    """Deterministic Euler steps of ``dz = [f z - g^2/2 s] dt`` backwards in time."""
    _check_index(i, schedule)
    if sub_steps < 1:
        raise ValueError(f"sub_steps must be >= 1, got {sub_steps}")
    beta = schedule.beta(i)
    dt = 1.0 / sub_steps
    for _ in range(sub_steps):
        z = z + (0.5 * beta * z + 0.5 * beta * score_fn(z, i)) * dt
    return z


def sample_prior(score_fn, schedule: NoiseSchedule, spec: SamplerSpec, rng: Rng, count: int = 1,
                 k: int | None = None, init=None, trajectory: list | None = None):
    """Run the reverse chain from ``init`` (or ``N(0, I)``) down to step 0.

    The chain starts at index ``spec.steps`` (default N).  When ``trajectory``
    is a list, ``(step, z)`` pairs are appended for every visited state.
    """
    start = spec.steps or schedule.N
    _check_index(start, schedule)
    if init is None:
        if k is None:
            raise ValueError("sample_prior needs k or an initial latent")
        z = rng.normal((count, k))
    else:
        z = init
    if trajectory is not None:
        trajectory.append((start, z.detach().clone()))
    for i in range(start, 0, -1):
        if spec.kind == "AS":
            z = ancestral_step(z, i, score_fn, schedule, rng)
        elif spec.kind == "RD":
            z = reverse_sde_step(z, i, score_fn, schedule, rng, spec.sub_steps)
        else:
            z = probability_flow_step(z, i, score_fn, schedule, spec.sub_steps)
        if trajectory is not None:
            trajectory.append((i - 1, z.detach().clone()))
    return z


def write_trajectory_csv(path, trajectory) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        k = trajectory[0][1].shape[1]
        out.writerow(["sample_id", "step"] + [f"z{j}" for j in range(k)])
        for step, z in trajectory:
            for sid, row in enumerate(z.tolist()):
                out.writerow([sid, step] + [repr(v) for v in row])
