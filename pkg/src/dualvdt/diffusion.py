"""Discrete variance-preserving noise process on the latent space.

Step indices run ``1..N``; index 0 is the clean latent.  The transition is
``z_i = sqrt(1 - s_i) z_{i-1} + sqrt(s_i) eps`` with ``s_i = sigma_sq[i]``,
so the marginal coefficient is ``alpha_bar_i = prod_{j<=i} (1 - s_j)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import DTYPE, Rng

CONVENTIONS = ("ddpm", "variance-product")


@dataclass(frozen=True)
class NoiseSchedule:
    N: int
    sigma_sq_min: float
    sigma_sq_max: float
    convention: str = "ddpm"
    interpolation: str = "linear"

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"schedule needs N >= 1, got {self.N}")
        if not (0.0 < self.sigma_sq_min < self.sigma_sq_max < 1.0):
            raise ValueError(
                f"schedule bounds must satisfy 0 < min < max < 1, got min={self.sigma_sq_min}, max={self.sigma_sq_max}"
            )
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown convention {self.convention!r}")
        if self.interpolation != "linear":
            raise ValueError(f"unknown interpolation {self.interpolation!r}")
        if self.N == 1:
            s = np.array([self.sigma_sq_min])
        else:
            s = np.linspace(self.sigma_sq_min, self.sigma_sq_max, self.N)
        if self.convention == "ddpm":
            ab = np.cumprod(1.0 - s)
        else:
            # literal product of the variances; kept only to show how it departs
            ab = np.cumprod(s)
        # float64 can collapse neighbours (tight bounds, huge N) or round 1 - s to 1
        if np.any(np.diff(s) <= 0) or np.any(np.diff(ab) >= 0) or not (0 < ab[-1] and ab[0] < 1):
            raise ValueError(
                f"schedule N={self.N}, min={self.sigma_sq_min}, max={self.sigma_sq_max} is not strictly monotone in float64"
            )
        object.__setattr__(self, "_sigma_sq", torch.from_numpy(s).to(DTYPE))
        object.__setattr__(self, "_alpha_bar", torch.from_numpy(ab).to(DTYPE))

    @property
    def sigma_sq(self) -> torch.Tensor:
        return self._sigma_sq

    @property
    def alpha_bar(self) -> torch.Tensor:
        return self._alpha_bar

    @property
    def weights(self) -> torch.Tensor:
        return 1.0 - self._alpha_bar

    def _check(self, i):
        ii = torch.as_tensor(i)
        if bool(((ii < 1) | (ii > self.N)).any()):
            raise IndexError(f"step index out of range 1..{self.N}: {i}")
        return ii.long() - 1

    def beta(self, i) -> torch.Tensor:
        return self._sigma_sq[self._check(i)]

    def abar(self, i) -> torch.Tensor:
        return self._alpha_bar[self._check(i)]

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "sigma_sq_min": self.sigma_sq_min,
            "sigma_sq_max": self.sigma_sq_max,
            "interpolation": self.interpolation,
            "convention": self.convention,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(int(d["N"]), float(d["sigma_sq_min"]), float(d["sigma_sq_max"]), d.get("convention", "ddpm"),
                   d.get("interpolation", "linear"))


def make_schedule(N: int = 50, sigma_sq_min: float = 1e-4, sigma_sq_max: float = 0.02, convention: str = "ddpm"):
    return NoiseSchedule(N, sigma_sq_min, sigma_sq_max, convention)


def _col(v, like):
    """Broadcast a per-sample (B,) tensor against a (B, k) latent."""
    v = torch.as_tensor(v, dtype=like.dtype)
    return v.reshape(v.shape + (1,) * (like.dim() - v.dim())) if v.dim() else v


def perturb_step(z_prev, i, schedule: NoiseSchedule, rng: Rng | None = None, eps=None):
    beta = _col(schedule.beta(i), z_prev)
    if eps is None:
        eps = rng.normal(z_prev.shape)
    return torch.sqrt(1 - beta) * z_prev + torch.sqrt(beta) * eps


def perturb_marginal(z0, i, schedule: NoiseSchedule, rng: Rng | None = None, eps=None):
    """Single-shot draw from ``q(z_i | z_0)``; returns ``(z_i, eps)``."""
    ab = _col(schedule.abar(i), z0)
    if eps is None:
        eps = rng.normal(z0.shape)
    return torch.sqrt(ab) * z0 + torch.sqrt(1 - ab) * eps, eps


def closed_form_score(z_i, z0, i, schedule: NoiseSchedule):
    ab = _col(schedule.abar(i), z_i)
    return -(z_i - torch.sqrt(ab) * z0) / (1 - ab)


# ---------------------------------------------------------------------------
# Score networks
# ---------------------------------------------------------------------------


def step_embedding(i, dim: int = 16) -> torch.Tensor:
    """Sinusoidal embedding of integer step indices, shape (B, dim)."""
    i = torch.as_tensor(i, dtype=DTYPE).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=DTYPE) / half)
    ang = i[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class FCScore(nn.Module):
    def __init__(self, k: int, width: int = 128, emb: int = 16):
        super().__init__()
        self.emb = emb
        self.net = nn.Sequential(
            nn.Linear(k + emb, width, dtype=DTYPE),
            nn.SiLU(),
            nn.Linear(width, width, dtype=DTYPE),
            nn.SiLU(),
            nn.Linear(width, k, dtype=DTYPE),
        )

    def forward(self, z, i):
        e = step_embedding(i, self.emb).expand(z.shape[0], -1)
        return self.net(torch.cat([z, e], dim=-1))


class CNNScore(nn.Module):
    """Three 1-D convolutions over the latent read as a length-k signal."""

    def __init__(self, k: int, channels: int = 32, emb: int = 16):
        super().__init__()
        self.emb = emb
        self.c1 = nn.Conv1d(1, channels, 3, padding=1, dtype=DTYPE)
        self.t1 = nn.Linear(emb, channels, dtype=DTYPE)
        self.c2 = nn.Conv1d(channels, channels, 3, padding=1, dtype=DTYPE)
        self.c3 = nn.Conv1d(channels, 1, 3, padding=1, dtype=DTYPE)
        self.act = nn.SiLU()

    def forward(self, z, i):
        e = step_embedding(i, self.emb).expand(z.shape[0], -1)
        h = self.act(self.c1(z.unsqueeze(1)) + self.t1(e).unsqueeze(-1))
        h = self.act(self.c2(h))
        return self.c3(h).squeeze(1)


def make_score_model(kind: str, k: int) -> nn.Module:
    if kind == "FC":
        return FCScore(k)
    if kind == "CNN":
        return CNNScore(k)
    raise ValueError(f"unknown score model {kind!r}; expected FC or CNN")


def as_score_fn(model, schedule: NoiseSchedule | None = None):
    """Wrap a score network (or any callable) as ``f(z, i)`` accepting int or per-sample steps.

    With a schedule the raw output is divided by ``sqrt(1 - abar_i)``, so the
    network only has to produce O(1) values while the true score grows like
    the inverse noise scale at small i.
    """

    def fn(z, i):
        if isinstance(i, int):
            i = torch.full((z.shape[0],), i, dtype=torch.long)
        out = model(z, i)
        if schedule is not None:
            out = out / torch.sqrt(1 - _col(schedule.abar(i), out))
        return out

    return fn


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def dsm_loss(score_fn, z0, schedule: NoiseSchedule, rng: Rng, mode: str = "score", steps=None, eps=None):
    """Weighted denoising score matching, averaged over the batch.

    ``score`` mode: ``(1 - abar_i) * ||s(z_i, i) - grad log q(z_i | z_0)||^2``.
    ``eps`` mode: ``w_i / 2 * ||eps - eps_hat||^2`` with ``w_i = beta_i / (1 - abar_i)``
    and ``eps_hat = -sqrt(1 - abar_i) * s``.  Steps are uniform on 1..N
    unless given.
    """
    if z0.dim() != 2 or z0.shape[0] == 0:
        raise ValueError("dsm_loss: expected a non-empty (batch, k) latent")
    B = z0.shape[0]
    if steps is None:
        steps = torch.from_numpy(rng.integers(1, schedule.N + 1, size=B))
    steps = torch.as_tensor(steps).long()
    if steps.dim() == 0:
        steps = steps.expand(B)
    z_i, eps = perturb_marginal(z0, steps, schedule, rng, eps)
    s = score_fn(z_i, steps)
    ab = _col(schedule.abar(steps), z0)
    if mode == "score":
        target = closed_form_score(z_i, z0, steps, schedule)
        per = (1 - ab).squeeze(-1) * ((s - target) ** 2).sum(-1)
    elif mode == "eps":
        w = (_col(schedule.beta(steps), z0) / (1 - ab)).squeeze(-1)
        eps_hat = -torch.sqrt(1 - ab) * s
        per = 0.5 * w * ((eps - eps_hat) ** 2).sum(-1)
    else:
        raise ValueError(f"unknown dsm mode {mode!r}")
    return per.mean()


def prior_entropy_offset(k: int, sigma0_sq: float = 1.0) -> float:
    """The ``k/2 log(2 pi e sigma0^2)`` constant reported next to the score term."""
    return 0.5 * k * math.log(2 * math.pi * math.e * sigma0_sq)


def dsm_esm_gap(score_fn, prior_mean, prior_var: float, schedule: NoiseSchedule, rng: Rng, trials: int):
    """Monte-Carlo estimate of (denoising - explicit) score-matching objectives.

    The data prior is ``N(prior_mean, prior_var I)`` so the marginal score of
    ``q(z_i)`` is exact.  Returns ``(gap, standard_error)``.
    """
    if prior_var <= 0:
        raise ValueError("dsm_esm_gap: prior variance must be positive")
    m = torch.as_tensor(prior_mean, dtype=DTYPE).reshape(1, -1)
    k = m.shape[1]
    steps = torch.from_numpy(rng.integers(1, schedule.N + 1, size=trials))
    z0 = m + math.sqrt(prior_var) * rng.normal((trials, k))
    z_i, _ = perturb_marginal(z0, steps, schedule, rng)
    ab = _col(schedule.abar(steps), z0)
    with torch.no_grad():
        s = score_fn(z_i, steps)
    cond = closed_form_score(z_i, z0, steps, schedule)
    marg = -(z_i - torch.sqrt(ab) * m) / (ab * prior_var + 1 - ab)
    w = (1 - ab).squeeze(-1)
    diff = w * (((s - cond) ** 2).sum(-1) - ((s - marg) ** 2).sum(-1))
    return float(diff.mean()), float(diff.std(unbiased=True) / math.sqrt(trials))
