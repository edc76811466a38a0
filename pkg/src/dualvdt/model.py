"""DualVDT assembly: encoder posterior, diffusion prior, dual fusion, decoder.

Training objectives
-------------------
* score prior off (vanilla VAE): ``w_r * recon + w_p * KL(q(z|x) || N(0, I))``
* score prior on, dual off: ``w_r * recon + w_p * dsm`` with the decoder fed
  the posterior sample
* dual on: as above, but the decoder is fed the fused latent built from the
  posterior sample and the reverse-chain output

``recon`` is the unit-variance Gaussian negative log-likelihood of the
horizon ``y`` under the decoder mean, without its ``2 pi`` constant, i.e.
``0.5 * ||y - y_hat||^2``.  The one decoder serves training and forecasting.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import core
from .attention import AttentionBranch, Decoder, Encoder, EncoderConfig, PosteriorParams, _Tokens
from .core import DTYPE, Rng
from .data import NormStats, SeriesWindow, stack_windows
from .diffusion import NoiseSchedule, as_score_fn, dsm_loss, make_score_model, prior_entropy_offset
from .samplers import SamplerSpec, sample_prior

FORMAT_VERSION = 1
# fused-latent variance starts near softplus(-4) ~ 0.018 so the decoder sees a usable signal early
FUSION_SIGMA_BIAS = -4.0
MAGIC = b"DUALVDT-CKPT\n"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ModelConfig:
    n: int = 4
    T_x: int = 24
    T_y: int = 8
    latent_dim: int = 8
    encoder: str = "LT"
    score_model: str = "FC"
    dual: bool = True
    score_prior: bool = True
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    schedule: dict = field(default_factory=lambda: {"N": 50, "sigma_sq_min": 1e-4, "sigma_sq_max": 0.02})
    loss_weights: tuple = (1.0, 1.0)
    d_model: int = 64
    heads: int = 4
    blocks: int = 2
    hidden: int = 128
    fusion_hidden: int = 64
    scale_mode: str = "sqrt-d"
    fusion_step: int | None = None  # t*; None means N
    prior_start: str = "posterior"  # posterior | gaussian
    dsm_mode: str = "eps"  # the cross-entropy loss uses the eps-prediction weighting
    sigma0_sq: float = 1.0
    target_index: int = 0

    def __post_init__(self):
        if isinstance(self.sampler, dict):
            self.sampler = SamplerSpec(**self.sampler)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if self.dual and not self.score_prior:
            raise ValueError("dual fusion needs the score prior; set score_prior: true")
        if self.prior_start not in ("posterior", "gaussian"):
            raise ValueError(f"prior_start must be 'posterior' or 'gaussian', got {self.prior_start!r}")
        if not 0 <= self.target_index < self.n:
            raise ValueError(f"target_index {self.target_index} outside 0..{self.n - 1}")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.encoder, self.n, self.T_x, self.T_y, self.latent_dim, self.d_model,
                             self.heads, self.blocks, self.hidden, self.scale_mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampler"] = self.sampler.to_dict()
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0 or self.clip_norm <= 0:
            raise ValueError(f"invalid training config {self}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


@dataclass
class LossReport:
    recon: float = 0.0
    score: float = 0.0
    kl: float = 0.0
    total: float = 0.0
    offset: float = 0.0  # reported only; never optimised
    loss: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def row(self) -> dict:
        return {"recon": self.recon, "score": self.score, "kl": self.kl, "total": self.total}


@dataclass
class Metrics:
    mse: float
    mae: float
    mse_all: float
    mae_all: float
    n_windows: int


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


class FusionNets(nn.Module):
    """mu_f and the diagonal Sigma net, each latent -> latent with one hidden layer."""

    def __init__(self, k: int, hidden: int = 64, t_star: int = 1):
        super().__init__()
        self.mu_net = nn.Sequential(nn.Linear(k, hidden, dtype=DTYPE), nn.SiLU(), nn.Linear(hidden, k, dtype=DTYPE))
        self.sigma_net = nn.Sequential(nn.Linear(k, hidden, dtype=DTYPE), nn.SiLU(), nn.Linear(hidden, k, dtype=DTYPE))
        self.t_star = t_star

    def mu(self, s):
        return self.mu_net(s)

    def sigma(self, s):
        return torch.nn.functional.softplus(self.sigma_net(s)) + 1e-6


def dual_reparam_sample(z0_theta, z0_phi, fusion: FusionNets, schedule: NoiseSchedule, rng: Rng | None = None, eps=None):
    """Draw from ``N(mu_f(s), Sigma(s) / sqrt(1 - beta_t*))`` with ``s = z0_theta + z0_phi``."""
    if z0_theta.shape != z0_phi.shape:
        raise ValueError(f"latent shapes differ: {tuple(z0_theta.shape)} vs {tuple(z0_phi.shape)}")
    s = z0_theta + z0_phi
    scale = 1.0 / torch.sqrt(1 - schedule.beta(fusion.t_star))
    if eps is None:
        eps = rng.normal(s.shape)
    return fusion.mu(s) + torch.sqrt(scale * fusion.sigma(s)) * eps


class DualVDT(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: Rng | None = None):
        super().__init__()
        self.cfg = cfg
        ecfg = cfg.encoder_config()
        self.schedule = NoiseSchedule.from_dict(cfg.schedule)
        self.encoder = Encoder(ecfg)
        self.decoder = Decoder(ecfg)
        self.score = make_score_model(cfg.score_model, cfg.latent_dim) if cfg.score_prior else None
        self.fusion = (
            FusionNets(cfg.latent_dim, cfg.fusion_hidden, cfg.fusion_step or self.schedule.N) if cfg.dual else None
        )
        init_parameters(self, rng or Rng(0))

    @property
    def score_fn(self):
        return as_score_fn(self.score, self.schedule)

    def posterior_sample(self, post: PosteriorParams, rng: Rng):
        return post.mu + post.sigma * rng.normal(post.mu.shape)

    def prior_sample(self, z_phi, rng: Rng):
        init = z_phi if self.cfg.prior_start == "posterior" else None
        return sample_prior(self.score_fn, self.schedule, self.cfg.sampler, rng, z_phi.shape[0],
                            k=self.cfg.latent_dim, init=init)

    def latent(self, x, rng: Rng):
        """Decoder input for a batch of lookback windows, plus the posterior pieces."""
        post = self.encoder(x)
        z_phi = self.posterior_sample(post, rng)
        if not self.cfg.dual:
            return z_phi, post, z_phi
        z_theta = self.prior_sample(z_phi, rng)
        return dual_reparam_sample(z_theta, z_phi, self.fusion, self.schedule, rng), post, z_phi

    def loss(self, x, target, pad, rng: Rng) -> LossReport:
        if self.cfg.score_prior:
            return combined_loss(x, target, pad, self, rng)
        return elbo_vanilla(x, target, pad, self.encoder, self.decoder, rng, self.cfg.loss_weights)

    def forecast(self, x, rng: Rng):
        z, _, _ = self.latent(x, rng)
        return self.decoder(z)


def init_parameters(model: nn.Module, rng: Rng) -> None:
    """Deterministic initialisation drawn from ``rng`` in module registration order."""
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Linear):
                b = 1.0 / math.sqrt(m.in_features)
                m.weight.copy_(rng.uniform(m.weight.shape, -b, b))
                if m.bias is not None:
                    m.bias.copy_(rng.uniform(m.bias.shape, -b, b))
            elif isinstance(m, nn.Conv1d):
                b = 1.0 / math.sqrt(m.in_channels * m.kernel_size[0])
                m.weight.copy_(rng.uniform(m.weight.shape, -b, b))
                if m.bias is not None:
                    m.bias.copy_(rng.uniform(m.bias.shape, -b, b))
            elif isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)
            elif isinstance(m, AttentionBranch):
                b = 1.0 / math.sqrt(m.d)
                for p in (m.w_q, m.w_k, m.w_v):
                    p.copy_(rng.uniform(p.shape, -b, b))
            elif isinstance(m, _Tokens):
                m.time.copy_(0.5 * rng.normal(m.time.shape))
                m.var.copy_(0.5 * rng.normal(m.var.shape))
        for m in model.modules():
            if isinstance(m, FusionNets):
                m.sigma_net[-1].bias.fill_(FUSION_SIGMA_BIAS)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def recon_nll(pred, target, pad=None):
    """``0.5 * sum of squared errors`` per window (padded cells excluded), batch-averaged."""
    err = (target - pred) ** 2
    if pad is not None:
        err = err.masked_fill(pad, 0.0)
    return 0.5 * err.flatten(1).sum(-1).mean()


def gaussian_kl(mu, sigma):
    """Closed-form ``KL(N(mu, sigma^2) || N(0, I))`` summed over dims, batch-averaged."""
    return 0.5 * (mu**2 + sigma**2 - 1 - 2 * torch.log(sigma)).sum(-1).mean()


def elbo_vanilla(x, target, pad, encoder, decoder, rng: Rng, weights=(1.0, 1.0)) -> LossReport:
    """Negative ELBO of the plain VAE: reconstruction plus KL to the standard normal prior."""
    post = encoder(x)
    z = post.mu + post.sigma * rng.normal(post.mu.shape)
    recon = recon_nll(decoder(z), target, pad)
    kl = gaussian_kl(post.mu, post.sigma)
    total = weights[0] * recon + weights[1] * kl
    return LossReport(recon.item(), 0.0, kl.item(), total.item(), 0.0, total)


def combined_loss(x, target, pad, model: DualVDT, rng: Rng) -> LossReport:
    """Reconstruction plus denoising score matching on the posterior latent."""
    cfg = model.cfg
    z, post, z_phi = model.latent(x, rng)
    recon = recon_nll(model.decoder(z), target, pad)
    score = dsm_loss(model.score_fn, z_phi, model.schedule, rng, mode=cfg.dsm_mode)
    w = cfg.loss_weights
    total = w[0] * recon + w[1] * score
    return LossReport(recon.item(), score.item(), 0.0, total.item(),
                      prior_entropy_offset(cfg.latent_dim, cfg.sigma0_sq), total)


# ---------------------------------------------------------------------------
# Forecast / evaluation
# ---------------------------------------------------------------------------


def forecast(model: DualVDT, x, rng: Rng, stats: NormStats | None = None) -> np.ndarray:
    """Forecast mean for one window (T_y, n) or a batch (B, T_y, n).

    ``x`` is normalised; the output is denormalised when ``stats`` is given.
    """
    if isinstance(x, SeriesWindow):
        x = x.x
    xb = torch.as_tensor(np.asarray(x), dtype=DTYPE)
    single = xb.dim() == 2
    if single:
        xb = xb.unsqueeze(0)
    if tuple(xb.shape[1:]) != (model.cfg.T_x, model.cfg.n):
        raise ValueError(f"window shape {tuple(xb.shape[1:])} does not match model ({model.cfg.T_x}, {model.cfg.n})")
    with torch.no_grad():
        y = model.forecast(xb, rng).numpy()
    if stats is not None:
        y = stats.invert_array(y)
    return y[0] if single else y


def forecast_metrics(pred, truth, pad=None, target_index: int = 0) -> Metrics:
    """MSE/MAE over the target variable's horizon cells and over all variables."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    valid = np.ones(pred.shape, dtype=bool) if pad is None else ~np.asarray(pad)
    err = pred - truth
    tv = valid[..., target_index]
    te = err[..., target_index][tv]
    ae = err[valid]
    return Metrics(float(np.mean(te**2)), float(np.mean(np.abs(te))), float(np.mean(ae**2)),
                   float(np.mean(np.abs(ae))), pred.shape[0] if pred.ndim == 3 else 1)


def evaluate(model: DualVDT, windows: list[SeriesWindow], rng: Rng, batch_size: int = 256) -> Metrics:
    """Metrics in normalised units over the horizons of ``windows``."""
    if not windows:
        raise ValueError("evaluate: empty window set")
    preds = []
    for s in range(0, len(windows), batch_size):
        x, _, _ = stack_windows(windows[s : s + batch_size])
        with torch.no_grad():
            preds.append(model.forecast(x, rng).numpy())
    pred = np.concatenate(preds)
    truth = np.stack([w.y for w in windows])
    pad = np.stack([w.pad[w.x.shape[0] :] for w in windows])
    return forecast_metrics(pred, truth, pad, model.cfg.target_index)


def objective(model: DualVDT, windows: list[SeriesWindow], rng: Rng, batch_size: int = 256) -> LossReport:
    """Training objective averaged over ``windows`` without gradient tracking."""
    acc = LossReport()
    count = 0
    for s in range(0, len(windows), batch_size):
        batch = windows[s : s + batch_size]
        with torch.no_grad():
            rep = model.loss(*stack_windows(batch), rng)
        acc = _accumulate(acc, rep, len(batch))
        count += len(batch)
    return _average(acc, count)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _accumulate(acc: LossReport, rep: LossReport, weight: int) -> LossReport:
    return LossReport(acc.recon + weight * rep.recon, acc.score + weight * rep.score, acc.kl + weight * rep.kl,
                      acc.total + weight * rep.total, rep.offset)


def _average(acc: LossReport, count: int) -> LossReport:
    return LossReport(acc.recon / count, acc.score / count, acc.kl / count, acc.total / count, acc.offset)


def train(model: DualVDT, windows: list[SeriesWindow], cfg: TrainConfig, rng: Rng | None = None, log=None):
    """Mini-batch Adam on the model's objective; returns ``(model, per-epoch reports)``."""
    if not windows:
        raise ValueError("train: no training windows")
    rng = rng or Rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(windows))
        acc, seen = LossReport(), 0
        for b, s in enumerate(range(0, len(windows), cfg.batch_size)):
            batch = [windows[j] for j in order[s : s + cfg.batch_size]]
            rep = model.loss(*stack_windows(batch), rng)
            if not math.isfinite(rep.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            rep.loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            acc = _accumulate(acc, rep, len(batch))
            seen += len(batch)
        history.append(_average(acc, seen))
        if log is not None:
            log(epoch, history[-1])
    return model, history


def write_loss_csv(path, history: list[LossReport]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["epoch", "recon", "score", "kl", "total"])
        for e, r in enumerate(history):
            out.writerow([e, repr(r.recon), repr(r.score), repr(r.kl), repr(r.total)])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: DualVDT, extra: dict | None = None) -> None:
    """Magic line, u32 format version, u64 header length, JSON header, parameter payload."""
    header = {"format_version": FORMAT_VERSION, "model": model.cfg.to_dict(), "schedule": model.schedule.to_dict()}
    header.update(extra or {})
    text = json.dumps(header, indent=2, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(text)))
    buf.write(text)
    core.write_params(buf, model.state_dict().items())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[DualVDT, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a DualVDT checkpoint")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        params = core.read_params(fh)
    model = DualVDT(ModelConfig.from_dict(header["model"]))
    state = {name: torch.from_numpy(arr) for name, arr in params}
    model.load_state_dict(state, strict=True)
    return model, header


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = ["encoder", "score_model", "dual", "sampler", "dataset", "mse", "mae", "seed"]


def table2_grid(samplers=("AS",)) -> list[dict]:
    """Encoder x score model x dual (x samplers) cells."""
    return [
        {"encoder": e, "score_model": s, "dual": d, "sampler": a}
        for e in ("FC", "CNN", "LT")
        for s in ("FC", "CNN")
        for d in (True, False)
        for a in samplers
    ]


def _cell_config(base: ModelConfig, cell: dict) -> ModelConfig:
    return replace(base, encoder=cell["encoder"], score_model=cell["score_model"], dual=bool(cell["dual"]),
                   score_prior=True, sampler=replace(base.sampler, kind=cell["sampler"]))


def run_cell(base: ModelConfig, cell: dict, train_w, test_w, tcfg: TrainConfig, seed: int, dataset: str) -> dict:
    cfg = _cell_config(base, cell)
    model = DualVDT(cfg, Rng(seed))
    train(model, train_w, replace(tcfg, seed=seed), Rng(seed + 1))
    m = evaluate(model, test_w, Rng(seed + 2))
    return {"encoder": cfg.encoder, "score_model": cfg.score_model, "dual": "ON" if cfg.dual else "OFF",
            "sampler": cfg.sampler.kind, "dataset": dataset, "mse": m.mse, "mae": m.mae, "seed": seed}


def ablate(train_w, test_w, grid: list[dict], base: ModelConfig, tcfg: TrainConfig, seeds=(0,),
           dataset: str = "synthetic", sweep_best: tuple = (), log=None) -> list[dict]:
    """Train and score every grid cell per seed.

    ``sweep_best`` lists extra samplers to try at the cell with the lowest mean
    MSE (e.g. ``("RD", "PF")``).
    """
    rows = []
    for cell in grid:
        for seed in seeds:
            rows.append(run_cell(base, cell, train_w, test_w, tcfg, seed, dataset))
            if log is not None:
                log(rows[-1])
    if sweep_best and rows:
        keyed = {}
        for r in rows:
            keyed.setdefault((r["encoder"], r["score_model"], r["dual"], r["sampler"]), []).append(r["mse"])
        best = min(keyed, key=lambda k: (float(np.mean(keyed[k])), k))
        for kind in sweep_best:
            if kind == best[3]:
                continue
            cell = {"encoder": best[0], "score_model": best[1], "dual": best[2] == "ON", "sampler": kind}
            for seed in seeds:
                rows.append(run_cell(base, cell, train_w, test_w, tcfg, seed, dataset))
                if log is not None:
                    log(rows[-1])
    return rows


def write_ablation_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        out.writeheader()
        for r in rows:
            out.writerow({**r, "mse": repr(float(r["mse"])), "mae": repr(float(r["mae"]))})


def ablation_markdown(rows: list[dict]) -> str:
    """Table with Encoder / Score Model / Dual Reparametrized / Latent Sampler and MSE/MAE per dataset."""
    datasets = sorted({r["dataset"] for r in rows})
    cells: dict = {}
    for r in rows:
        key = (r["encoder"], r["score_model"], r["dual"], r["sampler"])
        cells.setdefault(key, {}).setdefault(r["dataset"], []).append((r["mse"], r["mae"]))
    head = "| Encoder | Score Model | Dual Reparametrized | Latent Sampler | " + " | ".join(
        f"{d} MSE | {d} MAE" for d in datasets) + " |"
    sep = "|" + "---|" * (4 + 2 * len(datasets))
    lines = [head, sep]
    for key, per in cells.items():
        vals = []
        for d in datasets:
            if d in per:
                arr = np.array(per[d])
                vals += [f"{arr[:, 0].mean():.3f}", f"{arr[:, 1].mean():.3f}"]
            else:
                vals += ["", ""]
        lines.append("| " + " | ".join(list(key) + vals) + " |")
    return "\n".join(lines) + "\n"
