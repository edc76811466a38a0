"""Local-temporal masked attention and the FC / CNN / LT window encoders.

Positions of an (T, n) window are flattened time-major, ``a = t * n + i``, so
``a mod n`` is the variable id.  The gamma mask links a position to every
time step of the same variable; its complement links different variables.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import core
from .core import DTYPE

MAX_POSITIONS = 4096


@dataclass
class MaskPair:
    gamma: np.ndarray
    complement: np.ndarray
    n: int
    T: int


class EdgeTensors:
    """Attention weights per branch as dense (batch, heads, nT, nT) tensors.

    The gamma branch is computed per variable, so its dense form is only
    assembled when ``e_l`` is read.  ``e_t`` is None when the complement
    branch is skipped (n = 1).
    """

    def __init__(self, gamma_blocks: torch.Tensor, e_t: torch.Tensor | None):
        self.gamma_blocks = gamma_blocks  # (B, H, n, T, T)
        self.e_t = e_t

    @property
    def e_l(self) -> torch.Tensor:
        B, H, n, T, _ = self.gamma_blocks.shape
        eye = torch.eye(n, dtype=self.gamma_blocks.dtype)
        return torch.einsum("bhitu,ij->bhtiuj", self.gamma_blocks, eye).reshape(B, H, T * n, T * n)

    def to_csv(self, path, branch: str = "gamma", sample: int = 0) -> None:
        weights = self.e_l if branch == "gamma" else self.e_t
        if weights is None:
            raise ValueError(f"branch {branch!r} is empty for this layout")
        write_edges_csv(path, weights[sample])


@dataclass
class PosteriorParams:
    mu: torch.Tensor
    sigma: torch.Tensor


def build_masks(n: int, T: int, max_positions: int = MAX_POSITIONS) -> MaskPair:
    if n < 1 or T < 1:
        raise ValueError(f"build_masks: n and T must be >= 1, got n={n}, T={T}")
    if n * T > max_positions:
        raise ValueError(f"build_masks: n*T = {n * T} exceeds cap {max_positions}")
    var = np.arange(n * T) % n
    gamma = var[:, None] == var[None, :]
    return MaskPair(gamma, ~gamma, n, T)


def write_edges_csv(path, weights: torch.Tensor) -> None:
    """(head, from, to, weight) rows for every nonzero entry of a (heads, P, P) tensor."""
    w = weights.detach().cpu().numpy()
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["head", "from_index", "to_index", "weight"])
        for h, a, b in zip(*np.nonzero(w)):
            out.writerow([int(h), int(a), int(b), repr(float(w[h, a, b]))])


def attend(q, k, v, mask, scale: float):
    """Softmax attention of ``q`` over ``k``/``v`` with disallowed positions at -inf."""
    logits = core.matmul(q / scale, k.transpose(-1, -2))
    weights = core.softmax(core.masked_fill(logits, mask), dim=-1)
    return core.matmul(weights, v), weights


def _check_rows(mask):
    if bool((~mask).all(dim=-1).any()):
        raise ValueError("masked_attention: a row of the mask has no unmasked entry")


def masked_attention(x, mask, w_q, w_k, w_v, scale: float):
    """Single-head attention restricted to ``mask`` (True = may attend).

    ``x`` is (..., P, d_in); weights are (d_in, d_head).  Returns the
    aggregated values and the (..., P, P) attention weights.
    """
    mask = torch.as_tensor(mask, dtype=torch.bool)
    _check_rows(mask)
    return attend(core.matmul(x, w_q), core.matmul(x, w_k), core.matmul(x, w_v), mask, scale)


class AttentionBranch(nn.Module):
    """Multi-head projections for one mask branch (no output projection).

    Weights are stored per head as (heads, d, d_head); the forward pass fuses
    them into one (d, heads * d_head) projection.
    """

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"head count {heads} does not divide width {d}")
        self.d, self.heads = d, heads
        self.w_q = nn.Parameter(torch.empty(heads, d, d // heads, dtype=DTYPE))
        self.w_k = nn.Parameter(torch.empty(heads, d, d // heads, dtype=DTYPE))
        self.w_v = nn.Parameter(torch.empty(heads, d, d // heads, dtype=DTYPE))

    def _project(self, x, w):
        B, P, _ = x.shape
        H, d, dh = w.shape
        flat = w.permute(1, 0, 2).reshape(d, H * dh)
        return core.matmul(x, flat).reshape(B, P, H, dh).transpose(1, 2)

    def forward(self, x, mask, scale):
        # x: (B, P, d) -> per head (B, H, P, d_h)
        q, k, v = (self._project(x, w) for w in (self.w_q, self.w_k, self.w_v))
        out, weights = attend(q, k, v, mask, scale)
        B, H, P, dh = out.shape
        return out.transpose(1, 2).reshape(B, P, H * dh), weights

    def forward_grouped(self, x, n: int, scale):
        """Gamma-mask attention computed as n independent T x T problems.

        Equal to ``forward(x, gamma, scale)`` for time-major positions; returns
        weights as (B, H, n, T, T).
        """
        B, P, _ = x.shape
        T = P // n
        q, k, v = (
            self._project(x, w).reshape(B, self.heads, T, n, -1).transpose(2, 3)
            for w in (self.w_q, self.w_k, self.w_v)
        )
        logits = core.matmul(q / scale, k.transpose(-1, -2))
        weights = core.softmax(logits, dim=-1)
        out = core.matmul(weights, v).transpose(2, 3).reshape(B, self.heads, P, -1)
        return out.transpose(1, 2).reshape(B, P, -1), weights


class LocalTemporalBlock(nn.Module):
    """``A = Att_gamma(x) + Att_complement(x)``; complement skipped when n == 1."""

    def __init__(self, d: int, heads: int, n: int, scale_mode: str = "sqrt-d"):
        super().__init__()
        if scale_mode not in ("sqrt-d", "num-variables"):
            raise ValueError(f"unknown scale mode {scale_mode!r}")
        self.gamma_branch = AttentionBranch(d, heads)
        self.complement_branch = AttentionBranch(d, heads) if n > 1 else None
        self.n = n
        self.scale = math.sqrt(d // heads) if scale_mode == "sqrt-d" else float(n)

    def forward(self, x, masks: MaskPair):
        if x.shape[1] != masks.n * masks.T or masks.n != self.n:
            raise ValueError(f"block built for n={self.n} cannot take {x.shape[1]} positions with masks n={masks.n}")
        a, e_l = self.gamma_branch.forward_grouped(x, masks.n, self.scale)
        e_t = None
        if self.complement_branch is not None:
            c = torch.from_numpy(masks.complement)
            _check_rows(c)
            b, e_t = self.complement_branch(x, c, self.scale)
            a = a + b
        return a, EdgeTensors(e_l, e_t)


def local_temporal_block(x, block: LocalTemporalBlock, masks: MaskPair):
    return block(x, masks)


# ---------------------------------------------------------------------------
# Encoders / decoders
# ---------------------------------------------------------------------------


@dataclass
class EncoderConfig:
    kind: str = "LT"  # FC | CNN | LT
    n: int = 4
    T_x: int = 24
    T_y: int = 8
    latent_dim: int = 8
    d_model: int = 64
    heads: int = 4
    blocks: int = 2
    hidden: int = 128
    scale_mode: str = "sqrt-d"


class _Tokens(nn.Module):
    """Scalar cell value -> d-vector, plus learned time and variable embeddings.

    With ``value=False`` only the positional part is kept (decoder queries).
    """

    def __init__(self, n: int, T: int, d: int, value: bool = True):
        super().__init__()
        self.value = nn.Linear(1, d, dtype=DTYPE) if value else None
        self.time = nn.Parameter(torch.empty(T, 1, d, dtype=DTYPE))
        self.var = nn.Parameter(torch.empty(1, n, d, dtype=DTYPE))

    def forward(self, x):
        B, T, n = x.shape
        h = self.time + self.var
        if self.value is not None:
            h = h + self.value(x.unsqueeze(-1))
        return h.expand(B, T, n, -1).reshape(B, T * n, -1)


def _ffn(d: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d, hidden, dtype=DTYPE), nn.SiLU(), nn.Linear(hidden, d, dtype=DTYPE))


class LTEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.d_model
        self.tokens = _Tokens(cfg.n, cfg.T_x, d)
        self.blocks = nn.ModuleList(
            LocalTemporalBlock(d, cfg.heads, cfg.n, cfg.scale_mode) for _ in range(cfg.blocks)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(d, dtype=DTYPE) for _ in range(cfg.blocks))
        self.masks = build_masks(cfg.n, cfg.T_x)
        self.out_dim = d
        self.last_edges: list[EdgeTensors] = []

    def forward(self, x):
        h = self.tokens(x)
        self.last_edges = []
        for block, norm in zip(self.blocks, self.norms):
            a, edges = block(h, self.masks)
            self.last_edges.append(edges)
            h = norm(h + a)
        return h.mean(dim=1)


class FCEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Flatten(),
            nn.Linear(cfg.T_x * cfg.n, cfg.hidden, dtype=DTYPE),
            nn.SiLU(),
            nn.Linear(cfg.hidden, cfg.hidden, dtype=DTYPE),
            nn.SiLU(),
        )
        self.out_dim = cfg.hidden

    def forward(self, x):
        return self.net(x)


class CNNEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        c = cfg.d_model
        self.net = nn.Sequential(
            nn.Conv1d(cfg.n, c, 3, padding=1, dtype=DTYPE),
            nn.SiLU(),
            nn.Conv1d(c, c, 3, padding=1, dtype=DTYPE),
            nn.SiLU(),
        )
        self.out_dim = c

    def forward(self, x):
        return self.net(x.transpose(1, 2)).mean(dim=-1)


_ENCODERS = {"FC": FCEncoder, "CNN": CNNEncoder, "LT": LTEncoder}


class Encoder(nn.Module):
    """Window (B, T_x, n) -> diagonal Gaussian posterior over the latent."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        if cfg.kind not in _ENCODERS:
            raise ValueError(f"unknown encoder {cfg.kind!r}; expected one of {sorted(_ENCODERS)}")
        self.cfg = cfg
        self.body = _ENCODERS[cfg.kind](cfg)
        self.mu_head = nn.Linear(self.body.out_dim, cfg.latent_dim, dtype=DTYPE)
        self.sigma_head = nn.Linear(self.body.out_dim, cfg.latent_dim, dtype=DTYPE)

    def forward(self, x) -> PosteriorParams:
        if x.dim() == 2:
            x = x.unsqueeze(0)
        if tuple(x.shape[1:]) != (self.cfg.T_x, self.cfg.n):
            raise ValueError(
                f"encoder expects windows of shape ({self.cfg.T_x}, {self.cfg.n}), got {tuple(x.shape[1:])}"
            )
        h = self.body(x)
        return PosteriorParams(self.mu_head(h), torch.nn.functional.softplus(self.sigma_head(h)) + 1e-6)


def encode(x, encoder: Encoder) -> PosteriorParams:
    return encoder(torch.as_tensor(x, dtype=DTYPE))


class Decoder(nn.Module):
    """Latent (B, k) -> forecast mean (B, T_y, n); mirrors the encoder kind."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        L, n, k = cfg.T_y, cfg.n, cfg.latent_dim
        self.L = L
        if cfg.kind == "FC":
            self.net = nn.Sequential(
                nn.Linear(k, cfg.hidden, dtype=DTYPE),
                nn.SiLU(),
                nn.Linear(cfg.hidden, cfg.hidden, dtype=DTYPE),
                nn.SiLU(),
                nn.Linear(cfg.hidden, L * n, dtype=DTYPE),
            )
        elif cfg.kind == "CNN":
            c = cfg.d_model
            self.lift = nn.Linear(k, c * L, dtype=DTYPE)
            self.net = nn.Sequential(
                nn.SiLU(),
                nn.Conv1d(c, c, 3, padding=1, dtype=DTYPE),
                nn.SiLU(),
                nn.Conv1d(c, n, 3, padding=1, dtype=DTYPE),
            )
        elif cfg.kind == "LT":
            d = cfg.d_model
            self.queries = _Tokens(n, L, d, value=False)
            # every query token gets its own linear view of the latent
            self.lift = nn.Linear(k, L * n * d, dtype=DTYPE)
            self.block = LocalTemporalBlock(d, cfg.heads, n, cfg.scale_mode)
            self.norm = nn.LayerNorm(d, dtype=DTYPE)
            self.ffn = _ffn(d, 2 * d)
            self.ffn_norm = nn.LayerNorm(d, dtype=DTYPE)
            self.readout = nn.Linear(d, 1, dtype=DTYPE)
            self.masks = build_masks(n, L)
        else:
            raise ValueError(f"unknown decoder {cfg.kind!r}")

    def forward(self, z):
        B = z.shape[0]
        n = self.cfg.n
        if self.cfg.kind == "FC":
            return self.net(z).reshape(B, self.L, n)
        if self.cfg.kind == "CNN":
            h = self.lift(z).reshape(B, -1, self.L)
            return self.net(h).transpose(1, 2)
        base = torch.zeros(B, self.L, n, dtype=z.dtype)
        h = self.queries(base) + self.lift(z).reshape(B, self.L * n, -1)
        a, _ = self.block(h, self.masks)
        h = self.norm(h + a)
        h = self.ffn_norm(h + self.ffn(h))
        return self.readout(h).reshape(B, self.L, n)
