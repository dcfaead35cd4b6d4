"""Basic block encoder: per-dimension embeddings, a gated linear-recurrent backbone and
self-attention pooling."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from .._torch import torch
import torch.nn as nn
import torch.nn.functional as F

from ..asmnorm import Instruction, Vocabulary, normalize, tokenize_block

log = logging.getLogger(__name__)


class IdOutOfRange(IndexError):
    pass


class AllPadded(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    dim_sizes: tuple[int, ...] = (32, 8, 8, 8, 8, 8)
    layers: int = 2
    bbe_size: int | None = 64  # None keeps the pooled vector (identity projection)
    max_len: int = 128
    ffn_hidden: int | None = None  # defaults to 2 * width
    nip_lookahead: int = 4
    head_hidden: int | None = None  # defaults to width

    def __post_init__(self):
        if len(self.dim_sizes) != 6 or min(self.dim_sizes) < 1:
            raise ValueError("dim_sizes must hold six sizes >= 1")
        if self.layers < 1 or self.max_len < 1 or self.nip_lookahead < 1:
            raise ValueError("layers, max_len and nip_lookahead must be >= 1")
        if self.bbe_size is not None and self.bbe_size < 1:
            raise ValueError("bbe_size must be >= 1")

    @property
    def width(self) -> int:
        return sum(self.dim_sizes)

    @property
    def out_size(self) -> int:
        return self.bbe_size if self.bbe_size is not None else self.width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dim_sizes"] = list(self.dim_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["dim_sizes"] = tuple(d["dim_sizes"])
        return cls(**d)


class TokenEmbedding(nn.Module):
    def __init__(self, vocab_sizes: Sequence[int], dim_sizes: Sequence[int]):
        super().__init__()
        self.vocab_sizes = tuple(vocab_sizes)
        self.tables = nn.ModuleList(
            nn.Embedding(v, d, padding_idx=0) for v, d in zip(vocab_sizes, dim_sizes))
        for t in self.tables:
            nn.init.normal_(t.weight, std=0.5)
            with torch.no_grad():
                t.weight[0].zero_()

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """ids: (..., 6) integer tensor -> (..., width)."""
        for k, v in enumerate(self.vocab_sizes):
            col = ids[..., k]
            if col.numel() and (int(col.min()) < 0 or int(col.max()) >= v):
                raise IdOutOfRange(f"dimension {k} id outside [0, {v})")
        return torch.cat([t(ids[..., k]) for k, t in enumerate(self.tables)], dim=-1)


def _shift(x: torch.Tensor) -> torch.Tensor:
    """x_{t-1} with a zero vector before the first position."""
    return F.pad(x, (0, 0, 1, 0))[:, :-1]


class TimeMix(nn.Module):
    """Linear recurrence with an outer-product state and per-channel learned decay.

    S_t = diag(sigmoid(g_t)) S_{t-1} + k_t v_t^T,   o_t = sigmoid(r_t)^T S_t
    """

    chunked_mode = True
    CHUNK = 32
    # keeps exp(-L) within double range over a chunk
    LOG_DECAY_FLOOR = -10.0

    def __init__(self, d: int):
        super().__init__()
        self.mix = nn.Parameter(torch.full((4, d), 0.5))  # r, k, v, g
        self.receptance = nn.Linear(d, d, bias=False)
        self.key = nn.Linear(d, d, bias=False)
        self.value = nn.Linear(d, d, bias=False)
        self.gate = nn.Linear(d, d)
        self.out_norm = nn.LayerNorm(d)
        self.output = nn.Linear(d, d, bias=False)
        nn.init.constant_(self.gate.bias, 2.0)  # decay starts near 0.88
        for lin in (self.receptance, self.key, self.value, self.gate, self.output):
            nn.init.normal_(lin.weight, std=d ** -0.5)

    def projections(self, x: torch.Tensor):
        """r, k, v and the log of the per-channel decay for every position."""
        prev = _shift(x)
        xr, xk, xv, xg = (x * m + prev * (1 - m) for m in self.mix)
        r = torch.sigmoid(self.receptance(xr))
        k = self.key(xk) * x.shape[-1] ** -0.5
        v = self.value(xv)
        log_decay = F.logsigmoid(self.gate(xg)).clamp(min=self.LOG_DECAY_FLOOR)
        return r, k, v, log_decay

    def recur(self, r, k, v, log_decay) -> torch.Tensor:
        """Step-by-step recurrence; O(1) state per position."""
        B, N, d = k.shape
        decay = torch.exp(log_decay)
        S = k.new_zeros(B, d, d)
        outs = []
        for t in range(N):
            S = decay[:, t, :, None] * S + k[:, t, :, None] * v[:, t, None, :]
            outs.append(torch.einsum("bi,bij->bj", r[:, t], S))
        return torch.stack(outs, dim=1)

    def chunked(self, r, k, v, log_decay) -> torch.Tensor:
        """Same outputs as :meth:`recur`, a chunk of positions at a time.

        Inside a chunk the decay product between s <= t factors as
        exp(L_t) * exp(-L_s) with L the within-chunk log-decay prefix sum, so intra-chunk
        terms are one masked matmul; the state is carried between chunks.
        """
        B, N, d = k.shape
        S = k.new_zeros(B, d, d)
        outs = []
        for c0 in range(0, N, self.CHUNK):
            sl = slice(c0, min(N, c0 + self.CHUNK))
            rc, kc, vc = r[:, sl], k[:, sl], v[:, sl]
            L = torch.cumsum(log_decay[:, sl], dim=1)
            C = rc.shape[1]
            causal = torch.ones(C, C, dtype=torch.bool, device=k.device).tril()
            q = rc * torch.exp(L)
            kk = kc * torch.exp(-L)
            scores = (q @ kk.transpose(1, 2)).masked_fill(~causal, 0.0)
            outs.append(scores @ vc + q @ S)
            L_end = L[:, -1:]
            S = torch.exp(L_end).transpose(1, 2) * S + (kc * torch.exp(L_end - L)).transpose(1, 2) @ vc
        return torch.cat(outs, dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        proj = self.projections(x)
        o = self.chunked(*proj) if self.chunked_mode else self.recur(*proj)
        return self.output(self.out_norm(o))


class ChannelMix(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.mix = nn.Parameter(torch.full((2, d), 0.5))  # k, r
        self.key = nn.Linear(d, hidden, bias=False)
        self.value = nn.Linear(hidden, d, bias=False)
        self.receptance = nn.Linear(d, d, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        prev = _shift(x)
        xk = x * self.mix[0] + prev * (1 - self.mix[0])
        xr = x * self.mix[1] + prev * (1 - self.mix[1])
        return torch.sigmoid(self.receptance(xr)) * self.value(torch.relu(self.key(xk)) ** 2)


class Layer(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.time = TimeMix(d)
        self.ln2 = nn.LayerNorm(d)
        self.channel = ChannelMix(d, hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.time(self.ln1(x))
        return x + self.channel(self.ln2(x))


class AttentionPooler(nn.Module):
    """e_i = u^T tanh(W h_i + b); alpha = softmax(e) over unmasked positions."""

    def __init__(self, d: int):
        super().__init__()
        self.proj = nn.Linear(d, d)
        self.context = nn.Parameter(torch.randn(d) * d ** -0.5)

    def forward(self, H: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """H: (B, N, d); mask: (B, N) True on real tokens. Returns pooled (B, d), alpha (B, N)."""
        if not bool(mask.any(dim=1).all()):
            raise AllPadded("every position of a sequence is padding")
        e = torch.tanh(self.proj(H)) @ self.context
        e = e.masked_fill(~mask, float("-inf"))
        alpha = torch.softmax(e, dim=1)
        return (alpha.unsqueeze(-1) * H).sum(dim=1), alpha


class BlockEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, vocab_sizes: Sequence[int]):
        super().__init__()
        self.config = config
        self.vocab_sizes = tuple(vocab_sizes)
        d = config.width
        self.embed = TokenEmbedding(vocab_sizes, config.dim_sizes)
        self.layers = nn.ModuleList(Layer(d, config.ffn_hidden or 2 * d) for _ in range(config.layers))
        self.ln_out = nn.LayerNorm(d)
        self.pooler = AttentionPooler(d)
        self.project = nn.Linear(d, config.bbe_size) if config.bbe_size is not None else nn.Identity()

    def backbone(self, ids: torch.Tensor) -> torch.Tensor:
        x = self.embed(ids)
        for layer in self.layers:
            x = layer(x)
        return self.ln_out(x)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor, return_all: bool = False):
        H = self.backbone(ids)
        pooled, alpha = self.pooler(H, mask)
        bbe = self.project(pooled)
        if return_all:
            return bbe, H, alpha
        return bbe


class PretrainHeads(nn.Module):
    """Next-token heads (one per dimension) and K parallel next-instruction heads."""

    def __init__(self, config: EncoderConfig, vocab_sizes: Sequence[int]):
        super().__init__()
        d = config.width
        h = config.head_hidden or d
        self.ntp = nn.ModuleList(_mlp(d, h, v) for v in vocab_sizes)
        self.nip = nn.ModuleList(_mlp(d, h, vocab_sizes[0]) for _ in range(config.nip_lookahead))


def _mlp(d: int, h: int, out: int) -> nn.Sequential:
    net = nn.Sequential(nn.Linear(d, h), nn.Tanh(), nn.Linear(h, out))
    nn.init.normal_(net[2].weight, std=1e-3)  # near-uniform predictions at init
    nn.init.zeros_(net[2].bias)
    return net


@dataclass
class EncodedBlock:
    ids: np.ndarray  # (N, 6) int64
    owner: np.ndarray  # (N,) instruction index of each token


def encode_instructions(instructions: Sequence[Instruction], vocab: Vocabulary, max_len: int,
                        normalized: bool = False) -> EncodedBlock:
    if not normalized:
        instructions = [normalize(i) for i in instructions]
    tokens, owner = tokenize_block(instructions)
    if len(tokens) > max_len:
        log.warning("block of %d tokens truncated to %d", len(tokens), max_len)
        tokens, owner = tokens[:max_len], owner[:max_len]
    ids = np.array([vocab.encode(t) for t in tokens], dtype=np.int64).reshape(-1, 6)
    return EncodedBlock(ids, np.array(owner, dtype=np.int64))


@dataclass
class Batch:
    ids: torch.Tensor  # (B, N, 6)
    mask: torch.Tensor  # (B, N) bool
    owner: torch.Tensor  # (B, N), -1 on padding
    extras: dict = field(default_factory=dict)


def collate(blocks: Sequence[EncodedBlock]) -> Batch:
    n = max(len(b.ids) for b in blocks)
    B = len(blocks)
    ids = torch.zeros(B, n, 6, dtype=torch.long)
    mask = torch.zeros(B, n, dtype=torch.bool)
    owner = torch.full((B, n), -1, dtype=torch.long)
    for i, b in enumerate(blocks):
        m = len(b.ids)
        ids[i, :m] = torch.from_numpy(b.ids)
        mask[i, :m] = True
        owner[i, :m] = torch.from_numpy(b.owner)
    return Batch(ids, mask, owner)


def report_params(model: nn.Module) -> dict[str, int]:
    """Parameter counts by top-level submodule plus ``total``."""
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        out[top] = out.get(top, 0) + p.numel()
    out["total"] = sum(out.values())
    return out
