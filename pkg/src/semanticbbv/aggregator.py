"""Stage 2: order-invariant interval signatures from frequency-weighted block embeddings.

Two self-attention blocks and one pooling-by-attention block turn a weighted set of BBEs
into a fixed-length signature; a small regression head predicts the interval's CPI.
Training combines a triplet term, a Huber CPI term and a consistency term that pushes
apart signatures that are close but differ in CPI.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from ._torch import torch
import torch.nn as nn
import torch.nn.functional as F

from .blockstore import BlockStore, IntervalProfile, cosine
from .encoder.train import l2n, triplet_from_distances


class MissingBBE(KeyError):
    def __init__(self, block_id: str):
        self.block_id = block_id
        super().__init__(f"no embedding for block {block_id}")


class EmptySet(ValueError):
    pass


class SetTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class AggregatorConfig:
    bbe_size: int = 64
    width: int = 64
    heads: int = 4
    seeds: int = 1
    ffn_hidden: int | None = None  # defaults to 2 * width
    cpi_hidden: int = 32
    max_set: int = 4096

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if min(self.bbe_size, self.width, self.heads, self.seeds, self.cpi_hidden, self.max_set) < 1:
            raise ValueError("aggregator sizes must be >= 1")

    @property
    def signature_size(self) -> int:
        return self.seeds * self.width

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossWeights:
    w_r: float = 1.0
    w_c: float = 0.5
    huber_delta: float = 1.0
    margin: float = 0.5
    consistency_margin: float | None = None  # None: same as the triplet margin

    def __post_init__(self):
        if self.w_r < 0 or self.w_c < 0:
            raise ValueError("loss weights must be non-negative")
        if self.huber_delta <= 0 or self.margin <= 0 or self.m_s <= 0:
            raise ValueError("huber_delta and margins must be positive")

    @property
    def m_s(self) -> float:
        return self.margin if self.consistency_margin is None else self.consistency_margin


@dataclass
class WeightedSet:
    """Rows are ``w_b * BBE_b`` with ``w_b`` appended; ``block_ids`` label the rows."""

    elements: np.ndarray
    block_ids: list[str]

    @property
    def weights(self) -> np.ndarray:
        return self.elements[:, -1]


def weight_bbes(iv: IntervalProfile, bbe_lookup: Mapping[str, np.ndarray], store: BlockStore) -> WeightedSet:
    """Instruction-weighted frequency w_b = count_b * len_b / instr_total scales each BBE."""
    if not iv.counts:
        raise EmptySet(f"interval {iv.program_id}:{iv.interval_index} has no blocks")
    weights = iv.weights(store)
    rows = []
    ids = []
    for bid, wt in weights.items():
        if bid not in bbe_lookup:
            raise MissingBBE(bid)
        w = wt / iv.instr_total
        rows.append(np.append(w * np.asarray(bbe_lookup[bid], dtype=np.float64), w))
        ids.append(bid)
    return WeightedSet(np.stack(rows), ids)


class MAB(nn.Module):
    """Multi-head attention block: H = LN(Q + Att(Q, K)); out = LN(H + FF(H))."""

    def __init__(self, width: int, heads: int, hidden: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width, bias=False)  # a key bias shifts every logit equally: no effect
        self.v = nn.Linear(width, width)
        self.o = nn.Linear(width, width)
        self.ln1 = nn.LayerNorm(width)
        self.ff = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))
        self.ln2 = nn.LayerNorm(width)

    def forward(self, Q: torch.Tensor, K: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        B, nq, w = Q.shape
        nk = K.shape[1]
        h, dh = self.heads, w // self.heads
        q = self.q(Q).view(B, nq, h, dh).transpose(1, 2)
        k = self.k(K).view(B, nk, h, dh).transpose(1, 2)
        v = self.v(K).view(B, nk, h, dh).transpose(1, 2)
        logits = (q @ k.transpose(-1, -2)) * dh ** -0.5
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        att = torch.softmax(logits, dim=-1) @ v
        H = self.ln1(Q + self.o(att.transpose(1, 2).reshape(B, nq, w)))
        return self.ln2(H + self.ff(H))


class SetAggregator(nn.Module):
    def __init__(self, config: AggregatorConfig):
        super().__init__()
        self.config = config
        w = config.width
        hidden = config.ffn_hidden or 2 * w
        self.embed = nn.Linear(config.bbe_size + 1, w)
        self.sab1 = MAB(w, config.heads, hidden)
        self.sab2 = MAB(w, config.heads, hidden)
        self.seed_vectors = nn.Parameter(torch.randn(config.seeds, w) * w ** -0.5)
        self.pma_ff = nn.Sequential(nn.Linear(w, w), nn.GELU())
        self.pma = MAB(w, config.heads, hidden)
        self.cpi_head = nn.Sequential(
            nn.Linear(config.signature_size, config.cpi_hidden), nn.Tanh(), nn.Linear(config.cpi_hidden, 1))

    def forward(self, X: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """X: (B, n, bbe_size + 1) padded sets; mask: (B, n) True on real elements -> (B, signature)."""
        if X.shape[1] == 0 or not bool(mask.any(dim=1).all()):
            raise EmptySet("every set needs at least one element")
        if int(mask.sum(dim=1).max()) > self.config.max_set:
            raise SetTooLarge(f"set larger than {self.config.max_set} elements")
        H = self.embed(X)
        H = self.sab1(H, H, mask)
        H = self.sab2(H, H, mask)
        S = self.seed_vectors.expand(X.shape[0], -1, -1)
        Z = self.pma(S, self.pma_ff(H), mask)
        return Z.reshape(X.shape[0], -1)

    def predict_cpi(self, z: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.cpi_head(z)).squeeze(-1)


def version_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().astype("<f8").tobytes())
    return h.hexdigest()[:16]


def pad_sets(sets: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    if not sets:
        raise EmptySet("no sets given")
    n = max(len(s) for s in sets)
    if n == 0:
        raise EmptySet("empty set")
    d = sets[0].shape[1]
    X = torch.zeros(len(sets), n, d)
    mask = torch.zeros(len(sets), n, dtype=torch.bool)
    for i, s in enumerate(sets):
        X[i, :len(s)] = torch.from_numpy(np.asarray(s, dtype=np.float64))
        mask[i, :len(s)] = True
    return X, mask


@torch.no_grad()
def signature(ws: WeightedSet | np.ndarray, model: SetAggregator) -> np.ndarray:
    elements = ws.elements if isinstance(ws, WeightedSet) else np.asarray(ws)
    if len(elements) == 0:
        raise EmptySet("empty weighted set")
    model.eval()
    X, mask = pad_sets([elements])
    return model(X, mask)[0].numpy()


@torch.no_grad()
def signatures(sets: Sequence[np.ndarray], model: SetAggregator, batch_size: int = 64) -> np.ndarray:
    """Signatures for many sets; each set is padded only to its batch's largest set."""
    model.eval()
    out = np.zeros((len(sets), model.config.signature_size))
    order = sorted(range(len(sets)), key=lambda i: len(sets[i]))
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        X, mask = pad_sets([sets[i] for i in idx])
        out[idx] = model(X, mask).numpy()
    return out


@torch.no_grad()
def predict_cpis(sets: Sequence[np.ndarray], model: SetAggregator, batch_size: int = 64) -> np.ndarray:
    z = torch.from_numpy(signatures(sets, model, batch_size))
    return model.predict_cpi(z).numpy()


def huber(residual: torch.Tensor, delta: float) -> torch.Tensor:
    """Elementwise: r^2/2 for |r| <= delta, else delta * (|r| - delta/2)."""
    a = residual.abs()
    return torch.where(a <= delta, 0.5 * residual ** 2, delta * (a - 0.5 * delta))


def _pair_dist(z: torch.Tensor) -> torch.Tensor:
    diff = z[:, None, :] - z[None, :, :]
    return (diff ** 2).sum(-1).add(1e-18).sqrt()


def consistency_loss(z: torch.Tensor, cpi: torch.Tensor, margin: float) -> torch.Tensor:
    """Mean over pairs i<j of max(0, margin - ||z_i - z_j||) * |cpi_i - cpi_j| on L2-normalized z."""
    n = z.shape[0]
    if n < 2:
        return z.sum() * 0.0
    dist = _pair_dist(l2n(z))
    iu = torch.triu_indices(n, n, offset=1)
    close = torch.clamp(margin - dist[iu[0], iu[1]], min=0)
    return (close * (cpi[iu[0]] - cpi[iu[1]]).abs()).mean()


def loss_total(model: SetAggregator, anchors: Sequence[np.ndarray], positives: Sequence[np.ndarray],
               negatives: Sequence[np.ndarray], cpis: torch.Tensor, lw: LossWeights) -> dict[str, torch.Tensor]:
    """``cpis`` holds ground truth for anchors, positives and negatives, concatenated in that order."""
    X, mask = pad_sets([*anchors, *positives, *negatives])
    z = model(X, mask)
    za, zp, zn = z.split(len(anchors))
    a, p, n = l2n(za), l2n(zp), l2n(zn)
    d_ap = ((a - p) ** 2).sum(-1).add(1e-18).sqrt()
    d_an = ((a - n) ** 2).sum(-1).add(1e-18).sqrt()
    trip = triplet_from_distances(d_ap, d_an, lw.margin)
    reg = huber(model.predict_cpi(z) - cpis, lw.huber_delta).mean()
    cons = consistency_loss(z, cpis, lw.m_s)
    return {"triplet": trip, "cpi_reg": reg, "consistency": cons,
            "total": trip + lw.w_r * reg + lw.w_c * cons}


@dataclass
class IntervalExample:
    program_id: str
    interval_index: int
    elements: np.ndarray
    cpi: float
    bbv: dict[str, float] = field(repr=False)


def make_examples(profiles: Sequence[IntervalProfile], bbe_lookup: Mapping[str, np.ndarray],
                  store: BlockStore, cpis: Sequence[float] | None = None) -> list[IntervalExample]:
    out = []
    for i, iv in enumerate(profiles):
        cpi = cpis[i] if cpis is not None else iv.cpi_true
        if cpi is None:
            raise ValueError(f"no CPI for interval {iv.program_id}:{iv.interval_index}")
        ws = weight_bbes(iv, bbe_lookup, store)
        out.append(IntervalExample(iv.program_id, iv.interval_index, ws.elements, float(cpi),
                                   {b: float(w) for b, w in iv.weights(store).items()}))
    return out


@dataclass(frozen=True)
class Schedule:
    steps: int = 300
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0
    pos_threshold: float = 0.9
    neg_threshold: float = 0.5


class TripletMiner:
    """Positives and negatives by cosine of traditional BBVs.

    Candidates come from the anchor's own program; when a program offers no negative,
    negatives are drawn from other programs (cosine over the shared content-hash ids).
    An anchor without a positive is its own positive.
    """

    def __init__(self, examples: Sequence[IntervalExample], pos_threshold: float, neg_threshold: float):
        self.examples = list(examples)
        n = len(self.examples)
        self.pos: list[list[int]] = [[] for _ in range(n)]
        self.neg: list[list[int]] = [[] for _ in range(n)]
        for i in range(n):
            xi = self.examples[i]
            for j in range(n):
                if i == j:
                    continue
                xj = self.examples[j]
                c = cosine(xi.bbv, xj.bbv)
                same = xi.program_id == xj.program_id
                if same and c >= pos_threshold:
                    self.pos[i].append(j)
                if c <= neg_threshold:
                    self.neg[i].append(j)
            own = [j for j in self.neg[i] if self.examples[j].program_id == xi.program_id]
            if own:
                self.neg[i] = own
            if not self.pos[i]:
                self.pos[i] = [i]

    def sample(self, rng: random.Random, batch: int) -> tuple[list[int], list[int], list[int]]:
        anchors = [i for i in range(len(self.examples)) if self.neg[i]]
        if not anchors:
            raise ValueError("no interval has a negative under the mining thresholds")
        a = [rng.choice(anchors) for _ in range(batch)]
        return a, [rng.choice(self.pos[i]) for i in a], [rng.choice(self.neg[i]) for i in a]


def train(model: SetAggregator, examples: Sequence[IntervalExample], lw: LossWeights = LossWeights(),
          schedule: Schedule = Schedule(), miner: TripletMiner | None = None) -> list[dict[str, float]]:
    """Optimize all aggregator parameters in place; returns per-step losses."""
    rng = random.Random(schedule.seed)
    torch.manual_seed(schedule.seed)
    miner = miner or TripletMiner(examples, schedule.pos_threshold, schedule.neg_threshold)
    opt = torch.optim.Adam(model.parameters(), lr=schedule.lr)
    history = []
    model.train()
    for _ in range(schedule.steps):
        a, p, n = miner.sample(rng, schedule.batch)
        ex = miner.examples
        cpis = torch.tensor([ex[i].cpi for i in (*a, *p, *n)])
        opt.zero_grad()
        losses = loss_total(model, [ex[i].elements for i in a], [ex[i].elements for i in p],
                            [ex[i].elements for i in n], cpis, lw)
        losses["total"].backward()
        opt.step()
        history.append({k: v.item() for k, v in losses.items()})
    return history


def fine_tune(model: SetAggregator, examples: Sequence[IntervalExample], lw: LossWeights = LossWeights(),
              schedule: Schedule = Schedule(steps=100), **provenance) -> dict:
    """Adapt an already trained aggregator (Set Transformer and CPI head) to new CPI labels.

    Block embeddings are inputs here, so the encoder stays frozen by construction.
    Returns a provenance record.
    """
    base = version_hash(model)
    history = train(model, examples, lw, schedule) if schedule.steps else []
    return {"base_model": base, "adapted_model": version_hash(model), "examples": len(examples),
            "schedule": asdict(schedule), "final_loss": history[-1] if history else None, **provenance}
