"""Pre-training objectives (next token, next instruction) and triplet fine-tuning."""

from __future__ import annotations

import math
import random
from typing import Sequence

import numpy as np
from .._torch import torch
import torch.nn.functional as F

from ..asmnorm import Vocabulary
from .model import Batch, BlockEncoder, EncodedBlock, PretrainHeads, collate


def ntp_loss(heads: PretrainHeads, H: torch.Tensor, batch: Batch) -> torch.Tensor:
    """Cross-entropy of token t+1's six labels from h_t, summed over dimensions, mean over positions."""
    valid = batch.mask[:, 1:] & batch.mask[:, :-1]
    if not bool(valid.any()):
        return H.sum() * 0.0
    src = H[:, :-1][valid]
    tgt = batch.ids[:, 1:][valid]
    return sum(F.cross_entropy(head(src), tgt[:, k]) for k, head in enumerate(heads.ntp))


def nip_targets(batch: Batch, lookahead: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Positions that close an instruction followed by another one, and the first
    ``lookahead`` dim-1 ids of that next instruction (PAD-filled)."""
    positions = []
    targets = []
    owner = batch.owner.tolist()
    ids = batch.ids[..., 0].tolist()
    for b, own in enumerate(owner):
        n = sum(1 for o in own if o >= 0)
        starts: dict[int, int] = {}
        for t in range(n):
            starts.setdefault(own[t], t)
        for t in range(n - 1):
            if own[t + 1] != own[t]:
                nxt = own[t + 1]
                s = starts[nxt]
                toks = [ids[b][u] for u in range(s, n) if own[u] == nxt][:lookahead]
                positions.append((b, t))
                targets.append(toks + [0] * (lookahead - len(toks)))
    if not positions:
        return torch.zeros(0, 2, dtype=torch.long), torch.zeros(0, lookahead, dtype=torch.long)
    return torch.tensor(positions), torch.tensor(targets)


def nip_loss(heads: PretrainHeads, H: torch.Tensor, batch: Batch) -> torch.Tensor:
    pos, tgt = nip_targets(batch, len(heads.nip))
    if len(pos) == 0:
        return H.sum() * 0.0
    src = H[pos[:, 0], pos[:, 1]]
    total = H.new_zeros(())
    for j, head in enumerate(heads.nip):
        if bool((tgt[:, j] != 0).any()):
            total = total + F.cross_entropy(head(src), tgt[:, j], ignore_index=0)
    return total


def uniform_ntp_baseline(vocab: Vocabulary) -> float:
    """NTP cross-entropy of a uniform predictor: sum of log vocabulary sizes."""
    return sum(math.log(v) for v in vocab.sizes)


def pretrain_losses(model: BlockEncoder, heads: PretrainHeads, batch: Batch) -> dict[str, torch.Tensor]:
    H = model.backbone(batch.ids)
    ntp = ntp_loss(heads, H, batch)
    nip = nip_loss(heads, H, batch)
    return {"ntp": ntp, "nip": nip, "total": ntp + nip}


def pretrain_step(model: BlockEncoder, heads: PretrainHeads, batch: Batch,
                  optimizer: torch.optim.Optimizer) -> dict[str, float]:
    model.train()
    optimizer.zero_grad()
    losses = pretrain_losses(model, heads, batch)
    losses["total"].backward()
    optimizer.step()
    return {k: v.item() for k, v in losses.items()}


def l2n(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def triplet_loss(a: torch.Tensor, p: torch.Tensor, n: torch.Tensor, margin: float) -> torch.Tensor:
    """mean max(0, d(a,p) - d(a,n) + margin), d = Euclidean distance of L2-normalized vectors."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    a, p, n = l2n(a), l2n(p), l2n(n)
    return triplet_from_distances(_dist(a, p), _dist(a, n), margin)


def _dist(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    # the epsilon keeps the gradient finite when x == y
    return ((x - y) ** 2).sum(-1).add(1e-18).sqrt()


def triplet_from_distances(d_ap: torch.Tensor, d_an: torch.Tensor, margin: float) -> torch.Tensor:
    return torch.clamp(d_ap - d_an + margin, min=0).mean()


def finetune_step(model: BlockEncoder, anchors: Sequence[EncodedBlock], positives: Sequence[EncodedBlock],
                  negatives: Sequence[EncodedBlock], optimizer: torch.optim.Optimizer,
                  margin: float = 0.5) -> float:
    model.train()
    optimizer.zero_grad()
    batch = collate([*anchors, *positives, *negatives])
    z = model(batch.ids, batch.mask)
    a, p, n = z.split(len(anchors))
    loss = triplet_loss(a, p, n, margin)
    loss.backward()
    optimizer.step()
    return loss.item()


@torch.no_grad()
def embed_blocks(model: BlockEncoder, blocks: Sequence[EncodedBlock], batch_size: int = 64) -> np.ndarray:
    """BBEs for ``blocks``, in order. Blocks are length-sorted into batches; trailing
    padding cannot reach real positions because the backbone is causal."""
    model.eval()
    out = np.zeros((len(blocks), model.config.out_size))
    order = sorted(range(len(blocks)), key=lambda i: len(blocks[i].ids))
    for s in range(0, len(order), batch_size):
        idx = order[s:s + batch_size]
        batch = collate([blocks[i] for i in idx])
        out[idx] = model(batch.ids, batch.mask).numpy()
    return out


def make_optimizer(params, lr: float = 1e-3) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=lr)


def pretrain(model: BlockEncoder, heads: PretrainHeads, corpus: Sequence[EncodedBlock], steps: int,
             batch_size: int = 32, lr: float = 1e-3, seed: int = 0) -> list[dict[str, float]]:
    rng = random.Random(seed)
    opt = make_optimizer([*model.parameters(), *heads.parameters()], lr)
    history = []
    for _ in range(steps):
        batch = collate(rng.sample(list(corpus), min(batch_size, len(corpus))))
        history.append(pretrain_step(model, heads, batch, opt))
    return history
