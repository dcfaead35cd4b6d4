"""Central finite-difference checks of every trainable tensor at tiny scale.

The numeric side perturbs one parameter element at a time by +-h and differences the
scalar loss; it never touches autograd, so it is an independent oracle for the
analytic gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._torch import torch
from . import aggregator as ag
from .encoder.model import BlockEncoder, EncoderConfig, PretrainHeads, collate, EncodedBlock
from .encoder.train import pretrain_losses, triplet_loss

STEP = 1e-5
THRESHOLD = 1e-4
EPS = 1e-300


@dataclass(frozen=True)
class GradCheckConfig:
    vocab_sizes: tuple[int, ...] = (7, 5, 4, 5, 4, 3)
    dim_sizes: tuple[int, ...] = (2, 1, 1, 1, 1, 2)  # width 8
    layers: int = 2
    bbe_size: int = 4
    seq_len: int = 5
    agg_width: int = 8
    agg_heads: int = 2
    set_size: int = 5
    step: float = STEP
    threshold: float = THRESHOLD


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(||a||_inf, ||n||_inf, eps)."""
    num = float(np.max(np.abs(analytic - numeric))) if analytic.size else 0.0
    den = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), EPS)
    return num / den


def check_module(params: dict[str, torch.Tensor], loss_fn: Callable[[], torch.Tensor],
                 step: float = STEP) -> dict[str, float]:
    """Per-tensor relative error between autograd and central differences."""
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for n, p in params.items()}
    out = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            numeric = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * step)
            out[name] = rel_error(analytic[name].view(-1).numpy(), numeric.numpy())
    return out


def _random_block(rng: np.random.Generator, cfg: GradCheckConfig, n: int) -> EncodedBlock:
    ids = np.stack([rng.integers(1, v, size=n) for v in cfg.vocab_sizes], axis=1)
    owner = np.sort(rng.integers(0, max(1, n // 2), size=n))
    owner -= owner[0]
    return EncodedBlock(ids.astype(np.int64), owner.astype(np.int64))


def encoder_check(cfg: GradCheckConfig, seed: int) -> dict[str, float]:
    """Encoder, pooling, projection and pre-training heads under NTP + NIP + triplet."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    ecfg = EncoderConfig(dim_sizes=cfg.dim_sizes, layers=cfg.layers, bbe_size=cfg.bbe_size,
                         max_len=cfg.seq_len, nip_lookahead=2)
    model = BlockEncoder(ecfg, cfg.vocab_sizes)
    heads = PretrainHeads(ecfg, cfg.vocab_sizes)
    # larger head weights than the near-uniform init, so their gradients are not tiny
    with torch.no_grad():
        for p in heads.parameters():
            p.normal_(0, 0.5)
    blocks = [_random_block(rng, cfg, n) for n in (cfg.seq_len, cfg.seq_len - 1, cfg.seq_len - 2)]
    batch = collate(blocks)
    trip = [collate([b]) for b in blocks]

    def loss():
        pre = pretrain_losses(model, heads, batch)["total"]
        a, p, n = (model(t.ids, t.mask) for t in trip)
        return pre + triplet_loss(a, p, n, margin=2.0)

    params = {f"encoder.{n}": p for n, p in model.named_parameters()}
    params.update({f"heads.{n}": p for n, p in heads.named_parameters()})
    return check_module(params, loss, cfg.step)


def aggregator_check(cfg: GradCheckConfig, seed: int) -> dict[str, float]:
    """Set Transformer and CPI head under the full three-term objective."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    acfg = ag.AggregatorConfig(bbe_size=cfg.bbe_size, width=cfg.agg_width, heads=cfg.agg_heads,
                               cpi_hidden=4)
    model = ag.SetAggregator(acfg)

    def rand_set():
        n = int(rng.integers(1, cfg.set_size + 1))
        w = rng.random(n) + 0.1
        w /= w.sum()
        bbe = rng.normal(size=(n, cfg.bbe_size))
        return np.concatenate([w[:, None] * bbe, w[:, None]], axis=1)

    sets = [rand_set() for _ in range(6)]
    cpis = torch.tensor(rng.uniform(0.5, 4.0, size=6))
    # large consistency margin so that hinge is active
    lw = ag.LossWeights(margin=2.0, consistency_margin=3.0)

    def loss():
        return ag.loss_total(model, sets[:2], sets[2:4], sets[4:], cpis, lw)["total"]

    return check_module(dict(model.named_parameters()), loss, cfg.step)


def grad_check(config: GradCheckConfig | None = None, seed: int = 0) -> dict:
    cfg = config or GradCheckConfig()
    errors = {**encoder_check(cfg, seed), **{f"aggregator.{k}": v for k, v in aggregator_check(cfg, seed).items()}}
    worst = max(errors, key=errors.get)
    return {"errors": errors, "max_rel_error": errors[worst], "worst": worst,
            "threshold": cfg.threshold, "passed": errors[worst] <= cfg.threshold}
