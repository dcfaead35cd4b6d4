import logging
import random

import numpy as np
import pytest

from semanticbbv._torch import torch
from semanticbbv.asmnorm import build_vocab, parse_instruction
from semanticbbv.encoder import (
    AllPadded, BlockEncoder, EncoderConfig, IdOutOfRange, PretrainHeads, collate, embed_blocks,
    encode_instructions, pretrain, pretrain_losses, report_params, triplet_loss, uniform_ntp_baseline,
)
from semanticbbv.encoder.corpus import (
    independent, make_functions, reorder, rename_registers, strength_reduce, variant,
)
from semanticbbv.encoder.model import TimeMix
from semanticbbv.encoder.train import nip_targets

SMALL = EncoderConfig(dim_sizes=(8, 4, 4, 4, 4, 4), layers=2, bbe_size=16, max_len=64)


@pytest.fixture(scope="module")
def setup():
    fns = make_functions(60, 4)
    vocab = build_vocab([f.instructions for f in fns])
    torch.manual_seed(0)
    model = BlockEncoder(SMALL, vocab.sizes)
    heads = PretrainHeads(SMALL, vocab.sizes)
    blocks = [encode_instructions(f.instructions, vocab, SMALL.max_len) for f in fns]
    return fns, vocab, model, heads, blocks


def test_bbe_shape(setup):
    _, _, model, _, blocks = setup
    E = embed_blocks(model, blocks[:5])
    assert E.shape == (5, 16) and np.all(np.isfinite(E))


@pytest.mark.parametrize("n", [1, 31, 32, 33, 70])
def test_chunked_matches_recurrence(n):
    torch.manual_seed(n)
    tm = TimeMix(12)
    x = torch.randn(3, n, 12)
    r, k, v, ld = tm.projections(x)
    assert torch.allclose(tm.chunked(r, k, v, ld), tm.recur(r, k, v, ld), rtol=0, atol=1e-10)


def test_padding_does_not_change_embedding(setup):
    _, _, model, _, blocks = setup
    short = min(blocks, key=lambda b: len(b.ids))
    long = max(blocks, key=lambda b: len(b.ids))
    model.eval()
    with torch.no_grad():
        alone = collate([short])
        both = collate([short, long])
        a = model(alone.ids, alone.mask)[0]
        b = model(both.ids, both.mask)[0]
    assert torch.allclose(a, b, rtol=1e-12, atol=1e-12)


def test_initial_ntp_near_uniform(setup):
    _, vocab, model, heads, blocks = setup
    loss = pretrain_losses(model, heads, collate(blocks[:16]))["ntp"].item()
    assert abs(loss - uniform_ntp_baseline(vocab)) / uniform_ntp_baseline(vocab) < 0.01


def test_pretraining_reduces_loss(setup):
    _, vocab, _, _, blocks = setup
    torch.manual_seed(1)
    model = BlockEncoder(SMALL, vocab.sizes)
    heads = PretrainHeads(SMALL, vocab.sizes)
    hist = pretrain(model, heads, blocks, 30, batch_size=16)
    assert hist[-1]["ntp"] < hist[0]["ntp"]


def test_id_out_of_range(setup):
    _, _, model, _, _ = setup
    ids = torch.zeros(1, 3, 6, dtype=torch.long)
    ids[0, 0, 0] = 10_000
    with pytest.raises(IdOutOfRange):
        model(ids, torch.ones(1, 3, dtype=torch.bool))


def test_all_padded(setup):
    _, _, model, _, _ = setup
    with pytest.raises(AllPadded):
        model(torch.zeros(1, 3, 6, dtype=torch.long), torch.zeros(1, 3, dtype=torch.bool))


def test_truncation_warns(setup, caplog):
    _, vocab, _, _, _ = setup
    ins = [parse_instruction("add rax, rbx")] * 40
    with caplog.at_level(logging.WARNING):
        enc = encode_instructions(ins, vocab, 10)
    assert len(enc.ids) == 10 and "truncated" in caplog.text


def test_triplet_loss_values():
    a = torch.tensor([[1.0, 0.0]])
    p = torch.tensor([[2.0, 0.0]])
    n = torch.tensor([[0.0, 1.0]])
    # normalized: d(a,p)=0, d(a,n)=sqrt(2)
    assert triplet_loss(a, p, n, 0.5).item() == pytest.approx(0.0)
    assert triplet_loss(a, p, n, 2.0).item() == pytest.approx(2.0 - 2 ** 0.5)
    with pytest.raises(ValueError):
        triplet_loss(a, p, n, 0.0)


def test_nip_targets_example(setup):
    _, vocab, _, _, _ = setup
    ins = [parse_instruction(t) for t in ("mov rax, rbx", "add rax, 1", "ret")]
    b = collate([encode_instructions(ins, vocab, 64)])
    pos, tgt = nip_targets(b, 4)
    assert pos.tolist() == [[0, 2], [0, 5]]
    first = b.ids[0, 3:6, 0].tolist()
    assert tgt[0].tolist() == first + [0]
    assert tgt[1].tolist() == [b.ids[0, 6, 0].item(), 0, 0, 0]


def test_report_params(setup):
    _, _, model, _, _ = setup
    rep = report_params(model)
    assert rep["total"] == sum(p.numel() for p in model.parameters())


def test_corpus_transformations():
    rng = random.Random(0)
    fn = make_functions(1, 9)[0]
    lines = list(fn.lines)
    assert strength_reduce(strength_reduce(lines)) == lines
    re = reorder(lines, rng, swaps=5)
    assert sorted(re) == sorted(lines) and re[-1] == "ret"
    ren = rename_registers(lines, rng)
    assert [l.split()[0] for l in ren] == [l.split()[0] for l in lines]
    v = variant(fn, rng)
    assert v.lines[-1] == "ret" and v.name == fn.name


def test_independence_rules():
    assert independent("mov rax, 1", "mov rbx, 2")
    assert not independent("mov rax, 1", "add rbx, rax")
    assert not independent("cmp rax, rbx", "add rcx, 1")  # both write flags
    assert not independent("mov [rsp+8], rax", "mov rbx, [rsp+16]")
