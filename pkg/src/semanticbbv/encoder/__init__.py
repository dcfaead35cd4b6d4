"""Stage 1: basic block embeddings."""

from .model import (
    AllPadded,
    AttentionPooler,
    Batch,
    BlockEncoder,
    EncodedBlock,
    EncoderConfig,
    IdOutOfRange,
    PretrainHeads,
    collate,
    encode_instructions,
    report_params,
)
from .train import (
    embed_blocks,
    finetune_step,
    make_optimizer,
    nip_loss,
    ntp_loss,
    pretrain,
    pretrain_losses,
    pretrain_step,
    triplet_from_distances,
    triplet_loss,
    uniform_ntp_baseline,
)

__all__ = [
    "AllPadded", "AttentionPooler", "Batch", "BlockEncoder", "EncodedBlock", "EncoderConfig",
    "IdOutOfRange", "PretrainHeads", "collate", "embed_blocks", "encode_instructions",
    "finetune_step", "make_optimizer", "nip_loss", "ntp_loss", "pretrain", "pretrain_losses",
    "pretrain_step", "report_params", "triplet_from_distances", "triplet_loss",
    "uniform_ntp_baseline",
]
