"""Shared torch setup: every model and loss in the package runs in double precision."""

import torch

torch.set_default_dtype(torch.float64)

__all__ = ["torch"]
