"""Logit margins, the robust hinge, perturbation scores, and worst-case indexing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .errors import ContractError
from .models import Model


@dataclass
class MarginRecord:
    sample_id: int
    clean_margin: float
    margin_estimate: float
    hinge: float
    score: float


def batch_margins(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-sample logit margin: true-class logit minus the best rival logit."""
    if logits.shape[-1] < 2:
        raise ContractError("margin needs at least two classes")
    true = logits.gather(-1, labels.reshape(-1, 1)).squeeze(1)
    rival = logits.masked_fill(
        torch.nn.functional.one_hot(labels, logits.shape[-1]).bool(), float("-inf")
    ).amax(dim=-1)
    return true - rival


def logit_margin(logits: Sequence[float] | torch.Tensor, label: int) -> float:
    logits = torch.as_tensor(logits, dtype=torch.float64).reshape(1, -1)
    return float(batch_margins(logits, torch.tensor([label])))


def robust_hinge(margin: float | torch.Tensor):
    """max(0, 1 - margin); zero exactly when the margin reaches 1."""
    if isinstance(margin, torch.Tensor):
        return torch.clamp(1.0 - margin, min=0.0)
    return max(0.0, 1.0 - float(margin))


def perturbation_score(margin_estimate: float | torch.Tensor):
    """Robust hinge evaluated at an attack-estimated margin; larger = more vulnerable."""
    return robust_hinge(margin_estimate)


def worst_case_index(hinges: Sequence[float] | torch.Tensor) -> int:
    """Index of the largest hinge; ties break toward the lowest index."""
    hinges = torch.as_tensor(hinges, dtype=torch.float64)
    if hinges.numel() == 0:
        raise ContractError("worst_case_index needs at least one hinge value")
    return int(torch.argmax(hinges))


def estimate_robust_margin(model: Model, x: torch.Tensor, label: int,
                           attack_fn: Callable, threat, sample_id: int = 0) -> MarginRecord:
    """Attack one sample and read the margin at the returned perturbation."""
    from .models import LabeledBatch  # local import keeps module load order flat

    batch = LabeledBatch(
        x.reshape(1, *x.shape),
        torch.tensor([label], dtype=torch.int64),
        torch.tensor([sample_id], dtype=torch.int64),
    )
    with torch.no_grad():
        clean = float(batch_margins(model.logits(batch.inputs), batch.labels))
    result = attack_fn(model, batch, threat)
    companions = result[0] if isinstance(result, tuple) else result
    comp = companions[0]
    hinge = robust_hinge(comp.margin_estimate)
    return MarginRecord(sample_id, clean, comp.margin_estimate, hinge, hinge)
