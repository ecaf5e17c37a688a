"""Attack-aware ordering of scored samples into curriculum mini-batches.

Each epoch the real mini-batch is scored with the line-search attacker, sorted
by descending perturbation score (hard-to-easy), chunked, and each curriculum
batch is paired with a label-matched draw from the synthetic set.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .attacks import AdvCompanion, ThreatSpec, WarmStartCache, ls_pgd
from .errors import ConfigurationError, ContractError
from .models import LabeledBatch, Model


@dataclass
class CurriculumEntry:
    sample_id: int
    companion: AdvCompanion
    input: torch.Tensor | None = None
    label: int | None = None


@dataclass
class CurriculumBatch:
    """One chunk of the epoch's descending-score stream; `position` is the
    batch index t within the epoch."""

    entries: list[CurriculumEntry]
    position: int

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def sample_ids(self) -> list[int]:
        return [e.sample_id for e in self.entries]

    @property
    def scores(self) -> list[float]:
        return [e.companion.score for e in self.entries]

    def labels(self) -> torch.Tensor:
        if any(e.label is None for e in self.entries):
            raise ContractError("curriculum batch was built without labels attached")
        return torch.tensor([e.label for e in self.entries], dtype=torch.int64)


def score_epoch(model: Model, real_batch: LabeledBatch, threat: ThreatSpec,
                cache: WarmStartCache) -> tuple[list[AdvCompanion], WarmStartCache]:
    """Run the line-search attacker over the batch, yielding scored companions."""
    return ls_pgd(model, real_batch, threat, cache)


def order_by_score(companions: list[AdvCompanion], batch_size: int,
                   batch: LabeledBatch | None = None,
                   sort: bool = True) -> list[CurriculumBatch]:
    """Stable descending sort by score (ties by sample_id), chunked into
    batches of at most `batch_size`; `sort=False` keeps the incoming order."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if not companions:
        return []
    if sort:
        ordered = sorted(companions, key=lambda c: (-c.score, c.sample_id))
    else:
        ordered = list(companions)

    by_id = {}
    if batch is not None:
        for i, sid in enumerate(batch.sample_ids.tolist()):
            by_id[sid] = (batch.inputs[i], int(batch.labels[i]))

    batches = []
    for t, start in enumerate(range(0, len(ordered), batch_size)):
        entries = []
        for comp in ordered[start : start + batch_size]:
            x, lbl = by_id.get(comp.sample_id, (None, None))
            entries.append(CurriculumEntry(comp.sample_id, comp, x, lbl))
        batches.append(CurriculumBatch(entries, t))
    return batches


class SyntheticSampler:
    """Seeded per-label draws from a synthetic set: without replacement until a
    label's pool is exhausted, with replacement afterwards. One instance per epoch."""

    def __init__(self, synthetic, seed: int):
        self._gen = torch.Generator().manual_seed(seed)
        self._by_label: dict[int, list[int]] = {}
        self._pools: dict[int, list[int]] = {}
        for idx, lbl in enumerate(synthetic.labels.tolist()):
            self._by_label.setdefault(lbl, []).append(idx)
        for lbl, idxs in self._by_label.items():
            perm = torch.randperm(len(idxs), generator=self._gen).tolist()
            self._pools[lbl] = [idxs[p] for p in perm]

    def draw(self, label: int) -> int:
        if label not in self._by_label:
            raise ConfigurationError(f"label {label} absent from the synthetic set")
        pool = self._pools[label]
        if pool:
            return pool.pop()
        candidates = self._by_label[label]
        j = int(torch.randint(len(candidates), (1,), generator=self._gen))
        return candidates[j]


def match_synthetic_batch(curriculum_batch: CurriculumBatch, synthetic,
                          rng_seed: int = 0,
                          sampler: SyntheticSampler | None = None) -> LabeledBatch:
    """Label-aligned synthetic draw: one synthetic sample per curriculum entry,
    with labels equal elementwise. sample_ids are synthetic-set indices."""
    if sampler is None:
        sampler = SyntheticSampler(synthetic, rng_seed)
    labels = curriculum_batch.labels()
    picked = [sampler.draw(int(lbl)) for lbl in labels]
    idx = torch.tensor(picked, dtype=torch.int64)
    # a synthetic image may repeat once a pool is exhausted; ids stay unique
    # (and stable for warm-start keying) as index + N * occurrence_count
    n = len(synthetic.labels)
    seen: dict[int, int] = {}
    ids = []
    for i in picked:
        k = seen.get(i, 0)
        seen[i] = k + 1
        ids.append(i + n * k)
    return LabeledBatch(synthetic.images[idx].clone(), labels,
                        torch.tensor(ids, dtype=torch.int64))
