"""Instance-level contrastive robustness objective and its supporting machinery.

The loss pulls each clean anchor toward its adversarial counterpart and all
same-class entries, and pushes it away from rival-class entries. Negatives
can come from the batch itself and/or from a class-balanced FIFO memory of
past embeddings; hard negatives are retrieved from that memory by ranking
low-dimensional random-projection proxies (the full embeddings are what enter
the loss -- projections are only a retrieval device).

The class-conditional mean-alignment loss used by prior robustness-matching
pipelines is also provided as a comparison objective.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError


def cosine_similarity(u: torch.Tensor, v: torch.Tensor) -> float:
    """Cosine of two vectors; zero vectors yield 0 with a warning."""
    u = torch.as_tensor(u, dtype=torch.float64).reshape(-1)
    v = torch.as_tensor(v, dtype=torch.float64).reshape(-1)
    nu, nv = float(u.norm()), float(v.norm())
    if nu == 0.0 or nv == 0.0:
        warnings.warn("cosine_similarity on a zero vector; returning 0", RuntimeWarning)
        return 0.0
    return float(u.dot(v) / (nu * nv))


def pairwise_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """[n, m] cosine similarities; zero rows produce zero similarity."""
    na = torch.clamp(a.norm(dim=-1, keepdim=True), min=1e-300)
    nb = torch.clamp(b.norm(dim=-1, keepdim=True), min=1e-300)
    return (a @ b.T) / (na * nb.T)


class MemoryQueue:
    """Per-class FIFO of (embedding, proxy) pairs with a fixed random projection.

    Capacity Q applies per class; eviction is strictly oldest-first. Stored
    embeddings are detached -- no gradient ever flows into the queue.
    """

    def __init__(self, num_classes: int, dim: int, capacity: int, proxy_dim: int, seed: int = 0):
        if num_classes < 1 or dim < 1 or capacity < 1 or proxy_dim < 1:
            raise ContractError("queue dimensions and capacity must be positive")
        self.num_classes = num_classes
        self.dim = dim
        self.capacity = capacity
        self.proxy_dim = proxy_dim
        gen = torch.Generator().manual_seed(seed)
        self.projection = torch.randn(proxy_dim, dim, generator=gen,
                                      dtype=torch.float64) / proxy_dim**0.5
        self._queues: list[deque] = [deque() for _ in range(num_classes)]
        self._next_id = 0

    def __len__(self) -> int:
        return sum(len(q) for q in self._queues)

    def class_size(self, cls: int) -> int:
        return len(self._queues[cls])

    def entries(self, cls: int) -> list[tuple[torch.Tensor, torch.Tensor, int]]:
        return list(self._queues[cls])

    def snapshot(self) -> tuple[dict[str, np.ndarray], dict]:
        """Arrays + manifest block for checkpointing, restored bit-exactly."""
        arrays = {"queue_projection": self.projection.numpy()}
        for c, q in enumerate(self._queues):
            if q:
                arrays[f"queue_emb_{c}"] = torch.stack([e for e, _, _ in q]).numpy()
                arrays[f"queue_age_{c}"] = np.array([i for _, _, i in q], dtype=np.int64)
        meta = {
            "num_classes": self.num_classes,
            "dim": self.dim,
            "capacity": self.capacity,
            "proxy_dim": self.proxy_dim,
            "next_id": self._next_id,
        }
        return arrays, meta

    @classmethod
    def restore(cls, arrays: dict[str, np.ndarray], meta: dict) -> "MemoryQueue":
        queue = cls(meta["num_classes"], meta["dim"], meta["capacity"], meta["proxy_dim"])
        queue.projection = torch.from_numpy(arrays["queue_projection"].copy())
        for c in range(meta["num_classes"]):
            if f"queue_emb_{c}" in arrays:
                embs = torch.from_numpy(arrays[f"queue_emb_{c}"].copy())
                ages = arrays[f"queue_age_{c}"]
                for emb, age in zip(embs, ages):
                    queue._queues[c].append((emb, queue.projection @ emb, int(age)))
        queue._next_id = meta["next_id"]
        return queue


def enqueue(queue: MemoryQueue, cls: int, embedding: torch.Tensor) -> MemoryQueue:
    """Append an embedding (with its proxy) to the class queue, evicting the oldest."""
    if not 0 <= cls < queue.num_classes:
        raise ContractError(f"class {cls} out of range [0, {queue.num_classes})")
    emb = embedding.detach().to(torch.float64).reshape(-1).clone()
    if emb.shape[0] != queue.dim:
        raise ContractError(f"embedding dim {emb.shape[0]} != queue dim {queue.dim}")
    q = queue._queues[cls]
    q.append((emb, queue.projection @ emb, queue._next_id))
    queue._next_id += 1
    if len(q) > queue.capacity:
        q.popleft()
    return queue


def retrieve_hard_negatives(queue: MemoryQueue, anchor_embedding: torch.Tensor,
                            anchor_class: int, k: int) -> tuple[list[torch.Tensor], list[int]]:
    """Top-k cross-class entries by proxy cosine similarity; full embeddings returned.

    Ranking is exact over the proxies; ties break by insertion order. Fewer
    than k entries are returned when the rival queues are sparse.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    anchor_proxy = queue.projection @ anchor_embedding.detach().to(torch.float64).reshape(-1)
    pool: list[tuple[torch.Tensor, torch.Tensor, int]] = []
    for c in range(queue.num_classes):
        if c != anchor_class:
            pool.extend(queue._queues[c])
    if not pool:
        return [], []
    proxies = torch.stack([p for _, p, _ in pool])
    sims = pairwise_cosine(anchor_proxy.reshape(1, -1), proxies).squeeze(0)
    order = sorted(range(len(pool)), key=lambda i: (-float(sims[i]), pool[i][2]))
    picked = order[: min(k, len(pool))]
    return [pool[i][0] for i in picked], [pool[i][2] for i in picked]


@dataclass
class PairSets:
    """Per-anchor positive and candidate index lists over a shared row space.

    Rows 0..M-1 are in-batch clean embeddings, rows M..2M-1 their adversarial
    counterparts, and any retrieved memory entries follow. The anchor itself
    never appears in its own candidate list.
    """

    anchors: list[int]
    positives: list[list[int]]
    candidates: list[list[int]]


def build_pair_sets(clean_embs: torch.Tensor, adv_embs: torch.Tensor, labels: torch.Tensor,
                    retrieved: list[list[torch.Tensor]] | None = None,
                    symmetric_anchors: bool = False,
                    queue_only_negatives: bool = False,
                    extras: tuple[torch.Tensor, torch.Tensor] | None = None
                    ) -> tuple[PairSets, torch.Tensor]:
    """Assemble the shared embedding matrix and the P(i)/A(i) index sets.

    Positives for anchor i: its own adversary plus both entries of every
    same-class batch mate. Candidates add rival-class batch entries (unless
    queue_only_negatives) and that anchor's retrieved negatives. `extras` is
    an optional labeled block of additional rows (same-class extras join the
    positives, rival-class extras the candidates).
    """
    m = clean_embs.shape[0]
    if adv_embs.shape[0] != m or labels.shape[0] != m:
        raise ContractError("clean embeddings, adversarial embeddings and labels must align")
    if retrieved is not None and len(retrieved) != m:
        raise ContractError("retrieved negatives must provide one list per anchor")

    rows = [clean_embs, adv_embs]
    retrieved_idx: list[list[int]] = [[] for _ in range(m)]
    offset = 2 * m
    if retrieved is not None:
        for i, negs in enumerate(retrieved):
            for neg in negs:
                rows.append(neg.reshape(1, -1))
                retrieved_idx[i].append(offset)
                offset += 1
    extra_idx: list[int] = []
    extra_labels: list[int] = []
    if extras is not None:
        extra_embs, extra_lab = extras
        rows.append(extra_embs.reshape(-1, clean_embs.shape[1]))
        extra_idx = list(range(offset, offset + extra_embs.shape[0]))
        extra_labels = [int(v) for v in extra_lab]
    embeddings = torch.cat([r.reshape(-1, clean_embs.shape[1]) for r in rows], dim=0)

    lab = labels.tolist()
    anchors: list[int] = []
    positives: list[list[int]] = []
    candidates: list[list[int]] = []

    def add_anchor(row: int, i: int, own_positive: int):
        pos = [own_positive]
        cand: list[int] = []
        for j in range(m):
            if j == i:
                continue
            if lab[j] == lab[i]:
                pos += [j, m + j]
            elif not queue_only_negatives:
                cand += [j, m + j]
        for e, e_lab in zip(extra_idx, extra_labels):
            if e_lab == lab[i]:
                pos.append(e)
            else:
                cand.append(e)
        cand = pos + cand + retrieved_idx[i]
        anchors.append(row)
        positives.append(pos)
        candidates.append(cand)

    for i in range(m):
        add_anchor(i, i, m + i)
    if symmetric_anchors:
        for i in range(m):
            add_anchor(m + i, i, i)
    return PairSets(anchors, positives, candidates), embeddings


def contrastive_loss(embeddings: torch.Tensor, pair_sets: PairSets, tau: float) -> torch.Tensor:
    """Temperature-scaled supervised contrast over cosine similarities.

    Mean over anchors of the mean over positives of
    -log softmax(sim / tau) restricted to each anchor's candidate set;
    log-sum-exp stabilized.
    """
    if tau <= 0:
        raise ContractError("tau must be positive")
    total = embeddings.new_zeros(())
    for row, pos, cand in zip(pair_sets.anchors, pair_sets.positives, pair_sets.candidates):
        if not pos:
            raise ContractError(f"anchor row {row} has an empty positive set")
        sims = pairwise_cosine(embeddings[row].reshape(1, -1), embeddings[cand]).squeeze(0) / tau
        log_denom = torch.logsumexp(sims, dim=0)
        pos_set = set(pos)
        pos_mask = torch.tensor([c in pos_set for c in cand])
        total = total - (sims[pos_mask] - log_denom).mean()
    return total / len(pair_sets.anchors)


def mean_match_loss(clean_embs: torch.Tensor, adv_embs: torch.Tensor,
                    labels: torch.Tensor, adv_labels: torch.Tensor | None = None) -> torch.Tensor:
    """Sum over classes of squared distance between clean and adversarial
    embedding means; classes missing one side are skipped with a warning."""
    if adv_labels is None:
        adv_labels = labels
    total = clean_embs.new_zeros(())
    classes = sorted(set(labels.tolist()) | set(adv_labels.tolist()))
    for c in classes:
        clean_c = clean_embs[labels == c]
        adv_c = adv_embs[adv_labels == c]
        if clean_c.shape[0] == 0 or adv_c.shape[0] == 0:
            warnings.warn(f"class {c} missing on one side of mean matching; skipped",
                          RuntimeWarning)
            continue
        total = total + (clean_c.mean(dim=0) - adv_c.mean(dim=0)).pow(2).sum()
    return total
