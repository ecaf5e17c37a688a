"""Joint optimization of a synthetic set and its training model.

Each epoch: sample a real mini-batch, score it with the line-search attacker,
order it hard-to-easy, and for every curriculum batch draw a label-matched
synthetic batch, generate its adversaries, combine the cross-entropy
performance term with the chosen robustness term, and take one gradient step
on both the model parameters and the synthetic images (clamped to range).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .attacks import ThreatSpec, WarmStartCache, ls_pgd
from .container import read_container, write_container
from .contrastive import (MemoryQueue, build_pair_sets, contrastive_loss, enqueue,
                          mean_match_loss, retrieve_hard_negatives)
from .curriculum import (CurriculumBatch, SyntheticSampler, match_synthetic_batch,
                         order_by_score, score_epoch)
from .errors import ConfigurationError, ContractError, IngestionError, NumericError
from .models import (LabeledBatch, Model, convnet3_build, cross_entropy, mlp_build,
                     validate_batch)

ROBUSTNESS_MODES = ("contrastive", "mean-match", "none")


def default_eta(ipc: int) -> float:
    """Robustness weight default: 0.4 at small budgets, 0.6 from 50 images per class."""
    return 0.6 if ipc >= 50 else 0.4


def combined_loss(perf, crl, eta: float):
    """(1 - eta) * performance + eta * robustness."""
    if not 0.0 <= eta <= 1.0:
        raise ContractError(f"eta must lie in [0, 1], got {eta}")
    return (1.0 - eta) * perf + eta * crl


@dataclass
class SyntheticDataset:
    """The learnable distilled set: IPC images per class with fixed hard labels."""

    images: torch.Tensor  # [N, ...] within [lo, hi]
    labels: torch.Tensor  # [N] int64, exactly ipc per class
    ipc: int
    lo: float
    hi: float
    provenance: dict

    def __post_init__(self):
        if len(self.labels) == 0:
            return  # degenerate empty set; rejected by consumers that need data
        counts = torch.bincount(self.labels)
        if not bool((counts == self.ipc).all()):
            raise ContractError(f"expected exactly {self.ipc} images per class, got {counts.tolist()}")
        if self.images.min() < self.lo or self.images.max() > self.hi:
            raise ContractError("synthetic images outside declared range")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def as_batch(self) -> LabeledBatch:
        return LabeledBatch(self.images.clone(), self.labels.clone(),
                            torch.arange(len(self), dtype=torch.int64))


def init_synthetic(train: LabeledBatch, num_classes: int, ipc: int,
                   mode: str = "real-sample", seed: int = 0,
                   lo: float = 0.0, hi: float = 1.0) -> SyntheticDataset:
    """Seeded initialization: per-class real samples, or uniform noise in range."""
    if mode not in ("real-sample", "noise"):
        raise ConfigurationError(f"unknown init mode {mode!r}")
    gen = torch.Generator().manual_seed(seed)
    labels = torch.arange(num_classes).repeat_interleave(ipc)
    shape = train.inputs.shape[1:]
    if mode == "noise":
        images = torch.rand((num_classes * ipc, *shape), generator=gen,
                            dtype=torch.float64) * (hi - lo) + lo
    else:
        chunks = []
        for c in range(num_classes):
            idx = torch.nonzero(train.labels == c).squeeze(1)
            if len(idx) < ipc:
                raise ConfigurationError(
                    f"class {c} has {len(idx)} real samples, fewer than ipc={ipc}")
            perm = idx[torch.randperm(len(idx), generator=gen)[:ipc]]
            chunks.append(train.inputs[perm].clone())
        images = torch.cat(chunks, dim=0)
    return SyntheticDataset(images, labels, ipc, lo, hi, {"mode": mode, "seed": seed})


@dataclass
class DistillConfig:
    """Everything the outer loop needs; `eta=None` resolves from the IPC rule."""

    ipc: int
    epochs: int
    batch_size: int
    threat: ThreatSpec
    model_spec: dict  # {"kind": "mlp", "widths": [...]} or {"kind": "convnet3", "channels": n}
    curriculum_batch_size: int = 0  # 0 -> batch_size // 4
    eta: float | None = None
    tau: float = 0.1
    queue_capacity: int = 256
    queue_top_k: int = 16
    queue_proxy_dim: int = 32
    lr_model: float = 0.01
    model_momentum: float = 0.9
    model_weight_decay: float = 5e-4
    lr_images: float = 0.1
    init_mode: str = "real-sample"
    robustness_loss: str = "contrastive"
    use_curriculum: bool = True
    global_sort: bool = False
    symmetric_anchors: bool = False
    queue_only_negatives: bool = False
    enqueue_adversarial: bool = False
    mix_real_adversaries: bool = False
    # robustness gradients shape the model only by default; letting them flow
    # into the images destabilizes small synthetic sets
    robustness_grad_to_images: bool = False
    model_restart_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.eta is not None and not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError(f"eta must lie in [0, 1], got {self.eta}")
        if self.robustness_loss not in ROBUSTNESS_MODES:
            raise ConfigurationError(
                f"robustness_loss must be one of {ROBUSTNESS_MODES}, got {self.robustness_loss!r}")
        for name in ("ipc", "epochs", "batch_size", "queue_capacity", "queue_top_k",
                     "queue_proxy_dim"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.curriculum_batch_size == 0:
            self.curriculum_batch_size = max(1, self.batch_size // 4)

    def resolved_eta(self) -> float:
        return default_eta(self.ipc) if self.eta is None else self.eta


def build_model(spec: dict, input_shape: tuple[int, ...], num_classes: int, seed: int) -> Model:
    kind = spec.get("kind")
    if kind == "mlp":
        widths = [int(np.prod(input_shape))] + [int(w) for w in spec.get("widths", [32, 32])]
        return mlp_build(widths, num_classes, seed)
    if kind == "convnet3":
        return convnet3_build(int(spec.get("channels", 16)), num_classes, input_shape, seed)
    raise ConfigurationError(f"unknown model kind {kind!r}")


@dataclass
class StepRecord:
    epoch: int
    position: int
    perf: float
    robustness: float
    combined: float


def distill_step(model: Model, curriculum_batch: CurriculumBatch,
                 synthetic: SyntheticDataset, queue: MemoryQueue,
                 cache: WarmStartCache, config: DistillConfig, *,
                 optimizer: torch.optim.Optimizer,
                 sampler: SyntheticSampler | None = None,
                 epoch: int = 0) -> tuple[Model, SyntheticDataset, MemoryQueue, StepRecord]:
    """One curriculum step: matched synthetic batch, adversaries, combined loss,
    simultaneous parameter and image updates, then queue maintenance."""
    eta = config.resolved_eta()
    mode = config.robustness_loss
    robustness_active = eta > 0.0 and mode != "none"

    syn_batch = match_synthetic_batch(curriculum_batch, synthetic,
                                      rng_seed=config.seed, sampler=sampler)
    syn_idx = syn_batch.sample_ids % len(synthetic)

    deltas = None
    if robustness_active:
        companions, _ = ls_pgd(model, syn_batch, config.threat, cache)
        deltas = torch.stack([c.delta for c in companions])

    x = syn_batch.inputs.detach().clone().requires_grad_(True)
    labels = syn_batch.labels
    with torch.enable_grad():
        perf = cross_entropy(model.logits(x), labels)
        if robustness_active:
            base = x if config.robustness_grad_to_images else x.detach()
            clean_embs = model.embed(base)
            adv_embs = model.embed(base + deltas)
            if mode == "contrastive":
                retrieved = [
                    retrieve_hard_negatives(queue, clean_embs[i].detach(), int(labels[i]),
                                            config.queue_top_k)[0]
                    for i in range(len(labels))
                ]
                extras = None
                if config.mix_real_adversaries:
                    real_x = torch.stack([e.input + e.companion.delta
                                          for e in curriculum_batch.entries])
                    extras = (model.embed(real_x).detach(), curriculum_batch.labels())
                pair_sets, embeddings = build_pair_sets(
                    clean_embs, adv_embs, labels, retrieved,
                    symmetric_anchors=config.symmetric_anchors,
                    queue_only_negatives=config.queue_only_negatives,
                    extras=extras)
                robustness = contrastive_loss(embeddings, pair_sets, config.tau)
            else:
                robustness = mean_match_loss(clean_embs, adv_embs, labels)
        else:
            robustness = torch.zeros((), dtype=torch.float64)
        total = combined_loss(perf, robustness, eta)

        optimizer.zero_grad()
        total.backward()

    if not math.isfinite(float(total.detach())):
        raise NumericError(f"non-finite loss at epoch {epoch} "
                           f"(perf={float(perf.detach())}, "
                           f"robustness={float(robustness.detach())})")
    optimizer.step()
    with torch.no_grad():
        if x.grad is not None:
            synthetic.images.index_add_(0, syn_idx, -config.lr_images * x.grad)
        synthetic.images.clamp_(synthetic.lo, synthetic.hi)

    if robustness_active:
        with torch.no_grad():
            for i in range(len(labels)):
                enqueue(queue, int(labels[i]), clean_embs[i])
                if config.enqueue_adversarial:
                    enqueue(queue, int(labels[i]), adv_embs[i])

    record = StepRecord(epoch, curriculum_batch.position, float(perf.detach()),
                        float(robustness.detach()), float(total.detach()))
    return model, synthetic, queue, record


def run_distillation(config: DistillConfig, train: LabeledBatch, num_classes: int,
                     lo: float = 0.0, hi: float = 1.0, out_dir: str | Path | None = None,
                     trace: list | None = None, return_state: bool = False):
    """Full outer loop; returns the synthetic set and a run manifest with
    per-epoch losses and attack gradient-call counts. With `return_state`,
    also returns the final model/queue/cache state for checkpointing."""
    validate_batch(train, lo, hi, num_classes)
    input_shape = tuple(train.inputs.shape[1:])
    model = build_model(config.model_spec, input_shape, num_classes, config.seed)
    optimizer = torch.optim.SGD(model.net.parameters(), lr=config.lr_model,
                                momentum=config.model_momentum,
                                weight_decay=config.model_weight_decay)
    synthetic = init_synthetic(train, num_classes, config.ipc,
                               mode=config.init_mode, seed=config.seed, lo=lo, hi=hi)
    queue = MemoryQueue(num_classes, model.embed_dim, config.queue_capacity,
                        config.queue_proxy_dim, seed=config.seed + 1)
    real_cache = WarmStartCache()
    syn_cache = WarmStartCache()
    gen = torch.Generator().manual_seed(config.seed + 2)

    epoch_rows: list[dict] = []
    step_records: list[StepRecord] = []
    model.reset_counters()
    retired_backward = retired_forward = 0  # counters of models replaced by restarts

    try:
        for epoch in range(config.epochs):
            if (config.model_restart_every > 0 and epoch > 0
                    and epoch % config.model_restart_every == 0):
                retired_backward += model.counters.input_grad_samples
                retired_forward += model.counters.forward_samples
                model = build_model(config.model_spec, input_shape, num_classes,
                                    config.seed + 101 + epoch)
                optimizer = torch.optim.SGD(model.net.parameters(), lr=config.lr_model,
                                            momentum=config.model_momentum,
                                            weight_decay=config.model_weight_decay)
            if config.global_sort:
                batch = train
            else:
                idx = torch.randperm(len(train), generator=gen)[: config.batch_size]
                batch = train.subset(idx.tolist())

            grad_before = model.counters.input_grad_samples
            companions, real_cache = score_epoch(model, batch, config.threat, real_cache)
            score_grad_calls = model.counters.input_grad_samples - grad_before

            batches = order_by_score(companions, config.curriculum_batch_size, batch,
                                     sort=config.use_curriculum)
            sampler = SyntheticSampler(synthetic, seed=config.seed * 7919 + epoch)

            grad_before = model.counters.input_grad_samples
            perf_sum = rob_sum = comb_sum = 0.0
            for cb in batches:
                model, synthetic, queue, rec = distill_step(
                    model, cb, synthetic, queue, syn_cache, config,
                    optimizer=optimizer, sampler=sampler, epoch=epoch)
                step_records.append(rec)
                perf_sum += rec.perf
                rob_sum += rec.robustness
                comb_sum += rec.combined
                if trace is not None:
                    for e in cb.entries:
                        trace.append((epoch, e.sample_id, e.companion.margin_estimate,
                                      e.companion.score, cb.position))
            syn_grad_calls = model.counters.input_grad_samples - grad_before

            n_steps = max(1, len(batches))
            epoch_rows.append({
                "epoch": epoch,
                "mean_score": float(np.mean([c.score for c in companions])) if companions else 0.0,
                "perf_loss": perf_sum / n_steps,
                "robustness_loss": rob_sum / n_steps,
                "combined_loss": comb_sum / n_steps,
                "score_backward_samples": score_grad_calls,
                "synthetic_backward_samples": syn_grad_calls,
            })
    except NumericError as exc:
        dump_path = None
        if out_dir is not None:
            dump_path = Path(out_dir) / "diagnostic_state.bin"
            write_container(dump_path,
                            {"images": synthetic.images.numpy(),
                             "labels": synthetic.labels.numpy()},
                            {"kind": "diagnostic", "error": str(exc)})
        raise NumericError(str(exc), str(dump_path) if dump_path else None) from exc

    manifest = {
        "seed": config.seed,
        "epochs": config.epochs,
        "eta": config.resolved_eta(),
        "robustness_loss": config.robustness_loss,
        "use_curriculum": config.use_curriculum,
        "attack_backward_samples": retired_backward + model.counters.input_grad_samples,
        "forward_samples": retired_forward + model.counters.forward_samples,
        "per_epoch": epoch_rows,
        "steps": [asdict(r) for r in step_records],
    }
    if return_state:
        state = {"model": model, "queue": queue, "real_cache": real_cache,
                 "synthetic_cache": syn_cache}
        return synthetic, manifest, state
    return synthetic, manifest


# -- checkpointing -------------------------------------------------------------


def save_synthetic(path: str | Path, synthetic: SyntheticDataset,
                   queue: MemoryQueue | None = None, config_hash: str = "",
                   epoch: int = 0) -> None:
    arrays = {"images": synthetic.images.numpy(), "labels": synthetic.labels.numpy()}
    manifest = {
        "kind": "synthetic",
        "ipc": synthetic.ipc,
        "lo": synthetic.lo,
        "hi": synthetic.hi,
        "provenance": synthetic.provenance,
        "config_hash": config_hash,
        "epoch": epoch,
    }
    if queue is not None:
        q_arrays, q_meta = queue.snapshot()
        arrays.update(q_arrays)
        manifest["queue"] = q_meta
    write_container(path, arrays, manifest)


def load_synthetic(path: str | Path) -> tuple[SyntheticDataset, MemoryQueue | None, dict]:
    arrays, manifest = read_container(path)
    if manifest.get("kind") != "synthetic":
        raise IngestionError(f"{path} is not a synthetic-set checkpoint")
    synthetic = SyntheticDataset(
        torch.from_numpy(arrays["images"].copy()),
        torch.from_numpy(arrays["labels"].copy()),
        manifest["ipc"], manifest["lo"], manifest["hi"], manifest["provenance"])
    queue = MemoryQueue.restore(arrays, manifest["queue"]) if "queue" in manifest else None
    return synthetic, queue, manifest
