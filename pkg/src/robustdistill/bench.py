"""Matched scoring-pass benchmark: multi-step PGD vs the line-search attacker.

Both arms see identical model states and batches (the model drifts by one
clean SGD step per epoch, applied to each arm's own copy from the same seed),
so backward-pass counts, achieved adversarial loss, and wall-clock time are
directly comparable.
"""

from __future__ import annotations

import time

import torch

from .attacks import ThreatSpec, WarmStartCache, ls_pgd, pgd
from .config import RunConfig
from .data import generate
from .distill import build_model
from .models import LabeledBatch, Model, cross_entropy


def _drift(model: Model, batch: LabeledBatch, lr: float = 0.05) -> None:
    """One plain SGD step on clean CE; deterministic, shared by both arms."""
    params = list(model.net.parameters())
    with torch.enable_grad():
        loss = cross_entropy(model.logits(batch.inputs), batch.labels)
        grads = torch.autograd.grad(loss, params)
    with torch.no_grad():
        for p, g in zip(params, grads):
            p.add_(g, alpha=-lr)


def run_attack_bench(rc: RunConfig, epochs: int = 5) -> dict:
    """Score the same epoch stream with both attackers and account for costs."""
    train, _ = generate(rc.dataset)
    input_shape = tuple(train.inputs.shape[1:])
    dcfg = rc.distill
    threat = dcfg.threat
    gen = torch.Generator().manual_seed(rc.seed + 17)
    batches = []
    for _ in range(epochs):
        idx = torch.randperm(len(train), generator=gen)[: dcfg.batch_size]
        batches.append(train.subset(idx.tolist()))

    arms: dict[str, dict] = {}
    dominance = {"checked": 0, "violations": 0}

    for arm in ("pgd", "ls_pgd"):
        model = build_model(dcfg.model_spec, input_shape, rc.dataset.num_classes, rc.seed)
        model.reset_counters()
        cache = WarmStartCache()
        losses = []
        t0 = time.perf_counter()
        for batch in batches:
            if arm == "pgd":
                comps = pgd(model, batch, threat)
            else:
                comps, cache = ls_pgd(model, batch, threat, cache)
            losses.extend(c.adv_loss for c in comps)
            _drift(model, batch)
        wall = time.perf_counter() - t0
        arms[arm] = {
            "backward_samples": model.counters.input_grad_samples,
            "forward_samples": model.counters.forward_samples,
            "wall_time_s": wall,
            "mean_adv_ce": sum(losses) / len(losses),
        }

    # cold-cache dominance: line search vs a single PGD step on a fresh model
    model = build_model(dcfg.model_spec, input_shape, rc.dataset.num_classes, rc.seed)
    one_step = ThreatSpec(threat.epsilon, threat.alpha, 1, threat.lo, threat.hi,
                          threat.shortlist_beta, threat.shortlist_len)
    ls_comps, _ = ls_pgd(model, batches[0], threat, WarmStartCache())
    pgd_comps = pgd(model, batches[0], one_step)
    for lc, pc in zip(ls_comps, pgd_comps):
        dominance["checked"] += 1
        if lc.adv_loss < pc.adv_loss - 1e-9:
            dominance["violations"] += 1

    return {
        "epochs": epochs,
        "samples_per_epoch": len(batches[0]),
        "steps": threat.steps,
        "pgd": arms["pgd"],
        "ls_pgd": arms["ls_pgd"],
        "backward_ratio": arms["pgd"]["backward_samples"]
        / max(1, arms["ls_pgd"]["backward_samples"]),
        "wallclock_speedup": arms["pgd"]["wall_time_s"]
        / max(1e-12, arms["ls_pgd"]["wall_time_s"]),
        "dominance": dominance,
    }
