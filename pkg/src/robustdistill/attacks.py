"""L-infinity attacks: FGSM, PGD, momentum/variance/jitter variants, CW, and
the warm-started line-search PGD used inside the distillation loop.

All attacks are pure given (model, batch, seed), operate in evaluation mode,
and return per-sample companions whose perturbations satisfy the ball and
range constraints of the threat model. Backward passes go through
``Model.input_gradient`` so the per-sample attack budget is always accounted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigurationError, ContractError
from .margin import batch_margins, robust_hinge
from .models import LabeledBatch, Model, cross_entropy_per_sample


@dataclass
class ThreatSpec:
    """L-infinity budget, step schedule, valid input range, and the
    geometric step shortlist used by the line-search attacker."""

    epsilon: float
    alpha: float
    steps: int
    lo: float = 0.0
    hi: float = 1.0
    shortlist_beta: float = 2.0
    shortlist_len: int = 3

    def __post_init__(self):
        if self.hi <= self.lo:
            raise ConfigurationError(f"invalid input range [{self.lo}, {self.hi}]")
        # epsilon == 0 is admitted as the degenerate empty-ball threat
        if not 0.0 <= self.epsilon <= self.hi - self.lo:
            raise ConfigurationError(f"epsilon {self.epsilon} outside [0, {self.hi - self.lo}]")
        if self.alpha <= 0:
            raise ConfigurationError("alpha must be positive")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.shortlist_beta <= 1:
            raise ConfigurationError("shortlist_beta must exceed 1")
        if not 1 <= self.shortlist_len <= 8:
            raise ConfigurationError("shortlist_len must be in [1, 8]")


def default_threat(epsilon: float, lo: float = 0.0, hi: float = 1.0, steps: int = 10) -> ThreatSpec:
    """Standard evaluation schedule: alpha = epsilon / 4 over `steps` iterations."""
    alpha = epsilon / 4 if epsilon > 0 else (hi - lo) / 4
    return ThreatSpec(epsilon, alpha, steps, lo, hi)


@dataclass
class AdvCompanion:
    """One sample's perturbation with the attack objective value, the logit
    margin at the perturbed point, and the hinge score derived from it."""

    sample_id: int
    delta: torch.Tensor
    adv_loss: float
    margin_estimate: float
    score: float


class WarmStartCache:
    """Per-sample persisted perturbation and the loss observed when it was stored."""

    def __init__(self):
        self._entries: dict[int, tuple[torch.Tensor, float]] = {}

    def __contains__(self, sample_id: int) -> bool:
        return sample_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, sample_id: int) -> tuple[torch.Tensor, float] | None:
        return self._entries.get(sample_id)

    def store(self, sample_id: int, delta: torch.Tensor, loss: float) -> None:
        self._entries[sample_id] = (delta.detach().clone(), float(loss))


def project_linf(delta: torch.Tensor, x: torch.Tensor, threat: ThreatSpec) -> torch.Tensor:
    """Clamp delta into the epsilon ball intersected with the valid range of x.

    Implemented as one clamp of delta against per-element bounds
    [max(-eps, lo - x), min(eps, hi - x)], so feasible deltas pass through
    bit-identically and the projection is exactly idempotent.
    """
    if delta.shape != x.shape:
        raise ContractError(f"delta shape {tuple(delta.shape)} != input shape {tuple(x.shape)}")
    eps = torch.tensor(threat.epsilon, dtype=delta.dtype)
    lo_bound = torch.maximum(-eps, threat.lo - x)
    hi_bound = torch.minimum(eps, threat.hi - x)
    return torch.clamp(delta, min=lo_bound, max=hi_bound)


def _ce_sum(labels: torch.Tensor):
    return lambda logits: cross_entropy_per_sample(logits, labels).sum()


def _finalize(model: Model, batch: LabeledBatch, delta: torch.Tensor,
              adv_losses: torch.Tensor | None = None,
              logits: torch.Tensor | None = None) -> list[AdvCompanion]:
    with torch.no_grad():
        if logits is None:
            logits = model.logits(batch.inputs + delta)
        if adv_losses is None:
            adv_losses = cross_entropy_per_sample(logits, batch.labels)
        margins = batch_margins(logits, batch.labels)
    return [
        AdvCompanion(int(sid), delta[i].detach().clone(), float(adv_losses[i]),
                     float(margins[i]), float(robust_hinge(margins[i])))
        for i, sid in enumerate(batch.sample_ids)
    ]


def fgsm(model: Model, batch: LabeledBatch, threat: ThreatSpec) -> list[AdvCompanion]:
    """Single signed-gradient step of size epsilon; one backward pass per batch."""
    grad = model.input_gradient(batch.inputs, _ce_sum(batch.labels))
    delta = project_linf(threat.epsilon * torch.sign(grad), batch.inputs, threat)
    return _finalize(model, batch, delta)


def pgd(model: Model, batch: LabeledBatch, threat: ThreatSpec,
        init_delta: torch.Tensor | None = None) -> list[AdvCompanion]:
    """Iterated signed-gradient ascent on cross-entropy with projection each step."""
    x = batch.inputs
    if init_delta is None:
        delta = torch.zeros_like(x)
    else:
        if init_delta.abs().max() > threat.epsilon + 1e-9:
            raise ContractError("init_delta lies outside the epsilon ball")
        delta = project_linf(init_delta.detach().clone(), x, threat)
    for _ in range(threat.steps):
        grad = model.input_gradient(x + delta, _ce_sum(batch.labels))
        delta = project_linf(delta + threat.alpha * torch.sign(grad), x, threat)
    return _finalize(model, batch, delta)


def ls_pgd(model: Model, batch: LabeledBatch, threat: ThreatSpec,
           cache: WarmStartCache) -> tuple[list[AdvCompanion], WarmStartCache]:
    """Warm-started single-direction attack with a forward-only line search.

    Per sample: re-evaluate the cached perturbation (one forward). If its loss
    has not decreased since it was stored, reuse it with no backward pass.
    Otherwise take one backward pass for the ascent direction and pick the
    best of `shortlist_len` projected candidates with step alpha * beta^q.
    Cold cache entries always take the search branch from delta = 0, which
    makes the result at least as strong as a single PGD step of size alpha.
    """
    x, y = batch.inputs, batch.labels
    m = len(batch)
    deltas = torch.zeros_like(x)
    last_losses = torch.full((m,), -math.inf, dtype=torch.float64)
    cold = torch.zeros(m, dtype=torch.bool)
    for i, sid in enumerate(batch.sample_ids.tolist()):
        entry = cache.get(sid)
        if entry is None:
            cold[i] = True
        else:
            deltas[i], last_losses[i] = entry[0], entry[1]
    # keep cached perturbations feasible even if x moved since they were stored
    deltas = project_linf(deltas, x, threat)

    with torch.no_grad():
        logits0 = model.logits(x + deltas)
        losses0 = cross_entropy_per_sample(logits0, y)
    search = cold | (losses0 < last_losses)

    final_delta = deltas.clone()
    final_logits = logits0.clone()
    final_loss = losses0.clone()

    if bool(search.any()):
        idx = torch.nonzero(search).squeeze(1)
        xs, ys, ds = x[idx], y[idx], deltas[idx]
        grad = model.input_gradient(xs + ds, _ce_sum(ys))
        v = torch.sign(grad)
        best_loss = torch.full((len(idx),), -math.inf, dtype=torch.float64)
        best_delta = ds.clone()
        best_logits = final_logits[idx].clone()
        for q in range(threat.shortlist_len):
            step = threat.alpha * threat.shortlist_beta**q
            cand = project_linf(ds + step * v, xs, threat)
            with torch.no_grad():
                lg = model.logits(xs + cand)
                lv = cross_entropy_per_sample(lg, ys)
            better = lv > best_loss
            best_loss = torch.where(better, lv, best_loss)
            best_delta[better] = cand[better]
            best_logits[better] = lg[better]
        final_delta[idx] = best_delta
        final_logits[idx] = best_logits
        final_loss[idx] = best_loss

    for i, sid in enumerate(batch.sample_ids.tolist()):
        cache.store(sid, final_delta[i], float(final_loss[i]))
    companions = _finalize(model, batch, final_delta, adv_losses=final_loss, logits=final_logits)
    return companions, cache


def l1_normalized(grad: torch.Tensor) -> torch.Tensor:
    norms = grad.abs().reshape(grad.shape[0], -1).sum(dim=1)
    norms = torch.clamp(norms, min=1e-12).reshape(-1, *([1] * (grad.dim() - 1)))
    return grad / norms


def momentum_update(momentum: torch.Tensor, grad: torch.Tensor, decay: float) -> torch.Tensor:
    """decay * momentum + grad / ||grad||_1 (per-sample L1 normalization)."""
    return decay * momentum + l1_normalized(grad)


def mim(model: Model, batch: LabeledBatch, threat: ThreatSpec,
        decay: float = 1.0) -> list[AdvCompanion]:
    """Momentum-iterative signed updates on an accumulated L1-normalized gradient."""
    if decay < 0:
        raise ContractError("decay must be >= 0")
    x = batch.inputs
    delta = torch.zeros_like(x)
    momentum = torch.zeros_like(x)
    for _ in range(threat.steps):
        grad = model.input_gradient(x + delta, _ce_sum(batch.labels))
        momentum = momentum_update(momentum, grad, decay)
        delta = project_linf(delta + threat.alpha * torch.sign(momentum), x, threat)
    return _finalize(model, batch, delta)


def cw_linf(model: Model, batch: LabeledBatch, threat: ThreatSpec,
            kappa: float = 0.0) -> list[AdvCompanion]:
    """Epsilon-ball margin-surrogate attack: drive the logit margin down until
    it falls below -kappa, after which the surrogate is flat (zero gradient)."""
    if kappa < 0:
        raise ContractError("kappa must be >= 0")
    x, y = batch.inputs, batch.labels

    def surrogate(logits):
        return torch.minimum(-batch_margins(logits, y), torch.tensor(kappa, dtype=torch.float64))

    delta = torch.zeros_like(x)
    for _ in range(threat.steps):
        grad = model.input_gradient(x + delta, lambda lg: surrogate(lg).sum())
        delta = project_linf(delta + threat.alpha * torch.sign(grad), x, threat)
    with torch.no_grad():
        logits = model.logits(x + delta)
        values = surrogate(logits)
    return _finalize(model, batch, delta, adv_losses=values, logits=logits)


def vmi_fgsm(model: Model, batch: LabeledBatch, threat: ThreatSpec,
             neighbors: int = 5, neighborhood_scale: float = 1.5,
             decay: float = 1.0, seed: int = 0) -> list[AdvCompanion]:
    """Momentum-iterative attack whose gradient is corrected by the mean
    deviation of gradients at uniformly sampled neighbor points."""
    if neighbors < 1:
        raise ContractError("neighbors must be >= 1")
    x = batch.inputs
    gen = torch.Generator().manual_seed(seed)
    delta = torch.zeros_like(x)
    momentum = torch.zeros_like(x)
    variance = torch.zeros_like(x)
    radius = neighborhood_scale * threat.epsilon
    for _ in range(threat.steps):
        grad = model.input_gradient(x + delta, _ce_sum(batch.labels))
        momentum = momentum_update(momentum, grad + variance, decay)
        acc = torch.zeros_like(x)
        for _ in range(neighbors):
            u = (torch.rand(x.shape, generator=gen, dtype=torch.float64) * 2 - 1) * radius
            acc = acc + model.input_gradient(x + delta + u, _ce_sum(batch.labels))
        variance = acc / neighbors - grad
        delta = project_linf(delta + threat.alpha * torch.sign(momentum), x, threat)
    return _finalize(model, batch, delta)


def jitter(model: Model, batch: LabeledBatch, threat: ThreatSpec,
           noise_std: float = 0.1, rescale: bool = True, seed: int = 0) -> list[AdvCompanion]:
    """PGD-style iterations on cross-entropy of noise-perturbed, optionally
    L-infinity-rescaled logits; fully seeded."""
    if noise_std < 0:
        raise ContractError("noise_std must be >= 0")
    x, y = batch.inputs, batch.labels
    gen = torch.Generator().manual_seed(seed)
    delta = torch.zeros_like(x)
    for _ in range(threat.steps):
        noise = noise_std * torch.randn((len(batch), model.num_classes),
                                        generator=gen, dtype=torch.float64)

        def objective(logits):
            z = logits + noise
            if rescale:
                z = z / torch.clamp(z.abs().amax(dim=-1, keepdim=True), min=1e-12)
            return cross_entropy_per_sample(z, y).sum()

        grad = model.input_gradient(x + delta, objective)
        delta = project_linf(delta + threat.alpha * torch.sign(grad), x, threat)
    return _finalize(model, batch, delta)
