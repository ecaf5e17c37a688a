"""Student training on a synthetic set and the clean/robust accuracy protocol.

Robust accuracy counts a sample iff the prediction at the attack's returned
point is correct; the drop rate relates each robust accuracy to the clean one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import torch

from .attacks import (ThreatSpec, cw_linf, fgsm, jitter, mim, pgd, project_linf, vmi_fgsm)
from .distill import SyntheticDataset, build_model
from .errors import ConfigurationError, ContractError
from .models import LabeledBatch, Model, cross_entropy

ATTACK_REGISTRY = {
    "fgsm": fgsm,
    "pgd": pgd,
    "cw": cw_linf,
    "vmi": vmi_fgsm,
    "vmi_fgsm": vmi_fgsm,
    "jitter": jitter,
    "mim": mim,
}


@dataclass
class AttackSpec:
    name: str
    threat: ThreatSpec
    params: dict = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        if self.name not in ATTACK_REGISTRY:
            raise ConfigurationError(
                f"unknown attack {self.name!r}; known: {sorted(set(ATTACK_REGISTRY))}")
        if not self.label:
            self.label = self.name


def default_attack_suite(epsilon: float, lo: float = 0.0, hi: float = 1.0,
                         steps: int = 10) -> list[AttackSpec]:
    """The six-attack evaluation battery at a single perturbation budget."""
    alpha = epsilon / 4 if epsilon > 0 else (hi - lo) / 4
    threat = ThreatSpec(epsilon, alpha, steps, lo, hi)
    one_step = ThreatSpec(epsilon, alpha, 1, lo, hi)
    return [
        AttackSpec("fgsm", one_step),
        AttackSpec("pgd", threat),
        AttackSpec("cw", threat),
        AttackSpec("vmi", threat, {"neighbors": 3}),
        AttackSpec("jitter", threat),
        AttackSpec("mim", threat),
    ]


@dataclass
class EvalReport:
    clean_accuracy: float
    robust_accuracy: dict[str, float]
    drop_rates: dict[str, float | None]
    epsilons: dict[str, float]
    student_seed: int
    runtimes: dict[str, float] = field(default_factory=dict)

    CSV_HEADER = "attack,epsilon,clean_accuracy,robust_accuracy,drop_rate"

    def csv_rows(self) -> list[str]:
        rows = [self.CSV_HEADER]
        for label in self.robust_accuracy:
            dr = self.drop_rates[label]
            rows.append(f"{label},{self.epsilons[label]:.10g},{self.clean_accuracy:.6f},"
                        f"{self.robust_accuracy[label]:.6f},"
                        f"{'' if dr is None else format(dr, '.6f')}")
        return rows

    def verify_consistency(self, tol: float = 1e-6) -> bool:
        for label, robust in self.robust_accuracy.items():
            expected = drop_rate(self.clean_accuracy, robust) if self.clean_accuracy > 0 else None
            stored = self.drop_rates[label]
            if expected is None or stored is None:
                if expected != stored:
                    return False
            elif abs(expected - stored) > tol:
                return False
        return True


def drop_rate(clean: float, robust: float) -> float | None:
    """(clean - robust) / clean * 100; undefined (None) when clean is 0."""
    if clean < 0 or robust < 0:
        raise ContractError("accuracies must be non-negative percentages")
    if clean == 0:
        return None
    return (clean - robust) / clean * 100.0


def train_student(synthetic: SyntheticDataset, model_spec: dict, epochs: int,
                  seed: int, lr: float = 0.01, momentum: float = 0.9,
                  weight_decay: float = 5e-4, batch_size: int = 0) -> Model:
    """Fresh seeded model fit to the synthetic set with momentum SGD on CE."""
    if len(synthetic) == 0:
        raise ContractError("synthetic set is empty")
    model = build_model(model_spec, tuple(synthetic.images.shape[1:]),
                        synthetic.num_classes, seed)
    optimizer = torch.optim.SGD(model.net.parameters(), lr=lr, momentum=momentum,
                                weight_decay=weight_decay)
    gen = torch.Generator().manual_seed(seed + 1)
    n = len(synthetic)
    bs = batch_size if batch_size > 0 else n
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, bs):
            idx = perm[start : start + bs]
            with torch.enable_grad():
                loss = cross_entropy(model.logits(synthetic.images[idx]),
                                     synthetic.labels[idx])
                optimizer.zero_grad()
                loss.backward()
            optimizer.step()
    return model


def accuracy(model: Model, batch: LabeledBatch) -> float:
    with torch.no_grad():
        pred = model.logits(batch.inputs).argmax(dim=-1)
    return float((pred == batch.labels).double().mean()) * 100.0


def _attack_once(model: Model, batch: LabeledBatch, spec: AttackSpec,
                 restart: int) -> torch.Tensor:
    fn = ATTACK_REGISTRY[spec.name]
    params = dict(spec.params)
    if restart > 0 and spec.name == "pgd":
        gen = torch.Generator().manual_seed(restart)
        init = (torch.rand(batch.inputs.shape, generator=gen, dtype=torch.float64) * 2 - 1)
        params["init_delta"] = project_linf(init * spec.threat.epsilon, batch.inputs, spec.threat)
    elif restart > 0 and spec.name in ("vmi", "vmi_fgsm", "jitter"):
        params["seed"] = params.get("seed", 0) + restart
    companions = fn(model, batch, spec.threat, **params)
    return torch.stack([c.delta for c in companions])


def evaluate(model: Model, test: LabeledBatch, attacks: list[AttackSpec],
             restarts: int = 1, chunk_size: int = 512,
             student_seed: int = 0) -> EvalReport:
    """Clean accuracy plus per-attack robust accuracy and drop rate."""
    labels = [spec.label for spec in attacks]
    if len(set(labels)) != len(labels):
        raise ConfigurationError("attack labels must be unique within one evaluation")
    clean = accuracy(model, test)
    robust: dict[str, float] = {}
    drops: dict[str, float | None] = {}
    epsilons: dict[str, float] = {}
    runtimes: dict[str, float] = {}
    for spec in attacks:
        t0 = time.perf_counter()
        surviving = 0
        for start in range(0, len(test), chunk_size):
            chunk = test.subset(range(start, min(start + chunk_size, len(test))))
            robust_mask = torch.ones(len(chunk), dtype=torch.bool)
            for restart in range(max(1, restarts)):
                delta = _attack_once(model, chunk, spec, restart)
                with torch.no_grad():
                    pred = model.logits(chunk.inputs + delta).argmax(dim=-1)
                robust_mask &= pred == chunk.labels
            surviving += int(robust_mask.sum())
        robust[spec.label] = surviving / len(test) * 100.0
        drops[spec.label] = drop_rate(clean, robust[spec.label])
        epsilons[spec.label] = spec.threat.epsilon
        runtimes[spec.label] = time.perf_counter() - t0
    return EvalReport(clean, robust, drops, epsilons, student_seed, runtimes)
