"""Run configuration: parsing, validation with field-level errors, canonical
serialization, and stable hashing.

The on-disk format is JSON; serialization is canonical (sorted keys), so the
config hash is stable under key reordering. Epsilon values may be written as
rationals like "2/255".
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import ThreatSpec
from .data import DatasetDescriptor
from .distill import DistillConfig
from .errors import ConfigurationError
from .evaluation import AttackSpec


def parse_rational(value) -> float:
    """Accept a float, an int, or a string rational like "2/255"."""
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        parts = value.split("/")
        try:
            if len(parts) == 2:
                return float(parts[0]) / float(parts[1])
            return float(value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigurationError(f"cannot parse {value!r} as a number") from exc
    raise ConfigurationError(f"cannot parse {value!r} as a number")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:12]


def _require(mapping: dict, key: str, path: str):
    if key not in mapping:
        raise ConfigurationError(f"missing required config field: {path}.{key}")
    return mapping[key]


@dataclass
class EvalProtocol:
    attacks: list[AttackSpec]
    student_epochs: int = 200
    student_batch: int = 0  # 0 = full batch
    restarts: int = 1
    student_seed_offset: int = 1


@dataclass
class RunConfig:
    seed: int
    out_dir: str
    dataset: DatasetDescriptor
    distill: DistillConfig
    eval: EvalProtocol
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def _parse_threat(d: dict, path: str, lo: float, hi: float) -> ThreatSpec:
    eps = parse_rational(_require(d, "epsilon", path))
    alpha = parse_rational(d["alpha"]) if "alpha" in d else (eps / 4 if eps > 0 else (hi - lo) / 4)
    return ThreatSpec(
        epsilon=eps,
        alpha=alpha,
        steps=int(d.get("steps", 10)),
        lo=lo,
        hi=hi,
        shortlist_beta=float(d.get("shortlist_beta", 2.0)),
        shortlist_len=int(d.get("shortlist_len", 3)),
    )


def _parse_dataset(d: dict, path: str = "dataset") -> DatasetDescriptor:
    kind = _require(d, "kind", path)
    rng = d.get("range", [0.0, 1.0])
    return DatasetDescriptor(
        kind=kind,
        num_classes=int(d.get("num_classes", 3)),
        per_class=int(d.get("per_class", 500)),
        input_shape=tuple(d.get("input_shape", [2])),
        lo=float(rng[0]),
        hi=float(rng[1]),
        seed=int(d.get("seed", 0)),
        test_fraction=float(d.get("test_fraction", 0.5)),
        noise=float(d.get("noise", 0.35)),
        path=d.get("path"),
    )


def _parse_distill(d: dict, dataset: DatasetDescriptor, global_seed: int) -> DistillConfig:
    threat = _parse_threat(_require(d, "threat", "distill"), "distill.threat",
                           dataset.lo, dataset.hi)
    model_spec = _require(d, "model", "distill")
    if "kind" not in model_spec:
        raise ConfigurationError("missing required config field: distill.model.kind")
    flags = d.get("flags", {})
    return DistillConfig(
        ipc=int(_require(d, "ipc", "distill")),
        epochs=int(_require(d, "epochs", "distill")),
        batch_size=int(_require(d, "batch_size", "distill")),
        threat=threat,
        model_spec=dict(model_spec),
        curriculum_batch_size=int(d.get("curriculum_batch_size", 0)),
        eta=None if d.get("eta") is None else float(d["eta"]),
        tau=float(d.get("tau", 0.1)),
        queue_capacity=int(d.get("queue", {}).get("capacity", 256)),
        queue_top_k=int(d.get("queue", {}).get("top_k", 16)),
        queue_proxy_dim=int(d.get("queue", {}).get("proxy_dim", 32)),
        lr_model=float(d.get("lr_model", 0.01)),
        model_momentum=float(d.get("model_momentum", 0.9)),
        model_weight_decay=float(d.get("model_weight_decay", 5e-4)),
        lr_images=float(d.get("lr_images", 0.1)),
        init_mode=d.get("init", "real-sample"),
        robustness_loss=d.get("robustness_loss", "contrastive"),
        use_curriculum=bool(d.get("use_curriculum", True)),
        global_sort=bool(flags.get("global_sort", False)),
        symmetric_anchors=bool(flags.get("symmetric_anchors", False)),
        queue_only_negatives=bool(flags.get("queue_only_negatives", False)),
        enqueue_adversarial=bool(flags.get("enqueue_adversarial", False)),
        mix_real_adversaries=bool(flags.get("mix_real_adversaries", False)),
        robustness_grad_to_images=bool(flags.get("robustness_grad_to_images", False)),
        model_restart_every=int(d.get("model_restart_every", 0)),
        seed=int(d.get("seed", global_seed)),
    )


def _parse_eval(d: dict, dataset: DatasetDescriptor) -> EvalProtocol:
    specs = []
    for i, a in enumerate(d.get("attacks", [])):
        name = _require(a, "name", f"eval.attacks[{i}]")
        threat = _parse_threat(a, f"eval.attacks[{i}]", dataset.lo, dataset.hi)
        params = dict(a.get("params", {}))
        label = a["label"] if "label" in a else f"{name}@{a['epsilon']}"
        specs.append(AttackSpec(name, threat, params, label))
    return EvalProtocol(
        attacks=specs,
        student_epochs=int(d.get("student_epochs", 200)),
        student_batch=int(d.get("student_batch", 0)),
        restarts=int(d.get("restarts", 1)),
        student_seed_offset=int(d.get("student_seed_offset", 1)),
    )


def parse_run_config(source: dict | str | Path, seed_override: int | None = None,
                     out_override: str | None = None) -> RunConfig:
    if not isinstance(source, dict):
        path = Path(source)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            source = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
    raw = json.loads(canonical_json(source))  # deep copy, canonical key order
    if seed_override is not None:
        raw["seed"] = seed_override
    if out_override is not None:
        raw["out_dir"] = out_override
    seed = int(_require(raw, "seed", "<root>"))
    dataset = _parse_dataset(_require(raw, "dataset", "<root>"))
    distill = _parse_distill(_require(raw, "distill", "<root>"), dataset, seed)
    protocol = _parse_eval(raw.get("eval", {}), dataset)
    out_dir = raw.get("out_dir", "")
    return RunConfig(seed, out_dir, dataset, distill, protocol, raw)


def serialize_run_config(rc: RunConfig) -> dict:
    """The canonical dict form; parse(serialize(parse(x))) == parse(x)."""
    return json.loads(canonical_json(rc.raw))
