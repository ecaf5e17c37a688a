"""Small differentiable backbones with a uniform surface for attacks and distillation.

A :class:`Model` wraps a ``torch.nn.Module`` kept permanently in eval mode and
exposes logits, penultimate embeddings, flat-parameter access, and gradient
services (input gradients and parameter gradients of any scalar loss built
from its outputs). Backward passes through ``input_gradient`` are counted
per sample, which is what the attack-budget ledger reports.

Everything runs in float64 by default; normalization layers are
batch-statistics free (group norm over single-sample groups) so that per-sample
outputs and gradients never depend on batch composition.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import torch
from torch import nn

from .container import read_container, write_container
from .errors import ConfigurationError, ContractError, IngestionError


@dataclass
class LabeledBatch:
    """A batch of inputs with integer labels and stable per-sample ids."""

    inputs: torch.Tensor  # [M, ...]
    labels: torch.Tensor  # [M] int64
    sample_ids: torch.Tensor  # [M] int64, unique within the batch

    def __post_init__(self):
        if not (self.inputs.shape[0] == self.labels.shape[0] == self.sample_ids.shape[0]):
            raise ContractError("inputs, labels and sample_ids must share the batch dimension")
        ids = self.sample_ids.tolist()
        if len(set(ids)) != len(ids):
            raise ContractError("sample_ids must be unique within a batch")

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def subset(self, index: Sequence[int]) -> "LabeledBatch":
        idx = torch.as_tensor(list(index), dtype=torch.int64)
        return LabeledBatch(self.inputs[idx], self.labels[idx], self.sample_ids[idx])


def validate_batch(batch: LabeledBatch, lo: float, hi: float, num_classes: int) -> None:
    if batch.inputs.min() < lo or batch.inputs.max() > hi:
        raise ContractError(f"batch inputs outside declared range [{lo}, {hi}]")
    if batch.labels.min() < 0 or batch.labels.max() >= num_classes:
        raise ContractError(f"batch labels outside [0, {num_classes})")


@dataclass
class GradCounters:
    forward_samples: int = 0
    input_grad_samples: int = 0


class Model:
    """Deterministic classifier: logits, embeddings, flat params, gradients.

    The wrapped network must expose ``features(x)`` returning the penultimate
    embedding and ``head`` mapping embeddings to logits. Forward and embed are
    pure with respect to parameters; parameter updates require exclusive
    access (single writer).
    """

    def __init__(self, net: nn.Module, builder: str, builder_kwargs: dict, seed: int,
                 input_shape: tuple[int, ...], num_classes: int, embed_dim: int):
        self.net = net.double().eval()
        self.builder = builder
        self.builder_kwargs = builder_kwargs
        self.seed = seed
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.embed_dim = embed_dim
        self.counters = GradCounters()

    # -- forward surfaces ------------------------------------------------

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        self.counters.forward_samples += int(x.shape[0])
        return self.net.head(self.net.features(x))

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        self.counters.forward_samples += int(x.shape[0])
        return self.net.features(x)

    def reset_counters(self) -> None:
        self.counters = GradCounters()

    # -- gradient services -----------------------------------------------

    def input_gradient(self, x: torch.Tensor,
                       scalar_fn: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
        """d scalar_fn(logits(x)) / dx. Counts one backward pass per sample."""
        x = x.detach().requires_grad_(True)
        with torch.enable_grad():
            value = scalar_fn(self.logits(x))
            (grad,) = torch.autograd.grad(value, x)
        self.counters.input_grad_samples += int(x.shape[0])
        return grad.detach()

    def parameter_gradient(self, loss_fn: Callable[[], torch.Tensor]) -> torch.Tensor:
        """Flat gradient of a scalar loss built from this model's outputs."""
        params = list(self.net.parameters())
        with torch.enable_grad():
            value = loss_fn()
            grads = torch.autograd.grad(value, params, allow_unused=True)
        flat = [
            (g if g is not None else torch.zeros_like(p)).reshape(-1)
            for g, p in zip(grads, params)
        ]
        return torch.cat(flat).detach()

    # -- flat parameter view ----------------------------------------------

    def get_flat_params(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.net.parameters()])

    def set_flat_params(self, flat: torch.Tensor) -> None:
        flat = flat.detach().to(torch.float64)
        expected = sum(p.numel() for p in self.net.parameters())
        if flat.numel() != expected:
            raise ContractError(f"flat parameter vector has {flat.numel()} entries, expected {expected}")
        offset = 0
        with torch.no_grad():
            for p in self.net.parameters():
                n = p.numel()
                p.copy_(flat[offset : offset + n].reshape(p.shape))
                offset += n

    # -- checkpointing -----------------------------------------------------

    def save(self, path: str | Path) -> None:
        arrays = {name: p.detach().numpy() for name, p in self.net.named_parameters()}
        manifest = {
            "kind": "model",
            "builder": self.builder,
            "builder_kwargs": self.builder_kwargs,
            "seed": self.seed,
            "shapes": {name: list(p.shape) for name, p in self.net.named_parameters()},
        }
        write_container(path, arrays, manifest)


def load_model(path: str | Path) -> Model:
    arrays, manifest = read_container(path)
    if manifest.get("kind") != "model":
        raise IngestionError(f"{path} is not a model checkpoint")
    builders = {"mlp": mlp_build, "convnet3": convnet3_build}
    try:
        builder = builders[manifest["builder"]]
    except KeyError as exc:
        raise IngestionError(f"unknown model builder {manifest.get('builder')!r}") from exc
    kwargs = dict(manifest["builder_kwargs"])
    kwargs["seed"] = manifest["seed"]
    model = builder(**kwargs)
    with torch.no_grad():
        named = dict(model.net.named_parameters())
        for name, arr in arrays.items():
            if name not in named:
                raise IngestionError(f"checkpoint parameter {name!r} not present in rebuilt model")
            named[name].copy_(torch.from_numpy(arr))
    return model


# -- builders ----------------------------------------------------------------


def _seeded_init(net: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Linear, nn.Conv2d)):
                w = module.weight
                fan_in = w.shape[1] * (w[0, 0].numel() if w.dim() > 2 else 1)
                std = (2.0 / fan_in) ** 0.5
                w.copy_(torch.randn(w.shape, generator=gen, dtype=torch.float64) * std)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.GroupNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()


class _MLPNet(nn.Module):
    def __init__(self, layer_widths: Sequence[int], num_classes: int):
        super().__init__()
        layers = []
        for i in range(len(layer_widths) - 1):
            layers.append(nn.Linear(layer_widths[i], layer_widths[i + 1]))
        self.hidden = nn.ModuleList(layers)
        self.head = nn.Linear(layer_widths[-1], num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = x.reshape(x.shape[0], -1)
        for layer in self.hidden:
            h = torch.tanh(layer(h))
        return h


def mlp_build(layer_widths: Sequence[int], num_classes: int, seed: int) -> Model:
    """Tanh MLP over flat vectors; embed() is the last hidden activation."""
    widths = list(layer_widths)
    if len(widths) < 2 or any(w < 1 for w in widths):
        raise ConfigurationError(f"layer_widths must list >=2 positive widths, got {widths}")
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")
    net = _MLPNet(widths, num_classes)
    _seeded_init(net, seed)
    return Model(net, "mlp", {"layer_widths": widths, "num_classes": num_classes},
                 seed, (widths[0],), num_classes, widths[-1])


class _ConvNet3(nn.Module):
    def __init__(self, in_channels: int, channels: int, num_classes: int, spatial: int):
        super().__init__()
        blocks = []
        prev = in_channels
        for _ in range(3):
            blocks += [
                nn.Conv2d(prev, channels, kernel_size=3, padding=1),
                # one group per channel: per-sample statistics, no batch coupling
                nn.GroupNorm(channels, channels),
                nn.ReLU(),
                nn.AvgPool2d(2),
            ]
            prev = channels
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(channels * spatial, num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x).reshape(x.shape[0], -1)


def convnet3_build(channels: int, num_classes: int, input_shape: Sequence[int], seed: int) -> Model:
    """Three conv blocks (conv, group norm, relu, avg-pool) and a linear head."""
    shape = tuple(input_shape)
    if len(shape) != 3:
        raise ConfigurationError(f"input_shape must be (C, H, W), got {shape}")
    c, h, w = shape
    if channels < 1 or num_classes < 2:
        raise ConfigurationError("channels must be >= 1 and num_classes >= 2")
    if h > 64 or w > 64:
        raise ConfigurationError(f"input spatial size {h}x{w} exceeds the 64x64 desk-scale bound")
    if h % 8 != 0 or w % 8 != 0:
        raise ConfigurationError(f"input spatial size {h}x{w} not divisible by the 8x pooling factor")
    net = _ConvNet3(c, channels, num_classes, (h // 8) * (w // 8))
    _seeded_init(net, seed)
    embed_dim = channels * (h // 8) * (w // 8)
    return Model(net, "convnet3",
                 {"channels": channels, "num_classes": num_classes, "input_shape": list(shape)},
                 seed, shape, num_classes, embed_dim)


# -- losses -------------------------------------------------------------------


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-softmax probability of the true class (log-sum-exp stabilized)."""
    return cross_entropy_per_sample(logits, labels).mean()


def cross_entropy_per_sample(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    log_probs = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    return -log_probs.gather(-1, labels.reshape(-1, 1)).squeeze(1)
