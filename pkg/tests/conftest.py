import pytest
import torch
from torch import nn

from robustdistill.models import LabeledBatch, Model, mlp_build


class _LinearNet(nn.Module):
    """Logits w_k . x + b_k with identity features; closed forms are exact."""

    def __init__(self, dim, num_classes):
        super().__init__()
        self.head = nn.Linear(dim, num_classes)

    def features(self, x):
        return x.reshape(x.shape[0], -1)


def make_linear_model(weight, bias=None) -> Model:
    w = torch.as_tensor(weight, dtype=torch.float64)
    net = _LinearNet(w.shape[1], w.shape[0])
    with torch.no_grad():
        net.head.weight.copy_(w)
        if bias is None:
            net.head.bias.zero_()
        else:
            net.head.bias.copy_(torch.as_tensor(bias, dtype=torch.float64))
    return Model(net, "linear", {"dim": w.shape[1], "num_classes": w.shape[0]},
                 0, (w.shape[1],), w.shape[0], w.shape[1])


def make_batch(x, labels, ids=None) -> LabeledBatch:
    x = torch.as_tensor(x, dtype=torch.float64)
    labels = torch.as_tensor(labels, dtype=torch.int64)
    if ids is None:
        ids = torch.arange(len(labels))
    return LabeledBatch(x, labels, torch.as_tensor(ids, dtype=torch.int64))


def random_batch(gen, n=8, dim=2, num_classes=3, lo=0.0, hi=1.0) -> LabeledBatch:
    x = torch.rand((n, dim), generator=gen, dtype=torch.float64) * (hi - lo) + lo
    y = torch.randint(0, num_classes, (n,), generator=gen)
    return make_batch(x, y)


@pytest.fixture
def small_mlp() -> Model:
    return mlp_build([2, 16, 16], 3, seed=0)


@pytest.fixture
def gen() -> torch.Generator:
    return torch.Generator().manual_seed(0)
