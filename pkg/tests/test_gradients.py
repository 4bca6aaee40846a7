"""Finite-difference gradient checks for the differentiable operations."""

import pytest
import torch

from gradcheck_utils import FD_STEP, check_chain_gradients, relative_error
from mosaictrain.heads import ClassifierHead, cross_entropy_from_probs
from mosaictrain.interaction import gate, supplement


def fd_grad(f, tensor, idx, h=FD_STEP):
    with torch.no_grad():
        orig = tensor[idx].item()
        tensor[idx] = orig + h
        up = float(f())
        tensor[idx] = orig - h
        down = float(f())
        tensor[idx] = orig
    return (up - down) / (2 * h)


def test_gate_supplement_gradients():
    g = torch.Generator().manual_seed(0)
    x_n = torch.randn(4, 6, generator=g, dtype=torch.float64, requires_grad=True)
    x_m = torch.randn(4, 6, generator=g, dtype=torch.float64, requires_grad=True)
    loss = supplement(x_n, gate(x_m, x_n)).pow(2).sum()
    gx_n, gx_m = torch.autograd.grad(loss, (x_n, x_m))
    f = lambda: supplement(x_n, gate(x_m, x_n)).pow(2).sum()
    for t, analytic in ((x_n, gx_n), (x_m, gx_m)):
        for idx in [(0, 0), (1, 3), (3, 5)]:
            err = relative_error(float(analytic[idx]), fd_grad(f, t, idx))
            assert err < 1e-4


def test_classifier_softmax_ce_gradients():
    torch.manual_seed(1)
    head = ClassifierHead(8, 4).double().eval()
    g = torch.Generator().manual_seed(2)
    v = torch.randn(3, 8, generator=g, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 2, 3])
    f = lambda: cross_entropy_from_probs(head(v), labels)
    loss = f()
    targets = {"input": v, **dict(head.named_parameters())}
    grads = torch.autograd.grad(loss, list(targets.values()))
    for (name, t), analytic in zip(targets.items(), grads):
        flat_idx = [(i,) if t.dim() == 1 else (i % t.shape[0], i % t.shape[1])
                    for i in range(min(5, t.numel()))]
        for idx in flat_idx:
            err = relative_error(float(analytic[idx]), fd_grad(f, t, idx))
            assert err < 1e-4, f"{name}[{idx}]: rel err {err}"


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_chain_gradients_small(seed):
    worst, where = check_chain_gradients(seed, coords_per_tensor=6)
    assert worst < 1e-4, f"max relative error {worst:.3e} at {where}"
