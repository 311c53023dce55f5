"""Shared oracles for the test suite: central finite differences."""

import torch


def fd_gradients(loss_fn, params, eps: float = 1e-3) -> list[torch.Tensor]:
    """Central-difference gradient of loss_fn() w.r.t. each parameter tensor."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = float(loss_fn())
                flat[i] = orig - eps
                minus = float(loss_fn())
                flat[i] = orig
                gflat[i] = (plus - minus) / (2.0 * eps)
            grads.append(g)
    return grads


def analytic_gradients(loss_fn, params) -> list[torch.Tensor]:
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    return [p.grad.detach().clone() for p in params]


def max_relative_error(analytic, numeric) -> float:
    """max |a - n| / max(1, |a|, |n|) over all parameter entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = torch.clamp(torch.maximum(a.abs(), n.abs()), min=1.0)
        worst = max(worst, float(((a - n).abs() / denom).max()))
    return worst


def randomize_parameters(module: torch.nn.Module, seed: int, std: float = 0.5) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)
