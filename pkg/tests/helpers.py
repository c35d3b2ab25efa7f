"""Numerical helpers shared by the network tests and the acceptance suite."""

import numpy as np
import torch


def finite_difference_check(module, loss_fn, n_per_tensor=6, step=1e-5, rtol=1e-4, atol=1e-9, seed=0):
    """Compare autograd against central differences on sampled parameter entries.

    ``module`` must already be float64. Returns the worst relative error seen
    (``atol`` guards entries whose true gradient is essentially zero).
    """
    rng = np.random.default_rng(seed)
    module.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for name, p in module.named_parameters():
        if p.grad is None:
            continue
        flat = p.data.view(-1)
        grads = p.grad.view(-1)
        for idx in rng.choice(flat.numel(), size=min(n_per_tensor, flat.numel()), replace=False):
            original = flat[idx].item()
            with torch.no_grad():
                flat[idx] = original + step
                up = loss_fn().item()
                flat[idx] = original - step
                down = loss_fn().item()
                flat[idx] = original
            fd = (up - down) / (2 * step)
            ag = grads[idx].item()
            err = abs(fd - ag) / max(abs(fd), abs(ag), atol / rtol)
            worst = max(worst, err)
            if err > rtol:
                raise AssertionError(f"{name}[{idx}]: autograd {ag:.10g} vs finite difference {fd:.10g}")
    return worst


def weighted_sum(out, seed=1):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(out.shape, generator=g, dtype=out.dtype)
    return (out * w).sum()
