"""Gradient comparison against the central-difference oracle."""

import numpy as np
import torch

from oracles import central_grad

H = 1e-3
RTOL = 1e-4


def autograd_vs_fd(fn, inputs, wrt=0, h=H):
    """Return (autograd, finite-difference) gradients of scalar ``fn(*inputs)`` w.r.t. ``inputs[wrt]``."""
    inputs = [torch.as_tensor(x, dtype=torch.float64) for x in inputs]
    x = inputs[wrt].clone().requires_grad_(True)
    args = list(inputs)
    args[wrt] = x
    fn(*args).backward()
    analytic = x.grad.numpy()

    def f(arr):
        a = list(inputs)
        a[wrt] = torch.from_numpy(arr)
        with torch.no_grad():
            return float(fn(*a))

    numeric = central_grad(f, inputs[wrt].numpy(), h)
    return analytic, numeric


def assert_grad_close(fn, inputs, wrt=0, h=H, rtol=RTOL):
    """Relative tolerance on each entry, scaled by the gradient's largest entry."""
    analytic, numeric = autograd_vs_fd(fn, inputs, wrt, h)
    scale = max(np.max(np.abs(numeric)), 1e-12)
    err = np.max(np.abs(analytic - numeric)) / scale
    assert err <= rtol, f"relative gradient error {err:.3e} > {rtol}"
    return err
