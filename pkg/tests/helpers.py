"""Shared numeric checks for the test suite."""

import numpy as np
import torch
from torch.nn import functional as nnf
from torch.overrides import TorchFunctionMode

_KINKED = {nnf.relu, torch.relu, torch.Tensor.relu, nnf.leaky_relu, torch.abs, torch.Tensor.abs}


class KinkRecorder(TorchFunctionMode):
    """Records which side of zero every ReLU-type input falls on."""

    def __init__(self):
        super().__init__()
        self.signs = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        if func in _KINKED:
            self.signs.append((args[0] > 0).detach().clone())
        return func(*args, **(kwargs or {}))


def _evaluate(loss_fn):
    with KinkRecorder() as rec:
        value = loss_fn().item()
    return value, rec.signs


def _same_branches(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def finite_difference_check(loss_fn, params, n_samples=20, h=1e-4, seed=0, max_draws=None):
    """Compare autograd against central differences on randomly sampled scalar entries.

    ``loss_fn`` must be a float64 closure returning a scalar tensor. A draw
    whose +-h perturbation moves any ReLU input across zero straddles a
    point where the loss is not differentiable; such draws are skipped and
    replaced. Returns the relative errors of ``n_samples`` accepted draws.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    grads = [p.grad.detach().clone() for p in params]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = rng.permutation(int(sizes.sum()))[: max_draws or 20 * n_samples]
    errors = []
    with torch.no_grad():
        _, base = _evaluate(loss_fn)
        for flat in order:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = int(flat - offsets[k])
            view = params[k].view(-1)
            orig = view[idx].item()
            view[idx] = orig + h
            up, s_up = _evaluate(loss_fn)
            view[idx] = orig - h
            down, s_down = _evaluate(loss_fn)
            view[idx] = orig
            if not (_same_branches(base, s_up) and _same_branches(base, s_down)):
                continue
            numeric = (up - down) / (2 * h)
            analytic = grads[k].view(-1)[idx].item()
            scale = max(abs(analytic), abs(numeric))
            errors.append(0.0 if scale == 0 else abs(analytic - numeric) / scale)
            if len(errors) == n_samples:
                break
    return errors


def projection_loss(out, seed=0):
    """A fixed random linear functional of ``out``: exercises every output entry."""
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(out.shape, generator=g, dtype=out.dtype)
    return (out * w).sum()
