"""Shared oracles for the test suite."""
import itertools
import math

import numpy as np
import torch


def naive_scan(x, delta, a, b, c, d=None):
    """Literal step-by-step recurrence in float64 numpy, one channel and state at a time."""
    x, delta, a, b, c = (np.asarray(t, dtype=np.float64) for t in (x, delta, a, b, c))
    batch, L, ch = x.shape
    n = a.shape[1]
    y = np.zeros((batch, L, ch))
    for i in range(batch):
        for k in range(ch):
            h = np.zeros(n)
            for t in range(L):
                for j in range(n):
                    z = delta[i, t, k] * a[k, j]
                    a_bar = np.exp(z)
                    b_bar = (np.expm1(z) / z if z != 0 else 1.0) * delta[i, t, k] * b[i, t, j]
                    h[j] = a_bar * h[j] + b_bar * x[i, t, k]
                y[i, t, k] = h @ c[i, t]
                if d is not None:
                    y[i, t, k] += d[k] * x[i, t, k]
    return y


def fd_probes(loss_fn, tensors, n_probes, seed=0, eps=1e-3, floor=1e-6):
    """Compare autograd against central finite differences at random entries.

    ``tensors`` is a dict name -> float64 leaf tensor with requires_grad.
    Probes are spread round-robin over the tensors. Returns a list of
    (name, index, analytic, numeric, rel_err).
    """
    names = list(tensors)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [tensors[k] for k in names], allow_unused=True)
    grads = {k: (g if g is not None else torch.zeros_like(tensors[k])) for k, g in zip(names, grads)}
    rng = np.random.default_rng(seed)
    out = []
    for p in range(n_probes):
        name = names[p % len(names)]
        t = tensors[name]
        j = int(rng.integers(t.numel()))
        flat = t.data.view(-1)
        orig = flat[j].item()
        with torch.no_grad():
            flat[j] = orig + eps
            fp = loss_fn().item()
            flat[j] = orig - eps
            fm = loss_fn().item()
            flat[j] = orig
        num = (fp - fm) / (2 * eps)
        ana = grads[name].reshape(-1)[j].item()
        rel = abs(num - ana) / max(abs(num), abs(ana), floor)
        out.append((name, j, ana, num, rel))
    return out


def module_fd_probes(module, loss_fn, n_probes, seed=0, eps=1e-3):
    """fd_probes over every trainable parameter group of a float64 module."""
    params = {n: p for n, p in module.named_parameters() if p.requires_grad}
    return fd_probes(loss_fn, params, max(n_probes, len(params)), seed=seed, eps=eps)


def brute_match(pred, gt):
    n = len(pred)
    return min(sum(np.linalg.norm(pred[i] - gt[s[i]]) for i in range(n)) for s in itertools.permutations(range(n)))


def brute_border(mask):
    out = np.zeros_like(mask)
    for idx in zip(*np.nonzero(mask)):
        for ax in range(3):
            for step in (-1, 1):
                j = list(idx)
                j[ax] += step
                if not (0 <= j[ax] < mask.shape[ax]) or not mask[tuple(j)]:
                    out[idx] = True
    return out


def brute_nsd(p, g, tau, spacing):
    bp, bg = np.argwhere(brute_border(p)) * spacing, np.argwhere(brute_border(g)) * spacing
    if len(bp) + len(bg) == 0:
        return math.nan

    def hits(a, b):
        if len(b) == 0:
            return 0
        return sum(1 for x in a if min(np.sqrt(((b - x) ** 2).sum(1))) <= tau)

    return (hits(bp, bg) + hits(bg, bp)) / (len(bp) + len(bg))


def brute_dsc(p, g):
    s = p.sum() + g.sum()
    return math.nan if s == 0 else 2 * (p & g).sum() / s
