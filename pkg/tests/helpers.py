"""Independent oracles shared by the unit and acceptance tests."""

import itertools

import numpy as np
import torch


def central_difference(fn, inputs, h=1e-6):
    """Numerical gradient of scalar ``fn(*inputs)`` w.r.t. every float64 input tensor."""
    grads = []
    for x in inputs:
        g = torch.zeros_like(x)
        flat, gflat = x.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn(*inputs))
            flat[i] = orig - h
            down = float(fn(*inputs))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def gradient_matches(fn, inputs, rtol=1e-4, atol=1e-8):
    """Compare autograd against central differences; returns (ok, worst relative error)."""
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*leaves)
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)
    with torch.no_grad():
        numeric = central_difference(fn, [x.detach().clone() for x in inputs])
    ok, worst = True, 0.0
    for a, n in zip(analytic, numeric):
        a = torch.zeros_like(n) if a is None else a
        err = (a - n).abs()
        worst = max(worst, float((err / (n.abs() + atol / rtol)).max()))
        ok &= bool(torch.all(err <= atol + rtol * n.abs()))
    return ok, worst


def combine_brute_force(mask_logits, class_probs):
    """Per-pixel, per-class double loop: score = sum_n sigmoid(logit) * p_n(c)."""
    n, h, w = mask_logits.shape
    c = class_probs.shape[1]
    scores = np.zeros((h, w, c))
    labels = np.zeros((h, w), dtype=np.int64)
    for y, x in itertools.product(range(h), range(w)):
        for k in range(c):
            total = 0.0
            for q in range(n):
                total += 1.0 / (1.0 + np.exp(-mask_logits[q, y, x])) * class_probs[q, k]
            scores[y, x, k] = total
        best = 0
        for k in range(1, c):
            if scores[y, x, k] > scores[y, x, best]:
                best = k
        labels[y, x] = best
    return scores, labels


def unit_rows(rng, b, d):
    x = rng.normal(size=(b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)
