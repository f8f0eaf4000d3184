"""Independent reference implementations used by the tests.

These deliberately avoid the package's own vectorized code paths: plain loops,
dense sampling, arbitrary precision, and finite differences.
"""

from __future__ import annotations

import math

import mpmath
import numpy as np
import torch


# geometry


def dense_distance(x, points, resolution: float = 1e-4) -> float:
    """Distance from ``x`` to a polyline sampled every ``resolution`` of arc length."""
    x = np.asarray(x, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    best = math.inf
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / resolution)))
        t = np.linspace(0.0, 1.0, n + 1)[:, None]
        samples = a + t * (b - a)
        best = min(best, float(np.min(np.linalg.norm(samples - x, axis=1))))
    return best


def segment_foot(x, a, b) -> tuple[float, float]:
    """Analytic clamped projection of ``x`` onto segment ab: (distance, lambda)."""
    ax, ay = float(a[0]), float(a[1])
    dx, dy = float(b[0]) - ax, float(b[1]) - ay
    px, py = float(x[0]) - ax, float(x[1]) - ay
    length2 = dx * dx + dy * dy
    lam = 0.0 if length2 == 0 else min(1.0, max(0.0, (px * dx + py * dy) / length2))
    return math.hypot(px - lam * dx, py - lam * dy), lam


TIE = 1e-12


def brute_projection(x, points) -> tuple[int, float, float]:
    """(segment index, lambda, distance); near-equal distances go to the smallest index."""
    cands = [segment_foot(x, points[k], points[k + 1]) for k in range(len(points) - 1)]
    dmin = min(d for d, _ in cands)
    k = next(k for k, (d, _) in enumerate(cands) if d <= dmin + TIE)
    return k, cands[k][1], cands[k][0]


def brute_snap(x, segments) -> tuple[int, tuple[float, float]]:
    """``segments`` is a list of (id, start, end); ties go to the smallest id."""
    ordered = sorted(segments, key=lambda s: s[0])
    cands = [segment_foot(x, a, b) for _, a, b in ordered]
    dmin = min(d for d, _ in cands)
    k = next(k for k, (d, _) in enumerate(cands) if d <= dmin + TIE)
    sid, a, b = ordered[k]
    lam = cands[k][1]
    return sid, (a[0] + lam * (b[0] - a[0]), a[1] + lam * (b[1] - a[1]))


# contrastive loss


def info_nce_mp(u, v_plus, negatives, tau, digits: int = 50) -> float:
    """Direct summation of the InfoNCE ratio with arbitrary-precision arithmetic."""
    with mpmath.workdps(digits):
        def cos(a, b):
            a = [mpmath.mpf(float(t)) for t in a]
            b = [mpmath.mpf(float(t)) for t in b]
            dot = mpmath.fsum(x * y for x, y in zip(a, b))
            return dot / (mpmath.sqrt(mpmath.fsum(x * x for x in a)) * mpmath.sqrt(mpmath.fsum(y * y for y in b)))

        t = mpmath.mpf(float(tau))
        pos = mpmath.exp(cos(u, v_plus) / t)
        denom = pos + mpmath.fsum(mpmath.exp(cos(u, n) / t) for n in negatives)
        return float(-mpmath.log(pos / denom))


# gradients


def fd_gradient(fn, tensor: torch.Tensor, step: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of scalar ``fn()`` w.r.t. every entry of ``tensor`` (in place)."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(fn())
            flat[i] = orig - step
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = float(torch.linalg.vector_norm(a - b))
    den = max(float(torch.linalg.vector_norm(a)), float(torch.linalg.vector_norm(b)), 1e-12)
    return num / den


def check_gradients(fn, tensors, step: float = 1e-6) -> float:
    """Worst relative error between autograd and central differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.detach().clone()
        numeric = fd_gradient(fn, t, step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


# metrics


def average_precision_sweep(scores, positive) -> float:
    """Area under the step-wise PR curve by sweeping every distinct score as a threshold."""
    scores = [float(s) for s in scores]
    positive = [bool(p) for p in positive]
    total_pos = sum(positive)
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores), reverse=True):
        picked = [p for s, p in zip(scores, positive) if s >= thr]
        tp = sum(picked)
        precision = tp / len(picked)
        recall = tp / total_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def macro_f1_loop(pred, truth, n_classes) -> float:
    f1s = []
    for c in range(n_classes):
        tp = sum(1 for p, t in zip(pred, truth) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred, truth) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred, truth) if p != c and t == c)
        if tp + fp + fn:
            f1s.append(2 * tp / (2 * tp + fp + fn))
    return sum(f1s) / len(f1s)
