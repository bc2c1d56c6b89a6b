"""Scalar reference implementations used as independent oracles.

Plain Python loops over nested lists; nothing here imports the package.
"""
import math


def bilinear(u, W, v):
    total = 0.0
    for i in range(len(u)):
        for j in range(len(v)):
            total += u[i] * W[i][j] * v[j]
    return total


def cosine(u, v, temperature):
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    return dot / (nu * nv) / temperature


def _sim(u, v, W, temperature):
    return bilinear(u, W, v) if W is not None else cosine(u, v, temperature)


def _log_sum_exp(values):
    top = max(values)
    return top + math.log(sum(math.exp(x - top) for x in values))


def softmax_xent(S):
    """Mean over rows of -log softmax(S[i])[i]."""
    n = len(S)
    total = 0.0
    for i in range(n):
        denom = sum(math.exp(S[i][j]) for j in range(n))
        total += -math.log(math.exp(S[i][i]) / denom)
    return total / n


def clip_loss(za, zp, W=None, temperature=0.2):
    n = len(za)
    S = [[_sim(za[i], zp[j], W, temperature) for j in range(n)] for i in range(n)]
    total = 0.0
    for i in range(n):
        total += -(S[i][i] - _log_sum_exp(S[i]))
    return total / n


def frame_loss_one(z, m, W=None, temperature=0.2):
    """``z`` is a list of T' frame vectors."""
    T = len(z)
    total = 0.0
    for t in range(T):
        pos = [t + tau for tau in range(-m, m + 1) if 0 <= t + tau < T]
        num = [_sim(z[t], z[p], W, temperature) for p in pos]
        den = [_sim(z[t], z[i], W, temperature) for i in range(T)]
        total += -(_log_sum_exp(num) - _log_sum_exp(den)) / len(pos)
    return total / T


def frame_loss_batch(zs, m, W=None, temperature=0.2):
    return sum(frame_loss_one(z, m, W, temperature) for z in zs) / len(zs)


def frame_loss(zx, zp, zs, m, W=None, temperature=0.2):
    return (
        frame_loss_batch(zx, m, W, temperature)
        + frame_loss_batch(zp, m, W, temperature)
        + frame_loss_batch(zs, m, W, temperature)
    ) / 3


def pitch_loss(p_shift, p_anchor, a):
    total = 0.0
    for ps, pa, ai in zip(p_shift, p_anchor, a):
        total += sum((s - q - ai) ** 2 for s, q in zip(ps, pa))
    return total / len(a)


def total_loss(clip_a, clip_p, fr_x, fr_p, fr_s, p_shift, p_anchor, a, W_clip, W_frame,
               alpha, beta, m, temperature=0.2):
    return (
        clip_loss(clip_a, clip_p, W_clip, temperature)
        + alpha * frame_loss(fr_x, fr_p, fr_s, m, W_frame, temperature)
        + beta * pitch_loss(p_shift, p_anchor, a)
    )
