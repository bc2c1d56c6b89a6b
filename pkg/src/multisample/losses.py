"""Similarities and the clip, frame and pitch objectives.

All functions are differentiable torch code and work in any float dtype;
the tests run them in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch

from .sampling import neighborhood


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # weight of the frame loss
    beta: float = 1.0   # weight of the pitch loss

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class SimilarityMode:
    mode: str = "bilinear"
    cosine_temperature: float = 0.2

    def __post_init__(self):
        if self.mode not in ("bilinear", "cosine"):
            raise ValueError(f"unknown similarity mode {self.mode!r}")
        if self.cosine_temperature <= 0:
            raise ValueError("cosine temperature must be positive")


BILINEAR = SimilarityMode("bilinear")
COSINE = SimilarityMode("cosine")


def _check_dims(u, v, W=None):
    if u.shape[-1] != v.shape[-1]:
        raise ValueError(f"dimension mismatch: {u.shape[-1]} vs {v.shape[-1]}")
    if W is not None and W.shape != (u.shape[-1], v.shape[-1]):
        raise ValueError(f"W has shape {tuple(W.shape)}, expected {(u.shape[-1], v.shape[-1])}")


def sim_bilinear(u, v, W):
    """``u^T W v`` for vectors of length d."""
    _check_dims(u, v, W)
    return u @ W @ v


def sim_cosine(u, v, temperature: float = 0.2):
    """Cosine similarity divided by ``temperature``.

    Written as ``u.v / sqrt(|u|^2 |v|^2)`` so identical vectors give exactly
    ``1 / temperature``.
    """
    _check_dims(u, v)
    uu, vv = u @ u, v @ v
    if uu == 0 or vv == 0:
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    return (u @ v) / torch.sqrt(uu * vv) / temperature


def similarity_matrix(a, b, sim: SimilarityMode = BILINEAR, W=None):
    """Pairwise similarities between the rows of ``a`` (n, d) and ``b`` (k, d).

    Leading batch dimensions are broadcast, so ``a`` may be ``(B, n, d)``.
    """
    if sim.mode == "bilinear":
        if W is None:
            raise ValueError("bilinear similarity needs W")
        _check_dims(a, b, W)
        return a @ W @ b.transpose(-1, -2)
    _check_dims(a, b)
    na = torch.linalg.vector_norm(a, dim=-1, keepdim=True)
    nb = torch.linalg.vector_norm(b, dim=-1, keepdim=True)
    if torch.any(na == 0) or torch.any(nb == 0):
        raise ValueError("cosine similarity of a zero-norm vector is undefined")
    return (a / na) @ (b / nb).transpose(-1, -2) / sim.cosine_temperature


def clip_loss_from_logits(logits):
    """Mean cross-entropy with the diagonal as the target class of each row."""
    if logits.shape[0] < 2:
        raise ValueError("need at least two pairs so that negatives exist")
    log_probs = torch.diagonal(logits) - torch.logsumexp(logits, dim=1)
    return -log_probs.mean()


def loss_clip(z_anchor, z_positive, sim: SimilarityMode = BILINEAR, W=None):
    """Multiclass cross-entropy over in-batch similarities.

    Row ``i`` of ``z_positive`` is the positive for anchor ``i``; the other rows
    are its negatives, and the positive also appears in the denominator.
    """
    if z_anchor.shape != z_positive.shape:
        raise ValueError(f"shape mismatch {tuple(z_anchor.shape)} vs {tuple(z_positive.shape)}")
    return clip_loss_from_logits(similarity_matrix(z_anchor, z_positive, sim, W))


def _positive_mask(n_frames: int, m: int, device=None):
    mask = torch.zeros(n_frames, n_frames, dtype=torch.bool, device=device)
    for t in range(n_frames):
        mask[t, neighborhood(t, n_frames, m)] = True
    return mask


def frame_loss_from_logits(logits, m: int):
    """Per-sample frame loss from ``(..., T', T')`` logits, averaged over anchors and batch.

    For anchor frame t the positives are ``neighborhood(t, T', m)``; the
    denominator runs over every frame. Each anchor's term is divided by its
    positive-set size.
    """
    n_frames = logits.shape[-1]
    if m < 0 or m > n_frames // 2:
        raise ValueError(f"radius m={m} must lie in [0, {n_frames // 2}] for T'={n_frames}")
    mask = _positive_mask(n_frames, m, logits.device)
    sizes = mask.sum(dim=1).to(logits.dtype)
    pos = torch.logsumexp(logits.masked_fill(~mask, -math.inf), dim=-1)
    per_anchor = -(pos - torch.logsumexp(logits, dim=-1)) / sizes
    return per_anchor.mean()


def loss_frame_single(z, m: int = 0, W=None, sim: SimilarityMode = BILINEAR):
    """Frame loss for one view; ``z`` is ``(d, T')`` or a batch ``(B, d, T')``."""
    frames = z.transpose(-1, -2)
    return frame_loss_from_logits(similarity_matrix(frames, frames, sim, W), m)


def loss_frame(z_x, z_pos, z_shift, m: int = 0, W=None, sim: SimilarityMode = BILINEAR):
    """Mean of the frame loss over the anchor, positive and pitch-shifted views."""
    if not z_x.shape == z_pos.shape == z_shift.shape:
        raise ValueError("the three views must have identical shapes")
    return (
        loss_frame_single(z_x, m, W, sim)
        + loss_frame_single(z_pos, m, W, sim)
        + loss_frame_single(z_shift, m, W, sim)
    ) / 3


def loss_pitch(z_pitch_shifted, z_pitch_anchor, a, target: str = "ratio"):
    """Squared error between the pitch-head difference and the shift factor.

    ``target="ratio"`` regresses ``a`` itself, ``"log"`` regresses ``log a``.
    The scalar per sample is broadcast over frames; the result is the batch mean
    of the per-sample squared norm.
    """
    if z_pitch_shifted.shape != z_pitch_anchor.shape:
        raise ValueError("pitch outputs of the two views differ in shape")
    a = torch.as_tensor(a, dtype=z_pitch_anchor.dtype, device=z_pitch_anchor.device)
    if z_pitch_anchor.dim() == 1:
        z_pitch_anchor, z_pitch_shifted, a = z_pitch_anchor[None], z_pitch_shifted[None], a.reshape(1)
    if a.shape != z_pitch_anchor.shape[:1]:
        raise ValueError(f"need one shift per sample, got {tuple(a.shape)}")
    if target == "log":
        a = torch.log(a)
    elif target != "ratio":
        raise ValueError(f"unknown pitch target {target!r}")
    resid = z_pitch_shifted - z_pitch_anchor - a[:, None]
    return (resid**2).sum(dim=-1).mean()


def loss_total(
    anchor,
    positive,
    shifted,
    a,
    W_clip=None,
    W_frame=None,
    weights: LossWeights = LossWeights(),
    sim: SimilarityMode = BILINEAR,
    m: int = 0,
    pitch_target: str = "ratio",
):
    """Combined objective ``L_clip + alpha * L_frame + beta * L_pitch``.

    ``anchor``, ``positive`` and ``shifted`` are head outputs (anything with
    ``z_clip``, ``z_frame`` and ``z_pitch`` attributes). Returns the scalar loss
    and a dict with the three unweighted terms.
    """
    l_clip = loss_clip(anchor.z_clip, positive.z_clip, sim, W_clip)
    l_frame = loss_frame(anchor.z_frame, positive.z_frame, shifted.z_frame, m, W_frame, sim)
    l_pitch = loss_pitch(shifted.z_pitch, anchor.z_pitch, a, pitch_target)
    total = l_clip + weights.alpha * l_frame + weights.beta * l_pitch
    return total, {"clip": l_clip, "frame": l_frame, "pitch": l_pitch}
