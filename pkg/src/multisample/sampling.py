"""Batch construction for the clip, frame and pitch sampling strategies."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dsp import Clip, FeatureSegment, MelConfig, extract_logmel, pitch_shift, slice_segment


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    batch_size: int = 32
    shift_range: tuple[float, float] = (0.8, 1.2)
    # "epoch": one shift factor per epoch; "batch": a fresh factor per batch
    shift_mode: str = "epoch"

    def __post_init__(self):
        lo, hi = self.shift_range
        if not 0 < lo <= hi:
            raise SamplingError(f"invalid shift range {self.shift_range}")
        if self.shift_mode not in ("epoch", "batch"):
            raise SamplingError(f"unknown shift_mode {self.shift_mode!r}")
        if self.batch_size < 2:
            raise SamplingError("batch_size must be at least 2")


def neighborhood(t: int, n_frames: int, m: int) -> list[int]:
    """Frame indices within ``m`` of ``t``, clipped to ``[0, n_frames)``."""
    return list(range(max(t - m, 0), min(t + m, n_frames - 1) + 1))


def draw_shift(rng: np.random.Generator, cfg: SamplerConfig = SamplerConfig()) -> float:
    lo, hi = cfg.shift_range
    return float(rng.uniform(lo, hi))


@dataclass
class TrainingBatch:
    anchors: list[FeatureSegment]
    positives: list[FeatureSegment]
    shifted: list[FeatureSegment]
    shift_params: np.ndarray

    def __len__(self):
        return len(self.anchors)

    @property
    def clip_ids(self) -> list[str]:
        return [s.source_id for s in self.anchors]

    def arrays(self):
        """Stacked ``(B, n_mels, n_frames)`` arrays for the three views plus the shifts."""
        stack = lambda segs: np.stack([s.values for s in segs])
        return stack(self.anchors), stack(self.positives), stack(self.shifted), self.shift_params

    def validate(self, shift_range=(0.8, 1.2)) -> None:
        ids = self.clip_ids
        if len(set(ids)) != len(ids):
            raise SamplingError("batch contains two anchors from the same clip")
        for x, xp, xs in zip(self.anchors, self.positives, self.shifted):
            if x.source_id != xp.source_id or x.start_frame == xp.start_frame:
                raise SamplingError(f"bad positive pair for clip {x.source_id!r}")
            if xs.source_id != x.source_id or xs.start_frame != x.start_frame:
                raise SamplingError(f"shifted view misaligned for clip {x.source_id!r}")
        lo, hi = shift_range
        if np.any(self.shift_params < lo) or np.any(self.shift_params > hi):
            raise SamplingError("shift parameter out of range")


class FeatureBank:
    """Log-mel features for a corpus, with per-shift caching of pitch-shifted copies.

    Only the most recent shift factor is cached, which matches the per-epoch
    refresh used during training.
    """

    def __init__(self, clips: Sequence[Clip], mel: MelConfig = MelConfig()):
        self.clips = list(clips)
        self.mel = mel
        self.features = [extract_logmel(c.waveform, mel) for c in self.clips]
        self._shift_cache: dict[float, dict[int, np.ndarray]] = {}
        for clip, feats in zip(self.clips, self.features):
            if feats.shape[1] < mel.segment_frames + 1:
                raise SamplingError(
                    f"clip {clip.clip_id!r} has {feats.shape[1]} frames; need at least "
                    f"{mel.segment_frames + 1} for two distinct segment starts"
                )

    def __len__(self):
        return len(self.clips)

    def shifted_features(self, index: int, a: float) -> np.ndarray:
        cache = self._shift_cache.get(a)
        if cache is None:
            self._shift_cache = {a: {}}
            cache = self._shift_cache[a]
        if index not in cache:
            w = pitch_shift(self.clips[index].waveform, a)
            cache[index] = extract_logmel(w, self.mel)
        return cache[index]


def sample_batch(
    bank: FeatureBank,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    clip_indices: Optional[Sequence[int]] = None,
    shift: Optional[float] = None,
) -> TrainingBatch:
    """Draw one batch of anchors, same-clip positives and pitch-shifted anchors.

    Each batch slot uses a different clip, so in-batch negatives always come from
    other clips. Anchor and positive starts are distinct but may overlap.
    ``shift`` fixes the factor for every slot (per-epoch mode); otherwise one
    factor is drawn for the batch.
    """
    if clip_indices is None:
        if len(bank) < cfg.batch_size:
            raise SamplingError(
                f"corpus has {len(bank)} clips, fewer than batch_size={cfg.batch_size}"
            )
        clip_indices = rng.choice(len(bank), size=cfg.batch_size, replace=False)
    if shift is None:
        shift = draw_shift(rng, cfg)
    seg = bank.mel.segment_frames
    anchors, positives, shifted = [], [], []
    for idx in clip_indices:
        idx = int(idx)
        clip_id = bank.clips[idx].clip_id
        feats = bank.features[idx]
        n_starts = feats.shape[1] - seg + 1
        s_anchor, s_pos = rng.choice(n_starts, size=2, replace=False)
        anchors.append(slice_segment(feats, int(s_anchor), bank.mel, clip_id))
        positives.append(slice_segment(feats, int(s_pos), bank.mel, clip_id))
        shifted.append(
            slice_segment(bank.shifted_features(idx, shift), int(s_anchor), bank.mel, clip_id)
        )
    return TrainingBatch(anchors, positives, shifted, np.full(len(anchors), shift))


@dataclass
class EpochPlan:
    """Clip order and shift factors for one epoch, derived only from (seed, epoch)."""

    batches: list[np.ndarray]
    shifts: list[float]
    rng: np.random.Generator = field(repr=False)


def plan_epoch(n_clips: int, cfg: SamplerConfig, seed: int, epoch: int) -> EpochPlan:
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(n_clips)
    n_batches = n_clips // cfg.batch_size
    if n_batches == 0:
        raise SamplingError(f"corpus has {n_clips} clips, fewer than batch_size={cfg.batch_size}")
    batches = [perm[i * cfg.batch_size : (i + 1) * cfg.batch_size] for i in range(n_batches)]
    if cfg.shift_mode == "epoch":
        a = draw_shift(rng, cfg)
        shifts = [a] * n_batches
    else:
        shifts = [draw_shift(rng, cfg) for _ in range(n_batches)]
    return EpochPlan(batches, shifts, rng)
