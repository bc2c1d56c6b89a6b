"""Desk-scale ablation runs: synthetic probe datasets and the loss-combination sweep."""
from __future__ import annotations

from dataclasses import dataclass

from . import probe
from .dsp import Clip
from .pretrain import TrainConfig
from .synthgen import (
    VARIED_EVENTS,
    VARIED_TONES,
    SynthSpec,
    gen_event_track,
    gen_texture_clips,
    gen_tone_bank,
)

# rows of the ablation table: (label, alpha, beta, similarity)
ABLATIONS = {
    "clip": (0.0, 0.0, "bilinear"),
    "clip+frame": (1.0, 0.0, "bilinear"),
    "clip+pitch": (0.0, 1.0, "bilinear"),
    "clip+frame+pitch": (1.0, 1.0, "bilinear"),
    "clip+frame+pitch (cosine)": (1.0, 1.0, "cosine"),
}


def ablation_config(name: str, base: TrainConfig = TrainConfig()) -> TrainConfig:
    alpha, beta, sim = ABLATIONS[name]
    return base.replace(alpha=alpha, beta=beta, similarity=sim)


@dataclass
class ProbeData:
    train: list[Clip]
    test: list[Clip]
    task: probe.ProbeTask


def probe_datasets(seed: int = 0, n_event_classes: int = 5) -> dict[str, ProbeData]:
    """Train/test splits for the three downstream task shapes, generated from independent seeds.

    Labels are scarce on purpose (two tones per pitch, ten event tracks) so that
    the probes measure the representation rather than the amount of supervision.
    """
    base = 1000 * seed
    n_pitches = 61  # MIDI 36..96
    tone = lambda n, s: gen_tone_bank(SynthSpec("tone_bank", n, 1.0, s, midi_range=(36, 96), **VARIED_TONES))
    texture = lambda n, s: gen_texture_clips(SynthSpec("texture_clips", n, 1.0, s, n_classes=4))
    events = lambda n, s: gen_event_track(SynthSpec(
        "event_track", n, 3.84, s, n_classes=n_event_classes, event_density=0.7,
        event_duration_s=(0.5, 1.2), min_gap_s=0.2, **VARIED_EVENTS,
    ))
    return {
        "texture": ProbeData(texture(32, base + 11), texture(48, base + 12), probe.clip_task(4, "texture")),
        "events": ProbeData(events(10, base + 21), events(20, base + 22), probe.sed_task(n_event_classes, "events")),
        "pitch": ProbeData(tone(2 * n_pitches, base + 31), tone(2 * n_pitches, base + 32), probe.pitch_task("pitch")),
    }


def probe_encoder(encoder_source, datasets: dict[str, ProbeData], cfg: probe.ProbeConfig = probe.ProbeConfig(),
                  label: str = "") -> list[probe.ProbeReport]:
    reports = []
    for data in datasets.values():
        mode = data.task.source
        train = probe.embed_corpus(data.train, encoder_source, mode)
        test = probe.embed_corpus(data.test, encoder_source, mode)
        reports.append(probe.run_probe(train, test, data.task, cfg, label=label))
    return reports
