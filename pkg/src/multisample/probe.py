"""Frozen-encoder evaluation: embedding archives, linear probes and metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from .dsp import Clip, MelConfig, extract_logmel, load_corpus
from .model import Encoder, encode, state_hash
from .pretrain import Checkpoint, load_checkpoint
from .synthgen import onsets_from_labels as event_onsets

ARCHIVE_FORMAT = "multisample-embeddings"
ARCHIVE_VERSION = 1
KINDS = ("clip_classification", "frame_classification_sed", "pitch_classification")


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeTask:
    name: str
    kind: str
    n_classes: int
    source: str = "pooled"  # or "framewise"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ProbeError(f"unknown task kind {self.kind!r}")
        if self.kind == "frame_classification_sed" and self.source != "framewise":
            raise ProbeError("SED probes need framewise embeddings")


def clip_task(n_classes: int, name: str = "clip") -> ProbeTask:
    return ProbeTask(name, "clip_classification", n_classes, "pooled")


def sed_task(n_event_classes: int, name: str = "sed") -> ProbeTask:
    # class 0 is background
    return ProbeTask(name, "frame_classification_sed", n_event_classes + 1, "framewise")


def pitch_task(name: str = "pitch", source: str = "pooled") -> ProbeTask:
    return ProbeTask(name, "pitch_classification", 88, source)


# -- embedding archives -------------------------------------------------------


@dataclass
class EmbeddingArchive:
    """Per-clip embeddings with labels.

    In ``pooled`` mode ``embeddings[i]`` has shape ``(d,)`` and ``labels[i]`` is
    an int. In ``framewise`` mode they are ``(n_frames, d)`` and an int array of
    frame labels at encoder-frame resolution (``frame_hop_s`` apart).
    """

    mode: str
    ids: list
    embeddings: list
    labels: list
    frame_hop_s: float
    encoder_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)

    def save(self, path) -> Path:
        path = Path(path)
        lengths = np.array([len(np.atleast_2d(e)) for e in self.embeddings])
        header = {
            "format": ARCHIVE_FORMAT, "version": ARCHIVE_VERSION, "mode": self.mode,
            "ids": list(self.ids), "frame_hop_s": self.frame_hop_s,
            "encoder_hash": self.encoder_hash, "meta": self.meta,
        }
        if self.mode == "pooled":
            emb = np.stack(self.embeddings) if self.embeddings else np.zeros((0, 0))
            labels = np.array([-1 if l is None else l for l in self.labels], dtype=np.int64)
        else:
            emb = np.concatenate(self.embeddings) if self.embeddings else np.zeros((0, 0))
            labels = np.concatenate([np.asarray(l, dtype=np.int64) for l in self.labels]) \
                if self.labels else np.zeros(0, np.int64)
        with open(path, "wb") as f:
            np.savez(f, header=np.array(json.dumps(header, sort_keys=True)),
                     embeddings=emb, labels=labels, lengths=lengths)
        return path

    @classmethod
    def load(cls, path) -> "EmbeddingArchive":
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            emb, labels, lengths = z["embeddings"], z["labels"], z["lengths"]
        if header.get("format") != ARCHIVE_FORMAT or header["version"] > ARCHIVE_VERSION:
            raise ProbeError(f"{path} is not a readable embedding archive")
        if header["mode"] == "pooled":
            embeddings = list(emb)
            label_list = [None if l < 0 else int(l) for l in labels]
        else:
            cuts = np.cumsum(lengths)[:-1]
            embeddings = np.split(emb, cuts)
            label_list = np.split(labels, cuts)
        return cls(header["mode"], header["ids"], embeddings, label_list,
                   header["frame_hop_s"], header["encoder_hash"], header["meta"])


def _segments(features: np.ndarray, mel: MelConfig) -> np.ndarray:
    """Consecutive non-overlapping segments from frame 0; a short tail is dropped,
    a clip shorter than one segment is padded with the log floor."""
    seg = mel.segment_frames
    total = features.shape[1]
    if total < seg:
        pad = np.full((features.shape[0], seg - total), np.log(mel.log_floor))
        features = np.concatenate([features, pad], axis=1)
        total = seg
    n = total // seg
    return np.stack([features[:, i * seg:(i + 1) * seg] for i in range(n)])


def majority_labels(frame_labels: np.ndarray, stride: int, n_out: int) -> np.ndarray:
    """Map 10 ms labels to encoder frames by majority vote within each stride
    (ties go to the smaller class id)."""
    out = np.zeros(n_out, dtype=np.int64)
    for k in range(n_out):
        block = np.asarray(frame_labels[k * stride:(k + 1) * stride])
        if len(block):
            out[k] = np.bincount(block).argmax()
    return out


def _encoder_from(source) -> Encoder:
    if isinstance(source, Encoder):
        return source
    if isinstance(source, (str, Path)):
        source = load_checkpoint(source)
    if isinstance(source, Checkpoint):
        return source.build_model().encoder
    if hasattr(source, "encoder"):
        return source.encoder
    raise ProbeError(f"cannot get an encoder from {type(source).__name__}")


def embed_corpus(corpus: Union[str, Path, Sequence[Clip]], encoder_source, mode: str = "pooled",
                 mel: MelConfig = MelConfig()) -> EmbeddingArchive:
    """Embed every clip with a frozen encoder.

    ``pooled`` averages the pooled embedding over a clip's segments;
    ``framewise`` concatenates the per-frame embeddings of its segments.
    """
    if mode not in ("pooled", "framewise"):
        raise ProbeError(f"unknown embedding mode {mode!r}")
    clips = load_corpus(corpus) if isinstance(corpus, (str, Path)) else list(corpus)
    encoder = _encoder_from(encoder_source)
    cfg = encoder.cfg
    if (cfg.n_mels, cfg.n_frames) != (mel.n_mels, mel.segment_frames):
        raise ProbeError("encoder input shape does not match the feature config")
    stride = cfg.time_downsample
    ids, embs, labels = [], [], []
    for clip in clips:
        segs = _segments(extract_logmel(clip.waveform, mel), mel)
        emb = encode(encoder, segs.astype(np.float32))
        ids.append(clip.clip_id)
        if mode == "pooled":
            embs.append(emb.pooled.mean(dim=0).numpy().astype(np.float64))
            labels.append(clip.label)
        else:
            frames = emb.h.transpose(1, 2).reshape(-1, cfg.d).numpy().astype(np.float64)
            embs.append(frames)
            if clip.frame_labels is not None:
                labels.append(majority_labels(clip.frame_labels, stride, len(frames)))
            else:
                labels.append(np.full(len(frames), -1 if clip.label is None else clip.label))
    return EmbeddingArchive(mode, ids, embs, labels, stride * mel.hop_ms / 1000,
                            state_hash(encoder), {"encoder_config": cfg.to_dict()})


# -- linear probe -------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    """Desk-scale defaults; the paper used 250 epochs, batch 1024, lr 1e-4."""

    epochs: int = 250
    batch_size: int = 32
    learning_rate: float = 1e-3
    dropout: float = 0.1
    standardize: bool = True
    seed: int = 0


@dataclass
class LinearProbe:
    weight: np.ndarray  # (n_classes, d)
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.scale) @ self.weight.T + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=-1)


def _training_arrays(archive: EmbeddingArchive, task: ProbeTask):
    if task.source != archive.mode:
        raise ProbeError(f"task {task.name!r} needs {task.source} embeddings, archive is {archive.mode}")
    if len(archive) == 0:
        raise ProbeError("empty archive")
    if archive.mode == "pooled":
        x = np.stack(archive.embeddings)
        if any(l is None for l in archive.labels):
            raise ProbeError("archive has unlabelled clips")
        y = np.array(archive.labels, dtype=np.int64)
    else:
        x = np.concatenate(archive.embeddings)
        y = np.concatenate(archive.labels).astype(np.int64)
    if y.min() < 0 or y.max() >= task.n_classes:
        raise ProbeError(
            f"labels span [{y.min()}, {y.max()}], outside task {task.name!r} label space "
            f"[0, {task.n_classes})"
        )
    return x, y


def train_probe(archive: EmbeddingArchive, task: ProbeTask, cfg: ProbeConfig = ProbeConfig()) -> LinearProbe:
    """Fit one linear layer (with input dropout) by Adam on fixed embeddings."""
    x, y = _training_arrays(archive, task)
    mean = x.mean(axis=0) if cfg.standardize else np.zeros(x.shape[1])
    scale = x.std(axis=0) + 1e-8 if cfg.standardize else np.ones(x.shape[1])
    xt = torch.from_numpy((x - mean) / scale).float()
    yt = torch.from_numpy(y)
    gen = torch.Generator().manual_seed(cfg.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        layer = nn.Linear(x.shape[1], task.n_classes)
        drop = nn.Dropout(cfg.dropout)
        opt = torch.optim.Adam(layer.parameters(), lr=cfg.learning_rate)
        for _ in range(cfg.epochs):
            order = torch.randperm(len(xt), generator=gen)
            for start in range(0, len(xt), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                loss = nn.functional.cross_entropy(layer(drop(xt[idx])), yt[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
    return LinearProbe(layer.weight.detach().double().numpy(), layer.bias.detach().double().numpy(),
                       mean, scale)


# -- metrics ------------------------------------------------------------------


def top1_accuracy(ref, pred) -> float:
    ref, pred = np.asarray(ref), np.asarray(pred)
    if len(ref) == 0:
        raise ProbeError("no items to score")
    return float(np.mean(ref == pred))


def pitch_accuracy(ref, pred) -> float:
    return top1_accuracy(ref, pred)


def chroma_accuracy(ref, pred) -> float:
    return top1_accuracy(np.asarray(ref) % 12, np.asarray(pred) % 12)


def _f1(tp, n_ref, n_pred) -> float:
    if n_ref + n_pred == 0:
        return 1.0
    return 2.0 * tp / (n_ref + n_pred)


def frame_f1(refs: Sequence[np.ndarray], preds: Sequence[np.ndarray]) -> float:
    """Micro F1 over event frames; class 0 is background."""
    tp = n_ref = n_pred = 0
    for ref, pred in zip(refs, preds):
        ref, pred = np.asarray(ref), np.asarray(pred)
        tp += int(np.sum((ref == pred) & (ref != 0)))
        n_ref += int(np.sum(ref != 0))
        n_pred += int(np.sum(pred != 0))
    return _f1(tp, n_ref, n_pred)


def match_onsets(ref_onsets, pred_onsets, hop_s: float, collar_s: float = 0.2) -> int:
    """Greedy one-to-one matching in time order; a pair matches when the classes
    agree and the onsets differ by at most ``collar_s``. Returns the match count."""
    used = [False] * len(pred_onsets)
    hits = 0
    for r_frame, r_cls in sorted(ref_onsets):
        for j, (p_frame, p_cls) in enumerate(pred_onsets):
            if not used[j] and p_cls == r_cls and abs(p_frame - r_frame) * hop_s <= collar_s + 1e-9:
                used[j] = True
                hits += 1
                break
    return hits


def onset_f1(refs, preds, hop_s: float, collar_s: float = 0.2) -> float:
    tp = n_ref = n_pred = 0
    for ref, pred in zip(refs, preds):
        r, p = event_onsets(ref), event_onsets(pred)
        tp += match_onsets(r, p, hop_s, collar_s)
        n_ref += len(r)
        n_pred += len(p)
    return _f1(tp, n_ref, n_pred)


@dataclass
class ProbeReport:
    task: str
    kind: str
    metrics: dict
    n_train: int
    n_test: int
    encoder_hash: str
    label: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ProbeReport":
        with open(path) as f:
            data = json.load(f)
        try:
            return cls(**data)
        except TypeError as e:
            raise ProbeError(f"{path} is not a probe report: {e}") from None


def evaluate(probe: LinearProbe, archive: EmbeddingArchive, task: ProbeTask,
             collar_s: float = 0.2, n_train: int = 0, label: str = "") -> ProbeReport:
    if len(archive) == 0:
        raise ProbeError("cannot evaluate on an empty archive")
    if task.source != archive.mode:
        raise ProbeError(f"task {task.name!r} needs {task.source} embeddings")
    if archive.mode == "pooled":
        ref = np.array(archive.labels)
        pred = probe.predict(np.stack(archive.embeddings))
    else:
        ref = archive.labels
        pred = [probe.predict(e) for e in archive.embeddings]
    metrics = score(task, ref, pred, archive.frame_hop_s, collar_s)
    return ProbeReport(task.name, task.kind, metrics, n_train, len(archive), archive.encoder_hash, label)


def score(task: ProbeTask, ref, pred, hop_s: float = 0.32, collar_s: float = 0.2) -> dict:
    """Metrics for ``task`` given reference and predicted labels."""
    if task.kind == "clip_classification":
        return {"accuracy": top1_accuracy(ref, pred)}
    if task.kind == "pitch_classification":
        if task.source == "framewise":
            ref, pred = np.concatenate(ref), np.concatenate(pred)
        return {"pitch_accuracy": pitch_accuracy(ref, pred), "chroma_accuracy": chroma_accuracy(ref, pred)}
    return {"frame_f1": frame_f1(ref, pred), "onset_f1": onset_f1(ref, pred, hop_s, collar_s)}


def split_archive(archive: EmbeddingArchive, test_fraction: float = 0.3, seed: int = 0):
    """Random clip-level split into (train, test) archives."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(archive))
    n_test = int(round(len(archive) * test_fraction))
    parts = []
    for idx in (np.sort(order[n_test:]), np.sort(order[:n_test])):
        parts.append(EmbeddingArchive(
            archive.mode, [archive.ids[i] for i in idx], [archive.embeddings[i] for i in idx],
            [archive.labels[i] for i in idx], archive.frame_hop_s, archive.encoder_hash, dict(archive.meta),
        ))
    return parts[0], parts[1]


def run_probe(train_archive: EmbeddingArchive, test_archive: EmbeddingArchive, task: ProbeTask,
              cfg: ProbeConfig = ProbeConfig(), label: str = "", collar_s: float = 0.2) -> ProbeReport:
    probe = train_probe(train_archive, task, cfg)
    n_train = len(train_archive) if train_archive.mode == "pooled" else sum(len(e) for e in train_archive.embeddings)
    return evaluate(probe, test_archive, task, collar_s, n_train, label)
