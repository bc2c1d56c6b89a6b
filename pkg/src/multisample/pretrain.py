"""Self-supervised training driver, config files and checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from . import losses
from .dsp import Clip, MelConfig, load_corpus
from .model import EncoderConfig, SSLModel, init_params, state_hash
from .sampling import FeatureBank, SamplerConfig, plan_epoch, sample_batch

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "multisample-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message, clip_ids=(), epoch=None, step=None):
        super().__init__(message)
        self.clip_ids = list(clip_ids)
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    """Pretraining hyperparameters.

    ``batch_size`` and ``epochs`` default to desk scale; the paper-scale run
    uses ``epochs=250, batch_size=1024``.
    """

    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-4
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    alpha: float = 1.0
    beta: float = 1.0
    similarity: str = "bilinear"
    cosine_temperature: float = 0.2
    m: int = 0
    shift_range: tuple[float, float] = (0.8, 1.2)
    shift_mode: str = "epoch"
    pitch_target: str = "ratio"
    shared_bilinear: bool = False
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 10
    encoder: EncoderConfig = EncoderConfig()

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            object.__setattr__(self, "encoder", EncoderConfig(**self.encoder))
        object.__setattr__(self, "shift_range", tuple(self.shift_range))
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        for name in ("epochs", "batch_size", "learning_rate", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.m < 0:
            raise ConfigError("m must be non-negative")
        try:
            self.weights, self.sim, self.sampler
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.pitch_target not in ("ratio", "log"):
            raise ConfigError(f"unknown pitch_target {self.pitch_target!r}")

    @property
    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.alpha, self.beta)

    @property
    def sim(self) -> losses.SimilarityMode:
        return losses.SimilarityMode(self.similarity, self.cosine_temperature)

    @property
    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.batch_size, self.shift_range, self.shift_mode)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **overrides) -> "TrainConfig":
        d = self.to_dict()
        enc = overrides.pop("encoder", None)
        if enc is not None:
            d["encoder"] = {**d["encoder"], **(enc if isinstance(enc, dict) else dataclasses.asdict(enc))}
        d.update(overrides)
        return self.from_dict(d)


def load_config(path) -> TrainConfig:
    with open(path) as f:
        return TrainConfig.from_dict(json.load(f))


def save_config(path, cfg: TrainConfig) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)


@dataclass
class TrainLogRecord:
    epoch: int
    step: int
    L: float
    L_clip: float
    L_frame: float
    L_pitch: float
    shift: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


@dataclass
class Checkpoint:
    train_config: TrainConfig
    epoch: int
    model_state: dict
    optimizer_state: Optional[dict] = None
    log: list = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return self.train_config.encoder.hash()

    def build_model(self) -> SSLModel:
        model = SSLModel(self.train_config.encoder, self.train_config.shared_bilinear)
        model.load_state_dict(self.model_state)
        return model

    def encoder_hash(self) -> str:
        return state_hash(self.build_model().encoder)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "version": CHECKPOINT_VERSION,
                "config_hash": self.config_hash,
                "train_config": self.train_config.to_dict(),
                "epoch": self.epoch,
                "model": self.model_state,
                "optimizer": self.optimizer_state,
            },
            buf,
        )
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path


def load_checkpoint(path, expected_hash: Optional[str] = None, allow_mismatch: bool = False) -> Checkpoint:
    """Load a checkpoint written by :meth:`Checkpoint.save`.

    Raises:
        ConfigError: on a foreign or newer file, or when the stored config hash
            disagrees with the recomputed one or with ``expected_hash``.
    """
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if blob["version"] > CHECKPOINT_VERSION:
        raise ConfigError(f"{path} has unsupported version {blob['version']}")
    ckpt = Checkpoint(TrainConfig.from_dict(blob["train_config"]), blob["epoch"], blob["model"], blob["optimizer"])
    if not allow_mismatch:
        if ckpt.config_hash != blob["config_hash"]:
            raise ConfigError(f"{path}: stored config hash does not match its config")
        if expected_hash is not None and expected_hash != ckpt.config_hash:
            raise ConfigError(
                f"{path}: config hash {ckpt.config_hash} != expected {expected_hash}"
            )
    return ckpt


def _as_clips(corpus) -> list[Clip]:
    if isinstance(corpus, (str, Path)):
        return load_corpus(corpus)
    return list(corpus)


def _batch_tensors(batch):
    x, xp, xs, a = batch.arrays()
    views = torch.from_numpy(np.concatenate([x, xp, xs]).astype(np.float32))
    return views, torch.from_numpy(a.astype(np.float32))


def _split_heads(z, n):
    return [type(z)(*(t[i * n:(i + 1) * n] for t in z)) for i in range(3)]


def _run(model: SSLModel, optimizer, bank: FeatureBank, cfg: TrainConfig, start_epoch: int,
         log: list, out_dir: Optional[Path], on_record: Optional[Callable]):
    log_file = open(out_dir / "train_log.jsonl", "a") if out_dir else None
    W = model.bilinear
    try:
        for epoch in range(start_epoch, cfg.epochs):
            plan = plan_epoch(len(bank), cfg.sampler, cfg.seed, epoch)
            torch.manual_seed(cfg.seed * 100003 + epoch)
            for step, (idx, a) in enumerate(zip(plan.batches, plan.shifts)):
                batch = sample_batch(bank, cfg.sampler, plan.rng, clip_indices=idx, shift=a)
                views, shifts = _batch_tensors(batch)
                model.train()
                _, z = model(views)
                anchor, positive, shifted = _split_heads(z, len(batch))
                total, terms = losses.loss_total(
                    anchor, positive, shifted, shifts, W.W_clip, W.W_frame,
                    cfg.weights, cfg.sim, cfg.m, cfg.pitch_target,
                )
                if not torch.isfinite(total):
                    raise NonFiniteLossError(
                        f"non-finite loss at epoch {epoch} step {step}; clips {batch.clip_ids}",
                        batch.clip_ids, epoch, step,
                    )
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                rec = TrainLogRecord(
                    epoch, step, total.item(), terms["clip"].item(), terms["frame"].item(),
                    terms["pitch"].item(), float(a), time.time(),
                )
                log.append(rec)
                if log_file:
                    log_file.write(rec.to_json() + "\n")
                if on_record:
                    on_record(rec)
            done = epoch + 1
            if out_dir and (done % cfg.checkpoint_every == 0 or done == cfg.epochs):
                _checkpoint(model, optimizer, cfg, done, log).save(out_dir / f"checkpoint_epoch{done:04d}.pt")
    finally:
        if log_file:
            log_file.close()
    ckpt = _checkpoint(model, optimizer, cfg, cfg.epochs, log)
    if out_dir:
        ckpt.save(out_dir / "checkpoint_final.pt")
    return ckpt


def _checkpoint(model, optimizer, cfg, epoch, log) -> Checkpoint:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    opt_state = _clone_state(optimizer.state_dict())
    return Checkpoint(cfg, epoch, state, opt_state, list(log))


def _clone_state(obj):
    if isinstance(obj, torch.Tensor):
        return obj.detach().clone()
    if isinstance(obj, dict):
        return {k: _clone_state(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clone_state(v) for v in obj]
    return obj


def _setup(cfg: TrainConfig):
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _make_optimizer(model, cfg):
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas,
                            eps=cfg.adam_eps, weight_decay=0.0)


def train(corpus: Union[str, Path, Sequence[Clip], FeatureBank], cfg: TrainConfig = TrainConfig(),
          out_dir=None, on_record: Optional[Callable] = None, mel: MelConfig = MelConfig()) -> Checkpoint:
    """Pretrain from scratch on ``corpus`` (a manifest path, clips or a feature bank).

    With ``out_dir`` set, writes ``train_log.jsonl``, the effective config and a
    checkpoint every ``cfg.checkpoint_every`` epochs plus ``checkpoint_final.pt``.
    """
    _setup(cfg)
    bank = corpus if isinstance(corpus, FeatureBank) else FeatureBank(_as_clips(corpus), mel)
    model = init_params(cfg.encoder, cfg.seed, cfg.shared_bilinear)
    optimizer = _make_optimizer(model, cfg)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(out_dir / "effective_config.json", cfg)
    return _run(model, optimizer, bank, cfg, 0, [], out_dir, on_record)


# fields that may change on resume without touching the architecture
RESUMABLE = {"epochs", "learning_rate", "checkpoint_every", "deterministic"}


def resume(checkpoint: Union[Checkpoint, str, Path], corpus, overrides: Optional[dict] = None,
           out_dir=None, allow_config_mismatch: bool = False, on_record: Optional[Callable] = None,
           mel: MelConfig = MelConfig()) -> Checkpoint:
    """Continue training from ``checkpoint`` with the optimizer state restored.

    ``overrides`` may change any :class:`TrainConfig` field; a change that
    alters the encoder config hash is rejected unless ``allow_config_mismatch``.
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    overrides = dict(overrides or {})
    cfg = checkpoint.train_config.replace(**overrides)
    if cfg.encoder.hash() != checkpoint.config_hash and not allow_config_mismatch:
        raise ConfigError(
            f"encoder config hash {cfg.encoder.hash()} does not match checkpoint "
            f"{checkpoint.config_hash}"
        )
    changed = {k: v for k, v in overrides.items() if k not in RESUMABLE}
    if changed:
        logger.warning("resuming with non-resumable overrides %s", sorted(changed))
    _setup(cfg)
    bank = corpus if isinstance(corpus, FeatureBank) else FeatureBank(_as_clips(corpus), mel)
    model = SSLModel(cfg.encoder, cfg.shared_bilinear)
    model.load_state_dict(checkpoint.model_state)
    optimizer = _make_optimizer(model, cfg)
    if checkpoint.optimizer_state is not None:
        optimizer.load_state_dict(checkpoint.optimizer_state)
        for group in optimizer.param_groups:
            group["lr"] = cfg.learning_rate
    log = list(checkpoint.log)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(out_dir / "effective_config.json", cfg)
        with open(out_dir / "train_log.jsonl", "a") as f:
            f.write(json.dumps({"event": "resume", "from_epoch": checkpoint.epoch,
                                "overrides": overrides}) + "\n")
    return _run(model, optimizer, bank, cfg, checkpoint.epoch, log, out_dir, on_record)


def epoch_means(log: Sequence[TrainLogRecord], key: str = "L") -> np.ndarray:
    by_epoch: dict[int, list[float]] = {}
    for rec in log:
        by_epoch.setdefault(rec.epoch, []).append(getattr(rec, key))
    return np.array([np.mean(by_epoch[e]) for e in sorted(by_epoch)])


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
