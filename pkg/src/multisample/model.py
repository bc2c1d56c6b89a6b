"""Encoder ``f`` and the three shallow heads (clip, frame, pitch)."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn
import torch.nn.functional as F


@dataclass(frozen=True)
class EncoderConfig:
    architecture: str = "reference_cnn"
    n_mels: int = 64
    n_frames: int = 96
    d: int = 512
    channels: tuple[int, ...] = (16, 32, 64, 128, 128)
    time_downsample: int = 32

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.d <= 0:
            raise ValueError("embedding width d must be positive")
        if self.n_frames % self.time_downsample:
            raise ValueError(
                f"n_frames={self.n_frames} is not divisible by the temporal "
                f"downsampling factor {self.time_downsample}"
            )

    @property
    def out_frames(self) -> int:
        return self.n_frames // self.time_downsample

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        items = sorted(self.to_dict().items())
        return hashlib.sha256(repr(items).encode()).hexdigest()[:16]


class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, pool):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(c_out)
        self.pool = pool

    def forward(self, x):
        x = F.relu(self.bn(self.conv(x)))
        return F.avg_pool2d(x, self.pool)


class ReferenceCNN(nn.Module):
    """Small strided CNN: five conv blocks, each halving time; frequency is halved
    while it is larger than 2 and averaged away at the end."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        n_blocks = len(cfg.channels)
        if 2**n_blocks != cfg.time_downsample:
            raise ValueError("reference_cnn needs 2**len(channels) == time_downsample")
        blocks, c_in, n_freq = [], 1, cfg.n_mels
        for c_out in cfg.channels:
            f_pool = 2 if n_freq > 2 else 1
            blocks.append(ConvBlock(c_in, c_out, (f_pool, 2)))
            c_in, n_freq = c_out, n_freq // f_pool
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = c_in

    def forward(self, x):
        return self.blocks(x)


class MBConv(nn.Module):
    def __init__(self, c_in, c_out, stride, expand=4):
        super().__init__()
        mid = c_in * expand
        self.expand = nn.Sequential(nn.Conv2d(c_in, mid, 1, bias=False), nn.BatchNorm2d(mid), nn.SiLU())
        self.depthwise = nn.Sequential(
            nn.Conv2d(mid, mid, 3, stride=stride, padding=1, groups=mid, bias=False),
            nn.BatchNorm2d(mid),
            nn.SiLU(),
        )
        squeeze = max(1, c_in // 4)
        self.se = nn.Sequential(
            nn.AdaptiveAvgPool2d(1), nn.Conv2d(mid, squeeze, 1), nn.SiLU(),
            nn.Conv2d(squeeze, mid, 1), nn.Sigmoid(),
        )
        self.project = nn.Sequential(nn.Conv2d(mid, c_out, 1, bias=False), nn.BatchNorm2d(c_out))
        self.residual = stride == 1 and c_in == c_out

    def forward(self, x):
        y = self.depthwise(self.expand(x))
        y = self.project(y * self.se(y))
        return x + y if self.residual else y


class B0Like(nn.Module):
    """EfficientNet-B0-shaped stack (stem + MBConv stages, total stride 32).

    Only the topology and the 96 -> 3 temporal reduction are reproduced.
    """

    STAGES = ((16, 1, 1), (24, 2, 2), (40, 2, 2), (80, 2, 3), (112, 1, 3), (192, 2, 4), (320, 1, 1))

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        if cfg.time_downsample != 32:
            raise ValueError("b0_like has a fixed total stride of 32")
        layers = [nn.Conv2d(1, 32, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(32), nn.SiLU()]
        c_in = 32
        for c_out, stride, repeats in self.STAGES:
            for i in range(repeats):
                layers.append(MBConv(c_in, c_out, stride if i == 0 else 1, expand=1 if c_in == 32 else 6))
                c_in = c_out
        layers += [nn.Conv2d(c_in, 1280, 1, bias=False), nn.BatchNorm2d(1280), nn.SiLU()]
        self.blocks = nn.Sequential(*layers)
        self.out_channels = 1280

    def forward(self, x):
        return self.blocks(x)


ARCHITECTURES = {"reference_cnn": ReferenceCNN, "b0_like": B0Like}


class Encoder(nn.Module):
    """Maps ``(B, n_mels, n_frames)`` features to ``h`` of shape ``(B, d, T')``.

    The backbone output is averaged over frequency, then each remaining frame
    goes through a d-unit linear layer, layer norm and tanh.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        if cfg.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {cfg.architecture!r}")
        self.cfg = cfg
        self.backbone = ARCHITECTURES[cfg.architecture](cfg)
        self.fc = nn.Linear(self.backbone.out_channels, cfg.d)
        self.norm = nn.LayerNorm(cfg.d)

    def forward(self, x):
        if x.shape[-2:] != (self.cfg.n_mels, self.cfg.n_frames):
            raise ValueError(
                f"expected input (..., {self.cfg.n_mels}, {self.cfg.n_frames}), got {tuple(x.shape)}"
            )
        y = self.backbone(x.unsqueeze(1))  # (B, C, F', T')
        y = y.mean(dim=2).transpose(1, 2)  # (B, T', C)
        h = torch.tanh(self.norm(self.fc(y)))
        return h.transpose(1, 2)


def _mlp(d_in, d_hidden, d_out):
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_out))


class HeadOutputs(NamedTuple):
    z_clip: torch.Tensor   # (B, d)
    z_frame: torch.Tensor  # (B, d, T')
    z_pitch: torch.Tensor  # (B, T')


class Heads(nn.Module):
    """One hidden layer (width d, ReLU) per head, then a linear output."""

    def __init__(self, d: int):
        super().__init__()
        self.clip = _mlp(d, d, d)
        self.frame = _mlp(d, d, d)
        self.pitch = _mlp(d, d, 1)

    def forward(self, h):
        pooled = h.mean(dim=-1)
        frames = h.transpose(-1, -2)  # (..., T', d)
        return HeadOutputs(
            z_clip=self.clip(pooled),
            z_frame=self.frame(frames).transpose(-1, -2),
            z_pitch=self.pitch(frames).squeeze(-1),
        )


class Bilinear(nn.Module):
    """Trainable ``W_clip`` and ``W_frame``; with ``shared=True`` both name one matrix."""

    def __init__(self, d: int, shared: bool = False):
        super().__init__()
        self.shared = shared
        self.W_clip = nn.Parameter(torch.empty(d, d))
        nn.init.normal_(self.W_clip, std=d**-0.5)
        if shared:
            self.W_frame = self.W_clip
        else:
            self.W_frame = nn.Parameter(torch.empty(d, d))
            nn.init.normal_(self.W_frame, std=d**-0.5)


class SSLModel(nn.Module):
    def __init__(self, cfg: EncoderConfig = EncoderConfig(), shared_bilinear: bool = False):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.heads = Heads(cfg.d)
        self.bilinear = Bilinear(cfg.d, shared_bilinear)

    def forward(self, x):
        h = self.encoder(x)
        return h, self.heads(h)


class Embedding(NamedTuple):
    h: torch.Tensor       # (..., d, T')
    pooled: torch.Tensor  # (..., d)


def encode(encoder: Encoder, x) -> Embedding:
    """Frozen-mode embedding of one segment ``(n_mels, n_frames)`` or a batch of them."""
    x = torch.as_tensor(x, dtype=next(encoder.parameters()).dtype)
    single = x.dim() == 2
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        h = encoder(x.unsqueeze(0) if single else x)
    encoder.train(was_training)
    if single:
        h = h[0]
    return Embedding(h, h.mean(dim=-1))


def heads(head_module: Heads, h) -> HeadOutputs:
    return head_module(torch.as_tensor(h))


def init_params(cfg: EncoderConfig = EncoderConfig(), seed: int = 0, shared_bilinear: bool = False) -> SSLModel:
    """Deterministically initialised model for ``seed``."""
    if cfg.architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {cfg.architecture!r}")
    devices = []
    with torch.random.fork_rng(devices=devices):
        torch.manual_seed(seed)
        return SSLModel(cfg, shared_bilinear)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def state_hash(module: nn.Module) -> str:
    """SHA-256 over every named parameter and buffer, in name order."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
