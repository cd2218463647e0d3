"""3-D bottleneck ResNet with concatenation-form non-local blocks.

Stages are named ``res1`` .. ``res4``. Non-local blocks are appended after
every bottleneck of the stages listed in ``NetworkConfig.nonlocal_stages``.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

MIN_INPUT_SHAPE = (8, 32, 32)
CHECKPOINT_VERSION = 1
_MAGIC = b"SNCKPT"


@dataclass
class NetworkConfig:
    num_classes: int
    stage_block_counts: tuple[int, int, int, int] = (3, 4, 6, 3)
    base_width: int = 64
    feature_dim: int = 256
    nonlocal_stages: tuple[int, ...] = (2, 3)
    channel_bottleneck_ratio: int = 2

    def __post_init__(self):
        self.stage_block_counts = tuple(int(c) for c in self.stage_block_counts)
        self.nonlocal_stages = tuple(sorted(int(s) for s in self.nonlocal_stages))
        if len(self.stage_block_counts) != 4 or min(self.stage_block_counts) < 1:
            raise ValueError("stage_block_counts must be four integers >= 1")
        if any(s not in (1, 2, 3, 4) for s in self.nonlocal_stages):
            raise ValueError("nonlocal_stages must be drawn from 1..4")
        if self.num_classes < 1 or self.base_width < 1 or self.feature_dim < 1:
            raise ValueError("num_classes, base_width and feature_dim must be positive")
        if self.feature_dim < self.num_classes:
            warnings.warn("feature_dim smaller than num_classes", stacklevel=2)

    @classmethod
    def toy(cls, num_classes: int, **kw) -> "NetworkConfig":
        kw.setdefault("stage_block_counts", (1, 1, 1, 1))
        kw.setdefault("base_width", 8)
        return cls(num_classes=num_classes, **kw)

    def to_json(self) -> dict:
        d = asdict(self)
        d["stage_block_counts"] = list(self.stage_block_counts)
        d["nonlocal_stages"] = list(self.nonlocal_stages)
        return d


def nonlocal_block_forward(x: torch.Tensor, params: dict) -> torch.Tensor:
    """z = sigma(y) + x with y_i = (1/N) sum_j ReLU(w_f . [theta(x_i), mu(x_j)]) psi(x_j).

    ``params`` holds ``theta``, ``mu``, ``psi``, ``sigma`` as (weight, bias)
    pairs of 1x1x1 convolutions and ``w_f`` of length 2 * inner channels.
    N = D * H * W.
    """
    b, c, d, h, w = x.shape
    n = d * h * w
    th = F.conv3d(x, *params["theta"]).reshape(b, -1, n)
    mu = F.conv3d(x, *params["mu"]).reshape(b, -1, n)
    psi = F.conv3d(x, *params["psi"]).reshape(b, -1, n)
    inner = th.shape[1]
    w_f = params["w_f"]
    # w_f . [a, b] splits into a per-i term and a per-j term
    left = torch.einsum("c,bcn->bn", w_f[:inner], th)
    right = torch.einsum("c,bcn->bn", w_f[inner:], mu)
    pair = F.relu(left[:, :, None] + right[:, None, :])  # (b, i, j)
    y = torch.bmm(pair, psi.transpose(1, 2)) / n  # (b, i, inner)
    y = y.transpose(1, 2).reshape(b, inner, d, h, w)
    return F.conv3d(y, *params["sigma"]) + x


class NonLocalBlock(nn.Module):
    def __init__(self, channels: int, ratio: int = 2):
        super().__init__()
        inner = max(1, channels // ratio)
        self.theta = nn.Conv3d(channels, inner, 1)
        self.mu = nn.Conv3d(channels, inner, 1)
        self.psi = nn.Conv3d(channels, inner, 1)
        self.sigma = nn.Conv3d(inner, channels, 1)
        self.w_f = nn.Parameter(torch.empty(2 * inner))

    def params(self) -> dict:
        return {
            "theta": (self.theta.weight, self.theta.bias),
            "mu": (self.mu.weight, self.mu.bias),
            "psi": (self.psi.weight, self.psi.bias),
            "sigma": (self.sigma.weight, self.sigma.bias),
            "w_f": self.w_f,
        }

    def forward(self, x):
        return nonlocal_block_forward(x, self.params())


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch: int, planes: int, stride: int = 1):
        super().__init__()
        out_ch = planes * self.expansion
        self.conv1 = nn.Conv3d(in_ch, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm3d(planes)
        self.conv2 = nn.Conv3d(planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(planes)
        self.conv3 = nn.Conv3d(planes, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm3d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv3d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm3d(out_ch),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity)


def _make_stage(in_ch, planes, blocks, stride, nonlocal_ratio=None):
    layers = []
    for i in range(blocks):
        layers.append(Bottleneck(in_ch, planes, stride if i == 0 else 1))
        in_ch = planes * Bottleneck.expansion
        if nonlocal_ratio is not None:
            layers.append(NonLocalBlock(in_ch, nonlocal_ratio))
    return nn.Sequential(*layers), in_ch


class NonLocalNet(nn.Module):
    """Backbone (stem, res1..res4, global pooling, feature layer) plus a linear head."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        w = config.base_width
        self.stem = nn.Sequential(
            nn.Conv3d(2, w, (3, 7, 7), stride=(1, 2, 2), padding=(1, 3, 3), bias=False),
            nn.BatchNorm3d(w),
            nn.ReLU(inplace=True),
            nn.MaxPool3d(3, stride=(1, 2, 2), padding=1),
        )
        ch = w
        for k, blocks in enumerate(config.stage_block_counts, start=1):
            ratio = config.channel_bottleneck_ratio if k in config.nonlocal_stages else None
            stage, ch = _make_stage(ch, w * 2 ** (k - 1), blocks, 1 if k == 1 else 2, ratio)
            setattr(self, f"res{k}", stage)
        self.feature = nn.Linear(ch, config.feature_dim)
        self.head = nn.Linear(config.feature_dim, config.num_classes)

    def stages(self):
        return [self.res1, self.res2, self.res3, self.res4]

    def nonlocal_blocks(self) -> list[NonLocalBlock]:
        return [m for m in self.modules() if isinstance(m, NonLocalBlock)]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 4:
            x = x.unsqueeze(0)
        if any(s < m for s, m in zip(x.shape[2:], MIN_INPUT_SHAPE)):
            raise ValueError(f"input spatial shape {tuple(x.shape[2:])} below minimum {MIN_INPUT_SHAPE}")
        x = self.stem(x)
        for stage in self.stages():
            x = stage(x)
        x = x.mean(dim=(2, 3, 4))
        return self.feature(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return classify(self.features(x), self.head.weight, self.head.bias)

    def reset_head(self, num_classes: int, seed: int = 0) -> None:
        self.config.num_classes = num_classes
        self.head = nn.Linear(self.config.feature_dim, num_classes)
        g = torch.Generator().manual_seed(seed)
        _he_normal_(self.head.weight, g)
        nn.init.zeros_(self.head.bias)


def backbone_forward(inputs, net: NonLocalNet) -> torch.Tensor:
    """Feature vector(s) of shape (feature_dim,) or (B, feature_dim)."""
    x = torch.as_tensor(inputs)
    single = x.dim() == 4
    x = x.to(next(net.parameters()).dtype)
    out = net.features(x)
    return out[0] if single else out


def classify(feature: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Affine head producing pre-softmax logits."""
    return F.linear(feature, weight, bias)


def _he_normal_(t: torch.Tensor, generator: torch.Generator) -> None:
    fan_in = t[0].numel() if t.dim() > 1 else t.numel()
    std = (2.0 / fan_in) ** 0.5
    with torch.no_grad():
        t.copy_(torch.randn(t.shape, generator=generator, dtype=t.dtype) * std)


def init_parameters(config: NetworkConfig, seed: int = 0) -> NonLocalNet:
    """Build a network with He-normal weights and identity-initialized non-local blocks."""
    net = NonLocalNet(config)
    g = torch.Generator().manual_seed(seed)
    for name, module in net.named_modules():
        if isinstance(module, (nn.Conv3d, nn.Linear)):
            _he_normal_(module.weight, g)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.BatchNorm3d):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
        elif isinstance(module, NonLocalBlock):
            _he_normal_(module.w_f, g)
    for block in net.nonlocal_blocks():
        nn.init.zeros_(block.sigma.weight)
        nn.init.zeros_(block.sigma.bias)
    return net


# ---------------------------------------------------------------------------
# Checkpoints: 6-byte magic, u32 header length, JSON header, raw payloads
# ---------------------------------------------------------------------------

_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


def save_checkpoint(net: NonLocalNet, path, vocabulary=None, extra: Optional[dict] = None) -> None:
    tensors = []
    payloads = []
    offset = 0
    for name, t in net.state_dict().items():
        t = t.detach().cpu().contiguous()
        dtype = _DTYPES[t.dtype]
        raw = t.numpy().astype(dtype, copy=False).tobytes(order="C")
        tensors.append({"name": name, "dtype": dtype, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "network_config": net.config.to_json(),
        "vocabulary": None if vocabulary is None else list(vocabulary),
        "extra": extra or {},
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path) -> tuple[NonLocalNet, Optional[list[str]], dict]:
    data = Path(path).read_bytes()
    if data[:6] != _MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    (hlen,) = struct.unpack("<I", data[6:10])
    header = json.loads(data[10:10 + hlen])
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unknown checkpoint version {header.get('format_version')!r}")
    body = memoryview(data)[10 + hlen:]
    net = NonLocalNet(NetworkConfig(**header["network_config"]))
    state = {}
    for t in header["tensors"]:
        arr = np.frombuffer(body[t["offset"]:t["offset"] + t["nbytes"]], dtype=t["dtype"]).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy())
    net.load_state_dict(state)
    return net, header.get("vocabulary"), header.get("extra", {})
