"""Desk-scale segmentation networks with a backbone feature tap, plus cost accounting.

Two families are provided:

``dilated_pyramid``
    DeepLabV3+-like. Strided conv stem, residual (dilated) backbone stage at
    output stride 4, atrous pyramid pooling, and a decoder that fuses the
    stride-2 stem features before bilinear upsampling. ``deep`` and
    ``shallow`` differ only in the number of residual blocks, so both emit
    feature taps of identical shape.

``pool_index``
    SegNet-like. Three conv+max-pool encoder stages whose pooling indices are
    reused by max-unpooling in a mirrored decoder. Output stride 8.

The feature tap is always the final backbone output, before any pyramid or
decoder module.
"""

from __future__ import annotations

import hashlib
import io
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .errors import CheckpointError, ConfigError, ShapeError

CHECKPOINT_FORMAT = "sslkd-checkpoint/1"
FAMILY_STRIDE = {"dilated_pyramid": 4, "pool_index": 8}


class ModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    family: Literal["dilated_pyramid", "pool_index"]
    backbone_depth: Literal["deep", "shallow"]
    base_channels: int = 16
    n_classes: int = 2
    feature_tap_channels: int = 32
    input_size: int = 48
    # 1x1 projection applied to the tap before it is exported; 0 disables it
    tap_projection_channels: int = 0

    @field_validator("base_channels")
    @classmethod
    def _base(cls, v):
        if v < 8:
            raise ValueError("base_channels must be >= 8")
        return v

    @field_validator("n_classes")
    @classmethod
    def _classes(cls, v):
        if v != 2:
            raise ValueError("only binary segmentation (n_classes = 2) is supported")
        return v

    @field_validator("feature_tap_channels")
    @classmethod
    def _tap(cls, v):
        if v <= 0:
            raise ValueError("feature_tap_channels must be positive")
        return v

    @model_validator(mode="after")
    def _input(self):
        if self.input_size % self.stride:
            raise ValueError(f"input_size must be a multiple of the {self.family} stride {self.stride}")
        return self

    @property
    def stride(self) -> int:
        return FAMILY_STRIDE[self.family]

    @property
    def tap_channels(self) -> int:
        """Channel count of the exported feature map."""
        return self.tap_projection_channels or self.feature_tap_channels


def conv_bn_relu(cin, cout, k=3, stride=1, dilation=1):
    pad = dilation * (k // 2)
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=pad, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class SegModel(nn.Module):
    """Base class: ``forward(images) -> (features, logits)``."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        if spec.tap_projection_channels:
            self.projection = nn.Conv2d(spec.feature_tap_channels, spec.tap_projection_channels, 1)
        else:
            self.projection = None

    def _check_input(self, x: torch.Tensor):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected images shaped (batch, 3, H, W), got {tuple(x.shape)}")
        s = self.spec.stride
        if x.shape[-2] % s or x.shape[-1] % s:
            raise ShapeError(
                f"{self.spec.family} needs H and W to be multiples of stride {s}, got {tuple(x.shape[-2:])}"
            )

    def _export(self, tap: torch.Tensor) -> torch.Tensor:
        return self.projection(tap) if self.projection is not None else tap


class BasicBlock(nn.Module):
    def __init__(self, channels, dilation=1):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)
        self.act1 = nn.ReLU(inplace=True)
        self.act2 = nn.ReLU(inplace=True)

    def forward(self, x):
        out = self.act1(self.bn1(self.conv1(x)))
        return self.act2(self.bn2(self.conv2(out)) + x)


class PyramidPooling(nn.Module):
    """Atrous spatial pyramid pooling with rates scaled for small feature maps."""

    def __init__(self, cin, cout, rates=(2, 3)):
        super().__init__()
        self.branches = nn.ModuleList([conv_bn_relu(cin, cout, k=1)])
        self.branches.extend(conv_bn_relu(cin, cout, dilation=r) for r in rates)
        # no BN on the pooled branch: batch statistics over a 1x1 map are degenerate
        self.image_pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU(inplace=True))
        self.project = conv_bn_relu(cout * (len(rates) + 2), cout, k=1)

    def forward(self, x):
        feats = [b(x) for b in self.branches]
        pooled = self.image_pool(x)
        feats.append(pooled.expand(-1, -1, x.shape[-2], x.shape[-1]))
        return self.project(torch.cat(feats, dim=1))


class DilatedPyramidNet(SegModel):
    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        b, t = spec.base_channels, spec.feature_tap_channels
        n_blocks = 4 if spec.backbone_depth == "deep" else 1
        d = 2 * b  # pyramid/decoder width scales with the base, not the tap
        self.stem = conv_bn_relu(3, b, stride=2)
        self.down = conv_bn_relu(b, t, stride=2)
        self.blocks = nn.Sequential(*[BasicBlock(t, dilation=1 + i % 2) for i in range(n_blocks)])
        self.aspp = PyramidPooling(t, d)
        self.low_proj = conv_bn_relu(b, max(4, b // 2), k=1)
        self.fuse = conv_bn_relu(d + max(4, b // 2), d)
        self.classifier = nn.Conv2d(d, spec.n_classes, 1)

    def forward(self, x):
        self._check_input(x)
        low = self.stem(x)
        tap = self.blocks(self.down(low))
        y = self.aspp(tap)
        y = F.interpolate(y, size=low.shape[-2:], mode="bilinear", align_corners=False)
        y = self.fuse(torch.cat([y, self.low_proj(low)], dim=1))
        logits = F.interpolate(self.classifier(y), size=x.shape[-2:], mode="bilinear", align_corners=False)
        return self._export(tap), logits


class PoolIndexNet(SegModel):
    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        b, t = spec.base_channels, spec.feature_tap_channels
        reps = (2, 2, 3) if spec.backbone_depth == "deep" else (1, 1, 1)
        widths = (b, 2 * b, t)

        def stage(cin, cout, n):
            return nn.Sequential(*[conv_bn_relu(cin if i == 0 else cout, cout) for i in range(n)])

        self.enc = nn.ModuleList()
        cin = 3
        for w, n in zip(widths, reps):
            self.enc.append(stage(cin, w, n))
            cin = w
        self.pool = nn.MaxPool2d(2, 2, return_indices=True)
        self.unpool = nn.MaxUnpool2d(2, 2)
        # decoder mirrors the encoder; widths step back down to base_channels
        self.dec = nn.ModuleList(
            [stage(t, 2 * b, reps[2]), stage(2 * b, b, reps[1]), stage(b, b, reps[0])]
        )
        self.classifier = nn.Conv2d(b, spec.n_classes, 3, padding=1)

    def forward(self, x):
        self._check_input(x)
        indices, sizes = [], []
        y = x
        for enc in self.enc:
            y = enc(y)
            sizes.append(y.shape)
            y, idx = self.pool(y)
            indices.append(idx)
        tap = y
        for dec, idx, size in zip(self.dec, reversed(indices), reversed(sizes)):
            y = dec(self.unpool(y, idx, output_size=size[-2:]))
        return self._export(tap), self.classifier(y)


_FAMILIES = {"dilated_pyramid": DilatedPyramidNet, "pool_index": PoolIndexNet}


def build_model(spec: ModelSpec, init_seed: int, dtype: torch.dtype = torch.float32) -> SegModel:
    """Construct and initialize a model; a pure function of ``(spec, init_seed)``."""
    cls = _FAMILIES.get(spec.family)
    if cls is None or spec.backbone_depth not in ("deep", "shallow"):
        raise ConfigError(f"unsupported architecture {spec.family}/{spec.backbone_depth}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        model = cls(spec)
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
    return model.to(dtype)


def forward(model: SegModel, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return model(images)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------- FLOPs


def count_flops(module: nn.Module, input_shape: tuple[int, ...]) -> int:
    """Analytic FLOPs of one forward pass at ``input_shape`` (batch dimension included).

    Convolutions cost ``2 * Cin/groups * Cout * K_h * K_w * H_out * W_out`` per
    image (multiply-accumulate counted as two FLOPs, bias excluded). Batch
    normalization and ReLU cost one FLOP per output element. Pooling,
    unpooling, interpolation, concatenation and residual additions are
    counted as free.
    """
    total = 0

    def conv_hook(m: nn.Conv2d, _inp, out):
        nonlocal total
        kh, kw = m.kernel_size
        total += 2 * (m.in_channels // m.groups) * m.out_channels * kh * kw * out.shape[0] * out.shape[-2] * out.shape[-1]

    def elementwise_hook(_m, _inp, out):
        nonlocal total
        total += out.numel()

    handles = []
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, (nn.BatchNorm2d, nn.ReLU)):
            handles.append(m.register_forward_hook(elementwise_hook))
    was_training = module.training
    dtype = next((p.dtype for p in module.parameters()), torch.float32)
    try:
        module.eval()
        with torch.no_grad():
            module(torch.zeros(input_shape, dtype=dtype))
    finally:
        for h in handles:
            h.remove()
        module.train(was_training)
    return total


def estimate_gflops(spec: ModelSpec, input_size: int | None = None) -> float:
    """GFLOPs of one forward pass on a single square ``input_size`` image."""
    size = input_size or spec.input_size
    if size % spec.stride:
        raise ShapeError(f"input_size {size} is not a multiple of the {spec.family} stride {spec.stride}")
    model = build_model(spec, init_seed=0)
    return count_flops(model, (1, 3, size, size)) / 1e9


# ---------------------------------------------------------------- checkpoints


def content_hash(model: nn.Module) -> str:
    """SHA-256 over every named parameter and buffer (dtype, shape and raw bytes)."""
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        arr = t.detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(model: SegModel, path: str | Path, extra: dict | None = None) -> str:
    """Write a checkpoint (spec, parameters, buffers, content hash); returns the hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = content_hash(model)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "spec": model.spec.model_dump(mode="json"),
        "dtype": str(next(model.parameters()).dtype).removeprefix("torch."),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "hash": digest,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return digest


def load_checkpoint(path: str | Path, expected_spec: ModelSpec | None = None) -> SegModel:
    """Load a checkpoint, verifying its content hash and (optionally) its spec."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt archive
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    spec = ModelSpec(**payload["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointError(
            f"{path} holds a {spec.model_dump()} model, expected {expected_spec.model_dump()}"
        )
    model = build_model(spec, init_seed=0, dtype=getattr(torch, payload["dtype"]))
    model.load_state_dict(payload["state_dict"])
    digest = content_hash(model)
    if digest != payload["hash"]:
        raise CheckpointError(f"{path}: content hash mismatch (stored {payload['hash'][:12]}, got {digest[:12]})")
    return model


def checkpoint_hash(path: str | Path) -> str:
    """Recompute the content hash of the model stored at ``path``."""
    return content_hash(load_checkpoint(path))


def zero_weights_keep_biases(model: nn.Module) -> nn.Module:
    """Zero every conv/BN weight, leaving biases; used to probe constant-logit behaviour."""
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.BatchNorm2d)):
                m.weight.zero_()
    return model


def parameter_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
