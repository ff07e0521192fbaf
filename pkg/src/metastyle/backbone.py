"""Small U-Net with a style hook after the first encoder block.

Parameters are handled as ``dict[str, Tensor]`` so the meta-learning steps
can evaluate the network at updated weights without touching the module.
"""
from __future__ import annotations

from collections import OrderedDict
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .errors import ConfigError, DataError, DimensionError
from .style_stats import StyleRecallConfig, StyleStats, recall_normalize

Params = "OrderedDict[str, torch.Tensor]"
CHECKPOINT_FORMAT = "metastyle-checkpoint"
CHECKPOINT_VERSION = 1


def _block(cin: int, cout: int, convs: int = 2) -> nn.Sequential:
    layers = []
    for i in range(convs):
        layers += [nn.Conv2d(cin if i == 0 else cout, cout, 3, padding=1), nn.ReLU(inplace=False)]
    return nn.Sequential(*layers)


def _inject(h, style_override, cfg):
    """Apply a fixed StyleStats, or a callable of the raw activations.

    The callable may return StyleStats, replacement activations, or None.
    """
    if callable(style_override):
        style_override = style_override(h)
    if style_override is None:
        return h
    if isinstance(style_override, torch.Tensor):
        return style_override
    return recall_normalize(h, style_override, cfg)


class SegModel(nn.Module):
    """U-Net: ``depth`` poolings, widths base * min(2**level, 2), single-conv decoders."""

    def __init__(self, num_classes: int = 2, depth: int = 3, base_channels: int = 16, in_channels: int = 1):
        super().__init__()
        if depth < 1 or base_channels < 1 or num_classes < 2:
            raise ConfigError("need depth >= 1, base_channels >= 1, num_classes >= 2")
        self.depth, self.num_classes, self.base_channels = depth, num_classes, base_channels
        widths = [base_channels * min(2**i, 2) for i in range(depth + 1)]
        self.encoders = nn.ModuleList()
        cin = in_channels
        for w in widths[:-1]:
            self.encoders.append(_block(cin, w))
            cin = w
        self.bottleneck = _block(cin, widths[-1])
        self.decoders = nn.ModuleList(
            _block(widths[i + 1] + widths[i], widths[i], convs=1) for i in reversed(range(depth))
        )
        self.head = nn.Conv2d(widths[0], num_classes, 1)
        self.style_hook_layer = 0
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x, style_override: StyleStats | None = None, recall_cfg: StyleRecallConfig | None = None,
                inject_at: str = "feature"):
        if x.shape[-1] % 2**self.depth or x.shape[-2] % 2**self.depth:
            raise DimensionError(f"spatial size {tuple(x.shape[-2:])} not divisible by {2 ** self.depth}")
        cfg = recall_cfg or StyleRecallConfig()
        if inject_at == "input":
            x = _inject(x, style_override, cfg)
        skips = []
        h = x
        shallow = None
        for level, enc in enumerate(self.encoders):
            h = enc(h)
            if level == self.style_hook_layer:
                if inject_at == "feature":
                    h = _inject(h, style_override, cfg)
                shallow = h
            skips.append(h)
            h = F.max_pool2d(h, 2)
        h = self.bottleneck(h)
        for dec, skip in zip(self.decoders, reversed(skips)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = dec(torch.cat([h, skip], dim=1))
        return shallow, self.head(h)


def get_params(model: nn.Module) -> OrderedDict:
    """Detached copy of the model's parameters."""
    return OrderedDict((k, v.detach().clone()) for k, v in model.named_parameters())


def set_params(model: nn.Module, params) -> nn.Module:
    with torch.no_grad():
        for k, v in model.named_parameters():
            v.copy_(params[k])
    return model


def forward(model: SegModel, images: torch.Tensor, params=None, style_override=None,
            recall_cfg: StyleRecallConfig | None = None, inject_at: str = "feature"):
    """Return ``(shallow_features, class_probabilities)``.

    ``style_override`` is a StyleStats to inject at the hook, or a callable
    receiving the raw hook activations and returning StyleStats, new
    activations, or None to skip.
    """
    kwargs = {"style_override": style_override, "recall_cfg": recall_cfg, "inject_at": inject_at}
    if params is None:
        shallow, logits = model(images, **kwargs)
    else:
        shallow, logits = functional_call(model, params, (images,), kwargs)
    return shallow, torch.softmax(logits, dim=1)


def param_update(params, grads, lr: float) -> OrderedDict:
    """Plain gradient step ``theta - lr * g``; returns new tensors."""
    if list(params) != list(grads):
        raise DimensionError("gradients are not aligned with parameters")
    out = OrderedDict()
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {k} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        out[k] = p - lr * g
    return out


def grads_of(loss: torch.Tensor, params) -> OrderedDict:
    """First-order gradients of ``loss`` w.r.t. a params dict (unused params get zeros)."""
    keys = list(params)
    gs = torch.autograd.grad(loss, [params[k] for k in keys], allow_unused=True)
    return OrderedDict((k, torch.zeros_like(params[k]) if g is None else g.detach()) for k, g in zip(keys, gs))


def save_checkpoint(path, model: SegModel, config: dict | None = None, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "arch": {"num_classes": model.num_classes, "depth": model.depth, "base_channels": model.base_channels},
            "params": {k: v.detach().cpu() for k, v in model.state_dict().items()},
            "config": dict(config or {}),
            "extra": dict(extra or {}),
        },
        tmp,
    )
    tmp.replace(path)


def load_checkpoint(path) -> tuple[SegModel, dict]:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except Exception as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}") from None
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a metastyle checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {blob.get('version')}")
    model = SegModel(**blob["arch"])
    first = next(iter(blob["params"].values()))
    model = model.to(first.dtype)
    model.load_state_dict(blob["params"])
    return model, blob
