"""Analytic multiply-accumulate counting via forward hooks.

Counts MACs for the layers the toy models actually use (Conv2d, Linear).
Pooling, activations, and flatten contribute no multiplies and count zero.
"""
from __future__ import annotations

import torch
from torch import nn


def _conv_macs(module: nn.Conv2d, output: torch.Tensor) -> int:
    out_spatial = output.shape[2] * output.shape[3]
    kh, kw = module.kernel_size
    per_position = (module.in_channels // module.groups) * kh * kw
    return int(out_spatial) * module.out_channels * per_position


def _linear_macs(module: nn.Linear, output: torch.Tensor) -> int:
    del output
    return module.in_features * module.out_features


def count_macs(module: nn.Module, sample: torch.Tensor) -> int:
    """MACs for one forward pass of ``module`` on a single sample."""
    total = 0
    hooks = []

    def make_hook(fn):
        def hook(mod, inputs, output):
            nonlocal total
            total += fn(mod, output)
        return hook

    for sub in module.modules():
        if isinstance(sub, nn.Conv2d):
            hooks.append(sub.register_forward_hook(make_hook(_conv_macs)))
        elif isinstance(sub, nn.Linear):
            hooks.append(sub.register_forward_hook(make_hook(_linear_macs)))
    try:
        with torch.no_grad():
            module(sample)
    finally:
        for h in hooks:
            h.remove()
    return total


def cumulative_exit_macs(model, sample: torch.Tensor) -> list[int]:
    """Cumulative MACs through each exit: shared backbone plus that head.

    Exit i costs all backbone stages up to its attachment point plus its
    own head; earlier heads are skipped on the way, so they are excluded.
    """
    stage_macs = []
    with torch.no_grad():
        x = sample
        for stage in model.stages:
            stage_macs.append(count_macs(stage, x))
            x = stage(x)

    costs = []
    for exit_index, attach in enumerate(model.attachments):
        backbone = sum(stage_macs[:attach + 1])
        with torch.no_grad():
            x = sample
            for stage in model.stages[:attach + 1]:
                x = stage(x)
        head = count_macs(model.heads[exit_index], x)
        costs.append(backbone + head)
    return costs
