"""Toy multi-exit models.

A multi-exit network is a staged backbone plus one classifier head per
attachment point.  Running a sample yields one logit vector per exit, in
depth order.  The models here are deliberately small and untrained: the
exporter's job is producing structurally valid traces, not accuracy.
"""
from __future__ import annotations

import torch
from torch import nn


class MultiExitNet(nn.Module):
    """Staged backbone with classifier heads hanging off chosen stages.

    ``attachments`` lists backbone stage indices, strictly increasing; a
    head is attached after each listed stage.  Head input widths are
    inferred from a dry run on ``sample``; if ``head_dims`` is given it
    must match the inferred widths exactly.
    """

    def __init__(self, stages: list[nn.Module], attachments: list[int],
                 num_classes: int, sample: torch.Tensor,
                 head_dims: list[int] | None = None):
        super().__init__()
        if not attachments:
            raise ValueError("need at least one attachment point")
        if list(attachments) != sorted(set(attachments)):
            raise ValueError(f"attachments must be strictly increasing, "
                             f"got {attachments}")
        if attachments[0] < 0 or attachments[-1] >= len(stages):
            raise ValueError(f"attachments {attachments} out of range for "
                             f"{len(stages)} stages")
        self.stages = nn.ModuleList(stages)
        self.attachments = list(attachments)
        self.num_classes = num_classes

        # dry run: record width and rank of the features at each attachment
        dims, spatial = [], []
        with torch.no_grad():
            x = sample
            for i, stage in enumerate(self.stages):
                x = stage(x)
                if i in self.attachments:
                    dims.append(int(x.shape[1]))
                    spatial.append(x.dim() == 4)
        if head_dims is not None and list(head_dims) != dims:
            raise ValueError(f"attachment-point shape mismatch: declared head "
                             f"dims {list(head_dims)}, model produces {dims}")
        self.head_dims = dims
        self.heads = nn.ModuleList(
            nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(),
                          nn.Linear(dim, num_classes))
            if is_spatial else nn.Linear(dim, num_classes)
            for dim, is_spatial in zip(dims, spatial))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        logits = []
        head_iter = iter(self.heads)
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i in self.attachments:
                logits.append(next(head_iter)(x))
        return logits

    def prefix(self, exit_index: int) -> nn.Module:
        """Backbone up to and including one exit's head, for timing runs."""
        index = self.attachments[exit_index]
        return nn.Sequential(*self.stages[:index + 1], self.heads[exit_index])


def _conv_stages(channels: int, image_size: int) -> list[nn.Module]:
    del image_size  # conv stages work at any resolution
    return [
        nn.Sequential(nn.Conv2d(channels, 8, 3, padding=1), nn.ReLU()),
        nn.Sequential(nn.Conv2d(8, 8, 3, padding=1), nn.ReLU(),
                      nn.MaxPool2d(2)),
        nn.Sequential(nn.Conv2d(8, 16, 3, padding=1), nn.ReLU()),
        nn.Sequential(nn.Conv2d(16, 16, 3, padding=1), nn.ReLU(),
                      nn.MaxPool2d(2)),
    ]


def _mlp_stages(channels: int, image_size: int) -> list[nn.Module]:
    d = channels * image_size * image_size
    return [
        nn.Sequential(nn.Flatten(), nn.Linear(d, 32), nn.ReLU()),
        nn.Sequential(nn.Linear(32, 32), nn.ReLU()),
        nn.Sequential(nn.Linear(32, 32), nn.ReLU()),
    ]


MODELS = {
    "tinyconv": _conv_stages,
    "tinymlp": _mlp_stages,
}


def build_model(name: str, channels: int, image_size: int, num_classes: int,
                attachments: list[int], seed: int,
                head_dims: list[int] | None = None) -> MultiExitNet:
    """Build a registry model with deterministic initial weights."""
    if name not in MODELS:
        raise ValueError(f"unknown model {name!r}, have {sorted(MODELS)}")
    torch.manual_seed(seed)
    stages = MODELS[name](channels, image_size)
    sample = torch.zeros(1, channels, image_size, image_size)
    model = MultiExitNet(stages, attachments, num_classes, sample, head_dims)
    model.eval()
    return model
