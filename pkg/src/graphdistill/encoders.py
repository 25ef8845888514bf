"""Per-modality encoders and task heads.

Image clips are channel-stacked over time and passed through a small residual
convolutional network (two conv-norm-relu blocks with skips, global average
pooling, linear projection).  Vector clips go through a 3-layer GRU whose
top-layer outputs are averaged over time.  Detection adds a 1-layer GRU
sequence encoder that turns a window of clip features into per-clip logits.

All modules run in float32 by default and can be moved to float64 for
gradient checking.  Construction is seeded, so identical (spec, seed) yields
identical parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .container import read_container, write_container
from .datagen import IMAGE, VECTOR, ModalitySpec
from .seeding import derive_seed


class ShapeError(ValueError):
    """Input tensor does not match the declared modality/window geometry."""


class CheckpointError(ValueError):
    """Checkpoint missing, malformed, or incompatible with the target model."""


@dataclass
class ModalityOutputs:
    """One modality's forward results: representation and raw logits.

    Classification: representation (B, d_f), logits (B, L).
    Detection: representation (B, T_w, d_f), logits (B, T_w, L + 1).
    Softmax is never applied here; losses and inference do that themselves.
    """

    representation: torch.Tensor
    logits: torch.Tensor

    def flat(self) -> "ModalityOutputs":
        """Collapse any leading window dimension so rows are per-clip examples."""
        return ModalityOutputs(
            representation=self.representation.reshape(-1, self.representation.shape[-1]),
            logits=self.logits.reshape(-1, self.logits.shape[-1]),
        )


def _check_shape(tensor: torch.Tensor, expected: tuple, what: str) -> None:
    actual = tuple(tensor.shape)
    if len(actual) != len(expected) or any(
        e is not None and a != e for a, e in zip(actual, expected)
    ):
        shown = tuple("*" if e is None else e for e in expected)
        raise ShapeError(f"{what}: expected shape {shown}, got {actual}")


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class _ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(_norm_groups(channels), channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(_norm_groups(channels), channels)
        self.act = nn.ReLU()

    def forward(self, x):
        out = self.act(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.act(out + x)


class ImageClipEncoder(nn.Module):
    """Clip (B, T_c, H, W, C) -> representation (B, feature_dim)."""

    def __init__(self, image_shape: tuple[int, int, int], clip_len: int,
                 feature_dim: int = 512, base_channels: int = 16):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.clip_len = int(clip_len)
        self.feature_dim = int(feature_dim)
        self.base_channels = int(base_channels)
        h, w, c = self.image_shape
        stacked = self.clip_len * c
        wide = 2 * base_channels
        self.stem = nn.Sequential(
            nn.Conv2d(stacked, base_channels, 3, padding=1, bias=False),
            nn.GroupNorm(_norm_groups(base_channels), base_channels),
            nn.ReLU(),
        )
        self.block1 = _ResidualBlock(base_channels)
        self.down = nn.Sequential(
            nn.Conv2d(base_channels, wide, 3, stride=2, padding=1, bias=False),
            nn.GroupNorm(_norm_groups(wide), wide),
            nn.ReLU(),
        )
        self.block2 = _ResidualBlock(wide)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.project = nn.Linear(wide, feature_dim)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        h, w, c = self.image_shape
        _check_shape(clips, (None, self.clip_len, h, w, c), "image clip")
        x = clips.permute(0, 1, 4, 2, 3).reshape(clips.shape[0], self.clip_len * c, h, w)
        x = self.stem(x)
        x = self.block1(x)
        x = self.down(x)
        x = self.block2(x)
        x = self.pool(x).flatten(1)
        return self.project(x)


class VectorClipEncoder(nn.Module):
    """Clip (B, T_c, D) -> representation (B, feature_dim).

    Three stacked GRU layers; the representation is the time-average of the
    top layer's raw hidden outputs (no extra output nonlinearity).
    """

    def __init__(self, input_dim: int, clip_len: int, feature_dim: int = 512):
        super().__init__()
        self.input_dim = int(input_dim)
        self.clip_len = int(clip_len)
        self.feature_dim = int(feature_dim)
        self.gru = nn.GRU(input_dim, feature_dim, num_layers=3, batch_first=True)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        _check_shape(clips, (None, self.clip_len, self.input_dim), "vector clip")
        outputs, _ = self.gru(clips)
        return outputs.mean(dim=1)


class SequenceEncoder(nn.Module):
    """Window of clip features (B, T_w, d_f) -> per-clip features (B, T_w, d_f)."""

    def __init__(self, feature_dim: int):
        super().__init__()
        self.feature_dim = int(feature_dim)
        self.gru = nn.GRU(feature_dim, feature_dim, num_layers=1, batch_first=True)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        _check_shape(features, (None, None, self.feature_dim), "clip feature window")
        if features.shape[1] < 1:
            raise ShapeError("clip feature window: window length must be >= 1")
        outputs, _ = self.gru(features)
        return outputs


class ClassifyHead(nn.Module):
    """Affine map from representation to raw class logits."""

    def __init__(self, feature_dim: int, num_outputs: int):
        super().__init__()
        self.linear = nn.Linear(feature_dim, num_outputs)

    def forward(self, representation: torch.Tensor) -> torch.Tensor:
        return self.linear(representation)


def build_visual_encoder(modality: ModalitySpec, clip_len: int, feature_dim: int,
                         base_channels: int = 16) -> nn.Module:
    if modality.kind == IMAGE:
        return ImageClipEncoder(modality.shape, clip_len, feature_dim, base_channels)
    if modality.kind == VECTOR:
        return VectorClipEncoder(modality.shape[0], clip_len, feature_dim)
    raise ValueError(f"unknown modality kind {modality.kind!r}")


class ClassificationModel(nn.Module):
    """Visual encoder + linear head; forward maps clips to ModalityOutputs."""

    def __init__(self, modality: ModalitySpec, clip_len: int, num_classes: int,
                 feature_dim: int = 512, base_channels: int = 16):
        super().__init__()
        self.modality_name = modality.name
        self.encoder = build_visual_encoder(modality, clip_len, feature_dim, base_channels)
        self.head = ClassifyHead(feature_dim, num_classes)
        self._arch = {
            "model": "classification",
            "modality": modality.name,
            "kind": modality.kind,
            "input_shape": list(modality.shape),
            "clip_len": int(clip_len),
            "feature_dim": int(feature_dim),
            "base_channels": int(base_channels) if modality.kind == IMAGE else None,
            "num_outputs": int(num_classes),
        }

    def forward(self, clips: torch.Tensor) -> ModalityOutputs:
        rep = self.encoder(clips)
        return ModalityOutputs(representation=rep, logits=self.head(rep))

    def architecture(self) -> dict:
        return dict(self._arch)


class DetectionModel(nn.Module):
    """Visual encoder + sequence encoder + head over windows of clips.

    Input windows are (B, T_w, T_c, ...); the representation handed to the
    distillation layer is the sequence encoder's per-clip output.
    """

    def __init__(self, modality: ModalitySpec, clip_len: int, num_classes: int,
                 feature_dim: int = 512, base_channels: int = 16):
        super().__init__()
        self.modality_name = modality.name
        self.encoder = build_visual_encoder(modality, clip_len, feature_dim, base_channels)
        self.sequence = SequenceEncoder(feature_dim)
        self.head = ClassifyHead(feature_dim, num_classes + 1)
        self.clip_len = int(clip_len)
        self._arch = {
            "model": "detection",
            "modality": modality.name,
            "kind": modality.kind,
            "input_shape": list(modality.shape),
            "clip_len": int(clip_len),
            "feature_dim": int(feature_dim),
            "base_channels": int(base_channels) if modality.kind == IMAGE else None,
            "num_outputs": int(num_classes) + 1,
        }

    def forward(self, windows: torch.Tensor) -> ModalityOutputs:
        if windows.ndim < 3:
            raise ShapeError(f"window batch: expected (B, T_w, T_c, ...), got {tuple(windows.shape)}")
        batch, num_clips = windows.shape[0], windows.shape[1]
        if num_clips < 1:
            raise ShapeError("window batch: window length must be >= 1")
        clips = windows.reshape(batch * num_clips, *windows.shape[2:])
        features = self.encoder(clips).reshape(batch, num_clips, -1)
        rep = self.sequence(features)
        return ModalityOutputs(representation=rep, logits=self.head(rep))

    def architecture(self) -> dict:
        return dict(self._arch)


def build_model(task: str, modality: ModalitySpec, clip_len: int, num_classes: int,
                feature_dim: int, base_channels: int = 16, seed: int = 0) -> nn.Module:
    """Seeded model construction; same arguments always give the same weights."""
    cls = {"classification": ClassificationModel, "detection": DetectionModel}[task]
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed("init", task, modality.name, seed))
        model = cls(modality, clip_len, num_classes, feature_dim, base_channels)
    return model


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, metadata: dict | None = None) -> None:
    """Persist parameters with an architecture descriptor for strict reloads."""
    tensors = {
        name: param.detach().cpu().numpy()
        for name, param in model.state_dict().items()
    }
    meta = {
        "kind": "checkpoint",
        "arch": model.architecture(),
        "modality": model.modality_name,
        "metadata": metadata or {},
    }
    write_container(path, meta, tensors)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict]:
    meta, tensors = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: not a checkpoint container (kind={meta.get('kind')!r})")
    return meta["arch"], tensors, meta.get("metadata", {})


def load_into(model, path) -> dict:
    """Load a checkpoint into `model`; architectures must match exactly."""
    arch, tensors, metadata = load_checkpoint(path)
    if arch != model.architecture():
        raise CheckpointError(
            f"{path}: architecture mismatch\n  checkpoint: {arch}\n  model:      {model.architecture()}"
        )
    state = {name: torch.from_numpy(np.ascontiguousarray(a)) for name, a in tensors.items()}
    model.load_state_dict(state, strict=True)
    return metadata


def model_from_checkpoint(path, modality: ModalitySpec):
    """Rebuild the saved model from its descriptor and load the weights."""
    arch, tensors, _ = load_checkpoint(path)
    if arch["modality"] != modality.name or arch["kind"] != modality.kind:
        raise CheckpointError(
            f"{path}: checkpoint is for modality {arch['modality']!r} ({arch['kind']}), "
            f"requested {modality.name!r} ({modality.kind})"
        )
    cls = {"classification": ClassificationModel, "detection": DetectionModel}[arch["model"]]
    num_classes = arch["num_outputs"] - (1 if arch["model"] == "detection" else 0)
    model = cls(
        modality, arch["clip_len"], num_classes,
        feature_dim=arch["feature_dim"],
        base_channels=arch["base_channels"] or 16,
    )
    state = {name: torch.from_numpy(np.ascontiguousarray(a)) for name, a in tensors.items()}
    model.load_state_dict(state, strict=True)
    return model
