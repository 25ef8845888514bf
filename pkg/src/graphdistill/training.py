"""Classification and detection trainers with the two-stage graph curriculum.

Stage one trains every modality under a fixed uniform graph; at the boundary
the per-modality validation accuracies become the prior vector and the
configured graph (uniform / prior / learned) takes over.  The empty strategy
never builds messages at all, which keeps its trajectories bit-identical to
independent per-modality training.

All randomness (init, shuffles, clip and window starts, splits) is drawn from
keyed rngs (see seeding.py), so runs are deterministic given (corpus, config,
seed) and do not depend on which other modalities train alongside.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch

from .baselines import (
    MultitaskDecoders,
    StrategyConfig,
    cross_modal_loss,
    kd_loss,
    multitask_recon_loss,
)
from .datagen import ClassificationCorpus, DetectionCorpus, DetectionVideo
from .distill import (
    GraphDistillation,
    classification_loss,
    imitation_loss_vector,
    message_matrix,
    uniform_graph,
)
from .encoders import (
    ClassificationModel,
    DetectionModel,
    CheckpointError,
    build_model,
    load_checkpoint,
)
from .evaluation import DataError
from .seeding import derive_rng

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss, inconsistent setup)."""


class TransferError(ValueError):
    """Source checkpoints cannot initialize the requested target encoders."""


@dataclass
class TrainSchedule:
    """Optimization schedule; learning-rate milestones multiply by decay_factor."""

    total_epochs: int = 60
    stage1_epochs: int = 30
    batch_size: int = 32
    lr_visual: float = 1e-2
    lr_sequence: float = 1e-3
    momentum: float = 0.9
    decay_milestones: tuple[int, ...] = ()
    decay_factor: float = 0.1
    seed: int = 0
    feature_dim: int = 512
    base_channels: int = 16
    val_fraction: float = 0.1

    def __post_init__(self):
        if not 0 <= self.stage1_epochs <= self.total_epochs:
            raise ValueError(
                f"need 0 <= stage1_epochs <= total_epochs, got {self.stage1_epochs}/{self.total_epochs}"
            )
        if self.lr_visual <= 0 or self.lr_sequence <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class SamplerConfig:
    """Clip/window geometry and the detection activity threshold."""

    clip_len: int = 10
    window_len: int = 10
    clip_step: int = 10
    window_step: int = 50
    activity_threshold: float = 0.4
    windows_per_video: int = 4
    test_clips: int = 5

    def __post_init__(self):
        for name in ("clip_len", "window_len", "clip_step", "window_step", "windows_per_video", "test_clips"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.activity_threshold < 1:
            raise ValueError("activity_threshold must be in (0, 1)")
        if self.window_step % self.clip_step != 0:
            raise ValueError("window_step must be a multiple of clip_step so overlaps align")

    @property
    def window_span(self) -> int:
        return (self.window_len - 1) * self.clip_step + self.clip_len


# ---------------------------------------------------------------------------
# sampling


def sample_clip_start(video_len: int, clip_len: int, rng: np.random.Generator) -> int:
    if video_len < clip_len:
        raise DataError(f"video of {video_len} frames is shorter than clip_len={clip_len}")
    return int(rng.integers(0, video_len - clip_len + 1))


def sample_clip(clips: Mapping[str, np.ndarray], clip_len: int,
                rng: np.random.Generator) -> dict[str, np.ndarray]:
    """One contiguous clip per modality, all cut at the same random start."""
    video_len = next(iter(clips.values())).shape[0]
    start = sample_clip_start(video_len, clip_len, rng)
    return {name: v[start : start + clip_len] for name, v in clips.items()}


def clip_majority_label(frame_labels: np.ndarray, background: int) -> int:
    """Majority frame label; ties involving background resolve to background."""
    counts = np.bincount(frame_labels, minlength=background + 1)
    top = counts.max()
    if counts[background] == top:
        return background
    return int(np.argmax(counts))


def window_clip_labels(frame_labels: np.ndarray, start: int, sampler: SamplerConfig,
                       background: int) -> np.ndarray:
    labels = np.empty(sampler.window_len, dtype=np.int64)
    for i in range(sampler.window_len):
        lo = start + i * sampler.clip_step
        labels[i] = clip_majority_label(frame_labels[lo : lo + sampler.clip_len], background)
    return labels


def sample_window(video: DetectionVideo, sampler: SamplerConfig, num_classes: int,
                  rng: np.random.Generator):
    """Random window of window_len clips plus per-clip majority labels."""
    total = next(iter(video.frames.values())).shape[0]
    span = sampler.window_span
    if total < span:
        raise DataError(f"video of {total} frames is shorter than a window span of {span}")
    start = int(rng.integers(0, total - span + 1))
    clips = {
        name: np.stack([
            frames[start + i * sampler.clip_step : start + i * sampler.clip_step + sampler.clip_len]
            for i in range(sampler.window_len)
        ])
        for name, frames in video.frames.items()
    }
    labels = window_clip_labels(video.frame_labels(num_classes), start, sampler, num_classes)
    return clips, labels, start


def class_weights(train_labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Inverse-frequency weights, scaled so present classes average to 1."""
    train_labels = np.asarray(train_labels)
    if train_labels.size == 0:
        raise DataError("cannot derive class weights from an empty label set")
    counts = np.bincount(train_labels, minlength=num_classes).astype(np.float64)
    present = counts > 0
    if not present.all():
        logger.warning("classes %s absent from training labels; weight set to 0",
                       np.flatnonzero(~present).tolist())
    weights = np.zeros(num_classes)
    weights[present] = 1.0 / counts[present]
    weights[present] *= present.sum() / weights[present].sum()
    return weights


# ---------------------------------------------------------------------------
# shared trainer machinery


def _val_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    take = max(1, int(round(fraction * n))) if fraction > 0 else 0
    order = derive_rng("val-split", seed).permutation(n)
    return np.sort(order[take:]), np.sort(order[:take])


def _graph_hash(graph) -> str:
    if graph is None:
        return "empty"
    arr = np.ascontiguousarray(torch.as_tensor(graph).detach().cpu().numpy(), dtype=np.float64)
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


def metrics_to_jsonl(metrics: Sequence[dict]) -> str:
    return "\n".join(json.dumps(record, sort_keys=True) for record in metrics) + "\n"


class _StrategyState:
    """Owns the mechanism-specific modules and computes the auxiliary loss."""

    def __init__(self, config: StrategyConfig, modality_names: Sequence[str],
                 feature_dim: int, num_outputs: int,
                 modalities=None, clip_len: int | None = None):
        self.config = config
        self.names = list(modality_names)
        num = len(self.names)
        self.layer = None
        self.decoders = None
        if config.is_graph and config.kind != "empty" and num >= 2:
            self.layer = GraphDistillation(num, feature_dim, num_outputs, config.graph_config())
        if config.kind == "multitask" and num >= 2:
            if modalities is None or clip_len is None:
                raise ValueError("multitask strategy needs modality specs and clip length")
            self.decoders = MultitaskDecoders(modalities, clip_len, feature_dim)
        self.in_stage1 = True
        self._uniform = uniform_graph(num) if num >= 2 else None

    def modules(self) -> list[torch.nn.Module]:
        return [m for m in (self.layer, self.decoders) if m is not None]

    def parameters(self):
        for module in self.modules():
            yield from module.parameters()

    def distills(self) -> bool:
        return len(self.names) >= 2 and self.config.kind != "empty"

    def set_prior(self, prior: np.ndarray) -> None:
        if self.layer is not None:
            self.layer.set_prior(torch.as_tensor(prior, dtype=torch.float32))

    def current_graph(self, outputs):
        """Effective graph for this batch, honoring the curriculum stage."""
        if not self.distills() or not self.config.is_graph:
            return None
        if self.in_stage1:
            return self._uniform
        return self.layer.effective_graph(outputs)

    def auxiliary_loss(self, outputs_by_name: dict, clips=None):
        """Summed extra loss for this batch, or None when nothing applies."""
        if not self.distills():
            return None
        cfg = self.config
        outputs = list(outputs_by_name.values())
        if cfg.is_graph:
            graph = self.current_graph(outputs)
            if graph is None:
                return None
            m = message_matrix(outputs, cfg.lambda_logits, cfg.lambda_rep)
            per = imitation_loss_vector(graph, m)
            return per.mean(dim=0).sum() if per.ndim == 2 else per.sum()
        if cfg.kind == "kd":
            return cfg.lambda_logits * kd_loss(outputs, cfg.temperature).sum()
        if cfg.kind == "cross_modal":
            feature_dim = outputs[0].representation.shape[-1]
            vec = cross_modal_loss(
                outputs, cfg.temperature,
                weight_logits=cfg.lambda_logits,
                weight_rep=cfg.lambda_rep / feature_dim,
            )
            return vec.sum()
        if cfg.kind == "multitask":
            if clips is None:
                raise ValueError("multitask strategy needs the raw clip batch")
            flat = {name: out.flat() for name, out in outputs_by_name.items()}
            return multitask_recon_loss(self.decoders, flat, clips).sum()
        raise ValueError(f"unhandled strategy {cfg.kind!r}")

    def snapshot_graph(self, outputs):
        """Mean effective graph over a probe batch (numpy), or None."""
        if not self.distills() or not self.config.is_graph:
            return None
        with torch.no_grad():
            graph = self.current_graph(outputs)
        if graph is None:
            return None
        graph = torch.as_tensor(graph)
        if graph.ndim == 3:
            graph = graph.mean(dim=0)
        return graph.detach().cpu().numpy().copy()


def _check_finite(loss: torch.Tensor, epoch: int, batch_index: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {loss.item()} at epoch {epoch}, batch {batch_index}; aborting"
        )


def _decay_lr(optimizers: Sequence[torch.optim.Optimizer], epoch: int,
              schedule: TrainSchedule) -> None:
    if epoch in schedule.decay_milestones:
        for opt in optimizers:
            for group in opt.param_groups:
                group["lr"] *= schedule.decay_factor


# ---------------------------------------------------------------------------
# classification


@dataclass
class ClassificationResult:
    models: dict[str, ClassificationModel]
    metrics: list[dict]
    prior: np.ndarray | None
    graph_snapshots: dict[str, np.ndarray] = field(default_factory=dict)
    val_indices: np.ndarray | None = None

    def metrics_jsonl(self) -> str:
        return metrics_to_jsonl(self.metrics)


def _center_clip_batch(examples, names, clip_len, dtype):
    """Deterministic center clips for validation, batched per modality."""
    batches = {}
    for name in names:
        clips = []
        for e in examples:
            video = e.clips[name]
            start = (video.shape[0] - clip_len) // 2
            clips.append(video[start : start + clip_len])
        batches[name] = torch.from_numpy(np.stack(clips)).to(dtype)
    return batches


def _val_accuracy(models: dict, examples, clip_len: int) -> dict[str, float]:
    if not examples:
        return {name: 0.0 for name in models}
    labels = np.array([e.label for e in examples])
    dtype = next(iter(models.values())).head.linear.weight.dtype
    batches = _center_clip_batch(examples, list(models), clip_len, dtype)
    accuracy = {}
    for name, model in models.items():
        model.eval()
        with torch.no_grad():
            logits = model(batches[name]).logits
        preds = logits.argmax(dim=-1).cpu().numpy()
        accuracy[name] = float((preds == labels).mean())
        model.train()
    return accuracy


def _prior_from_accuracy(accuracy: dict[str, float], names: Sequence[str]) -> np.ndarray:
    values = np.array([accuracy[name] for name in names], dtype=np.float64)
    if values.sum() <= 0:
        values = np.ones_like(values)
    return values / values.sum()


def train_classification(corpus: ClassificationCorpus, modality_names: Sequence[str],
                         strategy: StrategyConfig, schedule: TrainSchedule,
                         clip_len: int = 10) -> ClassificationResult:
    """Train one model per modality, jointly coupled by the chosen strategy."""
    torch.set_num_threads(1)
    spec = corpus.spec
    names = list(modality_names)
    unknown = [n for n in names if n not in {m.name for m in spec.modalities}]
    if unknown:
        raise DataError(f"modalities {unknown} not present in corpus")
    models = {
        name: build_model(
            "classification", spec.modality(name), clip_len, spec.num_classes,
            schedule.feature_dim, schedule.base_channels, seed=schedule.seed,
        )
        for name in names
    }
    for model in models.values():
        model.train()
    state = _StrategyState(
        strategy, names, schedule.feature_dim, spec.num_classes,
        modalities=[spec.modality(n) for n in names], clip_len=clip_len,
    )
    params = [p for m in models.values() for p in m.parameters()]
    params += list(state.parameters())
    optimizer = torch.optim.SGD(params, lr=schedule.lr_visual, momentum=schedule.momentum)

    train_idx, val_idx = _val_split(len(corpus.train), schedule.val_fraction, schedule.seed)
    train_examples = [corpus.train[i] for i in train_idx]
    val_examples = [corpus.train[i] for i in val_idx]
    labels_all = np.array([e.label for e in train_examples])
    weights = torch.from_numpy(class_weights(labels_all, spec.num_classes)).to(torch.float32)

    metrics: list[dict] = []
    prior = None
    snapshots: dict[str, np.ndarray] = {}
    for epoch in range(schedule.total_epochs):
        if epoch == schedule.stage1_epochs and state.distills() and strategy.is_graph:
            accuracy = _val_accuracy(models, val_examples, clip_len)
            prior = _prior_from_accuracy(accuracy, names)
            state.set_prior(prior)
            state.in_stage1 = False
        _decay_lr([optimizer], epoch, schedule)

        order = derive_rng("shuffle", schedule.seed, "cls", epoch).permutation(len(train_examples))
        epoch_loss = {name: 0.0 for name in names}
        n_batches = 0
        for batch_index, lo in enumerate(range(0, len(order), schedule.batch_size)):
            batch_ids = order[lo : lo + schedule.batch_size]
            clips = {name: [] for name in names}
            labels = []
            for i in batch_ids:
                rng = derive_rng("clip", schedule.seed, epoch, int(i))
                cut = sample_clip(train_examples[i].clips, clip_len, rng)
                for name in names:
                    clips[name].append(cut[name])
                labels.append(train_examples[i].label)
            batch = {
                name: torch.from_numpy(np.stack(stack)) for name, stack in clips.items()
            }
            label_tensor = torch.as_tensor(labels, dtype=torch.long)
            outputs = {name: models[name](batch[name]) for name in names}
            per_modality = {
                name: classification_loss(out.logits, label_tensor, weights)
                for name, out in outputs.items()
            }
            loss = sum(per_modality.values())
            aux = state.auxiliary_loss(outputs, clips=batch)
            if aux is not None:
                loss = loss + aux
            _check_finite(loss, epoch, batch_index)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            for name in names:
                epoch_loss[name] += float(per_modality[name].detach())
            n_batches += 1

        val_accuracy = _val_accuracy(models, val_examples, clip_len)
        graph = None
        if state.distills() and strategy.is_graph:
            graph = _probe_graph_cls(state, models, val_examples or train_examples[:8], clip_len)
        metrics.append({
            "epoch": epoch,
            "split": "train",
            "stage": 1 if epoch < schedule.stage1_epochs else 2,
            "loss": {name: epoch_loss[name] / max(n_batches, 1) for name in names},
            "val_accuracy": val_accuracy,
            "graph_hash": _graph_hash(graph),
        })
    if state.distills() and strategy.is_graph:
        snapshots = _class_graph_snapshots(state, models, val_examples or train_examples, clip_len,
                                           spec.num_classes)
    return ClassificationResult(
        models=models, metrics=metrics, prior=prior,
        graph_snapshots=snapshots, val_indices=val_idx,
    )


def _probe_graph_cls(state, models, examples, clip_len):
    if not examples:
        return None
    dtype = next(iter(models.values())).head.linear.weight.dtype
    batches = _center_clip_batch(examples, list(models), clip_len, dtype)
    with torch.no_grad():
        outputs = [models[name](batches[name]) for name in models]
        graph = state.current_graph(outputs)
    if graph is None:
        return None
    graph = torch.as_tensor(graph)
    return graph.mean(dim=0) if graph.ndim == 3 else graph


def _class_graph_snapshots(state, models, examples, clip_len, num_classes):
    """Mean effective graph overall and per class, for the plot emitter."""
    if not examples:
        return {}
    dtype = next(iter(models.values())).head.linear.weight.dtype
    batches = _center_clip_batch(examples, list(models), clip_len, dtype)
    labels = np.array([e.label for e in examples])
    with torch.no_grad():
        outputs = [models[name](batches[name]) for name in models]
        graph = state.current_graph(outputs)
    if graph is None:
        return {}
    graph = torch.as_tensor(graph)
    if graph.ndim == 2:
        graph = graph.unsqueeze(0).expand(len(examples), -1, -1)
    graph = graph.cpu().numpy()
    snapshots = {"mean": graph.mean(axis=0)}
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            snapshots[f"class_{c}"] = graph[mask].mean(axis=0)
    return snapshots


# ---------------------------------------------------------------------------
# detection


@dataclass
class DetectionResult:
    models: dict[str, DetectionModel]
    metrics: list[dict]
    prior: np.ndarray | None
    graph_snapshots: dict[str, np.ndarray] = field(default_factory=dict)

    def metrics_jsonl(self) -> str:
        return metrics_to_jsonl(self.metrics)


def _encoder_arch(arch: dict) -> dict:
    keep = ("modality", "kind", "input_shape", "clip_len", "feature_dim", "base_channels")
    return {k: arch[k] for k in keep}


def transfer_encoders(source_checkpoints: Mapping[str, object],
                      models: Mapping[str, DetectionModel]) -> None:
    """Copy source visual-encoder weights into detection models, strictly checked.

    Heads and sequence encoders keep their fresh initialization; every target
    modality must have a compatible source checkpoint.
    """
    for name, model in models.items():
        if name not in source_checkpoints:
            raise TransferError(
                f"target modality {name!r} has no source checkpoint "
                f"(available: {sorted(source_checkpoints)})"
            )
        arch, tensors, _ = load_checkpoint(source_checkpoints[name])
        if _encoder_arch(arch) != _encoder_arch(model.architecture()):
            raise TransferError(
                f"encoder architecture mismatch for {name!r}:\n"
                f"  source: {_encoder_arch(arch)}\n  target: {_encoder_arch(model.architecture())}"
            )
        encoder_state = {
            key[len("encoder."):]: torch.from_numpy(np.ascontiguousarray(value))
            for key, value in tensors.items()
            if key.startswith("encoder.")
        }
        if not encoder_state:
            raise CheckpointError(f"checkpoint for {name!r} contains no encoder parameters")
        model.encoder.load_state_dict(encoder_state, strict=True)


def _detection_windows(video: DetectionVideo, starts: Sequence[int], names,
                       sampler: SamplerConfig, num_classes: int):
    clips = {name: [] for name in names}
    labels = []
    frame_labels = video.frame_labels(num_classes)
    for start in starts:
        for name in names:
            frames = video.frames[name]
            clips[name].append(np.stack([
                frames[start + i * sampler.clip_step : start + i * sampler.clip_step + sampler.clip_len]
                for i in range(sampler.window_len)
            ]))
        labels.append(window_clip_labels(frame_labels, start, sampler, num_classes))
    return clips, labels


def _val_clip_accuracy(models: dict, videos, sampler: SamplerConfig, num_classes: int):
    """Per-clip accuracy over deterministic tiled windows of validation videos."""
    if not videos:
        return {name: 0.0 for name in models}
    names = list(models)
    dtype = next(iter(models.values())).head.linear.weight.dtype
    hits = {name: 0 for name in names}
    total = 0
    for video in videos:
        length = next(iter(video.frames.values())).shape[0]
        starts = list(range(0, length - sampler.window_span + 1, sampler.window_span))
        if not starts:
            continue
        clips, labels = _detection_windows(video, starts, names, sampler, num_classes)
        label_arr = np.stack(labels).reshape(-1)
        total += label_arr.size
        for name in names:
            batch = torch.from_numpy(np.stack(clips[name])).to(dtype)
            models[name].eval()
            with torch.no_grad():
                logits = models[name](batch).logits
            models[name].train()
            preds = logits.argmax(dim=-1).cpu().numpy().reshape(-1)
            hits[name] += int((preds == label_arr).sum())
    if total == 0:
        return {name: 0.0 for name in names}
    return {name: hits[name] / total for name in names}


def train_detection(corpus: DetectionCorpus, modality_names: Sequence[str],
                    strategy: StrategyConfig, schedule: TrainSchedule,
                    sampler: SamplerConfig,
                    init_checkpoints: Mapping[str, object] | None = None) -> DetectionResult:
    """Train per-modality detection models over sampled windows.

    Visual encoders optionally start from classification checkpoints and are
    fine-tuned with momentum SGD; sequence encoders, heads, and strategy
    modules use the adaptive-moment optimizer.
    """
    torch.set_num_threads(1)
    spec = corpus.spec
    names = list(modality_names)
    unknown = [n for n in names if n not in {m.name for m in spec.modalities}]
    if unknown:
        raise DataError(f"modalities {unknown} not present in corpus")
    if spec.video_frames < sampler.window_span:
        raise DataError(
            f"videos of {spec.video_frames} frames cannot hold one window "
            f"(span {sampler.window_span})"
        )
    num_classes = spec.num_classes
    background = spec.background_class
    models = {
        name: build_model(
            "detection", spec.modality(name), sampler.clip_len, num_classes,
            schedule.feature_dim, schedule.base_channels, seed=schedule.seed,
        )
        for name in names
    }
    if init_checkpoints is not None:
        transfer_encoders(init_checkpoints, models)
    for model in models.values():
        model.train()
    state = _StrategyState(
        strategy, names, schedule.feature_dim, num_classes + 1,
        modalities=[spec.modality(n) for n in names], clip_len=sampler.clip_len,
    )
    visual_params = [p for m in models.values() for p in m.encoder.parameters()]
    other_params = [
        p for m in models.values()
        for p in list(m.sequence.parameters()) + list(m.head.parameters())
    ]
    other_params += list(state.parameters())
    sgd = torch.optim.SGD(visual_params, lr=schedule.lr_visual, momentum=schedule.momentum)
    adam = torch.optim.Adam(other_params, lr=schedule.lr_sequence)

    train_idx, val_idx = _val_split(len(corpus.train), schedule.val_fraction, schedule.seed)
    train_videos = [corpus.train[i] for i in train_idx]
    val_videos = [corpus.train[i] for i in val_idx]
    if not train_videos:
        raise DataError("no training videos left after validation split")
    frame_label_array = np.concatenate([v.frame_labels(num_classes) for v in train_videos])
    weights = torch.from_numpy(class_weights(frame_label_array, background + 1)).to(torch.float32)

    metrics: list[dict] = []
    prior = None
    for epoch in range(schedule.total_epochs):
        if epoch == schedule.stage1_epochs and state.distills() and strategy.is_graph:
            accuracy = _val_clip_accuracy(models, val_videos or train_videos, sampler, num_classes)
            prior = _prior_from_accuracy(accuracy, names)
            state.set_prior(prior)
            state.in_stage1 = False
        _decay_lr([sgd, adam], epoch, schedule)

        draws = []
        for v, video in enumerate(train_videos):
            rng = derive_rng("window", schedule.seed, epoch, v)
            total = next(iter(video.frames.values())).shape[0]
            for _ in range(sampler.windows_per_video):
                draws.append((v, int(rng.integers(0, total - sampler.window_span + 1))))
        order = derive_rng("shuffle", schedule.seed, "det", epoch).permutation(len(draws))
        epoch_loss = {name: 0.0 for name in names}
        n_batches = 0
        for batch_index, lo in enumerate(range(0, len(order), schedule.batch_size)):
            chosen = [draws[i] for i in order[lo : lo + schedule.batch_size]]
            clips = {name: [] for name in names}
            labels = []
            for v, start in chosen:
                video_clips, video_labels = _detection_windows(
                    train_videos[v], [start], names, sampler, num_classes
                )
                for name in names:
                    clips[name].append(video_clips[name][0])
                labels.append(video_labels[0])
            batch = {name: torch.from_numpy(np.stack(stack)) for name, stack in clips.items()}
            label_tensor = torch.from_numpy(np.stack(labels)).reshape(-1).to(torch.long)
            outputs = {name: models[name](batch[name]) for name in names}
            flat = {name: out.flat() for name, out in outputs.items()}
            per_modality = {
                name: classification_loss(out.logits, label_tensor, weights)
                for name, out in flat.items()
            }
            loss = sum(per_modality.values())
            flat_clips = {
                name: tensor.reshape(-1, *tensor.shape[2:]) for name, tensor in batch.items()
            }
            aux = state.auxiliary_loss(flat, clips=flat_clips)
            if aux is not None:
                loss = loss + aux
            _check_finite(loss, epoch, batch_index)
            sgd.zero_grad()
            adam.zero_grad()
            loss.backward()
            sgd.step()
            adam.step()
            for name in names:
                epoch_loss[name] += float(per_modality[name].detach())
            n_batches += 1

        val_accuracy = _val_clip_accuracy(models, val_videos, sampler, num_classes)
        graph = _probe_graph_det(state, models, (val_videos or train_videos)[0], sampler,
                                 num_classes) if state.distills() and strategy.is_graph else None
        metrics.append({
            "epoch": epoch,
            "split": "train",
            "stage": 1 if epoch < schedule.stage1_epochs else 2,
            "loss": {name: epoch_loss[name] / max(n_batches, 1) for name in names},
            "val_accuracy": val_accuracy,
            "graph_hash": _graph_hash(graph),
        })
    snapshots = {}
    if state.distills() and strategy.is_graph:
        graph = _probe_graph_det(state, models, (val_videos or train_videos)[0], sampler, num_classes)
        if graph is not None:
            snapshots["mean"] = torch.as_tensor(graph).cpu().numpy().copy()
    return DetectionResult(models=models, metrics=metrics, prior=prior,
                           graph_snapshots=snapshots)


def _probe_graph_det(state, models, video: DetectionVideo, sampler: SamplerConfig,
                     num_classes: int):
    """Mean effective graph over one deterministic probe window of `video`."""
    names = list(models)
    clips, _ = _detection_windows(video, [0], names, sampler, num_classes)
    dtype = next(iter(models.values())).head.linear.weight.dtype
    with torch.no_grad():
        outputs = []
        for name in names:
            batch = torch.from_numpy(np.stack(clips[name])).to(dtype)
            models[name].eval()
            outputs.append(models[name](batch).flat())
            models[name].train()
        graph = state.current_graph(outputs)
    if graph is None:
        return None
    graph = torch.as_tensor(graph)
    return (graph.mean(dim=0) if graph.ndim == 3 else graph).cpu().numpy()
