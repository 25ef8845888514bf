"""Inference protocols, detection metrics, and the independent test oracles.

Classification: average softmax outputs over several uniformly spaced clips.
Detection: average per-clip probabilities across overlapping windows, gate
clips on activity probability, merge runs into scored segments, then score
with average precision at temporal-IoU thresholds.

The oracles (central finite differences, the explicit double-loop imitation
loss, nearest-centroid classification) are deliberately written from the
definitions in plain numpy/python so they stay independent of the paths they
check.
"""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch

from .datagen import ClassificationCorpus, Segment
from .encoders import ModalityOutputs


class DataError(ValueError):
    """Input data violates a protocol precondition (too short, malformed, ...)."""


class OracleError(RuntimeError):
    """A verification oracle could not run (non-finite values, wrong dtype)."""


@dataclass
class DetectionSegment:
    """Scored interval prediction; end is exclusive."""

    start: int
    end: int
    label: int
    score: float

    def __post_init__(self):
        if self.start >= self.end:
            raise DataError(f"segment start {self.start} must precede end {self.end}")


@dataclass
class EvalReport:
    """Metric bundle serialized as a structured JSON document."""

    map_at: dict[float, float] = field(default_factory=dict)
    per_class_ap: dict[float, dict[int, float]] = field(default_factory=dict)
    accuracy: dict[str, float] = field(default_factory=dict)
    confusion: dict[str, list[list[int]]] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "map_at": {repr(t): v for t, v in sorted(self.map_at.items())},
            "per_class_ap": {
                repr(t): {str(c): ap for c, ap in sorted(aps.items())}
                for t, aps in sorted(self.per_class_ap.items())
            },
            "accuracy": self.accuracy,
            "confusion": self.confusion,
            "extras": self.extras,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        return cls(
            map_at={float(t): v for t, v in doc.get("map_at", {}).items()},
            per_class_ap={
                float(t): {int(c): ap for c, ap in aps.items()}
                for t, aps in doc.get("per_class_ap", {}).items()
            },
            accuracy=doc.get("accuracy", {}),
            confusion=doc.get("confusion", {}),
            extras=doc.get("extras", {}),
        )


# ---------------------------------------------------------------------------
# classification inference


def uniform_clip_starts(video_len: int, clip_len: int, n_clips: int) -> np.ndarray:
    if video_len < clip_len:
        raise DataError(f"video of {video_len} frames is shorter than a clip ({clip_len})")
    if n_clips < 1:
        raise DataError("need at least one clip")
    return np.unique(np.round(np.linspace(0, video_len - clip_len, n_clips)).astype(int))


def classify_video(model, video: np.ndarray, n_clips: int = 5,
                   clip_len: int | None = None) -> np.ndarray:
    """Mean softmax over uniformly spaced clips spanning the whole video."""
    clip_len = clip_len if clip_len is not None else model.encoder.clip_len
    starts = uniform_clip_starts(video.shape[0], clip_len, n_clips)
    clips = np.stack([video[s : s + clip_len] for s in starts])
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(torch.from_numpy(clips).to(dtype))
        probs = torch.softmax(out.logits, dim=-1).mean(dim=0)
    return probs.cpu().numpy()


def fuse_probabilities(prob_list: Sequence[np.ndarray]) -> np.ndarray:
    """Test-time fusion: arithmetic mean of per-modality class distributions."""
    return np.mean(np.stack(prob_list, axis=0), axis=0)


def evaluate_classification(models: Mapping[str, "torch.nn.Module"], corpus: ClassificationCorpus,
                            split: str = "test", n_clips: int = 5,
                            fused: bool = False) -> EvalReport:
    """Per-modality accuracy and confusion matrices over a corpus split."""
    examples = corpus.split(split)
    num_classes = corpus.spec.num_classes
    report = EvalReport()
    hits = {name: 0 for name in models}
    confusion = {name: np.zeros((num_classes, num_classes), dtype=np.int64) for name in models}
    fused_hits = 0
    for example in examples:
        per_modality = {}
        for name, model in models.items():
            probs = classify_video(model, example.clips[name], n_clips=n_clips)
            per_modality[name] = probs
            pred = int(np.argmax(probs))
            hits[name] += pred == example.label
            confusion[name][example.label, pred] += 1
        if fused:
            fused_hits += int(np.argmax(fuse_probabilities(list(per_modality.values())))) == example.label
    for name in models:
        report.accuracy[name] = hits[name] / len(examples)
        report.confusion[name] = confusion[name].tolist()
    if fused:
        report.accuracy["fused"] = fused_hits / len(examples)
    return report


# ---------------------------------------------------------------------------
# detection inference


def detection_clip_probs(model, frames: np.ndarray, clip_len: int, clip_step: int,
                         window_len: int, window_step: int) -> np.ndarray:
    """Per-clip class distributions over a whole video, averaged across windows.

    Windows are tiled uniformly with step window_step (a multiple of
    clip_step so their clips align); overlapping windows contribute the mean
    probability per clip position.  Clip positions not covered by any window
    fall back to certain background.
    """
    if window_step % clip_step != 0:
        raise DataError("window_step must be a multiple of clip_step so overlaps align")
    total = frames.shape[0]
    span = (window_len - 1) * clip_step + clip_len
    if total < span:
        raise DataError(f"video of {total} frames is shorter than a window span of {span}")
    n_clips = (total - clip_len) // clip_step + 1
    starts = list(range(0, total - span + 1, window_step))
    windows = np.stack([
        np.stack([
            frames[s + i * clip_step : s + i * clip_step + clip_len]
            for i in range(window_len)
        ])
        for s in starts
    ])
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        logits = model(torch.from_numpy(windows).to(dtype)).logits
        probs = torch.softmax(logits, dim=-1).cpu().numpy()
    num_outputs = probs.shape[-1]
    acc = np.zeros((n_clips, num_outputs))
    counts = np.zeros(n_clips)
    for w, s in enumerate(starts):
        first = s // clip_step
        acc[first : first + window_len] += probs[w]
        counts[first : first + window_len] += 1
    covered = counts > 0
    acc[covered] /= counts[covered, None]
    acc[~covered, -1] = 1.0
    return acc


def evaluate_detection(models: Mapping[str, "torch.nn.Module"], corpus, split: str,
                       clip_len: int, clip_step: int, window_len: int, window_step: int,
                       activity_threshold: float,
                       thresholds: Sequence[float] = (0.1, 0.3, 0.5),
                       gate: str = "mass") -> EvalReport:
    """Segment extraction plus AP scoring over a detection corpus split.

    With several models the per-clip distributions are fused by arithmetic
    mean before post-processing (single-modality testing passes one model).
    """
    predictions = {}
    ground_truth = {}
    for vid, video in enumerate(corpus.split(split)):
        per_modality = [
            detection_clip_probs(model, video.frames[name], clip_len, clip_step,
                                 window_len, window_step)
            for name, model in models.items()
        ]
        probs = fuse_probabilities(per_modality)
        predictions[vid] = extract_segments(probs, activity_threshold, clip_len,
                                            clip_step, gate=gate)
        ground_truth[vid] = video.segments
    report = map_at_tiou(predictions, ground_truth, thresholds)
    report.extras["num_videos"] = len(predictions)
    report.extras["num_predictions"] = int(sum(len(p) for p in predictions.values()))
    return report


# ---------------------------------------------------------------------------
# detection post-processing


def extract_segments(clip_probs: np.ndarray, activity_threshold: float,
                     clip_len: int, clip_step: int,
                     gate: str = "mass") -> list[DetectionSegment]:
    """Turn per-clip class distributions into scored segments.

    A clip is active when its non-background probability mass (gate="mass")
    or its best action-class probability (gate="max") exceeds the threshold.
    Maximal runs of consecutive active clips sharing an argmax action class
    become one segment scored by that class's mean probability over the run.
    The last column of clip_probs is the background class.
    """
    clip_probs = np.asarray(clip_probs, dtype=np.float64)
    if clip_probs.ndim != 2 or clip_probs.shape[1] < 2:
        raise DataError(f"clip probabilities must be (T, L+1), got {clip_probs.shape}")
    sums = clip_probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise DataError(f"clip {bad} probabilities sum to {sums[bad]:.6f}, not 1")
    if not 0 < activity_threshold < 1:
        raise DataError(f"activity threshold must be in (0, 1), got {activity_threshold}")
    action_probs = clip_probs[:, :-1]
    if gate == "mass":
        active = 1.0 - clip_probs[:, -1] > activity_threshold
    elif gate == "max":
        active = action_probs.max(axis=1) > activity_threshold
    else:
        raise ValueError(f"unknown activity gate {gate!r}")
    labels = action_probs.argmax(axis=1)
    segments: list[DetectionSegment] = []
    t = 0
    n = clip_probs.shape[0]
    while t < n:
        if not active[t]:
            t += 1
            continue
        run_label = labels[t]
        run_start = t
        while t < n and active[t] and labels[t] == run_label:
            t += 1
        score = float(action_probs[run_start:t, run_label].mean())
        segments.append(
            DetectionSegment(
                start=run_start * clip_step,
                end=(t - 1) * clip_step + clip_len,
                label=int(run_label),
                score=score,
            )
        )
    return segments


def segment_probabilities(segments: Sequence[DetectionSegment], n_clips: int,
                          num_classes: int, clip_len: int, clip_step: int) -> np.ndarray:
    """Per-clip distributions implied by segments (background elsewhere)."""
    probs = np.zeros((n_clips, num_classes + 1))
    probs[:, -1] = 1.0
    for seg in segments:
        first = seg.start // clip_step
        last = (seg.end - clip_len) // clip_step
        for t in range(first, last + 1):
            probs[t] = 0.0
            probs[t, seg.label] = seg.score
            probs[t, -1] = 1.0 - seg.score
    return probs


def temporal_iou(a_start: float, a_end: float, b_start: float, b_end: float) -> float:
    inter = max(0.0, min(a_end, b_end) - max(a_start, b_start))
    union = (a_end - a_start) + (b_end - b_start) - inter
    return inter / union if union > 0 else 0.0


def _ap_from_matches(flags: list[bool], num_positive: int) -> float:
    """All-point interpolated AP from ordered hit/miss flags."""
    if num_positive == 0:
        return 0.0
    tp = np.cumsum([1.0 if f else 0.0 for f in flags])
    fp = np.cumsum([0.0 if f else 1.0 for f in flags])
    recall = tp / num_positive
    precision = tp / np.maximum(tp + fp, 1e-12)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


def map_at_tiou(predictions: Mapping, ground_truth: Mapping,
                thresholds: Sequence[float] = (0.1, 0.3, 0.5)) -> EvalReport:
    """Average precision at temporal-IoU thresholds, averaged over classes.

    `predictions` maps video id -> list[DetectionSegment]; `ground_truth`
    maps video id -> list of Segment (or (start, end, label) triples).
    Predictions are sorted by descending score (ties broken by video id then
    start) and matched greedily one-to-one per class.  Classes absent from
    the ground truth are excluded from the mean.
    """
    for t in thresholds:
        if not 0 < t < 1:
            raise DataError(f"tIoU threshold must be in (0, 1), got {t}")
    gt_by_class: dict[int, list[tuple]] = {}
    for vid, segs in ground_truth.items():
        for seg in segs:
            s, e, lab = (seg.start, seg.end, seg.label) if isinstance(seg, Segment) else seg
            gt_by_class.setdefault(int(lab), []).append((vid, s, e))
    pred_by_class: dict[int, list[tuple]] = {}
    for vid, segs in predictions.items():
        for seg in segs:
            pred_by_class.setdefault(int(seg.label), []).append((vid, seg))
    report = EvalReport()
    for threshold in thresholds:
        per_class = {}
        for label, gts in sorted(gt_by_class.items()):
            preds = sorted(
                pred_by_class.get(label, []),
                key=lambda p: (-p[1].score, str(p[0]), p[1].start),
            )
            unmatched = {i: g for i, g in enumerate(gts)}
            flags = []
            for vid, seg in preds:
                best_iou, best_idx = 0.0, None
                for i, (gvid, gs, ge) in unmatched.items():
                    if gvid != vid:
                        continue
                    iou = temporal_iou(seg.start, seg.end, gs, ge)
                    if iou > best_iou:
                        best_iou, best_idx = iou, i
                if best_idx is not None and best_iou >= threshold:
                    unmatched.pop(best_idx)
                    flags.append(True)
                else:
                    flags.append(False)
            per_class[label] = _ap_from_matches(flags, len(gts))
        report.per_class_ap[threshold] = per_class
        report.map_at[threshold] = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return report


# ---------------------------------------------------------------------------
# oracles


def finite_difference_check(fn, params: Sequence[torch.Tensor], eps: float = 1e-5,
                            max_evals_per_tensor: int | None = None,
                            seed: int = 0) -> float:
    """Max relative error between analytic gradients and central differences.

    `fn` re-evaluates the scalar objective from the current parameter values;
    params must be float64 leaf tensors with requires_grad.  Relative error
    uses max(|analytic|, |numeric|, 1e-8) as the denominator.  Optionally
    checks a seeded random subset of coordinates per tensor.
    """
    for p in params:
        if p.dtype != torch.float64:
            raise OracleError(f"finite differences need float64 parameters, got {p.dtype}")
    loss = fn()
    if not torch.isfinite(loss):
        raise OracleError(f"objective is not finite: {loss.item()}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        analytic = (torch.zeros_like(p) if g is None else g).reshape(-1)
        flat = p.data.reshape(-1)
        n = flat.numel()
        if max_evals_per_tensor is not None and n > max_evals_per_tensor:
            coords = rng.choice(n, size=max_evals_per_tensor, replace=False)
        else:
            coords = range(n)
        for i in coords:
            original = flat[i].item()
            flat[i] = original + eps
            upper = fn().item()
            flat[i] = original - eps
            lower = fn().item()
            flat[i] = original
            if not (np.isfinite(upper) and np.isfinite(lower)):
                raise OracleError("objective became non-finite during perturbation")
            numeric = (upper - lower) / (2.0 * eps)
            a = analytic[i].item()
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


def _cosine_distance_np(u: np.ndarray, v: np.ndarray, eps: float = 1e-8) -> float:
    denom = max(np.linalg.norm(u) * np.linalg.norm(v), eps)
    return 1.0 - float(np.dot(u, v)) / denom


def imitation_loss_oracle(outputs: Sequence[ModalityOutputs], g_eff,
                          lambda_logits: float = 10.0, lambda_rep: float = 5.0) -> np.ndarray:
    """Explicit double-loop per-receiver imitation losses, (B, S) numpy array.

    Reference for the matrix form: for each example and receiver, sum the
    graph-weighted incoming messages one edge at a time.
    """
    logits = [o.logits.detach().cpu().numpy().astype(np.float64) for o in outputs]
    reps = [o.representation.detach().cpu().numpy().astype(np.float64) for o in outputs]
    g = np.asarray(torch.as_tensor(g_eff).detach().cpu().numpy(), dtype=np.float64)
    num_mod = len(outputs)
    batch = logits[0].shape[0]
    result = np.zeros((batch, num_mod))
    for b in range(batch):
        g_b = g if g.ndim == 2 else g[b]
        for k in range(num_mod):
            acc = 0.0
            for j in range(num_mod):
                if j == k:
                    continue
                message = lambda_logits * _cosine_distance_np(logits[k][b], logits[j][b])
                message += lambda_rep * _cosine_distance_np(reps[k][b], reps[j][b])
                acc += g_b[j, k] * message
            result[b, k] = acc
    return result


def nearest_centroid_accuracy(corpus: ClassificationCorpus, modality: str,
                              fit_split: str = "train", eval_split: str = "test"):
    """Nearest-centroid classification on one modality's flattened clips.

    Returns (overall accuracy, per-class accuracy array).  Used as the
    independent check that generated corpora have the intended per-modality
    difficulty.
    """
    num_classes = corpus.spec.num_classes
    fit = corpus.split(fit_split)
    centroids = np.stack([
        np.mean([e.clips[modality].reshape(-1) for e in fit if e.label == c], axis=0)
        for c in range(num_classes)
    ])
    hits = np.zeros(num_classes)
    counts = np.zeros(num_classes)
    for e in corpus.split(eval_split):
        x = e.clips[modality].reshape(-1)
        pred = int(np.argmin(((centroids - x) ** 2).sum(axis=1)))
        counts[e.label] += 1
        hits[e.label] += pred == e.label
    per_class = hits / np.maximum(counts, 1)
    return float(hits.sum() / counts.sum()), per_class
