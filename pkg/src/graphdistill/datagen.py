"""Seeded synthetic multimodal corpora with controllable per-modality difficulty.

Each (class, modality) pair gets a fixed random temporal template.  Examples
are that template tiled over time, circularly jittered, plus Gaussian noise.
A modality is "informative" for a class when it renders the class at its base
noise level; for all other classes the noise is inflated, so different
modalities are discriminative for different classes and cross-modality
distillation has something to transfer.

Two corpus kinds share the same pattern process:
  * classification: short fixed-length examples, one label each
  * detection: long videos with labeled action segments over background
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .seeding import derive_rng

IMAGE = "image"
VECTOR = "vector"


class ConfigurationError(ValueError):
    """Invalid corpus or experiment configuration."""


class ContainerKindError(ValueError):
    """Container holds a different kind of payload than requested."""


@dataclass(frozen=True)
class ModalitySpec:
    """One input stream: its tensor shape and which classes it separates cleanly."""

    name: str
    kind: str                      # "image" -> shape (H, W, C); "vector" -> shape (D,)
    shape: tuple[int, ...]
    informative_classes: frozenset[int] = frozenset()
    noise_sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "informative_classes", frozenset(int(c) for c in self.informative_classes))
        if self.kind == IMAGE:
            if len(self.shape) != 3 or any(s < 1 for s in self.shape):
                raise ConfigurationError(f"modality {self.name!r}: image shape must be (H, W, C) >= 1, got {self.shape}")
        elif self.kind == VECTOR:
            if len(self.shape) != 1 or self.shape[0] < 1:
                raise ConfigurationError(f"modality {self.name!r}: vector shape must be (D,) with D >= 1, got {self.shape}")
        else:
            raise ConfigurationError(f"modality {self.name!r}: unknown kind {self.kind!r}")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"modality {self.name!r}: noise_sigma must be nonnegative")

    def check_classes(self, num_classes: int) -> None:
        bad = [c for c in self.informative_classes if not 0 <= c < num_classes]
        if bad:
            raise ConfigurationError(
                f"modality {self.name!r}: informative classes {sorted(bad)} outside [0, {num_classes})"
            )


def _validate_modalities(modalities, num_classes: int) -> None:
    if len(modalities) < 2:
        raise ConfigurationError("corpus spec needs at least 2 modalities")
    if num_classes < 2:
        raise ConfigurationError("corpus spec needs at least 2 classes")
    names = [m.name for m in modalities]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate modality names: {names}")
    for m in modalities:
        m.check_classes(num_classes)


@dataclass(frozen=True)
class CorpusSpec:
    """Classification corpus: fixed-length examples, exact per-class counts."""

    modalities: tuple[ModalitySpec, ...]
    num_classes: int
    train_per_class: int
    test_per_class: int
    example_frames: int = 30
    pattern_frames: int = 10       # template period along time
    uninformative_noise: float = 4.0
    temporal_jitter: int = 2
    pattern_seed: int | None = None  # share templates across corpora when set

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        _validate_modalities(self.modalities, self.num_classes)
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigurationError("per-class example counts must be >= 1")
        if self.example_frames < self.pattern_frames or self.pattern_frames < 1:
            raise ConfigurationError("need example_frames >= pattern_frames >= 1")

    def modality(self, name: str) -> ModalitySpec:
        for m in self.modalities:
            if m.name == name:
                return m
        raise KeyError(f"unknown modality {name!r}")


@dataclass(frozen=True)
class DetectionSpec:
    """Detection corpus: long videos, labeled segments separated by background."""

    modalities: tuple[ModalitySpec, ...]
    num_classes: int
    train_videos: int
    test_videos: int
    video_frames: int = 200
    segments_per_video: int = 4
    segment_frames: tuple[int, int] = (20, 50)
    pattern_frames: int = 10
    uninformative_noise: float = 4.0
    temporal_jitter: int = 2
    pattern_seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "segment_frames", tuple(int(v) for v in self.segment_frames))
        _validate_modalities(self.modalities, self.num_classes)
        if self.train_videos < 1 or self.test_videos < 1:
            raise ConfigurationError("video counts must be >= 1")
        if self.segments_per_video < 0:
            raise ConfigurationError("segments_per_video must be >= 0")
        lo, hi = self.segment_frames
        if not 1 <= lo <= hi:
            raise ConfigurationError(f"bad segment length range {self.segment_frames}")
        n = self.segments_per_video
        worst = n * hi + max(n - 1, 0)
        if worst > self.video_frames:
            raise ConfigurationError(
                f"video_frames={self.video_frames} cannot hold {n} segments of up to "
                f"{hi} frames with gaps (needs {worst})"
            )

    @property
    def background_class(self) -> int:
        return self.num_classes

    def modality(self, name: str) -> ModalitySpec:
        for m in self.modalities:
            if m.name == name:
                return m
        raise KeyError(f"unknown modality {name!r}")


@dataclass
class MultimodalExample:
    """Aligned per-modality clips (same temporal length) plus one class label."""

    clips: dict[str, np.ndarray]
    label: int


@dataclass(frozen=True)
class Segment:
    start: int
    end: int   # exclusive
    label: int


@dataclass
class DetectionVideo:
    frames: dict[str, np.ndarray]   # each (T_total, ...)
    segments: list[Segment]

    def frame_labels(self, num_classes: int) -> np.ndarray:
        """Per-frame labels reconstructed from segments; background = num_classes."""
        n = next(iter(self.frames.values())).shape[0]
        labels = np.full(n, num_classes, dtype=np.int64)
        for seg in self.segments:
            labels[seg.start : seg.end] = seg.label
        return labels


@dataclass
class ClassificationCorpus:
    spec: CorpusSpec
    seed: int
    train: list[MultimodalExample] = field(default_factory=list)
    test: list[MultimodalExample] = field(default_factory=list)

    def split(self, name: str) -> list[MultimodalExample]:
        return {"train": self.train, "test": self.test}[name]


@dataclass
class DetectionCorpus:
    spec: DetectionSpec
    seed: int
    train: list[DetectionVideo] = field(default_factory=list)
    test: list[DetectionVideo] = field(default_factory=list)

    def split(self, name: str) -> list[DetectionVideo]:
        return {"train": self.train, "test": self.test}[name]


# ---------------------------------------------------------------------------
# pattern process


def _pattern_seed(spec) -> int:
    return spec.pattern_seed if spec.pattern_seed is not None else 0


def class_template(spec, modality: ModalitySpec, label: int) -> np.ndarray:
    """Fixed template for (class, modality): (pattern_frames, *shape), ~N(0,1)."""
    rng = derive_rng("template", _pattern_seed(spec), modality.name, label)
    return rng.standard_normal((spec.pattern_frames, *modality.shape)).astype(np.float32)


def _tiled_template(template: np.ndarray, length: int, shift: int) -> np.ndarray:
    reps = -(-length // template.shape[0])
    tiled = np.concatenate([template] * reps, axis=0)[:length]
    return np.roll(tiled, shift, axis=0)


def _segment_sigma(spec, modality: ModalitySpec, label: int) -> float:
    if label in modality.informative_classes:
        return modality.noise_sigma
    return modality.noise_sigma * spec.uninformative_noise


def generate_classification_corpus(spec: CorpusSpec, seed: int) -> ClassificationCorpus:
    """Deterministic corpus with exact per-class counts in each split."""
    corpus = ClassificationCorpus(spec=spec, seed=int(seed))
    templates = {
        (m.name, c): class_template(spec, m, c)
        for m in spec.modalities
        for c in range(spec.num_classes)
    }
    for split, per_class in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        order = derive_rng("cls-order", seed, split).permutation(labels.size)
        examples = []
        for i, label in enumerate(labels[order]):
            label = int(label)
            rng = derive_rng("cls-example", seed, split, i)
            clips = {}
            for m in spec.modalities:
                shift = int(rng.integers(-spec.temporal_jitter, spec.temporal_jitter + 1))
                signal = _tiled_template(templates[m.name, label], spec.example_frames, shift)
                sigma = _segment_sigma(spec, m, label)
                noise = rng.standard_normal(signal.shape).astype(np.float32) * sigma
                clips[m.name] = signal + noise
            examples.append(MultimodalExample(clips=clips, label=label))
        corpus.split(split).extend(examples)
    return corpus


def _place_segments(spec: DetectionSpec, rng) -> list[Segment]:
    n = spec.segments_per_video
    if n == 0:
        return []
    lo, hi = spec.segment_frames
    lengths = rng.integers(lo, hi + 1, size=n)
    interior = max(n - 1, 0)
    slack = spec.video_frames - int(lengths.sum()) - interior
    if slack < 0:
        # bounded by the spec validation worst case, but guard regardless
        raise ConfigurationError("segments do not fit in video_frames")
    # split remaining frames over n+1 gaps (edges may be zero-length)
    cut = np.sort(rng.integers(0, slack + 1, size=n))
    extra = np.diff(np.concatenate(([0], cut, [slack])))
    segments = []
    pos = 0
    for i in range(n):
        pos += int(extra[i]) + (1 if i > 0 else 0)
        length = int(lengths[i])
        segments.append(Segment(start=pos, end=pos + length, label=-1))
        pos += length
    return segments


def generate_detection_corpus(spec: DetectionSpec, seed: int) -> DetectionCorpus:
    """Videos of noise with class-patterned segments; labels painted per frame."""
    corpus = DetectionCorpus(spec=spec, seed=int(seed))
    templates = {
        (m.name, c): class_template(spec, m, c)
        for m in spec.modalities
        for c in range(spec.num_classes)
    }
    for split, count in (("train", spec.train_videos), ("test", spec.test_videos)):
        for i in range(count):
            rng = derive_rng("det-video", seed, split, i)
            placed = _place_segments(spec, rng)
            segments = [
                Segment(s.start, s.end, int(rng.integers(0, spec.num_classes))) for s in placed
            ]
            painted = np.full(spec.video_frames, spec.background_class, dtype=np.int64)
            frames = {}
            for m in spec.modalities:
                video = rng.standard_normal((spec.video_frames, *m.shape)).astype(np.float32)
                video *= m.noise_sigma
                for seg in segments:
                    length = seg.end - seg.start
                    shift = int(rng.integers(-spec.temporal_jitter, spec.temporal_jitter + 1))
                    signal = _tiled_template(templates[m.name, seg.label], length, shift)
                    sigma = _segment_sigma(spec, m, seg.label)
                    noise = rng.standard_normal(signal.shape).astype(np.float32) * sigma
                    video[seg.start : seg.end] = signal + noise
                    painted[seg.start : seg.end] = seg.label
                frames[m.name] = video
            video_obj = DetectionVideo(frames=frames, segments=segments)
            video_obj._painted_labels = painted  # generator internals, for cross-checks
            corpus.split(split).append(video_obj)
    return corpus


def subsample_corpus(corpus: DetectionCorpus, fraction: float, seed: int) -> DetectionCorpus:
    """Keep a seeded random fraction of training videos (at least one)."""
    if not 0 < fraction <= 1:
        raise ConfigurationError(f"subsample fraction must be in (0, 1], got {fraction}")
    keep = max(1, int(round(fraction * len(corpus.train))))
    idx = derive_rng("subsample", seed).permutation(len(corpus.train))[:keep]
    return DetectionCorpus(
        spec=corpus.spec,
        seed=corpus.seed,
        train=[corpus.train[int(i)] for i in sorted(idx)],
        test=list(corpus.test),
    )


# ---------------------------------------------------------------------------
# spec <-> dict (for container metadata and experiment configs)


def modality_to_dict(m: ModalitySpec) -> dict:
    return {
        "name": m.name,
        "kind": m.kind,
        "shape": list(m.shape),
        "informative_classes": sorted(m.informative_classes),
        "noise_sigma": m.noise_sigma,
    }


def modality_from_dict(d: dict) -> ModalitySpec:
    return ModalitySpec(
        name=d["name"],
        kind=d["kind"],
        shape=tuple(d["shape"]),
        informative_classes=frozenset(d.get("informative_classes", ())),
        noise_sigma=float(d.get("noise_sigma", 1.0)),
    )


_CLS_FIELDS = (
    "num_classes", "train_per_class", "test_per_class", "example_frames",
    "pattern_frames", "uninformative_noise", "temporal_jitter", "pattern_seed",
)
_DET_FIELDS = (
    "num_classes", "train_videos", "test_videos", "video_frames", "segments_per_video",
    "segment_frames", "pattern_frames", "uninformative_noise", "temporal_jitter", "pattern_seed",
)


def spec_to_dict(spec) -> dict:
    fields = _CLS_FIELDS if isinstance(spec, CorpusSpec) else _DET_FIELDS
    d = {name: getattr(spec, name) for name in fields}
    if "segment_frames" in d:
        d["segment_frames"] = list(d["segment_frames"])
    d["modalities"] = [modality_to_dict(m) for m in spec.modalities]
    return d


def _spec_from_dict(cls, fields, d: dict):
    kwargs = {name: d[name] for name in fields if name in d and d[name] is not None}
    if "segment_frames" in kwargs:
        kwargs["segment_frames"] = tuple(kwargs["segment_frames"])
    modalities = tuple(modality_from_dict(m) for m in d["modalities"])
    return cls(modalities=modalities, **kwargs)


def classification_spec_from_dict(d: dict) -> CorpusSpec:
    return _spec_from_dict(CorpusSpec, _CLS_FIELDS, d)


def detection_spec_from_dict(d: dict) -> DetectionSpec:
    return _spec_from_dict(DetectionSpec, _DET_FIELDS, d)


# ---------------------------------------------------------------------------
# persistence


def write_corpus(corpus, path) -> None:
    """Persist either corpus kind; read_corpus(write_corpus(c)) round-trips bitwise."""
    path = Path(path)
    tensors: dict[str, np.ndarray] = {}
    if isinstance(corpus, ClassificationCorpus):
        meta = {
            "kind": "classification_corpus",
            "seed": corpus.seed,
            "spec": spec_to_dict(corpus.spec),
            "splits": {},
        }
        for split in ("train", "test"):
            examples = corpus.split(split)
            meta["splits"][split] = {"count": len(examples)}
            tensors[f"{split}/labels"] = np.array([e.label for e in examples], dtype=np.int64)
            for m in corpus.spec.modalities:
                tensors[f"{split}/{m.name}"] = np.stack([e.clips[m.name] for e in examples])
    elif isinstance(corpus, DetectionCorpus):
        meta = {
            "kind": "detection_corpus",
            "seed": corpus.seed,
            "spec": spec_to_dict(corpus.spec),
            "splits": {},
        }
        for split in ("train", "test"):
            videos = corpus.split(split)
            meta["splits"][split] = {
                "count": len(videos),
                "segments": [[[s.start, s.end, s.label] for s in v.segments] for v in videos],
            }
            for m in corpus.spec.modalities:
                tensors[f"{split}/{m.name}"] = np.stack([v.frames[m.name] for v in videos])
    else:
        raise TypeError(f"not a corpus: {type(corpus).__name__}")
    write_container(path, meta, tensors)


def read_corpus(path):
    meta, tensors = read_container(path)
    kind = meta.get("kind")
    if kind == "classification_corpus":
        spec = classification_spec_from_dict(meta["spec"])
        corpus = ClassificationCorpus(spec=spec, seed=int(meta["seed"]))
        for split in ("train", "test"):
            labels = tensors[f"{split}/labels"]
            stacks = {m.name: tensors[f"{split}/{m.name}"] for m in spec.modalities}
            for i in range(int(meta["splits"][split]["count"])):
                corpus.split(split).append(
                    MultimodalExample(
                        clips={name: stack[i] for name, stack in stacks.items()},
                        label=int(labels[i]),
                    )
                )
        return corpus
    if kind == "detection_corpus":
        spec = detection_spec_from_dict(meta["spec"])
        corpus = DetectionCorpus(spec=spec, seed=int(meta["seed"]))
        for split in ("train", "test"):
            stacks = {m.name: tensors[f"{split}/{m.name}"] for m in spec.modalities}
            seg_lists = meta["splits"][split]["segments"]
            for i in range(int(meta["splits"][split]["count"])):
                corpus.split(split).append(
                    DetectionVideo(
                        frames={name: stack[i] for name, stack in stacks.items()},
                        segments=[Segment(int(s), int(e), int(l)) for s, e, l in seg_lists[i]],
                    )
                )
        return corpus
    raise ContainerKindError(f"{path}: not a corpus container (kind={kind!r})")


def corpora_equal(a, b) -> bool:
    """Bitwise equality of tensor payloads and annotations (round-trip check)."""
    if type(a) is not type(b) or spec_to_dict(a.spec) != spec_to_dict(b.spec):
        return False
    for split in ("train", "test"):
        xs, ys = a.split(split), b.split(split)
        if len(xs) != len(ys):
            return False
        for x, y in zip(xs, ys):
            if isinstance(x, MultimodalExample):
                if x.label != y.label or x.clips.keys() != y.clips.keys():
                    return False
                same = all(
                    x.clips[k].dtype == y.clips[k].dtype
                    and x.clips[k].shape == y.clips[k].shape
                    and np.array_equal(x.clips[k], y.clips[k])
                    for k in x.clips
                )
            else:
                if x.segments != y.segments or x.frames.keys() != y.frames.keys():
                    return False
                same = all(
                    x.frames[k].dtype == y.frames[k].dtype
                    and x.frames[k].shape == y.frames[k].shape
                    and np.array_equal(x.frames[k], y.frames[k])
                    for k in x.frames
                )
            if not same:
                return False
    return True


def make_complementary_spec(
    num_modalities: int = 4,
    num_classes: int = 8,
    train_per_class: int = 100,
    test_per_class: int = 50,
    image_shape: tuple[int, int, int] = (8, 8, 1),
    vector_dim: int = 16,
    noise_sigma: float = 1.0,
    uninformative_noise: float = 4.0,
    pattern_seed: int | None = 0,
    **kwargs,
) -> CorpusSpec:
    """Spec where modality i is informative for an exclusive slice of classes.

    Alternates image and vector modalities so both encoder families are
    exercised.  Classes are split as evenly as possible across modalities.
    """
    if num_modalities < 2:
        raise ConfigurationError("need at least 2 modalities")
    bounds = np.linspace(0, num_classes, num_modalities + 1).astype(int)
    modalities = []
    for i in range(num_modalities):
        informative = frozenset(range(bounds[i], bounds[i + 1]))
        if i % 2 == 0:
            m = ModalitySpec(
                name=f"img{i}", kind=IMAGE, shape=image_shape,
                informative_classes=informative, noise_sigma=noise_sigma,
            )
        else:
            m = ModalitySpec(
                name=f"vec{i}", kind=VECTOR, shape=(vector_dim,),
                informative_classes=informative, noise_sigma=noise_sigma,
            )
        modalities.append(m)
    return CorpusSpec(
        modalities=tuple(modalities),
        num_classes=num_classes,
        train_per_class=train_per_class,
        test_per_class=test_per_class,
        uninformative_noise=uninformative_noise,
        pattern_seed=pattern_seed,
        **kwargs,
    )
