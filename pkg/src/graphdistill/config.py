"""Experiment configuration: one JSON file describes a whole pipeline.

A config names corpora (inline specs or paths), the modality sets for source
training / target training / testing, the strategy and schedules, sampling
geometry, and the seeds to run.  The config hash covers exactly the fields
that influence results (not name, output_dir, or the seed list), so artifact
directories named <hash>-s<seed> change iff the experiment meaning changes.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .baselines import StrategyConfig
from .datagen import (
    ConfigurationError,
    CorpusSpec,
    DetectionSpec,
    classification_spec_from_dict,
    detection_spec_from_dict,
)
from .training import SamplerConfig, TrainSchedule


class ConfigError(ValueError):
    """Invalid experiment config; `field` names the offending entry."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


_HASH_EXCLUDED = ("name", "output_dir", "seeds")

_SCHEDULE_FIELDS = {
    "total_epochs", "stage1_epochs", "batch_size", "lr_visual", "lr_sequence",
    "momentum", "decay_milestones", "decay_factor", "feature_dim",
    "base_channels", "val_fraction",
}
_SAMPLER_FIELDS = {
    "clip_len", "window_len", "clip_step", "window_step", "activity_threshold",
    "windows_per_video", "test_clips",
}
_STRATEGY_FIELDS = {
    "kind", "temperature", "alpha", "lambda_logits", "lambda_rep", "embed_dim",
    "prior_orientation", "normalization_axis", "use_prior",
}


def _build(section: str, data: dict, allowed: set, factory):
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}", "unknown field")
    kwargs = dict(data)
    if "decay_milestones" in kwargs:
        kwargs["decay_milestones"] = tuple(kwargs["decay_milestones"])
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from exc


class ExperimentConfig:
    """Parsed and validated experiment description."""

    def __init__(self, data: dict, base_dir: Path | None = None):
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        self.data = copy.deepcopy(data)
        self.base_dir = Path(base_dir) if base_dir else Path(".")
        self.name = str(data.get("name", "experiment"))
        self.output_dir = Path(data.get("output_dir", "runs"))
        if not self.output_dir.is_absolute():
            self.output_dir = self.base_dir / self.output_dir
        self.seeds = [int(s) for s in data.get("seeds", [0])]
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        self._validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError("<file>", f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"not valid JSON: {exc}")
        return cls(data, base_dir=path.parent)

    # -- sections ----------------------------------------------------------

    def _corpus_section(self) -> dict:
        corpus = self.data.get("corpus")
        if not isinstance(corpus, dict) or not corpus:
            raise ConfigError("corpus", "missing corpus section")
        return corpus

    def classification_spec(self) -> CorpusSpec | None:
        section = self._corpus_section().get("classification")
        if section is None:
            return None
        try:
            return classification_spec_from_dict(section)
        except (ConfigurationError, KeyError, TypeError) as exc:
            raise ConfigError("corpus.classification", str(exc)) from exc

    def detection_spec(self) -> DetectionSpec | None:
        section = self._corpus_section().get("detection")
        if section is None:
            return None
        try:
            return detection_spec_from_dict(section)
        except (ConfigurationError, KeyError, TypeError) as exc:
            raise ConfigError("corpus.detection", str(exc)) from exc

    def corpus_seed(self, run_seed: int) -> int:
        fixed = self._corpus_section().get("seed")
        return int(fixed) if fixed is not None else int(run_seed)

    def strategy(self, which: str = "source") -> StrategyConfig:
        key = "strategy" if which == "source" else "target_strategy"
        section = self.data.get(key)
        if section is None and which == "target":
            section = self.data.get("strategy")
        section = section or {}
        return _build(key, section, _STRATEGY_FIELDS, StrategyConfig)

    def schedule(self, which: str = "source", seed: int = 0) -> TrainSchedule:
        key = "schedule" if which == "source" else "target_schedule"
        section = self.data.get(key)
        if section is None and which == "target":
            section = self.data.get("schedule")
        section = dict(section or {})
        section.pop("seed", None)
        sched = _build(key, section, _SCHEDULE_FIELDS, TrainSchedule)
        sched.seed = int(seed)
        return sched

    def sampler(self) -> SamplerConfig:
        return _build("sampler", dict(self.data.get("sampler", {})), _SAMPLER_FIELDS, SamplerConfig)

    # -- modality sets -------------------------------------------------------

    @property
    def source_train(self) -> list[str] | None:
        mods = self.data.get("modalities", {})
        value = mods.get("source_train")
        return list(value) if value else None

    @property
    def target_train(self) -> list[str] | None:
        mods = self.data.get("modalities", {})
        value = mods.get("target_train")
        return list(value) if value else None

    @property
    def test_modality(self) -> str:
        mods = self.data.get("modalities", {})
        value = mods.get("test")
        if not value:
            raise ConfigError("modalities.test", "test modality is required")
        return str(value)

    @property
    def transfer_enabled(self) -> bool:
        return bool(self.data.get("transfer", False))

    @property
    def subsample_target(self) -> float | None:
        value = self.data.get("subsample_target")
        return float(value) if value is not None else None

    @property
    def eval_options(self) -> dict:
        section = dict(self.data.get("eval", {}))
        section.setdefault("thresholds", [0.1, 0.3, 0.5])
        section.setdefault("gate", "mass")
        section.setdefault("fused", False)
        return section

    def stages(self) -> list[str]:
        stages = ["generate"]
        if self.source_train and self.classification_spec() is not None:
            stages.append("train_cls")
        if self.target_train and self.detection_spec() is not None:
            if self.transfer_enabled:
                stages.append("transfer")
            stages.append("train_det")
        stages.append("eval")
        return stages

    # -- validation ----------------------------------------------------------

    def _validate(self) -> None:
        cls_spec = self.classification_spec()
        det_spec = self.detection_spec()
        if cls_spec is None and det_spec is None:
            raise ConfigError("corpus", "need a classification or detection corpus spec")
        self.strategy("source")
        self.strategy("target")
        self.schedule("source")
        self.schedule("target")
        sampler = self.sampler()
        test = self.test_modality
        source = self.source_train
        target = self.target_train
        if source is None and target is None:
            raise ConfigError("modalities", "need source_train and/or target_train modalities")
        if source is not None:
            if cls_spec is None:
                raise ConfigError("corpus.classification", "source training needs a classification spec")
            known = {m.name for m in cls_spec.modalities}
            missing = [m for m in source if m not in known]
            if missing:
                raise ConfigError("modalities.source_train", f"not in corpus: {missing}")
            if target is None and test not in source:
                raise ConfigError("modalities.test",
                                  f"test modality {test!r} not in source_train {source}")
        if target is not None:
            if det_spec is None:
                raise ConfigError("corpus.detection", "target training needs a detection spec")
            known = {m.name for m in det_spec.modalities}
            missing = [m for m in target if m not in known]
            if missing:
                raise ConfigError("modalities.target_train", f"not in corpus: {missing}")
            if test not in target:
                raise ConfigError("modalities.test",
                                  f"test modality {test!r} not in target_train {target}")
            if self.transfer_enabled:
                if source is None:
                    raise ConfigError("transfer", "transfer requires source_train modalities")
                outside = [m for m in target if m not in source]
                if outside:
                    raise ConfigError("modalities.target_train",
                                      f"transfer enabled but {outside} not trained in source")
            if det_spec.video_frames < sampler.window_span:
                raise ConfigError("sampler",
                                  f"window span {sampler.window_span} exceeds video_frames "
                                  f"{det_spec.video_frames}")
        if self.subsample_target is not None and not 0 < self.subsample_target <= 1:
            raise ConfigError("subsample_target", "must be in (0, 1]")

    # -- hashing and overrides -----------------------------------------------

    def hash_payload(self) -> dict:
        payload = {k: v for k, v in self.data.items() if k not in _HASH_EXCLUDED}
        return payload

    def config_hash(self) -> str:
        canonical = json.dumps(self.hash_payload(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def corpus_hash(self) -> str:
        canonical = json.dumps(self._corpus_section(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """New config with dotted-key overrides applied (e.g. 'strategy.kind')."""
        data = copy.deepcopy(self.data)
        for dotted, value in overrides.items():
            node = data
            parts = dotted.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
                if not isinstance(node, dict):
                    raise ConfigError(dotted, "override path crosses a non-object")
            node[parts[-1]] = value
        data.pop("sweep", None)
        return ExperimentConfig(data, base_dir=self.base_dir)

    @property
    def sweep(self) -> list[dict]:
        entries = self.data.get("sweep", [])
        if not isinstance(entries, list):
            raise ConfigError("sweep", "must be a list of override objects")
        return entries

    def run_dir(self, seed: int) -> Path:
        return self.output_dir / "runs" / f"{self.config_hash()}-s{seed}"
