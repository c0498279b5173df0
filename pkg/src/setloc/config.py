"""Run configuration: one JSON document with model/train/synth/eval sections.

Presets bundle the per-dataset hyperparameters (and the toy fixtures used by
the verification suite); a config file and dotted ``--set`` overrides are
layered on top. Unknown keys are rejected, every field is validated before
any compute, and dump -> parse -> dump is the identity.
"""

from __future__ import annotations

import copy
import dataclasses
import json

from .data import SyntheticSpec
from .errors import ContractError
from .evaluation import DEFAULT_TIOU_THRESHOLDS
from .matching import LossWeights
from .model import ModelConfig
from .trainer import TrainConfig


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    synth: SyntheticSpec = dataclasses.field(default_factory=SyntheticSpec)
    eval_thresholds: list = dataclasses.field(
        default_factory=lambda: list(DEFAULT_TIOU_THRESHOLDS)
    )
    score_threshold: float = 0.0

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.synth.validate()
        if not self.eval_thresholds:
            raise ContractError("eval_thresholds must be nonempty")
        for t in self.eval_thresholds:
            if not 0.0 < t <= 1.0:
                raise ContractError(f"tIoU threshold {t} outside (0, 1]")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ContractError("score_threshold must lie in [0, 1]")
        if self.synth.c_in != self.model.c_in:
            raise ContractError(
                f"synth.c_in={self.synth.c_in} disagrees with model.c_in={self.model.c_in}"
            )
        if self.synth.c_cls != self.model.c_cls:
            raise ContractError(
                f"synth.c_cls={self.synth.c_cls} disagrees with model.c_cls={self.model.c_cls}"
            )
        return self


# Per-dataset hyperparameter bundles; the *-like presets mirror the published
# training recipe at full scale, the toy presets are desk-scale fixtures.
PRESETS: dict[str, dict] = {
    "toy-gradcheck": {
        "model": {
            "c_in": 6, "d": 8, "l_e": 1, "l_d": 1, "k": 2,
            "n_o": 5, "n_v_max": 4, "c_cls": 3, "dropout": 0.0,
        },
        "synth": {
            "num_videos": 4, "c_in": 6, "c_cls": 3, "chunks_min": 3, "chunks_max": 4,
            "instances_min": 1, "instances_max": 2, "len_frac_min": 0.2,
            "len_frac_max": 0.8, "noise_sigma": 0.1, "seed": 0,
        },
        "train": {"lr": 1e-4, "total_steps": 10, "decay_step": 8, "batch_size": 2,
                  "eval_interval": 10},
        "eval_thresholds": [0.5],
    },
    "toy-overfit": {
        "model": {
            "c_in": 16, "d": 32, "l_e": 1, "l_d": 1, "k": 4,
            "n_o": 10, "n_v_max": 48, "c_cls": 3, "dropout": 0.0,
        },
        "synth": {
            "num_videos": 20, "c_in": 16, "c_cls": 3, "chunks_min": 20, "chunks_max": 40,
            "instances_min": 1, "instances_max": 5, "len_frac_min": 0.1,
            "len_frac_max": 0.5, "overlap_prob": 0.25, "recurrence_prob": 0.3,
            "noise_sigma": 0.1, "seed": 0,
        },
        "train": {
            "lr": 1e-4, "weight_decay": 1e-5, "total_steps": 5000, "decay_step": 3500,
            "batch_size": 4, "eval_interval": 500,
        },
        "eval_thresholds": [0.3, 0.4, 0.5, 0.6, 0.7],
    },
    "thumos-like": {
        "model": {
            "c_in": 2048, "d": 512, "l_e": 4, "l_d": 4, "k": 8,
            "n_o": 300, "n_v_max": 256, "c_cls": 20, "dropout": 0.0,
        },
        "synth": {"c_in": 2048, "c_cls": 20, "chunks_min": 64, "chunks_max": 512},
        "train": {
            "lr": 1e-5, "weight_decay": 1e-5, "total_steps": 3_000_000,
            "decay_step": 2_000_000, "batch_size": 4, "eval_interval": 10_000,
        },
    },
    "charades-like": {
        "model": {
            "c_in": 2048, "d": 512, "l_e": 4, "l_d": 4, "k": 8,
            "n_o": 100, "n_v_max": 64, "c_cls": 157, "dropout": 0.1,
        },
        "synth": {"c_in": 2048, "c_cls": 157, "chunks_min": 16, "chunks_max": 128},
        "train": {
            "lr": 1e-5, "weight_decay": 1e-5, "total_steps": 3_000_000,
            "decay_step": 2_000_000, "batch_size": 4, "eval_interval": 10_000,
        },
    },
    "epic-like": {
        "model": {
            "c_in": 2048, "d": 512, "l_e": 4, "l_d": 4, "k": 8,
            "n_o": 1200, "n_v_max": 1024, "c_cls": 97, "dropout": 0.0,
        },
        "synth": {"c_in": 2048, "c_cls": 97, "chunks_min": 256, "chunks_max": 2048},
        "train": {
            "lr": 1e-5, "weight_decay": 1e-5, "total_steps": 3_000_000,
            "decay_step": 2_000_000, "batch_size": 4, "eval_interval": 10_000,
        },
    },
}


_SECTION_TYPES = {
    "model": ModelConfig,
    "train": TrainConfig,
    "synth": SyntheticSpec,
}
_NESTED_TYPES = {"weights": LossWeights}


def _build_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ContractError(f"config section '{path}' must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ContractError(f"unknown config key '{path}.{unknown[0]}'")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED_TYPES:
            kwargs[key] = _build_dataclass(_NESTED_TYPES[key], value, f"{path}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ContractError(f"bad config section '{path}': {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ContractError("config root must be an object")
    known = {"model", "train", "synth", "eval_thresholds", "score_threshold"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ContractError(f"unknown config key '{unknown[0]}'")
    kwargs = {}
    for section, cls in _SECTION_TYPES.items():
        if section in data:
            kwargs[section] = _build_dataclass(cls, data[section], section)
    if "eval_thresholds" in data:
        kwargs["eval_thresholds"] = list(data["eval_thresholds"])
    if "score_threshold" in data:
        kwargs["score_threshold"] = float(data["score_threshold"])
    return RunConfig(**kwargs).validate()


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True, indent=2) + "\n"


def _deep_update(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def _parse_override(text: str):
    if "=" not in text:
        raise ContractError(f"--set expects key=value, got '{text}'")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings are allowed unquoted
    return key.strip(), value


def load_run_config(
    preset: str | None = None,
    config_path: str | None = None,
    overrides: list[str] | None = None,
) -> RunConfig:
    """Defaults <- preset <- config file <- --set overrides, then validate."""
    data = config_to_dict(RunConfig())
    if preset is not None:
        if preset not in PRESETS:
            raise ContractError(
                f"unknown preset '{preset}'; available: {', '.join(sorted(PRESETS))}"
            )
        _deep_update(data, copy.deepcopy(PRESETS[preset]))
    if config_path is not None:
        try:
            with open(config_path) as fh:
                file_data = json.load(fh)
        except OSError as exc:
            raise ContractError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ContractError(f"config file is not valid JSON: {exc}") from exc
        _deep_update(data, file_data)
    for text in overrides or []:
        key, value = _parse_override(text)
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ContractError(f"--set path '{key}' crosses a scalar")
        node[parts[-1]] = value
    return config_from_dict(data)
