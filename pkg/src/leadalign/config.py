"""Experiment configuration: one YAML document, one mode per run.

Every section has complete defaults, so an empty file plus ``mode`` is a valid
configuration.  Overrides are ``key=value`` strings applied after the file; a
key whose first component is not a top-level field is looked up inside the
section that belongs to the selected mode, so ``epochs=2`` in pretrain mode
means ``pretrain.epochs=2``.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import serde
from .ablation import AblationConfig
from .ecg_store import SynthSpec
from .errors import ConfigTypeError, UnknownKey
from .evaluation import ProbeConfig
from .pretrain import PretrainConfig

MODES = ("synth", "ingest", "pretrain", "eval-retrieval", "probe", "latent-gap", "ablate")
SECTION_OF_MODE = {"synth": "synth", "ingest": "ingest", "pretrain": "pretrain",
                   "eval-retrieval": "retrieval", "probe": "probe",
                   "latent-gap": "latent_gap", "ablate": "ablation"}
CONFIG_ECHO = "config.yaml"


@dataclass
class IngestSection:
    src: str | None = None
    target_hz: float = 500.0
    zscore: bool = False


@dataclass
class RetrievalSection:
    ckpt: str | None = None    # single-lead encoder
    ckpt_m: str | None = None  # multi-lead encoder
    split: str | None = "valid"  # None: every record
    cut_lead: str = "I"
    zscore: bool = True
    batch_size: int = 64


@dataclass
class ProbeSection(ProbeConfig):
    ckpt: str | None = None  # None probes a randomly initialised encoder

    def probe_config(self) -> ProbeConfig:
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(ProbeConfig)}
        return ProbeConfig(**kw)


@dataclass
class LatentGapSection:
    emb_a: str | None = None
    emb_b: str | None = None
    ckpt_s: str | None = None  # alternative: embed ``data`` with two encoders
    ckpt_m: str | None = None
    split: str | None = None
    cut_lead: str = "I"
    zscore: bool = True


@dataclass
class ExperimentConfig:
    mode: str
    seed: int | None = None  # when set, replaces the seeds of training sections
    deterministic: bool = True
    output_dir: str = "runs/latest"
    data: str | None = None  # dataset directory; the synth section is used when absent
    synth: SynthSpec = field(default_factory=SynthSpec)
    ingest: IngestSection = field(default_factory=IngestSection)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    latent_gap: LatentGapSection = field(default_factory=LatentGapSection)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigTypeError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def section(self) -> str:
        return SECTION_OF_MODE[self.mode]

    def to_dict(self) -> dict:
        return serde.to_dict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return serde.from_dict(cls, d)

    def effective(self) -> "ExperimentConfig":
        """Copy with the global seed and determinism flag pushed into the sections."""
        pre = dataclasses.replace(self.pretrain, deterministic=self.deterministic)
        probe, ablation = self.probe, self.ablation
        if self.seed is not None:
            pre = dataclasses.replace(pre, seed=self.seed)
            probe = dataclasses.replace(probe, seed=self.seed)
            ablation = dataclasses.replace(ablation, seed=self.seed)
        return dataclasses.replace(self, pretrain=pre, probe=probe, ablation=ablation)


def parse_value(text: str) -> Any:
    """YAML scalar parsing, plus plain-float spellings such as ``1e-4``."""
    value = yaml.safe_load(text) if text.strip() else None
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def _resolve(key: str, mode: str | None) -> list[str]:
    parts = key.split(".")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    if parts[0] in top or mode is None:
        return parts
    return [SECTION_OF_MODE.get(mode, parts[0]), *parts]


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    mode = raw.get("mode")
    for item in overrides:
        if "=" not in item:
            raise ConfigTypeError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        path = _resolve(key.strip(), mode)
        node = raw
        for part in path[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            if not isinstance(child, dict):
                raise ConfigTypeError(f"override {key!r}: {part!r} is not a section")
            node = child
        node[path[-1]] = parse_value(text)
        if path == ["mode"]:
            mode = node["mode"]
    return raw


def parse_config(path: str | os.PathLike | None, overrides: Sequence[str] = (),
                 mode: str | None = None) -> ExperimentConfig:
    """Read a config file (``None`` for an empty one), apply overrides, validate."""
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigTypeError(f"{path}: top level must be a mapping")
        raw = loaded
    if mode is not None:
        raw["mode"] = mode
    raw = apply_overrides(raw, overrides)
    if "mode" not in raw:
        raise ConfigTypeError("no mode given (set `mode:` in the file or pass one)")
    return ExperimentConfig.from_dict(raw)


def echo_config(config: ExperimentConfig, directory: str | os.PathLike) -> Path:
    path = Path(directory) / CONFIG_ECHO
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.to_yaml(), encoding="utf-8")
    return path


__all__ = ["ExperimentConfig", "parse_config", "apply_overrides", "echo_config", "MODES",
           "UnknownKey", "ConfigTypeError"]
