"""1-D residual CNN encoders and their checkpoint format.

Architecture (all sizes configurable through ``EncoderConfig``)::

    stem conv (kernel 15, stride 2)
    -> len(stage_widths) stages of ``blocks_per_stage`` pre-activation
       residual blocks (kernel 7, stride 2 on the first block of each stage)
    -> BN + ReLU -> global average pool over time -> linear projection to D
    -> optional L2 normalisation

The single-lead and multi-lead encoders are the same network and differ only
in the stem's input-channel count.

Checkpoints are ``.npz`` archives: one array per state-dict entry plus a
``__meta__`` entry holding a JSON text block (config echo, seed, format tag,
per-tensor trainable flags).  Embedding sets use the same container with
``vectors`` and ``record_ids`` arrays.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import IncompatibleCheckpoint, ShapeMismatch

FORMAT_TAG = "leadalign-ckpt/1"
META_KEY = "__meta__"
CALIBRATION_PASSES = 10


@dataclass(frozen=True)
class EncoderConfig:
    in_leads: int = 1
    stem_kernel: int = 15
    stem_stride: int = 2
    stage_widths: tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: int = 2
    block_kernel: int = 7
    embed_dim: int = 512
    normalize_embeddings: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if self.stem_kernel <= 0 or self.stem_kernel % 2 == 0:
            raise ValueError("stem_kernel must be an odd positive integer")
        if self.block_kernel <= 0 or self.block_kernel % 2 == 0:
            raise ValueError("block_kernel must be an odd positive integer")
        if min(self.in_leads, self.blocks_per_stage, self.embed_dim, self.stem_stride) <= 0:
            raise ValueError("encoder sizes must be positive")
        if not self.stage_widths or min(self.stage_widths) <= 0:
            raise ValueError("stage_widths must be a nonempty list of positive integers")

    @property
    def min_length(self) -> int:
        """Shortest accepted input: stem stride times 2 per stage."""
        return self.stem_stride * 2 ** len(self.stage_widths)

    def with_leads(self, in_leads: int) -> "EncoderConfig":
        return replace(self, in_leads=in_leads)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


class PreActBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int):
        super().__init__()
        pad = kernel // 2
        self.bn1 = nn.BatchNorm1d(c_in)
        self.conv1 = nn.Conv1d(c_in, c_out, kernel, stride=stride, padding=pad, bias=False)
        self.bn2 = nn.BatchNorm1d(c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, kernel, stride=1, padding=pad, bias=False)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Conv1d(c_in, c_out, 1, stride=stride, bias=False)

    def forward(self, x):
        out = F.relu(self.bn1(x))
        identity = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + identity


class ResNet1D(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config.stage_widths[0]
        self.stem = nn.Conv1d(config.in_leads, c, config.stem_kernel, stride=config.stem_stride,
                              padding=config.stem_kernel // 2, bias=False)
        blocks = []
        for width in config.stage_widths:
            for b in range(config.blocks_per_stage):
                blocks.append(PreActBlock(c, width, config.block_kernel, 2 if b == 0 else 1))
                c = width
        self.blocks = nn.Sequential(*blocks)
        self.bn_out = nn.BatchNorm1d(c)
        self.proj = nn.Linear(c, config.embed_dim)

    def project(self, x: torch.Tensor) -> torch.Tensor:
        """Embedding before the optional L2 normalisation."""
        check_input(self.config, x.shape)
        h = self.blocks(self.stem(x))
        h = F.relu(self.bn_out(h)).mean(dim=-1)
        return self.proj(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.project(x)
        if self.config.normalize_embeddings:
            z = F.normalize(z, dim=-1)
        return z


def check_input(config: EncoderConfig, shape: Sequence[int]) -> None:
    if len(shape) != 3:
        raise ShapeMismatch(f"expected [batch x leads x time], got shape {tuple(shape)}")
    if shape[1] != config.in_leads:
        raise ShapeMismatch(f"encoder expects {config.in_leads} lead(s), got {shape[1]}")
    if shape[2] < config.min_length:
        raise ShapeMismatch(f"input length {shape[2]} below minimum {config.min_length}")


@dataclass
class EmbeddingBatch:
    vectors: torch.Tensor | np.ndarray  # [B x D]
    record_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.record_ids:
            self.record_ids = [str(i) for i in range(len(self.vectors))]
        if len(self.record_ids) != len(self.vectors):
            raise ShapeMismatch(f"{len(self.record_ids)} ids for {len(self.vectors)} vectors")

    def __len__(self) -> int:
        return len(self.vectors)

    def numpy(self) -> np.ndarray:
        v = self.vectors
        if isinstance(v, torch.Tensor):
            return v.detach().cpu().numpy()
        return np.asarray(v)


def init_params(config: EncoderConfig, seed: int, dtype: torch.dtype = torch.float32) -> ResNet1D:
    """Build a randomly initialised encoder; identical for identical seeds."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ResNet1D(config)
    return model.to(dtype)


def _as_tensor(signals, model: nn.Module) -> torch.Tensor:
    ref = next(model.parameters())
    if isinstance(signals, torch.Tensor):
        return signals.to(dtype=ref.dtype)
    return torch.as_tensor(np.asarray(signals), dtype=ref.dtype)


def forward(model: ResNet1D, signals, record_ids: Sequence[str] | None = None) -> EmbeddingBatch:
    x = _as_tensor(signals, model)
    return EmbeddingBatch(model(x), list(record_ids or []))


def forward_stopgrad(model: ResNet1D, signals,
                     record_ids: Sequence[str] | None = None) -> EmbeddingBatch:
    """Same values as ``forward``; the result carries no graph back to ``model``."""
    x = _as_tensor(signals, model)
    with torch.no_grad():
        z = model(x)
    return EmbeddingBatch(z.detach(), list(record_ids or []))


def embed(model: ResNet1D, signals: np.ndarray, batch_size: int = 64,
          record_ids: Sequence[str] | None = None) -> EmbeddingBatch:
    """Eval-mode embeddings of a large array, computed in chunks without gradients."""
    was_training = model.training
    model.eval()
    try:
        chunks = [forward_stopgrad(model, signals[i:i + batch_size]).vectors
                  for i in range(0, len(signals), batch_size)]
    finally:
        model.train(was_training)
    return EmbeddingBatch(torch.cat(chunks), list(record_ids or []))


def calibrate(model: ResNet1D, signals: np.ndarray, batch_size: int = 32) -> ResNet1D:
    """Data-dependent set-up of an untrained encoder, in place.

    BatchNorm running statistics are re-estimated as exact averages over
    ``signals`` and the projection bias is shifted so the mean embedding is
    zero (the mean unit vector, when embeddings are normalised).  Without this a freshly initialised network sends every input
    to almost the same direction, and a frozen random multi-lead encoder
    gives the alignment loss nothing to separate.
    """
    bns = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    model.train()
    with torch.no_grad():
        for i in range(0, len(signals), batch_size):
            model(_as_tensor(signals[i:i + batch_size], model))
    for m, mom in zip(bns, saved):
        m.momentum = mom
    model.eval()
    with torch.no_grad():
        x = [_as_tensor(signals[i:i + batch_size], model) for i in range(0, len(signals), batch_size)]
        z = torch.cat([model.project(chunk) for chunk in x])
        model.proj.bias -= z.mean(dim=0)
        if model.config.normalize_embeddings:
            # zero raw mean still leaves a common direction after normalisation;
            # a few fixed-point passes remove it from the unit vectors too
            for _ in range(CALIBRATION_PASSES):
                z = torch.cat([model.project(chunk) for chunk in x])
                unit = F.normalize(z, dim=-1)
                model.proj.bias -= unit.mean(dim=0) * z.norm(dim=-1).mean()
    return model


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def param_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_params(model: ResNet1D, path: str | os.PathLike, seed: int | None = None,
                extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"format": FORMAT_TAG,
            "config": model.config.to_dict(),
            "seed": seed,
            "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
            "trainable": {n: bool(p.requires_grad) for n, p in model.named_parameters()},
            "extra": extra or {}}
    with open(path, "wb") as fh:
        np.savez(fh, **arrays, **{META_KEY: np.array(json.dumps(meta))})
    return path


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        if META_KEY not in z.files:
            raise IncompatibleCheckpoint(f"{path}: no metadata block")
        meta = json.loads(str(z[META_KEY]))
        arrays = {k: z[k] for k in z.files if k != META_KEY}
    if meta.get("format") != FORMAT_TAG:
        raise IncompatibleCheckpoint(f"{path}: unknown format {meta.get('format')!r}")
    return meta, arrays


def load_params(path: str | os.PathLike, config: EncoderConfig | None = None) -> ResNet1D:
    """Load a checkpoint, optionally checking it against an expected config."""
    meta, arrays = read_checkpoint(path)
    stored = EncoderConfig.from_dict(meta["config"])
    cfg = config or stored
    dtype = getattr(torch, meta.get("dtype", "float32"))
    model = ResNet1D(cfg).to(dtype)
    expected = model.state_dict()
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        surplus = sorted(set(arrays) - set(expected))
        raise IncompatibleCheckpoint(f"{path}: tensor names differ from config "
                                     f"(missing {missing[:3]}, unexpected {surplus[:3]})")
    for name, ref in expected.items():
        if tuple(ref.shape) != arrays[name].shape:
            raise IncompatibleCheckpoint(f"{path}: {name} has shape {arrays[name].shape}, "
                                         f"config needs {tuple(ref.shape)}")
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    for name, p in model.named_parameters():
        p.requires_grad_(meta.get("trainable", {}).get(name, True))
    return model


def adapt_in_leads(model: ResNet1D, lead_rows: Sequence[int]) -> ResNet1D:
    """Copy of ``model`` whose stem reads only the given input channels.

    Used to start a single-lead encoder from a multi-lead checkpoint: every
    tensor is shared except the stem, which keeps the kernels of ``lead_rows``.
    """
    cfg = model.config.with_leads(len(lead_rows))
    ref = next(model.parameters())
    out = ResNet1D(cfg).to(ref.dtype)
    state = {k: v.clone() for k, v in model.state_dict().items()}
    state["stem.weight"] = state["stem.weight"][:, list(lead_rows), :].clone()
    out.load_state_dict(state)
    return out


def save_embeddings(batch: EmbeddingBatch, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": FORMAT_TAG, "kind": "embeddings"}
    with open(path, "wb") as fh:
        np.savez(fh, vectors=batch.numpy(), record_ids=np.array(batch.record_ids, dtype=str),
                 **{META_KEY: np.array(json.dumps(meta))})
    return path


def load_embeddings(path: str | os.PathLike) -> EmbeddingBatch:
    with np.load(path, allow_pickle=False) as z:
        if "vectors" not in z.files:
            raise IncompatibleCheckpoint(f"{path}: not an embedding file")
        ids = [str(s) for s in z["record_ids"]] if "record_ids" in z.files else []
        return EmbeddingBatch(np.array(z["vectors"]), ids)
