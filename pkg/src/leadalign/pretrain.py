"""Cross-lead alignment pre-training.

Each step embeds a batch of self-cut pairs: the single-lead encoder runs with
gradients, the multi-lead encoder is frozen and evaluated under no-grad, and
the sigmoid alignment loss updates only the single-lead side (AdamW, global
gradient-norm clipping, per-step cosine decay with no warmup).

The last ``valid_size`` records (dataset order) are held out.  After every
epoch the held-out pairs are scored for retrieval and loss, a JSON line is
appended to ``metrics.jsonl``, the full training state is written to
``last/`` and the best-by-validation-loss single-lead encoder to
``best_f_s.npz``.
"""
from __future__ import annotations

import contextlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import ecg_store, serde
from .align_loss import LossConfig, SigmoidAlignLoss
from .ecg_store import ECGRecord
from .encoder import (EncoderConfig, ResNet1D, adapt_in_leads, calibrate, embed, forward_stopgrad,
                      freeze, init_params, load_params, save_params)
from .errors import DatasetTooSmall, IncompatibleCheckpoint, NonFiniteLoss
from .evaluation import RetrievalReport, retrieval_eval
from .pairs import DEFAULT_CUT_LEAD, PairBatch, batch_indices, collate, multi_lead_array
from .training import clip_gradients, cosine_scheduler, seed_everything

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
STATE_DIR = "last"
BEST_FILE = "best_f_s.npz"


@dataclass
class PretrainConfig:
    batch_size: int = 128
    epochs: int = 20
    peak_lr: float = 1e-4
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip_norm: float = 1.0
    mixed_precision: bool = False
    seed: int = 0
    valid_size: int = 64
    deterministic: bool = True
    drop_last: bool = True
    cut_lead: str = DEFAULT_CUT_LEAD
    zscore: bool = True
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    init_s: str = "random"  # "random" or a checkpoint path
    init_m: str = "random"
    calibrate_random: bool = True
    calibration_size: int = 256
    eval_batch_size: int = 64

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.batch_size < 1 or self.epochs < 0 or self.valid_size < 0:
            raise ValueError("batch_size must be >= 1; epochs and valid_size >= 0")

    def to_dict(self) -> dict:
        return serde.to_dict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        return serde.from_dict(cls, d)


@dataclass
class TrainState:
    model_s: ResNet1D
    model_m: ResNet1D
    loss_fn: SigmoidAlignLoss
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LRScheduler
    total_steps: int
    step: int = 0
    epoch: int = 0
    best_valid_loss: float = math.inf
    history: list[dict] = field(default_factory=list)
    last_grad_norm: float = 0.0

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        params = [p for p in self.model_s.parameters() if p.requires_grad]
        params += [p for p in self.loss_fn.parameters() if p.requires_grad]
        return params


def _init_encoder(spec: str, config: EncoderConfig, seed: int, cut_row: int | None) -> ResNet1D:
    if spec == "random":
        return init_params(config, seed)
    model = load_params(spec)
    if model.config.in_leads != config.in_leads:
        if config.in_leads == 1 and cut_row is not None:
            model = adapt_in_leads(model, [cut_row])
    if model.config != config:
        raise IncompatibleCheckpoint(f"{spec}: checkpoint config {model.config} does not "
                                     f"match {config}")
    for p in model.parameters():
        p.requires_grad_(True)
    return model


def build_state(config: PretrainConfig, num_train: int, num_leads: int = 12,
                cut_row: int = 0, calibration_signals: np.ndarray | None = None) -> TrainState:
    """Fresh training state: encoders initialised, multi-lead side frozen.

    Randomly initialised encoders are calibrated on ``calibration_signals``
    (multi-lead training inputs; the single-lead side uses its cut row).
    """
    seed_everything(config.seed, config.deterministic)
    cfg_s = config.encoder.with_leads(1)
    cfg_m = config.encoder.with_leads(num_leads)
    model_s = _init_encoder(config.init_s, cfg_s, config.seed, cut_row)
    model_m = _init_encoder(config.init_m, cfg_m, config.seed + 1, None)
    if config.calibrate_random and calibration_signals is not None:
        if config.init_s == "random":
            calibrate(model_s, calibration_signals[:, cut_row:cut_row + 1])
        if config.init_m == "random":
            calibrate(model_m, calibration_signals)
    freeze(model_m)
    loss_fn = SigmoidAlignLoss(config.loss)
    params = [p for p in model_s.parameters()] + [p for p in loss_fn.parameters()]
    optimizer = torch.optim.AdamW(params, lr=config.peak_lr, betas=config.betas,
                                  eps=config.eps, weight_decay=config.weight_decay)
    steps_per_epoch = steps_in_epoch(num_train, config)
    total = max(1, config.epochs * steps_per_epoch)
    return TrainState(model_s=model_s, model_m=model_m, loss_fn=loss_fn, optimizer=optimizer,
                      scheduler=cosine_scheduler(optimizer, total), total_steps=total)


def steps_in_epoch(num_train: int, config: PretrainConfig) -> int:
    if config.drop_last:
        return num_train // config.batch_size
    return -(-num_train // config.batch_size)


def _autocast(enabled: bool):
    if enabled:
        return torch.autocast(device_type="cpu", dtype=torch.bfloat16)
    return contextlib.nullcontext()


def train_step(state: TrainState, batch: PairBatch, config: PretrainConfig,
               dump_dir: str | os.PathLike | None = None) -> float:
    """One optimizer step on the single-lead encoder; returns the batch loss."""
    if batch.size < 2:
        log.warning("degenerate batch of size %d: no in-batch negatives", batch.size)
    single = torch.from_numpy(np.ascontiguousarray(batch.single_array(), dtype=np.float32))
    multi = torch.from_numpy(np.ascontiguousarray(batch.multi_array(), dtype=np.float32))
    state.model_s.train()
    state.model_m.eval()
    with _autocast(config.mixed_precision):
        s = state.model_s(single)
        m = forward_stopgrad(state.model_m, multi).vectors
    loss = state.loss_fn(s.float(), m.float())
    if not torch.isfinite(loss):
        dump = {"step": state.step, "epoch": state.epoch, "loss": loss.item(),
                "lr": state.lr, "record_ids": batch.record_ids}
        if dump_dir is not None:
            Path(dump_dir).mkdir(parents=True, exist_ok=True)
            (Path(dump_dir) / "nonfinite_dump.json").write_text(json.dumps(dump, indent=1))
        raise NonFiniteLoss(f"non-finite loss at step {state.step}: {dump}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    params = state.trainable_parameters()
    state.last_grad_norm = clip_gradients(params, config.grad_clip_norm)
    state.optimizer.step()
    state.scheduler.step()
    state.step += 1
    return loss.item()


def validate(state: TrainState, single: np.ndarray, multi: np.ndarray,
             record_ids: Sequence[str], config: PretrainConfig) -> RetrievalReport:
    # evaluation always runs in full precision, so mixed precision only affects training
    s = embed(state.model_s, single, config.eval_batch_size, record_ids)
    m = embed(state.model_m, multi, config.eval_batch_size, record_ids)
    loss_cfg = LossConfig(float(state.loss_fn.temperature), config.loss.bias,
                          config.loss.learnable_temperature)
    ks = tuple(k for k in (1, 5, 10) if k <= len(record_ids)) or (1,)
    return retrieval_eval(s, m, ks, loss_cfg)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_train_state(state: TrainState, directory: str | os.PathLike,
                     config: PretrainConfig) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_params(state.model_s, directory / "f_s.npz", seed=config.seed)
    save_params(state.model_m, directory / "f_m.npz", seed=config.seed + 1)
    torch.save({"optimizer": state.optimizer.state_dict(),
                "scheduler": state.scheduler.state_dict(),
                "loss_fn": state.loss_fn.state_dict(),
                "step": state.step, "epoch": state.epoch, "total_steps": state.total_steps,
                "best_valid_loss": state.best_valid_loss, "history": state.history,
                "torch_rng": torch.get_rng_state(),
                "config": config.to_dict()}, directory / "optim.pt")
    return directory


def load_train_state(directory: str | os.PathLike, config: PretrainConfig,
                     num_train: int, num_leads: int = 12) -> TrainState:
    directory = Path(directory)
    side = torch.load(directory / "optim.pt", weights_only=False)
    state = build_state(config, num_train, num_leads)
    state.model_s.load_state_dict(load_params(directory / "f_s.npz").state_dict())
    state.model_m.load_state_dict(load_params(directory / "f_m.npz").state_dict())
    freeze(state.model_m)
    state.loss_fn.load_state_dict(side["loss_fn"])
    state.optimizer.load_state_dict(side["optimizer"])
    state.scheduler.load_state_dict(side["scheduler"])
    state.step, state.epoch = side["step"], side["epoch"]
    state.total_steps = side["total_steps"]
    state.best_valid_loss = side["best_valid_loss"]
    state.history = list(side["history"])
    torch.set_rng_state(side["torch_rng"])
    return state


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    state: TrainState
    metrics: list[dict]
    best_checkpoint: Path | None = None
    valid_ids: list[str] = field(default_factory=list)


def fit(config: PretrainConfig, records: Sequence[ECGRecord] | ecg_store.Dataset,
        out_dir: str | os.PathLike | None = None, resume: bool = False,
        max_epochs: int | None = None) -> FitResult:
    """Run alignment pre-training.

    ``max_epochs`` stops early without changing the learning-rate schedule, so
    a run can be split and continued with ``resume=True`` from ``out_dir``.
    """
    if isinstance(records, ecg_store.Dataset):
        records = records.records()
    records = [ecg_store.preprocess(r, config.zscore) for r in records]
    n = len(records)
    if n < config.valid_size + config.batch_size:
        raise DatasetTooSmall(f"{n} records; need valid_size + batch_size = "
                              f"{config.valid_size + config.batch_size}")
    train_recs = records[:n - config.valid_size]
    valid_recs = records[n - config.valid_size:]
    num_leads = records[0].num_leads
    cut_row = records[0].lead_index(config.cut_lead)
    out = Path(out_dir) if out_dir is not None else None

    if resume:
        if out is None:
            raise ValueError("resume requires out_dir")
        state = load_train_state(out / STATE_DIR, config, len(train_recs), num_leads)
    else:
        calib = multi_lead_array(train_recs[:config.calibration_size])
        state = build_state(config, len(train_recs), num_leads, cut_row, calib)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / METRICS_FILE).write_text("")

    if valid_recs:
        valid_batch = collate(valid_recs, config.cut_lead)
        v_single = valid_batch.single_array().astype(np.float32)
        v_multi = valid_batch.multi_array().astype(np.float32)
    best_path = out / BEST_FILE if out is not None else None
    last_epoch = config.epochs if max_epochs is None else min(max_epochs, config.epochs)

    while state.epoch < last_epoch:
        tic = time.perf_counter()
        rng = np.random.default_rng([config.seed, state.epoch])
        losses = []
        for idx in batch_indices(len(train_recs), config.batch_size, rng, config.drop_last):
            batch = collate([train_recs[i] for i in idx], config.cut_lead)
            losses.append(train_step(state, batch, config, dump_dir=out))
        state.epoch += 1
        entry = {"epoch": state.epoch,
                 "train_loss": float(np.mean(losses)) if losses else float("nan"),
                 "valid_loss": None, "r1": None, "r5": None, "r10": None,
                 "lr": state.lr}
        if valid_recs:
            rep = validate(state, v_single, v_multi, valid_batch.record_ids, config)
            entry.update(valid_loss=rep.valid_loss, r1=rep.r_at.get(1), r5=rep.r_at.get(5),
                         r10=rep.r_at.get(10))
            if rep.valid_loss < state.best_valid_loss:
                state.best_valid_loss = rep.valid_loss
                if best_path is not None:
                    save_params(state.model_s, best_path, seed=config.seed,
                                extra={"epoch": state.epoch, "valid_loss": rep.valid_loss})
        entry["wall_s"] = time.perf_counter() - tic
        state.history.append(entry)
        log.info("epoch %d: %s", state.epoch, entry)
        if out is not None:
            with open(out / METRICS_FILE, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")
            save_train_state(state, out / STATE_DIR, config)
    return FitResult(state=state, metrics=list(state.history),
                     best_checkpoint=best_path if best_path and best_path.exists() else None,
                     valid_ids=[r.id for r in valid_recs])
