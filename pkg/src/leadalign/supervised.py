"""End-to-end supervised training of an encoder plus linear head.

Serves two roles: the no-alignment baseline (single-lead encoder trained
directly on labels) and building a labelled multi-lead reference checkpoint
when no external one is supplied.  The optimiser, schedule and early-stopping
protocol are those of linear probing, so only the trained parameters differ.
"""
from __future__ import annotations

import copy
import logging
import warnings
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import ecg_store
from .ecg_store import ECGRecord
from .encoder import EncoderConfig, ResNet1D, init_params
from .evaluation import (DegenerateClassWarning, ProbeConfig, ProbeReport, _safe_macro, macro_auc,
                         split_records)
from .pairs import multi_lead_array, single_lead_array
from .training import cosine_scheduler

log = logging.getLogger(__name__)


class Classifier(nn.Module):
    def __init__(self, encoder: ResNet1D, num_classes: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.config.embed_dim, num_classes)

    def forward(self, x):
        return self.head(self.encoder(x))


def _scores(model: Classifier, x: np.ndarray, batch_size: int) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        out = [model(torch.as_tensor(x[i:i + batch_size])).double().numpy()
               for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def train_supervised(encoder_config: EncoderConfig,
                     train: tuple[np.ndarray, np.ndarray],
                     valid: tuple[np.ndarray, np.ndarray],
                     test: tuple[np.ndarray, np.ndarray],
                     config: ProbeConfig = ProbeConfig(),
                     class_names: Sequence[str] | None = None,
                     encoder: ResNet1D | None = None) -> tuple[ResNet1D, ProbeReport]:
    """Train encoder and head on ``(signals, multi_hot)`` splits.

    Returns the encoder from the epoch with the best validation macro AUC and
    the test report of that epoch's model.
    """
    x_tr = np.ascontiguousarray(train[0], dtype=np.float32)
    y_tr = torch.as_tensor(np.asarray(train[1]), dtype=torch.float32)
    k = y_tr.shape[1]
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        if encoder is None:
            encoder = init_params(encoder_config, config.seed)
        model = Classifier(encoder, k)
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.peak_lr, betas=config.betas,
                           eps=config.eps, weight_decay=config.weight_decay)
    n = len(x_tr)
    sched = cosine_scheduler(opt, config.epochs * max(1, -(-n // config.batch_size)))
    loss_fn = nn.BCEWithLogitsLoss()

    best_auc, best_epoch, bad = -np.inf, 0, 0
    best_state = copy.deepcopy(model.state_dict())
    history, epochs_run = [], 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        for idx in torch.randperm(n, generator=gen).split(config.batch_size):
            if len(idx) < 2:
                continue  # BatchNorm needs more than one sample
            opt.zero_grad()
            loss_fn(model(torch.from_numpy(x_tr[idx.numpy()])), y_tr[idx]).backward()
            opt.step()
            sched.step()
        epochs_run = epoch
        auc = _safe_macro(_scores(model, valid[0], config.batch_size), valid[1], names)
        history.append(auc)
        if auc > best_auc:
            best_auc, best_epoch, bad = auc, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            bad += 1
            if bad >= config.patience:
                break
    model.load_state_dict(best_state)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateClassWarning)
        rep = macro_auc(_scores(model, test[0], config.batch_size), test[1], names)
    report = ProbeReport(per_class_auc=rep.per_class_auc, macro_auc=rep.macro_auc,
                         best_epoch=best_epoch, epochs_run=epochs_run,
                         best_valid_auc=float(best_auc), valid_history=history,
                         excluded=rep.excluded)
    model.encoder.eval()
    return model.encoder, report


def supervised_inputs(records: Sequence[ECGRecord], in_leads: int, cut_lead: str) -> np.ndarray:
    if in_leads == 1:
        return single_lead_array(records, cut_lead)
    return multi_lead_array(records)


def train_supervised_on(splits, class_names: Sequence[str], encoder_config: EncoderConfig,
                        config: ProbeConfig = ProbeConfig()) -> tuple[ResNet1D, ProbeReport]:
    """``train_supervised`` on record splits; single-lead configs see only the cut lead."""
    parts = split_records(splits)
    arrays = {}
    for name, recs in parts.items():
        recs = [ecg_store.preprocess(r, config.zscore) for r in recs]
        arrays[name] = (supervised_inputs(recs, encoder_config.in_leads, config.cut_lead),
                        ecg_store.multi_hot(recs, class_names))
    return train_supervised(encoder_config, arrays["train"], arrays["valid"], arrays["test"],
                            config, class_names)
