"""Downstream measurement: retrieval, macro ROC-AUC, linear probing and latent-gap FID."""
from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy.stats import rankdata

from . import ecg_store
from .align_loss import LossConfig, siglip_loss
from .ecg_store import ECGRecord
from .encoder import EmbeddingBatch, ResNet1D, embed
from .errors import BatchMismatch, DuplicateId, MissingSplit, TooFewSamples
from .pairs import DEFAULT_CUT_LEAD, multi_lead_array, single_lead_array, zero_mask
from .training import cosine_scheduler

log = logging.getLogger(__name__)

RECALL_KS = (1, 5, 10)
FID_EPS = 1e-6


class DegenerateClassWarning(UserWarning):
    """A class has only positives or only negatives and was left out of the macro mean."""


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

@dataclass
class RetrievalReport:
    r_at: dict[int, float]
    valid_loss: float
    n: int

    def to_json(self) -> dict:
        return {"r_at": {str(k): v for k, v in self.r_at.items()},
                "valid_loss": self.valid_loss, "n": self.n}


def _vectors(x) -> tuple[np.ndarray, list[str] | None]:
    if isinstance(x, EmbeddingBatch):
        return x.numpy().astype(np.float64), list(x.record_ids)
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy(), None
    return np.asarray(x, dtype=np.float64), None


def retrieval_ranks(sim: np.ndarray) -> np.ndarray:
    """0-based rank of the true match ``j = i`` in each row, ties to the lower index."""
    n = sim.shape[0]
    diag = np.diag(sim)[:, None]
    above = (sim > diag).sum(axis=1)
    lower_index = np.arange(n)[None, :] < np.arange(n)[:, None]
    tied_before = ((sim == diag) & lower_index).sum(axis=1)
    return above + tied_before


def retrieval_eval(S, M, ks: Sequence[int] = RECALL_KS,
                   loss_config: LossConfig = LossConfig()) -> RetrievalReport:
    """Single-lead -> multi-lead retrieval: query ``S_i`` must find ``M_i``."""
    s, s_ids = _vectors(S)
    m, m_ids = _vectors(M)
    if s.shape != m.shape:
        raise BatchMismatch(f"S has shape {s.shape} but M has {m.shape}")
    if s_ids is not None and m_ids is not None:
        if s_ids != m_ids:
            raise BatchMismatch("S and M record ids are not aligned")
        if len(set(s_ids)) != len(s_ids):
            raise DuplicateId("retrieval requires distinct record ids")
    n = s.shape[0]
    if n < max(ks):
        raise ValueError(f"need at least {max(ks)} items for R@{max(ks)}, got {n}")
    ranks = retrieval_ranks(s @ m.T)
    r_at = {int(k): float((ranks < k).mean()) for k in sorted(ks)}
    loss = float(siglip_loss(torch.from_numpy(s), torch.from_numpy(m), loss_config))
    return RetrievalReport(r_at=r_at, valid_loss=loss, n=n)


# ---------------------------------------------------------------------------
# macro ROC-AUC
# ---------------------------------------------------------------------------

def binary_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with half credit for ties, via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)  # average ranks, 1-based
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class AUCReport:
    per_class_auc: dict[str, float]
    macro_auc: float
    excluded: list[str] = field(default_factory=list)


def macro_auc(scores: np.ndarray, labels: np.ndarray,
              class_names: Sequence[str] | None = None) -> AUCReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    if scores.shape[0] < 2:
        raise TooFewSamples("macro AUC needs at least two samples")
    names = list(class_names) if class_names is not None else [str(k) for k in
                                                                range(scores.shape[1])]
    per_class, excluded = {}, []
    for k, name in enumerate(names):
        auc = binary_auc(scores[:, k], labels[:, k])
        if np.isnan(auc):
            excluded.append(name)
        else:
            per_class[name] = auc
    if excluded:
        warnings.warn(f"classes without both positives and negatives excluded: {excluded}",
                      DegenerateClassWarning, stacklevel=2)
    macro = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return AUCReport(per_class, macro, excluded)


# ---------------------------------------------------------------------------
# linear probing
# ---------------------------------------------------------------------------

@dataclass
class ProbeConfig:
    batch_size: int = 64
    epochs: int = 20
    peak_lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    patience: int = 5
    seed: int = 0
    zscore: bool = True
    cut_lead: str = DEFAULT_CUT_LEAD
    input_mode: str = "auto"  # auto | self_cut | zero_mask

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.input_mode not in ("auto", "self_cut", "zero_mask"):
            raise ValueError(f"unknown probe input_mode {self.input_mode!r}")


@dataclass
class ProbeReport:
    per_class_auc: dict[str, float]
    macro_auc: float
    best_epoch: int
    epochs_run: int
    best_valid_auc: float
    valid_history: list[float] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def _predict(head: nn.Module, x: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        return head(x).double().numpy()


def _safe_macro(scores, labels, names) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateClassWarning)
        return macro_auc(scores, labels, names).macro_auc


def train_linear_probe(train: tuple[np.ndarray, np.ndarray],
                       valid: tuple[np.ndarray, np.ndarray],
                       test: tuple[np.ndarray, np.ndarray],
                       config: ProbeConfig = ProbeConfig(),
                       class_names: Sequence[str] | None = None) -> ProbeReport:
    """Fit a ``D -> K`` linear layer with per-class BCE on fixed features.

    Early stopping tracks validation macro AUC; the reported test numbers come
    from the epoch that was best on validation.
    """
    (x_tr, y_tr), (x_va, y_va), (x_te, y_te) = [
        (torch.as_tensor(np.asarray(x), dtype=torch.float32),
         torch.as_tensor(np.asarray(y), dtype=torch.float32)) for x, y in (train, valid, test)]
    n, d = x_tr.shape
    k = y_tr.shape[1]
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    gen = torch.Generator().manual_seed(config.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        head = nn.Linear(d, k)
    opt = torch.optim.Adam(head.parameters(), lr=config.peak_lr, betas=config.betas,
                           eps=config.eps, weight_decay=config.weight_decay)
    steps_per_epoch = max(1, -(-n // config.batch_size))
    sched = cosine_scheduler(opt, config.epochs * steps_per_epoch)
    loss_fn = nn.BCEWithLogitsLoss()

    best_auc, best_epoch, best_state, bad = -np.inf, 0, copy.deepcopy(head.state_dict()), 0
    history, epochs_run = [], 0
    for epoch in range(1, config.epochs + 1):
        head.train()
        for idx in torch.randperm(n, generator=gen).split(config.batch_size):
            opt.zero_grad()
            loss_fn(head(x_tr[idx]), y_tr[idx]).backward()
            opt.step()
            sched.step()
        epochs_run = epoch
        auc = _safe_macro(_predict(head, x_va), y_va.numpy(), names)
        history.append(auc)
        if auc > best_auc:
            best_auc, best_epoch, bad = auc, epoch, 0
            best_state = copy.deepcopy(head.state_dict())
        else:
            bad += 1
            if bad >= config.patience:
                log.info("probe early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    head.load_state_dict(best_state)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateClassWarning)
        rep = macro_auc(_predict(head, x_te), y_te.numpy(), names)
    return ProbeReport(per_class_auc=rep.per_class_auc, macro_auc=rep.macro_auc,
                       best_epoch=best_epoch, epochs_run=epochs_run,
                       best_valid_auc=float(best_auc), valid_history=history,
                       excluded=rep.excluded)


def encoder_inputs(encoder: ResNet1D, records: Sequence[ECGRecord],
                   config: ProbeConfig) -> np.ndarray:
    """Lead-I-only inputs for ``encoder``: a self-cut view, or a zero-masked record."""
    mode = config.input_mode
    if mode == "auto":
        mode = "self_cut" if encoder.config.in_leads == 1 else "zero_mask"
    if mode == "self_cut":
        return single_lead_array(records, config.cut_lead)
    return multi_lead_array([zero_mask(r, config.cut_lead) for r in records])


def split_records(splits: dict[str, Sequence[ECGRecord]] | ecg_store.Dataset
                  ) -> dict[str, list[ECGRecord]]:
    if isinstance(splits, ecg_store.Dataset):
        missing = [s for s in ecg_store.SPLITS if not splits.has_split(s)]
        if missing:
            raise MissingSplit(f"dataset {splits.root} lacks split(s) {missing}")
        return {s: splits.records(s) for s in ecg_store.SPLITS}
    missing = [s for s in ecg_store.SPLITS if not splits.get(s)]
    if missing:
        raise MissingSplit(f"missing split(s) {missing}")
    return {s: list(splits[s]) for s in ecg_store.SPLITS}


def linear_probe(encoder: ResNet1D, splits, class_names: Sequence[str],
                 config: ProbeConfig = ProbeConfig()) -> ProbeReport:
    """Probe a frozen encoder: embed each split once, then train a linear head."""
    parts = split_records(splits)
    features = {}
    for name, recs in parts.items():
        recs = [ecg_store.preprocess(r, config.zscore) for r in recs]
        x = encoder_inputs(encoder, recs, config)
        z = embed(encoder, x).numpy()
        features[name] = (z, ecg_store.multi_hot(recs, class_names))
    return train_linear_probe(features["train"], features["valid"], features["test"],
                              config, class_names)


# ---------------------------------------------------------------------------
# latent gap
# ---------------------------------------------------------------------------

def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def latent_gap_fid(X, Y, eps: float = FID_EPS) -> float:
    """Frechet distance between Gaussian fits of two embedding sets.

    ``||mu_x - mu_y||^2 + Tr(Sx + Sy - 2 (Sx Sy)^(1/2))`` with unbiased
    covariances plus ``eps * I``.  The cross term uses
    ``Tr((Sx Sy)^(1/2)) = Tr((Sx^(1/2) Sy Sx^(1/2))^(1/2))`` so both roots are
    of symmetric PSD matrices.
    """
    x, _ = _vectors(X)
    y, _ = _vectors(Y)
    if len(x) < 2 or len(y) < 2:
        raise TooFewSamples("FID needs at least two samples per set")
    if x.shape[1] != y.shape[1]:
        raise BatchMismatch(f"embedding widths differ: {x.shape[1]} vs {y.shape[1]}")
    d = x.shape[1]
    mu_x, mu_y = x.mean(axis=0), y.mean(axis=0)
    cov_x = np.atleast_2d(np.cov(x, rowvar=False)) + eps * np.eye(d)
    cov_y = np.atleast_2d(np.cov(y, rowvar=False)) + eps * np.eye(d)
    root_x = _psd_sqrt(cov_x)
    cross = np.trace(_psd_sqrt(root_x @ cov_y @ root_x))
    fid = float(((mu_x - mu_y) ** 2).sum() + np.trace(cov_x) + np.trace(cov_y) - 2.0 * cross)
    return max(fid, 0.0)
