"""Command-line entry point: ``leadalign <mode> [--config FILE] [--override key=value ...]``.

Each run holds a lock on its output directory, echoes the effective config
there, and writes ``report.json`` plus ``report.txt``.  On failure it writes
``error.json`` (and prints the same record to stderr) and exits nonzero.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Sequence

import filelock
import numpy as np

from . import ecg_store
from .ablation import render_table, run_ablation
from .config import MODES, ExperimentConfig, echo_config, parse_config
from .ecg_store import Dataset
from .encoder import EmbeddingBatch, embed, init_params, load_embeddings, load_params
from .errors import ConfigTypeError, LeadAlignError, UnknownKey
from .evaluation import latent_gap_fid, linear_probe, retrieval_eval
from .pairs import collate
from .pretrain import fit

log = logging.getLogger(__name__)

LOCK_NAME = ".leadalign.lock"
EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_BUSY = 0, 1, 2, 3

# per-mode shorthand flags -> override keys
SHORTHAND = {
    "--data": "data",
    "--ckpt": None,      # resolved per mode below
    "--ckpt-m": None,
    "--emb-a": "latent_gap.emb_a",
    "--emb-b": "latent_gap.emb_b",
    "--src": "ingest.src",
}
CKPT_KEYS = {"eval-retrieval": ("retrieval.ckpt", "retrieval.ckpt_m"),
             "probe": ("probe.ckpt", None),
             "latent-gap": ("latent_gap.ckpt_s", "latent_gap.ckpt_m"),
             "ablate": ("ablation.checkpoint", None)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leadalign", description=__doc__.splitlines()[0])
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", help="YAML experiment file (optional)")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="applied after the file; repeatable")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--output-dir")
    for flag in SHORTHAND:
        parser.add_argument(flag)
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _overrides_from_args(args: argparse.Namespace) -> list[str]:
    out = list(args.override)
    if args.seed is not None:
        out.append(f"seed={args.seed}")
    if args.deterministic is not None:
        out.append(f"deterministic={'true' if args.deterministic else 'false'}")
    if args.output_dir is not None:
        out.append(f"output_dir={args.output_dir}")
    ckpt_keys = CKPT_KEYS.get(args.mode, (None, None))
    for flag, key in SHORTHAND.items():
        value = getattr(args, flag.lstrip("-").replace("-", "_"))
        if value is None:
            continue
        if flag == "--ckpt":
            key = ckpt_keys[0]
        elif flag == "--ckpt-m":
            key = ckpt_keys[1]
        if key is None:
            raise ConfigTypeError(f"{flag} is not used by mode {args.mode}")
        out.append(f"{key}={json.dumps(value)}")
    return out


# ---------------------------------------------------------------------------
# data access
# ---------------------------------------------------------------------------

def _all_records(cfg: ExperimentConfig, split: str | None = None):
    if cfg.data:
        return Dataset(cfg.data).records(split)
    splits = ecg_store.synthetic_splits(cfg.synth)
    if split is None:
        return [r for s in ecg_store.SPLITS for r in splits[s]]
    return splits[split]


def _splits(cfg: ExperimentConfig):
    if cfg.data:
        return Dataset(cfg.data)
    return ecg_store.synthetic_splits(cfg.synth)


def _class_names(cfg: ExperimentConfig) -> list[str]:
    if cfg.data:
        return list(Dataset(cfg.data).label_vocabulary)
    return list(cfg.synth.class_set)


def _require(value, what: str):
    if value is None:
        raise ConfigTypeError(f"{what} must be set for this mode")
    return value


def _embed_records(ckpt: str, records, cut_lead: str, zscore: bool, batch_size: int = 64,
                   ) -> EmbeddingBatch:
    model = load_params(ckpt)
    recs = [ecg_store.preprocess(r, zscore) for r in records]
    batch = collate(recs, cut_lead)
    x = batch.single_array() if model.config.in_leads == 1 else batch.multi_array()
    return embed(model, x.astype(np.float32), batch_size, batch.record_ids)


# ---------------------------------------------------------------------------
# modes
# ---------------------------------------------------------------------------

def _table(rows: Sequence[tuple[str, str]]) -> str:
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def run_synth(cfg: ExperimentConfig, out: Path):
    manifest = ecg_store.generate_synthetic(cfg.synth, out / "data")
    counts = {s: len(manifest.entries(s)) for s in ecg_store.SPLITS}
    report = {"path": str(out / "data"), "num_records": len(manifest.records), "splits": counts}
    return report, _table([("records", str(len(manifest.records)))] +
                          [(s, str(c)) for s, c in counts.items()])


def run_ingest(cfg: ExperimentConfig, out: Path):
    src = _require(cfg.ingest.src, "ingest.src")
    manifest = ecg_store.ingest(src, out / "data", cfg.ingest.target_hz, cfg.ingest.zscore)
    report = {"path": str(out / "data"), "num_records": len(manifest.records),
              "sampling_rate_hz": cfg.ingest.target_hz}
    return report, _table([(k, str(v)) for k, v in report.items()])


def run_pretrain(cfg: ExperimentConfig, out: Path):
    result = fit(cfg.pretrain, _all_records(cfg), out)
    last = result.metrics[-1] if result.metrics else {}
    report = {"steps": result.state.step, "epochs": result.state.epoch, "final": last,
              "best_valid_loss": result.state.best_valid_loss,
              "best_checkpoint": str(result.best_checkpoint) if result.best_checkpoint else None,
              "f_s": str(out / "last" / "f_s.npz"), "f_m": str(out / "last" / "f_m.npz")}
    rows = [("epoch", "train_loss", "valid_loss", "R@1", "R@5", "R@10")]
    for m in result.metrics:
        rows.append((str(m["epoch"]), f"{m['train_loss']:.4f}",
                     *("-" if m[k] is None else (f"{m[k]:.4f}" if k == "valid_loss"
                                                  else f"{100 * m[k]:.2f}")
                       for k in ("valid_loss", "r1", "r5", "r10"))))
    text = "\n".join(" ".join(f"{c:>10}" for c in r) for r in rows) + "\n"
    return report, text


def run_eval_retrieval(cfg: ExperimentConfig, out: Path):
    sec = cfg.retrieval
    records = _all_records(cfg, sec.split)
    s = _embed_records(_require(sec.ckpt, "retrieval.ckpt"), records, sec.cut_lead, sec.zscore,
                       sec.batch_size)
    m = _embed_records(_require(sec.ckpt_m, "retrieval.ckpt_m"), records, sec.cut_lead,
                       sec.zscore, sec.batch_size)
    ks = tuple(k for k in (1, 5, 10) if k <= len(records))
    rep = retrieval_eval(s, m, ks, cfg.pretrain.loss)
    text = _table([(f"R@{k}", f"{100 * v:.2f}") for k, v in rep.r_at.items()] +
                  [("Loss", f"{rep.valid_loss:.4f}"), ("n", str(rep.n))])
    return rep.to_json(), text


def run_probe(cfg: ExperimentConfig, out: Path):
    sec = cfg.probe
    if sec.ckpt:
        encoder = load_params(sec.ckpt)
    else:
        encoder = init_params(cfg.pretrain.encoder.with_leads(1), sec.seed)
    rep = linear_probe(encoder, _splits(cfg), _class_names(cfg), sec.probe_config())
    rows = [(k, f"{100 * v:.2f}") for k, v in rep.per_class_auc.items()]
    rows += [("macro AUC", f"{100 * rep.macro_auc:.2f}"), ("best epoch", str(rep.best_epoch))]
    return rep.to_json(), _table(rows)


def run_latent_gap(cfg: ExperimentConfig, out: Path):
    sec = cfg.latent_gap
    if sec.emb_a and sec.emb_b:
        a, b = load_embeddings(sec.emb_a), load_embeddings(sec.emb_b)
    else:
        records = _all_records(cfg, sec.split)
        a = _embed_records(_require(sec.ckpt_s, "latent_gap.ckpt_s or emb_a/emb_b"), records,
                           sec.cut_lead, sec.zscore)
        b = _embed_records(_require(sec.ckpt_m, "latent_gap.ckpt_m"), records, sec.cut_lead,
                           sec.zscore)
    fid = latent_gap_fid(a, b)
    report = {"fid": fid, "n_a": len(a), "n_b": len(b)}
    return report, _table([("FID", f"{fid:.6f}"), ("n_a", str(len(a))), ("n_b", str(len(b)))])


def run_ablate(cfg: ExperimentConfig, out: Path):
    abl = dataclasses.replace(cfg.ablation,
                              pretrain=cfg.ablation.pretrain or cfg.pretrain,
                              probe=cfg.ablation.probe or cfg.probe.probe_config())
    results = run_ablation(abl, _splits(cfg), out, class_names=_class_names(cfg))
    return [r.to_json() for r in results], render_table(results)


RUNNERS = {"synth": run_synth, "ingest": run_ingest, "pretrain": run_pretrain,
           "eval-retrieval": run_eval_retrieval, "probe": run_probe,
           "latent-gap": run_latent_gap, "ablate": run_ablate}


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run one configured mode inside its output directory; returns the report."""
    cfg = cfg.effective()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = filelock.FileLock(str(out / LOCK_NAME))
    lock.acquire(timeout=0)
    try:
        echo_config(cfg, out)
        (out / "error.json").unlink(missing_ok=True)
        report, text = RUNNERS[cfg.mode](cfg, out)
        (out / "report.json").write_text(json.dumps(report, indent=1, default=str) + "\n")
        (out / "report.txt").write_text(text)
        return report
    finally:
        lock.release()


def _error_record(exc: BaseException, mode: str | None) -> dict:
    return {"status": "error", "mode": mode, "error_type": type(exc).__name__,
            "message": str(exc), "traceback": traceback.format_exc()}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    out_dir: Path | None = Path(args.output_dir) if args.output_dir else None
    try:
        cfg = parse_config(args.config, _overrides_from_args(args), mode=args.mode)
        out_dir = Path(cfg.output_dir)
        report = run_experiment(cfg)
    except filelock.Timeout as exc:
        return _fail(exc, args.mode, None, EXIT_BUSY)  # do not touch a directory in use
    except (UnknownKey, ConfigTypeError) as exc:
        return _fail(exc, args.mode, out_dir, EXIT_CONFIG)
    except (LeadAlignError, OSError, ValueError, KeyError, RuntimeError) as exc:
        return _fail(exc, args.mode, out_dir, EXIT_FAILED)
    print((out_dir / "report.txt").read_text(), end="")
    log.debug("report: %s", report)
    return EXIT_OK


def _fail(exc: BaseException, mode: str, out_dir: Path | None, code: int) -> int:
    record = _error_record(exc, mode)
    record["exit_code"] = code
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "error.json").write_text(json.dumps(record, indent=1) + "\n")
        except OSError:
            pass
    print(json.dumps({k: v for k, v in record.items() if k != "traceback"}), file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
