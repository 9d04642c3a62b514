"""ECG record model, on-disk dataset format, preprocessing and a synthetic generator.

Dataset directories hold a ``manifest.json`` plus one ``.ecgr`` file per
record.  An ``.ecgr`` file is raw little-endian float32, row-major
``[leads x timestamps]``, with no header; its shape comes from the manifest.

The synthetic generator projects a 3-D cardiac dipole onto twelve leads
through a fixed matrix (``LEAD_PROJECTION``), so every lead is a linear view
of one shared source and lead I is exactly the x component of the dipole.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptFile, EmptyRecord, ManifestMismatch, UnknownLead

CANONICAL_LEADS = ("I", "II", "III", "aVR", "aVL", "aVF",
                   "V1", "V2", "V3", "V4", "V5", "V6")
SPLITS = ("train", "valid", "test")
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = "1"
SAMPLE_DTYPE = np.dtype("<f4")
ZSCORE_EPS = 1e-8


@dataclass
class ECGRecord:
    id: str
    samples: np.ndarray
    lead_names: tuple[str, ...] = CANONICAL_LEADS
    sampling_rate_hz: float = 500.0
    labels: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim == 1:
            self.samples = self.samples[None, :]
        self.lead_names = tuple(self.lead_names)
        self.labels = frozenset(self.labels)
        if self.samples.ndim != 2 or self.samples.shape[0] != len(self.lead_names):
            raise ValueError(
                f"record {self.id}: samples shape {self.samples.shape} does not "
                f"match {len(self.lead_names)} lead names")
        if len(set(self.lead_names)) != len(self.lead_names):
            raise ValueError(f"record {self.id}: duplicate lead names {self.lead_names}")
        if self.sampling_rate_hz <= 0:
            raise ValueError(f"record {self.id}: sampling rate must be positive")

    @property
    def num_leads(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    def lead_index(self, name: str) -> int:
        try:
            return self.lead_names.index(name)
        except ValueError:
            raise UnknownLead(f"record {self.id} has no lead {name!r}") from None

    def replace(self, **changes) -> "ECGRecord":
        fields = dict(id=self.id, samples=self.samples, lead_names=self.lead_names,
                      sampling_rate_hz=self.sampling_rate_hz, labels=self.labels)
        fields.update(changes)
        return ECGRecord(**fields)


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def sanitize(record: ECGRecord) -> ECGRecord:
    """Replace NaN and +/-Inf samples with 0.0; finite samples are untouched."""
    clean = np.where(np.isfinite(record.samples), record.samples, 0.0).astype(
        record.samples.dtype, copy=False)
    return record.replace(samples=clean)


def canonicalize_leads(record: ECGRecord) -> ECGRecord:
    """Reorder rows to the canonical 12-lead order, keeping only present leads."""
    unknown = [n for n in record.lead_names if n not in CANONICAL_LEADS]
    if unknown:
        raise UnknownLead(f"record {record.id}: leads outside canonical set: {unknown}")
    order = sorted(range(record.num_leads),
                   key=lambda i: CANONICAL_LEADS.index(record.lead_names[i]))
    return record.replace(samples=record.samples[order],
                          lead_names=tuple(record.lead_names[i] for i in order))


def zscore(record: ECGRecord) -> ECGRecord:
    # population std; near-constant leads are only mean-centred
    x = record.samples.astype(np.float64)
    mean = x.mean(axis=1, keepdims=True)
    std = x.std(axis=1, keepdims=True)
    centred = x - mean
    out = np.where(std > ZSCORE_EPS, centred / np.where(std > ZSCORE_EPS, std, 1.0), centred)
    dtype = record.samples.dtype if record.samples.dtype.kind == "f" else np.float64
    return record.replace(samples=out.astype(dtype))


def resample(record: ECGRecord, target_hz: float) -> ECGRecord:
    """Linear-interpolation resampling; first and last samples are preserved."""
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    n = record.num_samples
    if n < 2:
        raise EmptyRecord(f"record {record.id} has {n} sample(s); need at least 2")
    if target_hz == record.sampling_rate_hz:
        return record
    n_new = int(round(n * target_hz / record.sampling_rate_hz))
    if n_new < 2:
        raise EmptyRecord(f"record {record.id} would resample to {n_new} sample(s)")
    old_pos = np.arange(n, dtype=np.float64)
    new_pos = np.linspace(0.0, n - 1, n_new)
    out = np.stack([np.interp(new_pos, old_pos, row) for row in record.samples])
    out[:, 0] = record.samples[:, 0]
    out[:, -1] = record.samples[:, -1]
    return record.replace(samples=out.astype(record.samples.dtype, copy=False),
                          sampling_rate_hz=float(target_hz))


# ---------------------------------------------------------------------------
# dataset directory format
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    relative_path: str
    num_leads: int
    num_samples: int
    sampling_rate_hz: float
    labels: list[str] = field(default_factory=list)
    split_tag: str = "train"
    lead_names: list[str] | None = None

    def __post_init__(self):
        if self.split_tag not in SPLITS:
            raise ManifestMismatch(f"entry {self.id}: split_tag {self.split_tag!r} "
                                   f"not in {SPLITS}")
        if self.lead_names is None:
            if self.num_leads != len(CANONICAL_LEADS):
                raise ManifestMismatch(f"entry {self.id}: lead_names required for "
                                       f"{self.num_leads}-lead records")
            self.lead_names = list(CANONICAL_LEADS)
        if len(self.lead_names) != self.num_leads:
            raise ManifestMismatch(f"entry {self.id}: {len(self.lead_names)} lead names "
                                   f"but num_leads={self.num_leads}")


@dataclass
class DatasetManifest:
    records: list[ManifestEntry]
    label_vocabulary: list[str]
    version: str = MANIFEST_VERSION

    def to_json(self) -> dict:
        return {"version": self.version,
                "label_vocabulary": list(self.label_vocabulary),
                "records": [asdict(e) for e in self.records]}

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        return cls(records=[ManifestEntry(**e) for e in obj["records"]],
                   label_vocabulary=list(obj["label_vocabulary"]),
                   version=str(obj.get("version", MANIFEST_VERSION)))

    def entries(self, split: str | None = None) -> list[ManifestEntry]:
        if split is None:
            return list(self.records)
        return [e for e in self.records if e.split_tag == split]


def entry_for(record: ECGRecord, split_tag: str = "train",
              relative_path: str | None = None) -> ManifestEntry:
    return ManifestEntry(id=record.id,
                         relative_path=relative_path or f"{record.id}.ecgr",
                         num_leads=record.num_leads,
                         num_samples=record.num_samples,
                         sampling_rate_hz=float(record.sampling_rate_hz),
                         labels=sorted(record.labels),
                         split_tag=split_tag,
                         lead_names=list(record.lead_names))


def write_record(record: ECGRecord, root: str | os.PathLike,
                 split_tag: str = "train") -> ManifestEntry:
    entry = entry_for(record, split_tag)
    path = Path(root) / entry.relative_path
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(record.samples, dtype=SAMPLE_DTYPE).tofile(path)
    return entry


def read_record(entry: ManifestEntry, root: str | os.PathLike) -> ECGRecord:
    path = Path(root) / entry.relative_path
    nbytes = path.stat().st_size
    if nbytes % SAMPLE_DTYPE.itemsize:
        raise CorruptFile(f"{path}: {nbytes} bytes is not a whole number of float32 values")
    count = nbytes // SAMPLE_DTYPE.itemsize
    expected = entry.num_leads * entry.num_samples
    if count != expected:
        if entry.num_samples and count % entry.num_samples == 0:
            raise ManifestMismatch(
                f"{path}: holds {count // entry.num_samples} x {entry.num_samples} values, "
                f"manifest says {entry.num_leads} leads")
        raise CorruptFile(f"{path}: holds {count} values, expected {expected}")
    samples = np.fromfile(path, dtype=SAMPLE_DTYPE).reshape(entry.num_leads, entry.num_samples)
    return ECGRecord(id=entry.id, samples=samples.astype(np.float32),
                     lead_names=tuple(entry.lead_names),
                     sampling_rate_hz=entry.sampling_rate_hz,
                     labels=frozenset(entry.labels))


def write_manifest(manifest: DatasetManifest, root: str | os.PathLike) -> Path:
    path = Path(root) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_json(), indent=1), encoding="utf-8")
    return path


def read_manifest(root: str | os.PathLike) -> DatasetManifest:
    path = Path(root) / MANIFEST_NAME
    return DatasetManifest.from_json(json.loads(path.read_text(encoding="utf-8")))


def write_dataset(records: Sequence[ECGRecord], root: str | os.PathLike,
                  split_tags: Sequence[str] | None = None,
                  label_vocabulary: Sequence[str] | None = None) -> DatasetManifest:
    if split_tags is None:
        split_tags = ["train"] * len(records)
    entries = [write_record(r, root, s) for r, s in zip(records, split_tags)]
    if label_vocabulary is None:
        label_vocabulary = sorted({lab for r in records for lab in r.labels})
    manifest = DatasetManifest(records=entries, label_vocabulary=list(label_vocabulary))
    write_manifest(manifest, root)
    return manifest


class Dataset:
    """A dataset directory opened for reading. Records load lazily, in manifest order."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.manifest = read_manifest(self.root)

    def __len__(self) -> int:
        return len(self.manifest.records)

    @property
    def label_vocabulary(self) -> list[str]:
        return self.manifest.label_vocabulary

    def records(self, split: str | None = None) -> list[ECGRecord]:
        return [read_record(e, self.root) for e in self.manifest.entries(split)]

    def has_split(self, split: str) -> bool:
        return any(e.split_tag == split for e in self.manifest.records)


def ingest(src: str | os.PathLike, dst: str | os.PathLike, target_hz: float = 500.0,
           apply_zscore: bool = False) -> DatasetManifest:
    """Sanitize, canonicalize and resample every record of ``src`` into ``dst``."""
    ds = Dataset(src)
    records, tags = [], []
    for entry in ds.manifest.records:
        rec = canonicalize_leads(sanitize(read_record(entry, ds.root)))
        rec = resample(rec, target_hz)
        if apply_zscore:
            rec = zscore(rec)
        records.append(rec)
        tags.append(entry.split_tag)
    return write_dataset(records, dst, tags, ds.label_vocabulary)


# ---------------------------------------------------------------------------
# synthetic dipole generator
# ---------------------------------------------------------------------------

def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _lead_projection() -> np.ndarray:
    # axes: x = patient left, y = inferior, z = anterior
    rows = []
    for deg in (0, 60, 120, -150, -30, 90):            # I II III aVR aVL aVF
        a = np.deg2rad(deg)
        rows.append((np.cos(a), np.sin(a), 0.0))
    tilt = np.deg2rad(10.0)
    for deg in (115, 95, 75, 60, 30, 0):               # V1..V6, horizontal plane
        a = np.deg2rad(deg)
        rows.append((np.cos(a) * np.cos(tilt), np.sin(tilt), np.sin(a) * np.cos(tilt)))
    return np.array([_unit(r) for r in rows])


LEAD_PROJECTION = _lead_projection()

# name: (offset from R peak [s], width [s], dipole amplitude vector [mV])
WAVES = {
    "P": (-0.20, 0.025, (0.10, 0.15, 0.05)),
    "Q": (-0.035, 0.010, (-0.10, -0.10, -0.08)),
    "R": (0.0, 0.012, (1.00, 0.80, 0.40)),
    "S": (0.035, 0.012, (-0.25, -0.20, -0.60)),
    "T": (0.28, 0.060, (0.25, 0.30, 0.20)),
}

# lesion: (offset from R [s], width [s], direction before lead-I attenuation, magnitude [mV])
LESIONS = {
    "st_elev": (0.15, 0.040, (1.0, 0.45, 0.90), 0.30),
    "q_deep": (-0.035, 0.012, (1.0, 0.90, 0.45), -0.45),
    "t_inv": (0.28, 0.060, (1.0, -0.70, -0.70), 0.40),
}
NORMAL_CLASS = "normal"
DEFAULT_CLASSES = ("normal", "st_elev", "q_deep", "t_inv")


@dataclass
class SynthSpec:
    num_records: int = 512
    num_leads: int = 12
    duration_s: float = 10.0
    sampling_rate_hz: float = 500.0
    class_set: list[str] = field(default_factory=lambda: list(DEFAULT_CLASSES))
    noise_std: float = 0.02
    seed: int = 0
    lesion_prob: float = 0.35
    lead_i_attenuation: float = 0.15
    amplitude_jitter: float = 0.3
    axis_jitter: float = 0.1
    width_jitter: float = 0.2
    timing_jitter_s: float = 0.01
    heart_rate_bpm: tuple[float, float] = (50.0, 110.0)
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        if self.num_records <= 0:
            raise ValueError("num_records must be positive")
        if self.num_leads != 12:
            raise ValueError("the synthetic generator produces 12-lead records only")
        if self.duration_s <= 0 or self.sampling_rate_hz <= 0:
            raise ValueError("duration_s and sampling_rate_hz must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        unknown = [c for c in self.class_set if c != NORMAL_CLASS and c not in LESIONS]
        if unknown:
            raise ValueError(f"unknown synthetic classes {unknown}; known: "
                             f"{[NORMAL_CLASS, *LESIONS]}")
        self.heart_rate_bpm = tuple(self.heart_rate_bpm)
        self.split_fractions = tuple(self.split_fractions)

    @property
    def num_samples(self) -> int:
        return int(round(self.duration_s * self.sampling_rate_hz))

    @property
    def lesions(self) -> list[str]:
        return [c for c in self.class_set if c != NORMAL_CLASS]

    def lesion_direction(self, name: str) -> np.ndarray:
        _, _, direction, _ = LESIONS[name]
        d = np.array(direction, dtype=np.float64)
        d[0] *= self.lead_i_attenuation
        return d

    def split_tag(self, index: int) -> str:
        f_train, f_valid, _ = self.split_fractions
        n_train = int(round(f_train * self.num_records))
        n_valid = int(round(f_valid * self.num_records))
        if index < n_train:
            return "train"
        if index < n_train + n_valid:
            return "valid"
        return "test"


def _bumps(t: np.ndarray, centres: np.ndarray, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((t[:, None] - centres[None, :]) / width) ** 2).sum(axis=1)


def synth_dipole(spec: SynthSpec, index: int,
                 labels: Iterable[str] | None = None) -> tuple[np.ndarray, frozenset[str]]:
    """Noise-free dipole trajectory ``[3 x t]`` and label set for record ``index``.

    All per-record randomness comes from ``default_rng([seed, index])``; passing
    ``labels`` overrides the sampled classes without disturbing the jitter.
    """
    rng = np.random.default_rng([spec.seed, index])
    n = spec.num_samples
    t = np.arange(n) / spec.sampling_rate_hz
    rr = 60.0 / rng.uniform(*spec.heart_rate_bpm)
    first_r = rng.uniform(0.0, rr)
    n_beats = int(np.ceil(spec.duration_s / rr)) + 3
    r_peaks = first_r + rr * np.arange(-1, n_beats - 1)
    r_peaks = r_peaks + rng.normal(0.0, 0.02 * rr, size=r_peaks.shape)
    # record-level factors are shared by all axes, so every lead sees them
    widen = 1.0 + spec.width_jitter * rng.uniform(-1.0, 1.0)
    stretch = 1.0 + spec.width_jitter * rng.uniform(-1.0, 1.0)
    d = np.zeros((3, n))
    for _, (offset, width, amp) in WAVES.items():
        gain = (1.0 + spec.amplitude_jitter * rng.uniform(-1.0, 1.0)) * (
            1.0 + spec.axis_jitter * rng.uniform(-1.0, 1.0, size=3))
        shift = rng.normal(0.0, spec.timing_jitter_s)
        d += np.outer(np.asarray(amp) * gain,
                      _bumps(t, r_peaks + offset * stretch + shift, width * widen))
    sampled = frozenset(name for name in spec.lesions if rng.uniform() < spec.lesion_prob)
    if labels is None:
        lesions = sampled
    else:
        lesions = frozenset(labels) - {NORMAL_CLASS}
    for name in spec.lesions:
        if name in lesions:
            offset, width, _, magnitude = LESIONS[name]
            d += np.outer(magnitude * spec.lesion_direction(name),
                          _bumps(t, r_peaks + offset, width))
    out_labels = lesions if lesions else (frozenset({NORMAL_CLASS})
                                          if NORMAL_CLASS in spec.class_set else frozenset())
    return d, out_labels


def synthesize_record(spec: SynthSpec, index: int,
                      labels: Iterable[str] | None = None) -> ECGRecord:
    d, lab = synth_dipole(spec, index, labels)
    samples = LEAD_PROJECTION @ d
    if spec.noise_std > 0:
        noise_rng = np.random.default_rng([spec.seed, index, 1])
        samples = samples + noise_rng.normal(0.0, spec.noise_std, size=samples.shape)
    return ECGRecord(id=f"synth-{spec.seed}-{index:06d}", samples=samples.astype(np.float32),
                     lead_names=CANONICAL_LEADS, sampling_rate_hz=spec.sampling_rate_hz,
                     labels=lab)


def synthesize(spec: SynthSpec) -> list[ECGRecord]:
    return [synthesize_record(spec, i) for i in range(spec.num_records)]


def synthetic_splits(spec: SynthSpec, records: Sequence[ECGRecord] | None = None
                     ) -> dict[str, list[ECGRecord]]:
    """Group generated records by the split tags ``spec`` assigns to their indices."""
    if records is None:
        records = synthesize(spec)
    out: dict[str, list[ECGRecord]] = {s: [] for s in SPLITS}
    for i, rec in enumerate(records):
        out[spec.split_tag(i)].append(rec)
    return out


def generate_synthetic(spec: SynthSpec, out_dir: str | os.PathLike) -> DatasetManifest:
    records = synthesize(spec)
    tags = [spec.split_tag(i) for i in range(spec.num_records)]
    return write_dataset(records, out_dir, tags, list(spec.class_set))


def preprocess(record: ECGRecord, apply_zscore: bool = False) -> ECGRecord:
    """Sanitize and canonicalize, then optionally z-score each lead."""
    rec = canonicalize_leads(sanitize(record))
    return zscore(rec) if apply_zscore else rec


def multi_hot(records: Sequence[ECGRecord], class_names: Sequence[str]) -> np.ndarray:
    return np.array([[name in r.labels for name in class_names] for r in records],
                    dtype=np.float32).reshape(len(records), len(class_names))
