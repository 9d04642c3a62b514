import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from leadalign.ecg_store import (
    CANONICAL_LEADS, LEAD_PROJECTION, LESIONS, Dataset, ECGRecord, SynthSpec,
    canonicalize_leads, generate_synthetic, ingest, read_manifest, read_record, resample,
    sanitize, synth_dipole, synthesize, synthesize_record, write_dataset, write_record, zscore)
from leadalign.errors import CorruptFile, EmptyRecord, ManifestMismatch, UnknownLead


def rec(samples, leads=None, **kw):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[None]
    leads = leads or CANONICAL_LEADS[:samples.shape[0]]
    return ECGRecord("r", samples, leads, **kw)


# -- sanitize ---------------------------------------------------------------

def test_sanitize_replaces_nan_and_inf():
    out = sanitize(rec([1.0, np.nan, np.inf, -2.0]))
    assert out.samples.tolist() == [[1.0, 0.0, 0.0, -2.0]]


def test_sanitize_negative_inf_and_all_nan_row():
    out = sanitize(rec([[np.nan, np.nan], [-np.inf, 3.0]]))
    assert out.samples.tolist() == [[0.0, 0.0], [0.0, 3.0]]


def test_sanitize_finite_record_unchanged():
    x = np.random.default_rng(0).normal(size=(12, 50))
    assert np.array_equal(sanitize(rec(x)).samples, x)


# -- canonical lead order ---------------------------------------------------

def test_canonicalize_swaps_rows():
    x = np.arange(24.0).reshape(12, 2)
    leads = ("II", "I") + CANONICAL_LEADS[2:]
    out = canonicalize_leads(ECGRecord("r", x, leads))
    assert out.lead_names == CANONICAL_LEADS
    assert np.array_equal(out.samples[0], x[1])
    assert np.array_equal(out.samples[1], x[0])
    assert np.array_equal(out.samples[2:], x[2:])


def test_canonicalize_identity_and_subset():
    x = np.random.default_rng(1).normal(size=(12, 8))
    assert np.array_equal(canonicalize_leads(rec(x)).samples, x)
    sub = ECGRecord("r", x[:3], ("V6", "aVF", "I"))
    out = canonicalize_leads(sub)
    assert out.lead_names == ("I", "aVF", "V6")
    assert np.array_equal(out.samples, x[:3][[2, 1, 0]])


def test_canonicalize_unknown_lead():
    with pytest.raises(UnknownLead):
        canonicalize_leads(ECGRecord("r", np.zeros((2, 4)), ("I", "X9")))


# -- zscore -----------------------------------------------------------------

def test_zscore_population_std():
    out = zscore(rec([1.0, 2.0, 3.0])).samples[0]
    # population std of [1, 2, 3] is sqrt(2/3)
    expected = np.array([-1.0, 0.0, 1.0]) / np.sqrt(2.0 / 3.0)
    np.testing.assert_allclose(out, expected, atol=1e-12)
    assert out[2] == pytest.approx(1.224744871391589, abs=1e-12)


def test_zscore_constant_row_and_fixed_point():
    assert zscore(rec([5.0, 5.0, 5.0])).samples.tolist() == [[0.0, 0.0, 0.0]]
    once = zscore(rec(np.random.default_rng(2).normal(3.0, 2.0, size=(2, 100))))
    np.testing.assert_allclose(zscore(once).samples, once.samples, atol=1e-6)


# -- resample ---------------------------------------------------------------

def test_resample_identity():
    r = rec(np.random.default_rng(3).normal(size=(12, 20)), sampling_rate_hz=500.0)
    assert np.array_equal(resample(r, 500.0).samples, r.samples)


def test_resample_linear_upsample():
    out = resample(rec([0.0, 1.0], sampling_rate_hz=2.0), 4.0)
    np.testing.assert_allclose(out.samples[0], [0.0, 1 / 3, 2 / 3, 1.0], atol=1e-12)
    assert out.sampling_rate_hz == 4.0


def test_resample_length_and_endpoints():
    x = np.random.default_rng(4).normal(size=(2, 1000))
    out = resample(rec(x, sampling_rate_hz=360.0), 500.0)
    assert out.num_samples == round(1000 * 500 / 360)
    assert np.array_equal(out.samples[:, 0], x[:, 0])
    assert np.array_equal(out.samples[:, -1], x[:, -1])


def test_resample_single_sample_is_error():
    with pytest.raises(EmptyRecord):
        resample(rec([1.0]), 250.0)


# -- file format ------------------------------------------------------------

def test_round_trip(tmp_path):
    x = np.random.default_rng(5).normal(size=(12, 300))
    r = ECGRecord("abc", x, CANONICAL_LEADS, 500.0, {"st_elev"})
    entry = write_record(r, tmp_path, "valid")
    back = read_record(entry, tmp_path)
    assert np.array_equal(back.samples, x.astype(np.float32))
    assert back.lead_names == r.lead_names and back.labels == r.labels
    assert back.sampling_rate_hz == 500.0


def test_file_is_raw_little_endian_float32(tmp_path):
    x = np.arange(24, dtype=np.float32).reshape(12, 2)
    entry = write_record(ECGRecord("raw", x), tmp_path)
    raw = (tmp_path / entry.relative_path).read_bytes()
    assert raw == x.astype("<f4").tobytes()
    assert len(raw) == 12 * 2 * 4


def test_truncated_file_is_corrupt(tmp_path):
    entry = write_record(ECGRecord("t", np.ones((12, 10))), tmp_path)
    path = tmp_path / entry.relative_path
    path.write_bytes(path.read_bytes()[:-6])
    with pytest.raises(CorruptFile):
        read_record(entry, tmp_path)


def test_lead_count_disagreement_is_manifest_mismatch(tmp_path):
    entry = write_record(ECGRecord("m", np.ones((12, 10))), tmp_path)
    path = tmp_path / entry.relative_path
    path.write_bytes(np.ones((11, 10), dtype="<f4").tobytes())
    with pytest.raises(ManifestMismatch):
        read_record(entry, tmp_path)


def test_dataset_manifest_json(tmp_path):
    recs = synthesize(SynthSpec(num_records=5, duration_s=1.0))
    write_dataset(recs, tmp_path, ["train", "train", "valid", "test", "test"], ["normal", "t_inv"])
    raw = json.loads((tmp_path / "manifest.json").read_text())
    assert raw["label_vocabulary"] == ["normal", "t_inv"]
    assert {"id", "relative_path", "num_leads", "num_samples", "sampling_rate_hz", "labels",
            "split_tag"} <= set(raw["records"][0])
    ds = Dataset(tmp_path)
    assert len(ds) == 5 and len(ds.records("test")) == 2


def test_bad_split_tag_rejected(tmp_path):
    write_dataset(synthesize(SynthSpec(num_records=1, duration_s=1.0)), tmp_path)
    raw = json.loads((tmp_path / "manifest.json").read_text())
    raw["records"][0]["split_tag"] = "holdout"
    (tmp_path / "manifest.json").write_text(json.dumps(raw))
    with pytest.raises(ManifestMismatch):
        read_manifest(tmp_path)


def test_ingest_pipeline(tmp_path):
    x = np.random.default_rng(6).normal(size=(12, 250))
    x[3, 7] = np.nan
    leads = CANONICAL_LEADS[::-1]
    write_dataset([ECGRecord("in", x, leads, 250.0)], tmp_path / "src")
    ingest(tmp_path / "src", tmp_path / "dst", target_hz=500.0)
    out = Dataset(tmp_path / "dst").records()[0]
    assert out.lead_names == CANONICAL_LEADS
    assert out.sampling_rate_hz == 500.0 and out.num_samples == 500
    assert np.isfinite(out.samples).all()


# -- synthetic generator ----------------------------------------------------

def test_projection_rows_unit_norm_and_lead_i():
    np.testing.assert_allclose(np.linalg.norm(LEAD_PROJECTION, axis=1), 1.0, atol=1e-12)
    assert LEAD_PROJECTION[0].tolist() == [1.0, 0.0, 0.0]
    assert np.linalg.matrix_rank(LEAD_PROJECTION) == 3


def test_synthetic_deterministic():
    spec = SynthSpec(num_records=3, duration_s=2.0, noise_std=0.0, seed=11)
    a, b = synthesize(spec), synthesize(spec)
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.samples, rb.samples) and ra.labels == rb.labels
    noisy = SynthSpec(num_records=2, duration_s=2.0, noise_std=0.05, seed=11)
    assert np.array_equal(synthesize(noisy)[1].samples, synthesize(noisy)[1].samples)


def test_lead_i_is_dipole_x():
    spec = SynthSpec(num_records=1, duration_s=2.0, noise_std=0.0, seed=3)
    d, _ = synth_dipole(spec, 0)
    r = synthesize_record(spec, 0)
    assert np.array_equal(r.samples[0], d[0].astype(np.float32))


def test_noise_free_records_have_rank_at_most_three():
    spec = SynthSpec(num_records=4, duration_s=2.0, noise_std=0.0, seed=5)
    for r in synthesize(spec):
        assert np.linalg.matrix_rank(r.samples.astype(np.float64), tol=1e-4) <= 3


def test_st_elevation_offset_in_designated_lead():
    spec = SynthSpec(num_records=1, duration_s=4.0, noise_std=0.0, seed=9,
                     sampling_rate_hz=500.0)
    normal = synthesize_record(spec, 0, labels={"normal"})
    st_rec = synthesize_record(spec, 0, labels={"st_elev"})
    assert normal.labels == {"normal"} and st_rec.labels == {"st_elev"}
    offset_s, width_s, _, magnitude = LESIONS["st_elev"]
    proj = LEAD_PROJECTION @ spec.lesion_direction("st_elev")
    lead = int(np.argmax(proj))
    # independent evaluation: the lesion adds magnitude * proj * gaussian(width) at each
    # beat; average the difference over a +/-10 ms window around one bump centre
    t = np.arange(normal.num_samples) / spec.sampling_rate_hz
    diff_trace = st_rec.samples[lead].astype(np.float64) - normal.samples[lead]
    centre_idx = int(np.argmax(np.abs(diff_trace)))
    window = np.abs(t - t[centre_idx]) <= 0.01
    diff = diff_trace[window].mean()
    gauss = np.exp(-0.5 * ((t[window] - t[centre_idx]) / width_s) ** 2).mean()
    expected = magnitude * proj[lead] * gauss
    assert diff == pytest.approx(expected, rel=1e-3)
    # lead I sees only the attenuated x component
    diff_i = (st_rec.samples[0] - normal.samples[0])[window].mean()
    assert abs(diff_i) < 0.3 * abs(diff)


def test_split_tags(tmp_path):
    spec = SynthSpec(num_records=20, duration_s=1.0)
    manifest = generate_synthetic(spec, tmp_path)
    tags = [e.split_tag for e in manifest.records]
    assert tags.count("train") == 14 and tags.count("valid") == 3 and tags.count("test") == 3
    assert manifest.label_vocabulary == list(spec.class_set)


# -- properties (1,000+ random records each) --------------------------------

finite = st.floats(-50, 50, allow_nan=False, width=32)
any_float = st.one_of(finite, st.just(np.nan), st.just(np.inf), st.just(-np.inf))
matrices = hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1,
                                                   max_side=12), elements=any_float)


@settings(max_examples=1000, deadline=None)
@given(matrices)
def test_sanitize_idempotent_property(x):
    leads = CANONICAL_LEADS[:x.shape[0]]
    once = sanitize(ECGRecord("p", x, leads))
    assert np.isfinite(once.samples).all()
    assert np.array_equal(sanitize(once).samples, once.samples)
    ok = np.isfinite(x)
    assert np.array_equal(once.samples[ok], x[ok])


@settings(max_examples=1000, deadline=None)
@given(st.permutations(range(12)), st.integers(1, 20), st.integers(0, 2**31))
def test_canonicalize_property(perm, t, seed):
    x = np.random.default_rng(seed).normal(size=(12, t))
    leads = tuple(CANONICAL_LEADS[i] for i in perm)
    out = canonicalize_leads(ECGRecord("p", x, leads))
    assert out.lead_names == CANONICAL_LEADS
    for row, name in zip(x, leads):
        assert np.array_equal(out.samples[CANONICAL_LEADS.index(name)], row)
    again = canonicalize_leads(out)
    assert np.array_equal(again.samples, out.samples)


@settings(max_examples=1000, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(2, 64)),
                  elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_zscore_property(x):
    out = zscore(ECGRecord("p", x, CANONICAL_LEADS[:x.shape[0]])).samples
    assert np.all(np.abs(out.mean(axis=1)) < 1e-6)
    std_in = x.std(axis=1)
    std_out = out.std(axis=1)
    for s_in, s_out in zip(std_in, std_out):
        if s_in > 1e-8:
            assert abs(s_out - 1.0) < 1e-6
        else:
            assert s_out <= s_in + 1e-12


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 12), st.integers(1, 40), st.integers(0, 2**31))
def test_read_write_round_trip_property(tmp_path_factory, leads, t, seed):
    root = tmp_path_factory.mktemp("rt", numbered=True)
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=rng.uniform(0.01, 100), size=(leads, t))
    r = ECGRecord(f"p{seed}", x, CANONICAL_LEADS[:leads], float(rng.uniform(50, 1000)),
                  {"a"} if seed % 2 else set())
    back = read_record(write_record(r, root), root)
    assert np.array_equal(back.samples, x.astype(np.float32))
    assert back.lead_names == r.lead_names and back.labels == r.labels
    assert back.sampling_rate_hz == r.sampling_rate_hz


@settings(max_examples=300, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 50)),
                  elements=st.floats(-100, 100, allow_nan=False)),
       st.sampled_from([100.0, 250.0, 360.0, 1000.0]))
def test_resample_endpoint_property(x, target):
    r = ECGRecord("p", x, CANONICAL_LEADS[:x.shape[0]], 500.0)
    try:
        out = resample(r, target)
    except EmptyRecord:
        return
    assert np.array_equal(out.samples[:, 0], x[:, 0])
    assert np.array_equal(out.samples[:, -1], x[:, -1])
