import numpy as np
import pytest

from cardioforge.errors import SignalFormatError, SignalValidationError, StratificationError
from cardioforge.signal_io import (derive_seed, fold_assignment, largest_remainder, load_record, read_manifest,
                                   read_wav, record_digest, rotate_folds, save_record, stratified_kfold,
                                   stratified_split, write_manifest, write_wav)
from cardioforge.state import Label, ManifestEntry, Modality, MultiRecord, Recording


def _subjects(part):
    return {entry.subject_id for entry in part}


def _count(part, label):
    return sum(1 for entry in part if entry.label is label)


def test_read_zero_pcm16(tmp_path):
    path = write_wav(Recording(samples=np.zeros(1000), fs=1000), tmp_path / "zero.wav")
    rec = read_wav(path)
    assert rec.fs == 1000
    assert rec.samples.size == 1000
    assert np.all(rec.samples == 0)


def test_full_scale_positive_reads_below_one(tmp_path):
    square = np.where(np.arange(800) % 80 < 40, 1.0, -1.0)
    rec = read_wav(write_wav(Recording(samples=square, fs=8000), tmp_path / "square.wav"))
    assert rec.samples.max() == pytest.approx(32767 / 32768, abs=0)
    assert rec.samples.min() == -1.0


def test_ramp_pcm16_error_bounded(tmp_path):
    ramp = np.linspace(-1, 1, 4001)
    rec = read_wav(write_wav(Recording(samples=ramp, fs=4000), tmp_path / "ramp.wav"))
    assert np.max(np.abs(rec.samples - ramp)) <= 2 ** -15


def test_float_subtype_keeps_float32_precision(tmp_path):
    samples = np.random.default_rng(0).uniform(-1, 1, 500)
    rec = read_wav(write_wav(Recording(samples=samples, fs=4125), tmp_path / "f.wav", subtype="FLOAT"))
    np.testing.assert_allclose(rec.samples, samples.astype(np.float32), rtol=0, atol=0)


def test_truncated_file_is_format_error(tmp_path):
    path = write_wav(Recording(samples=np.full(1000, 0.5), fs=1000), tmp_path / "t.wav")
    raw = path.read_bytes()
    path.write_bytes(raw[:-200])
    with pytest.raises(SignalFormatError):
        read_wav(path)


def test_not_a_wav_is_format_error(tmp_path):
    path = tmp_path / "junk.wav"
    path.write_bytes(b"definitely not audio")
    with pytest.raises(SignalFormatError):
        read_wav(path)


def test_nan_sample_rejected():
    with pytest.raises(SignalValidationError):
        Recording(samples=np.array([0.0, np.nan]), fs=1000)


def test_non_integer_rate_cannot_be_written(tmp_path):
    with pytest.raises(SignalValidationError):
        write_wav(Recording(samples=np.zeros(10), fs=4125.5), tmp_path / "x.wav")


def test_save_and_load_record(tmp_path):
    pcg = Recording(samples=np.linspace(-0.5, 0.5, 2000), fs=2000, modality=Modality.PCG)
    ecg = Recording(samples=np.linspace(0.5, -0.5, 2000), fs=2000, modality=Modality.ECG)
    mrec = MultiRecord(subject_id="a01", label=Label.ABNORMAL, channels=(pcg, ecg), dataset="demo",
                       provenance={"record_id": "a01"})
    entry = save_record(mrec, tmp_path)
    assert entry.paths == ["a01/a01_PCG_ch0.wav", "a01/a01_ECG_ch1.wav"]
    manifest = write_manifest([entry], tmp_path / "manifest.jsonl")
    [loaded_entry] = read_manifest(manifest)
    loaded = load_record(loaded_entry, tmp_path)
    assert loaded.label is Label.ABNORMAL
    assert loaded.modalities == [Modality.PCG, Modality.ECG]
    np.testing.assert_allclose(loaded.channels[1].samples, ecg.samples, atol=1e-7)


def test_record_digest_changes_with_samples():
    base = MultiRecord(subject_id="x", label=Label.NORMAL, channels=(Recording(samples=np.zeros(10), fs=100),))
    other = base.with_channels((Recording(samples=np.ones(10) * 0.1, fs=100),))
    assert record_digest(base) == record_digest(base)
    assert record_digest(base) != record_digest(other)


def test_largest_remainder():
    assert largest_remainder(405, [0.6, 0.2, 0.2]) == [243, 81, 81]
    assert largest_remainder(8, [3, 1]) == [6, 2]
    assert largest_remainder(10, [1, 1, 1]) == [4, 3, 3]
    assert sum(largest_remainder(157, [1] * 7)) == 157


def test_split_405_subjects(make_entries):
    entries = make_entries(117, 288)
    train, val, test = stratified_split(entries, (0.6, 0.2, 0.2), seed=3)
    assert (len(train), len(val), len(test)) == (243, 81, 81)
    for part, fraction in ((train, 0.6), (val, 0.2), (test, 0.2)):
        assert abs(_count(part, Label.ABNORMAL) - 288 * fraction) <= 1
        assert abs(_count(part, Label.NORMAL) - 117 * fraction) <= 1
    assert not (_subjects(train) & _subjects(val) or _subjects(train) & _subjects(test) or _subjects(val) & _subjects(test))


def test_split_is_deterministic(make_entries):
    entries = make_entries(10, 10)
    assert stratified_split(entries, seed=5) == stratified_split(entries, seed=5)


def test_split_single_class_fails(make_entries):
    with pytest.raises(StratificationError):
        stratified_split(make_entries(10, 0))


def test_split_keeps_subject_entries_together(make_entries):
    entries = make_entries(5, 5)
    entries += [entries[0].model_copy(update={"paths": ["extra.wav"]})]
    train, val, test = stratified_split(entries, seed=1)
    holders = [part for part in (train, val, test) if entries[0].subject_id in _subjects(part)]
    assert len(holders) == 1
    assert sum(1 for e in holders[0] if e.subject_id == entries[0].subject_id) == 2


def test_kfold_157_subjects(make_entries):
    folds = stratified_kfold(make_entries(61, 96), k=7, seed=0)
    assert sorted(len(fold) for fold in folds) == [22, 22, 22, 22, 23, 23, 23]
    assert all(_count(fold, Label.ABNORMAL) in (13, 14) for fold in folds)
    seen = [_subjects(fold) for fold in folds]
    assert sum(len(s) for s in seen) == len(set().union(*seen)) == 157


def test_kfold_balanced_14(make_entries):
    folds = stratified_kfold(make_entries(7, 7), k=7, seed=2)
    assert all(_count(f, Label.NORMAL) == 1 and _count(f, Label.ABNORMAL) == 1 for f in folds)


@pytest.mark.parametrize("k", [0, 1])
def test_kfold_rejects_small_k(make_entries, k):
    with pytest.raises(StratificationError):
        stratified_kfold(make_entries(7, 7), k=k)


def test_rotation_assignments_are_distinct(make_entries):
    folds = stratified_kfold(make_entries(14, 14), k=7, seed=0)
    pairs = set()
    for train, val, test in rotate_folds(folds):
        pairs.add((frozenset(_subjects(test)), frozenset(_subjects(val))))
        assert not (_subjects(train) & _subjects(val)) and not (_subjects(train) & _subjects(test))
        assert len(_subjects(train)) + len(_subjects(val)) + len(_subjects(test)) == 28
    assert len(pairs) == 7
    _, val, test = fold_assignment(folds, 6)
    assert _subjects(test) == _subjects(folds[6]) and _subjects(val) == _subjects(folds[0])


def test_derive_seed_is_stable_and_key_sensitive():
    assert derive_seed(7, "a", 1) == derive_seed(7, "a", 1)
    assert derive_seed(7, "a", 1) != derive_seed(7, "a", 2)
    assert 0 <= derive_seed(0, "x") < 2 ** 63


def test_kfold_accepts_derived_seeds(make_entries):
    seed = derive_seed(0, "kfold", "0")
    assert seed >= 2 ** 32
    folds = stratified_kfold(make_entries(7, 7), k=7, seed=seed)
    assert [len(fold) for fold in folds] == [2] * 7
    again = stratified_kfold(make_entries(7, 7), k=7, seed=seed)
    assert [_subjects(f) for f in folds] == [_subjects(f) for f in again]
