import numpy as np

from cardioforge.fixtures import MANIFEST_NAME, FixtureConfig, make_fixture_dataset, make_fixture_records
from cardioforge.signal_io import load_record, read_manifest
from cardioforge.state import Label, Modality


def _band_fraction(x: np.ndarray, fs: float, low: float, high: float) -> float:
    power = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(x.size, 1 / fs)
    return float(power[(freqs >= low) & (freqs <= high)].sum() / power.sum())


def test_fixture_records_are_balanced(small_fixture_cfg):
    records = make_fixture_records(small_fixture_cfg, seed=0)
    assert [r.label for r in records] == [Label.NORMAL, Label.NORMAL, Label.ABNORMAL, Label.ABNORMAL]
    assert len({r.subject_id for r in records}) == 4
    for mrec in records:
        assert mrec.modalities == [Modality.PCG, Modality.ECG]
        assert all(len(ch) == 10000 and ch.fs == 2000.0 for ch in mrec.channels)
        assert all(np.isclose(np.max(np.abs(ch.samples)), 0.9) for ch in mrec.channels)


def test_fixture_records_are_seeded(small_fixture_cfg):
    first = make_fixture_records(small_fixture_cfg, seed=5)
    again = make_fixture_records(small_fixture_cfg, seed=5)
    other = make_fixture_records(small_fixture_cfg, seed=6)
    assert all(np.array_equal(a.channels[0].samples, b.channels[0].samples) for a, b in zip(first, again))
    assert not np.array_equal(first[0].channels[0].samples, other[0].channels[0].samples)


def test_abnormal_subjects_carry_murmur_energy():
    cfg = FixtureConfig(n_subjects=2, duration_s=8.0, fs=2000, include_ecg=False)
    normal, abnormal = make_fixture_records(cfg, seed=0)
    normal_fraction = _band_fraction(normal.channels[0].samples, 2000.0, 150.0, 300.0)
    abnormal_fraction = _band_fraction(abnormal.channels[0].samples, 2000.0, 150.0, 300.0)
    assert abnormal_fraction > 5 * normal_fraction


def test_multichannel_fixtures_have_one_channel_per_site():
    cfg = FixtureConfig(n_subjects=3, duration_s=2.0, fs=2000, sites=["aortic", "mitral"], abnormal_fraction=1 / 3)
    records = make_fixture_records(cfg, seed=1)
    assert [r.label for r in records].count(Label.ABNORMAL) == 1
    for mrec in records:
        assert mrec.sites == ["aortic", "mitral"]
        assert mrec.modalities == [Modality.PCG, Modality.PCG]


def test_fixture_dataset_on_disk(tmp_path, small_fixture_cfg):
    manifest, entries = make_fixture_dataset(tmp_path, small_fixture_cfg, seed=0)
    assert manifest == tmp_path / MANIFEST_NAME
    assert read_manifest(manifest) == entries
    originals = make_fixture_records(small_fixture_cfg, seed=0)
    loaded = load_record(entries[2], tmp_path)
    assert loaded.label is Label.ABNORMAL
    for saved, original in zip(loaded.channels, originals[2].channels):
        assert np.max(np.abs(saved.samples - original.samples)) <= 1 / 32768 + 1e-9
