"""WAV and manifest I/O, plus subject-level stratified splitting."""
import hashlib
import logging
import struct
import warnings
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy.io import wavfile
from sklearn.model_selection import StratifiedKFold

from cardioforge.errors import (ArtifactIOError, SignalFormatError, SignalValidationError,
                                StratificationError, UnsupportedFormatError)
from cardioforge.state import Label, ManifestEntry, Modality, MultiRecord, Recording

logger = logging.getLogger(__name__)

PCM16_SCALE = 32768.0

PathLike = Union[str, Path]


def _declared_data_size(raw: bytes) -> tuple[int, int]:
    """Walk the RIFF chunks; return (data offset, declared data size)."""
    if len(raw) < 12 or raw[:4] not in (b"RIFF", b"RF64") or raw[8:12] != b"WAVE":
        raise SignalFormatError("Not a RIFF/WAVE file")
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        if chunk_id == b"data":
            return pos + 8, size
        pos += 8 + size + (size & 1)
    raise SignalFormatError("WAV file has no data chunk")


def read_wav(path: PathLike, modality: Modality = Modality.PCG, channel_site: Optional[str] = None) -> Recording:
    """
    Read a mono PCM16 or IEEE-float32 WAV file.

    PCM16 samples are scaled by 1/32768, so full-scale positive 32767 reads
    as 0.99997 and -32768 as exactly -1.

    Args:
        path: WAV file path.
        modality: Modality tag for the returned recording.
        channel_site: Optional auscultation-site tag.

    Returns:
        Recording: Samples in [-1, 1] with fs from the header.

    Raises:
        SignalFormatError: Malformed header or truncated data chunk.
        UnsupportedFormatError: Multichannel file or unsupported sample type.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ArtifactIOError(f"Cannot read {path}: {e}", path=str(path)) from e

    data_offset, declared = _declared_data_size(raw)
    if data_offset + declared > len(raw):
        raise SignalFormatError(
            f"Truncated WAV data chunk in {path}: header declares {declared} bytes, "
            f"{len(raw) - data_offset} present", path=str(path))

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", wavfile.WavFileWarning)
            fs, data = wavfile.read(path)
    except (ValueError, wavfile.WavFileWarning) as e:
        raise SignalFormatError(f"Malformed WAV file {path}: {e}", path=str(path)) from e

    if data.ndim != 1:
        raise UnsupportedFormatError(f"{path} has {data.shape[1]} channels; store one file per channel",
                                     path=str(path))
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / PCM16_SCALE
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedFormatError(f"{path} has unsupported sample type {data.dtype}", path=str(path))
    if samples.size == 0:
        raise SignalFormatError(f"{path} contains no samples", path=str(path))

    logger.debug(f"Read {path}: {samples.size} samples at {fs} Hz")
    return Recording(samples=samples, fs=float(fs), modality=modality, channel_site=channel_site)


def write_wav(rec: Recording, path: PathLike, subtype: str = "PCM_16") -> Path:
    """
    Write a recording as a mono WAV file.

    Args:
        rec: Recording to write; samples outside [-1, 1] are clipped for PCM16.
        path: Destination path (parent directories are created).
        subtype: ``PCM_16`` or ``FLOAT``.

    Returns:
        Path: The written path.
    """
    samples = np.asarray(rec.samples, dtype=np.float64)
    if not np.all(np.isfinite(samples)):
        raise SignalValidationError("Cannot write non-finite samples")
    if rec.fs != int(rec.fs):
        raise SignalValidationError(f"WAV needs an integer sample rate, got {rec.fs}")

    if subtype == "PCM_16":
        data = np.clip(np.round(samples * PCM16_SCALE), -32768, 32767).astype(np.int16)
    elif subtype == "FLOAT":
        data = samples.astype(np.float32)
    else:
        raise UnsupportedFormatError(f"Unsupported WAV subtype: {subtype}")

    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        wavfile.write(path, int(rec.fs), data)
    except OSError as e:
        raise ArtifactIOError(f"Cannot write {path}: {e}", path=str(path)) from e
    logger.debug(f"Wrote {path} ({subtype}, {samples.size} samples)")
    return path


def read_manifest(path: PathLike) -> list[ManifestEntry]:
    """Read a JSON-lines manifest."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ArtifactIOError(f"Cannot read manifest {path}: {e}", path=str(path)) from e
    return [ManifestEntry.model_validate_json(line) for line in lines if line.strip()]


def write_manifest(entries: Iterable[ManifestEntry], path: PathLike) -> Path:
    """Write a JSON-lines manifest, one entry per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for entry in entries:
            handle.write(entry.model_dump_json() + "\n")
    return path


def load_record(entry: ManifestEntry, root: PathLike) -> MultiRecord:
    """Load every channel of a manifest entry into a MultiRecord."""
    root = Path(root)
    sites = entry.sites or [None] * len(entry.paths)
    channels = [
        read_wav(root / rel_path, modality=modality, channel_site=site)
        for rel_path, modality, site in zip(entry.paths, entry.modalities, sites)
    ]
    return MultiRecord(
        subject_id=entry.subject_id,
        label=entry.label,
        channels=tuple(channels),
        source=entry.source,
        generator_tag=entry.generator_tag,
        dataset=entry.dataset,
        provenance=dict(entry.provenance),
    )


def save_record(mrec: MultiRecord, out_dir: PathLike, dataset: Optional[str] = None,
                subtype: str = "FLOAT") -> ManifestEntry:
    """Write each channel of a MultiRecord to ``out_dir`` and return its manifest entry."""
    out_dir = Path(out_dir)
    # Augmented and synthetic copies share a subject id but carry their own record id
    stem = str(mrec.provenance.get("record_id", mrec.subject_id))
    paths = []
    for index, channel in enumerate(mrec.channels):
        site = channel.channel_site or f"ch{index}"
        rel_path = Path(mrec.subject_id) / f"{stem}_{channel.modality.value}_{site}.wav"
        write_wav(channel, out_dir / rel_path, subtype=subtype)
        paths.append(rel_path.as_posix())
    return ManifestEntry(
        paths=paths,
        subject_id=mrec.subject_id,
        label=mrec.label,
        dataset=dataset or mrec.dataset,
        modalities=mrec.modalities,
        sites=mrec.sites,
        source=mrec.source,
        generator_tag=mrec.generator_tag,
        provenance=mrec.provenance,
    )


def record_digest(mrec: MultiRecord) -> str:
    """SHA-256 over the subject id and every channel's samples and rate."""
    digest = hashlib.sha256(mrec.subject_id.encode("utf-8"))
    for channel in mrec.channels:
        digest.update(struct.pack("<d", channel.fs))
        digest.update(np.ascontiguousarray(channel.samples, dtype="<f8").tobytes())
    return digest.hexdigest()


def _subjects_by_label(entries: Sequence[ManifestEntry]) -> dict[Label, list[str]]:
    labels: dict[str, Label] = {}
    for entry in entries:
        previous = labels.setdefault(entry.subject_id, entry.label)
        if previous != entry.label:
            raise StratificationError(f"Subject {entry.subject_id} has conflicting labels",
                                      subject_id=entry.subject_id)
    by_label: dict[Label, list[str]] = defaultdict(list)
    for subject_id in sorted(labels):
        by_label[labels[subject_id]].append(subject_id)
    return dict(by_label)


def largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    """Split ``total`` into integer parts proportional to ``ratios`` (largest-remainder rounding)."""
    weights = np.asarray(ratios, dtype=np.float64)
    quotas = total * weights / weights.sum()
    counts = np.floor(quotas).astype(int)
    remainders = quotas - counts
    # Stable sort keeps earlier partitions first on ties
    for index in np.argsort(-remainders, kind="stable")[: total - counts.sum()]:
        counts[index] += 1
    return counts.tolist()


def _allocate(class_sizes: dict[Label, int], ratios: Sequence[float]) -> dict[Label, list[int]]:
    """Per-class partition counts that honour both overall and per-class largest-remainder targets."""
    totals = largest_remainder(sum(class_sizes.values()), ratios)
    weights = np.asarray(ratios, dtype=np.float64) / np.sum(ratios)
    allocation = {}
    leftovers = {}
    candidates = []
    for label, size in class_sizes.items():
        quotas = size * weights
        floors = np.floor(quotas).astype(int)
        allocation[label] = floors
        leftovers[label] = size - int(floors.sum())
        candidates += [(-(quotas[p] - floors[p]), p, label.value, label) for p in range(len(ratios))]
    deficits = np.asarray(totals) - sum(allocation.values())

    for _, part, _, label in sorted(candidates, key=lambda item: item[:3]):
        if leftovers[label] > 0 and deficits[part] > 0:
            allocation[label][part] += 1
            leftovers[label] -= 1
            deficits[part] -= 1
    for label in allocation:
        while leftovers[label] > 0:
            part = int(np.argmax(deficits))
            logger.warning(f"Largest-remainder allocation fell back for class {label.value}, partition {part}")
            allocation[label][part] += 1
            leftovers[label] -= 1
            deficits[part] -= 1
    return {label: counts.tolist() for label, counts in allocation.items()}


def _expand(entries: Sequence[ManifestEntry], subjects: set[str]) -> list[ManifestEntry]:
    return [entry for entry in entries if entry.subject_id in subjects]


def stratified_split(entries: Sequence[ManifestEntry], ratios: Sequence[float] = (0.6, 0.2, 0.2),
                     seed: int = 0) -> tuple[list[ManifestEntry], list[ManifestEntry], list[ManifestEntry]]:
    """
    Subject-disjoint stratified train/validation/test split.

    Partition sizes follow largest-remainder rounding of the subject count;
    per-class counts stay within one subject of their proportional target.

    Args:
        entries: Manifest entries (several entries may share a subject).
        ratios: Train/validation/test proportions, summing to 1.
        seed: Shuffle seed.

    Returns:
        tuple: (train, val, test) entry lists, each in input order.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not np.isclose(sum(ratios), 1.0):
        raise StratificationError(f"Split ratios must be three non-negative values summing to 1, got {ratios}")
    by_label = _subjects_by_label(entries)
    if len(by_label) < 2:
        raise StratificationError("Stratified split needs subjects from both classes")
    for label, subjects in by_label.items():
        if len(subjects) < 3:
            raise StratificationError(f"Class {label.value} has {len(subjects)} subjects; at least 3 are needed",
                                      label=label.value)

    allocation = _allocate({label: len(subjects) for label, subjects in by_label.items()}, ratios)
    rng = np.random.default_rng(seed)
    partitions: list[set[str]] = [set(), set(), set()]
    for label in sorted(by_label, key=lambda lab: lab.value):
        shuffled = list(rng.permutation(by_label[label]))
        start = 0
        for part, count in enumerate(allocation[label]):
            partitions[part].update(shuffled[start:start + count])
            start += count

    train, val, test = (_expand(entries, part) for part in partitions)
    logger.info(f"Stratified split: {len(partitions[0])}/{len(partitions[1])}/{len(partitions[2])} subjects")
    return train, val, test


def stratified_kfold(entries: Sequence[ManifestEntry], k: int = 7, seed: int = 0) -> list[list[ManifestEntry]]:
    """
    Subject-disjoint stratified k-fold partition.

    Fold sizes differ by at most one subject and each fold's class counts are
    within one subject of the global proportion.
    """
    if not isinstance(k, (int, np.integer)) or k < 2:
        raise StratificationError(f"k must be an integer >= 2, got {k}")
    by_label = _subjects_by_label(entries)
    for label, subjects in by_label.items():
        if len(subjects) < k:
            raise StratificationError(f"Class {label.value} has {len(subjects)} subjects, fewer than k={k}",
                                      label=label.value)

    subjects = np.array([subject for label in sorted(by_label, key=lambda lab: lab.value)
                         for subject in by_label[label]])
    labels = np.array([label.index for label in sorted(by_label, key=lambda lab: lab.value)
                       for _ in by_label[label]])
    # sklearn seeds must fit in 32 bits; derived seeds are 63-bit
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=int(seed) % 2**32)
    folds = []
    for _, test_index in splitter.split(subjects, labels):
        folds.append(_expand(entries, set(subjects[test_index])))
    logger.info(f"Stratified {k}-fold: fold sizes {[len({e.subject_id for e in fold}) for fold in folds]}")
    return folds


def fold_assignment(folds: Sequence[Sequence[ManifestEntry]], index: int
                    ) -> tuple[list[ManifestEntry], list[ManifestEntry], list[ManifestEntry]]:
    """Rotation rule: fold ``index`` is test, fold ``index + 1`` (mod k) validation, the rest train."""
    k = len(folds)
    test_fold, val_fold = index % k, (index + 1) % k
    train = [entry for i, fold in enumerate(folds) if i not in (test_fold, val_fold) for entry in fold]
    return train, list(folds[val_fold]), list(folds[test_fold])


def rotate_folds(folds: Sequence[Sequence[ManifestEntry]]):
    """All k (train, val, test) assignments of the rotation rule."""
    return [fold_assignment(folds, index) for index in range(len(folds))]


def derive_seed(master_seed: int, *keys) -> int:
    """Order-independent child seed from a master seed and identifying keys (e.g. subject id, copy index)."""
    material = ":".join([str(master_seed), *(str(key) for key in keys)]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(material).digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
