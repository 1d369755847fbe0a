"""Pipeline nodes: one ``cmd_*`` function per CLI command, each reading and returning a RunState."""
import json
import logging
import shutil
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

import pandas as pd
from joblib import Parallel, delayed

from cardioforge import dsp
from cardioforge.augment import default_noise_bank, make_augmented_dataset
from cardioforge.create_model import RunConfig, create_classifier, create_denoiser, create_noise_schedule
from cardioforge.diffusion import build_synthetic_corpus, load_denoiser, make_training_examples, save_denoiser, train_denoiser
from cardioforge.errors import CardioforgeError, ConfigError, EvaluationError
from cardioforge.evaluate import (evaluate_predictions, predict_fragments, predictions_table, report, report_from_dict,
                                  roc, roc_from_frame, roc_to_frame)
from cardioforge.fixtures import MANIFEST_NAME, make_fixture_dataset
from cardioforge.load_cfg import dump_resolved_config, load_run_config
from cardioforge.model import load_model_checkpoint, save_model_checkpoint
from cardioforge.router import command_router, select_inputs
from cardioforge.signal_io import (derive_seed, fold_assignment, load_record, read_manifest, save_record,
                                   stratified_kfold, stratified_split, write_manifest)
from cardioforge.state import Label, ManifestEntry, MultiRecord, RunState, SourceKind
from cardioforge.train import ORIGINAL_SOURCE, augment_seed, copy_counts, run_schedule, segment_records

# Set up logger
logger = logging.getLogger(__name__)

# Run-directory layout
FIXTURES_DIR = "fixtures"
PREPROCESSED_DIR = "preprocessed"
AUGMENTED_DIR = "augmented"
DENOISER_DIR = "synth"
SYNTHETIC_DIR = "synthetic"
TRAIN_DIR = "train"
EVAL_DIR = "eval"
REPORT_DIR = "report"
ARTIFACTS_NAME = "artifacts.json"
RESOLVED_CONFIG_NAME = "resolved_config.yaml"
SPLITS_NAME = "splits.json"
COPIES_NAME = "copies.json"
MODEL_NAME = "model.json"
METRICS_NAME = "metrics.json"
DEFAULT_CONFIG = "desk"


def _out(state: RunState) -> Path:
    return Path(state["out_dir"])


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise ConfigError(f"Missing upstream artifact {path}; run `{producer}` first", path=str(path))
    return path


def _parallel(fn: Callable, items: Sequence, jobs: int) -> list:
    """Map ``fn`` over ``items`` in order, on a joblib pool when ``jobs`` > 1."""
    if jobs > 1 and len(items) > 1:
        return Parallel(n_jobs=jobs)(delayed(fn)(item) for item in items)
    return [fn(item) for item in items]


def run_key(state: RunState, cfg: RunConfig) -> str:
    """Name of one run (and fold, in multichannel mode) inside the run directory."""
    run = str(state.get("run_id") or "0")
    if cfg.mode == "multichannel":
        return f"{run}_fold{state.get('fold') or 0}"
    if state.get("fold") is not None:
        logger.warning(f"--fold is ignored in {cfg.mode} mode")
    return run


def _register(state: RunState, paths: Iterable[Path]) -> list[str]:
    """Add written files to the run directory's artifacts.json."""
    out_dir = _out(state)
    index_path = out_dir / ARTIFACTS_NAME
    known = set(json.loads(index_path.read_text(encoding="utf-8"))) if index_path.is_file() else set()
    new = [Path(path).resolve().relative_to(out_dir.resolve()).as_posix() for path in paths]
    known.update(new)
    known.add(RESOLVED_CONFIG_NAME)
    index_path.write_text(json.dumps(sorted(known), indent=2) + "\n", encoding="utf-8")
    return sorted(new)


def _finish(state: RunState, paths: Iterable[Path], summary: dict[str, Any]) -> RunState:
    dump_resolved_config(state["config"], _out(state) / RESOLVED_CONFIG_NAME)
    state["artifacts"] = _register(state, paths)
    state["summary"] = {"command": state["command"], "status": "ok", **summary}
    state["exit_code"] = 0
    return state


def _manifest_files(root: Path, entries: Sequence[ManifestEntry]) -> list[Path]:
    return [root / path for entry in entries for path in entry.paths]


def _load_records(manifest: Path, jobs: int = 1, subjects: Optional[set[str]] = None) -> list[MultiRecord]:
    entries = [e for e in read_manifest(manifest) if subjects is None or e.subject_id in subjects]
    return _parallel(lambda entry: load_record(entry, manifest.parent), entries, jobs)


def prepare_record(mrec: MultiRecord, cfg: RunConfig) -> MultiRecord:
    """Keep the mode's inputs and run every channel through the classification chain."""
    mrec = select_inputs(mrec, cfg.mode, cfg.data.sites)
    return mrec.with_channels([dsp.preprocess_chain(channel, target_fs=cfg.target_fs) for channel in mrec.channels])


def _preprocess_entry(entry: ManifestEntry, root: Path, cfg: RunConfig, out_dir: Path) -> ManifestEntry:
    return save_record(prepare_record(load_record(entry, root), cfg), out_dir)


def _source_manifest(state: RunState, cfg: RunConfig) -> Path:
    """Original-data manifest: --manifest, then data.manifest, then the run's fixtures."""
    ref = state.get("manifest") or cfg.data.manifest
    manifest = Path(ref) if ref else _out(state) / FIXTURES_DIR / MANIFEST_NAME
    return _require(manifest, "fixtures")


def build_splits(entries: Sequence[ManifestEntry], cfg: RunConfig) -> dict[str, dict[str, list[str]]]:
    """
    Subject partitions for every run of the config.

    Split modes get one stratified train/val/test split per run; multichannel
    mode gets a stratified k-fold partition per run and one assignment per
    fold under the rotation rule.

    Returns:
        dict: run key -> {"train", "val", "test"} sorted subject id lists.
    """
    def ids(part: Sequence[ManifestEntry]) -> list[str]:
        return sorted({entry.subject_id for entry in part})

    splits = {}
    for run in range(cfg.runs):
        if cfg.mode == "multichannel":
            folds = stratified_kfold(entries, cfg.data.k_folds, seed=derive_seed(cfg.seed, "kfold", run))
            for index in range(len(folds)):
                train, val, test = fold_assignment(folds, index)
                splits[f"{run}_fold{index}"] = {"train": ids(train), "val": ids(val), "test": ids(test)}
        else:
            train, val, test = stratified_split(entries, cfg.data.split_ratios, seed=derive_seed(cfg.seed, "split", run))
            splits[str(run)] = {"train": ids(train), "val": ids(val), "test": ids(test)}
    return splits


def _partition(state: RunState, cfg: RunConfig, part: str) -> set[str]:
    splits_path = _require(_out(state) / PREPROCESSED_DIR / SPLITS_NAME, "preprocess")
    splits = json.loads(splits_path.read_text(encoding="utf-8"))["runs"]
    key = run_key(state, cfg)
    if key not in splits:
        raise ConfigError(f"Run {key!r} is not in {splits_path}", run=key, available=sorted(splits))
    return set(splits[key][part])


def _original_subset(state: RunState, cfg: RunConfig, part: str) -> list[MultiRecord]:
    """Preprocessed original records of one partition."""
    manifest = _require(_out(state) / PREPROCESSED_DIR / MANIFEST_NAME, "preprocess")
    return _load_records(manifest, state.get("jobs", 1), _partition(state, cfg, part))


def cmd_fixtures(state: RunState) -> RunState:
    """Write the desk-scale fixture dataset."""
    cfg: RunConfig = state["config"]
    fixture_cfg = cfg.fixtures
    if state.get("n_subjects") is not None:
        fixture_cfg = fixture_cfg.model_copy(update={"n_subjects": state["n_subjects"]})
    if cfg.mode == "multichannel" and not fixture_cfg.sites:
        fixture_cfg = fixture_cfg.model_copy(update={"sites": list(cfg.data.sites)})
    out_dir = _out(state) / FIXTURES_DIR
    manifest, entries = make_fixture_dataset(out_dir, fixture_cfg, seed=cfg.seed)
    labels = [entry.label for entry in entries]
    return _finish(state, [manifest, *_manifest_files(out_dir, entries)], {
        "manifest": str(manifest), "n_subjects": len(entries),
        "n_normal": labels.count(Label.NORMAL), "n_abnormal": labels.count(Label.ABNORMAL),
    })


def cmd_preprocess(state: RunState) -> RunState:
    """Select the mode's inputs, run the classification chain and write the run splits."""
    cfg: RunConfig = state["config"]
    source = _source_manifest(state, cfg)
    entries = read_manifest(source)
    out_dir = _out(state) / PREPROCESSED_DIR
    out_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"Preprocessing {len(entries)} records from {source} at {cfg.target_fs} Hz ({cfg.mode})")
    processed = _parallel(lambda entry: _preprocess_entry(entry, source.parent, cfg, out_dir), entries,
                          state.get("jobs", 1))
    manifest = write_manifest(processed, out_dir / MANIFEST_NAME)

    splits = build_splits(processed, cfg)
    splits_path = out_dir / SPLITS_NAME
    splits_path.write_text(json.dumps({"mode": cfg.mode, "runs": splits}, indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    return _finish(state, [manifest, splits_path, *_manifest_files(out_dir, processed)], {
        "manifest": str(manifest), "n_records": len(processed), "runs": sorted(splits),
    })


def _train_seed(cfg: RunConfig, key: str) -> int:
    return derive_seed(cfg.seed, "train", key)


def cmd_augment(state: RunState) -> RunState:
    """
    Export the first stage's augmented copies of the training split.

    Copies are seeded exactly as training seeds them, and ``train`` picks the
    export up for every stage with the same copy counts.
    """
    cfg: RunConfig = state["config"]
    key = run_key(state, cfg)
    train_cfg = cfg.train_config()
    records = _original_subset(state, cfg, "train")
    stages = cfg.effective_schedule().stages
    counts = {Label.NORMAL: 0, Label.ABNORMAL: 0}
    for stage in stages:
        row = next(((n, a) for source, n, a in stage.rows() if source == ORIGINAL_SOURCE), None)
        if row is not None and any(row):
            counts = copy_counts(row[0], row[1], train_cfg.augment_scale)
            break
    bank = default_noise_bank(cfg.target_fs, seed=derive_seed(cfg.seed, "noise_bank"))
    augmented = make_augmented_dataset(records, counts, train_cfg.augment,
                                       seed=augment_seed(_train_seed(cfg, key), ORIGINAL_SOURCE), bank=bank)
    out_dir = _out(state) / AUGMENTED_DIR / key
    if out_dir.exists():
        shutil.rmtree(out_dir)
    entries = [save_record(mrec, out_dir) for mrec in augmented]
    manifest = write_manifest(entries, out_dir / MANIFEST_NAME)
    copies_path = out_dir / COPIES_NAME
    copies_path.write_text(json.dumps({"source": ORIGINAL_SOURCE, **{label.value: n for label, n in counts.items()}},
                                      sort_keys=True), encoding="utf-8")
    return _finish(state, [manifest, copies_path, *_manifest_files(out_dir, entries)], {
        "manifest": str(manifest), "run": key, "n_sources": len(records), "n_augmented": len(entries),
        "copies": {label.value: count for label, count in counts.items()},
    })


def _raw_train_records(state: RunState, cfg: RunConfig) -> list[MultiRecord]:
    """Unprocessed original records of the training split; generators apply their own chain."""
    subjects = _partition(state, cfg, "train")
    return _load_records(_source_manifest(state, cfg), state.get("jobs", 1), subjects)


def _generator_sites(cfg: RunConfig) -> Optional[list[str]]:
    return list(cfg.data.sites) if cfg.mode == "multichannel" else None


def cmd_synth_train(state: RunState) -> RunState:
    """Train one denoiser per configured generator on the training split."""
    cfg: RunConfig = state["config"]
    key = run_key(state, cfg)
    sites = _generator_sites(cfg)
    records = _raw_train_records(state, cfg)
    schedule = create_noise_schedule(cfg.synth)
    written, final_losses = [], {}
    for tag in cfg.synth.generators:
        denoiser = create_denoiser(cfg.synth, tag, n_sites=len(sites or ()),
                                   seed=derive_seed(cfg.seed, "denoiser_init", key, tag))
        examples = make_training_examples(records, denoiser.cfg, sites)
        losses = train_denoiser(denoiser, examples, schedule, steps=cfg.synth.train_steps,
                                lr=cfg.synth.learning_rate, batch_size=cfg.synth.batch_size,
                                seed=derive_seed(cfg.seed, "denoiser", key, tag),
                                rearrange_prob=cfg.synth.rearrange_prob)
        final_losses[tag] = losses[-1] if losses else None
        written.append(save_denoiser(denoiser, schedule, _out(state) / DENOISER_DIR / key / f"{tag}.json",
                                     extra={"run": key, "train_subjects": sorted({r.subject_id for r in records}),
                                            "final_loss": final_losses[tag]}))
    return _finish(state, written, {"run": key, "generators": list(cfg.synth.generators),
                                    "final_loss": final_losses})


def cmd_synth_generate(state: RunState) -> RunState:
    """Sample a synthetic corpus from every trained denoiser."""
    cfg: RunConfig = state["config"]
    key = run_key(state, cfg)
    sites = _generator_sites(cfg)
    cond_source = _raw_train_records(state, cfg)
    written, counts = [], {}
    for tag in cfg.synth.generators:
        checkpoint = _require(_out(state) / DENOISER_DIR / key / f"{tag}.json", "synth-train")
        denoiser, schedule, _ = load_denoiser(checkpoint)
        corpus = build_synthetic_corpus(tag, denoiser, cond_source, cfg.synth.n_patients, schedule,
                                        class_ratio=cfg.synth.class_ratio,
                                        seed=derive_seed(cfg.seed, "synth", key, tag), sites=sites)
        source_name = cfg.synth.source_names.get(tag, tag)
        out_dir = _out(state) / SYNTHETIC_DIR / key / tag
        entries = [save_record(mrec, out_dir, dataset=source_name) for mrec in corpus]
        written += [write_manifest(entries, out_dir / MANIFEST_NAME), *_manifest_files(out_dir, entries)]
        counts[source_name] = len(entries)
    return _finish(state, written, {"run": key, "subjects": counts})


def _synthetic_datasets(state: RunState, cfg: RunConfig) -> dict[str, list[MultiRecord]]:
    """Prepared synthetic records per schedule source name, for every generated corpus of the run."""
    datasets: dict[str, list[MultiRecord]] = {}
    root = _out(state) / SYNTHETIC_DIR / run_key(state, cfg)
    for manifest in sorted(root.glob(f"*/{MANIFEST_NAME}")):
        for entry in read_manifest(manifest):
            if entry.source is not SourceKind.SYNTHETIC:
                continue
            mrec = prepare_record(load_record(entry, manifest.parent), cfg)
            datasets.setdefault(entry.dataset, []).append(mrec)
    return datasets


def _exported_augmentations(state: RunState, cfg: RunConfig) -> dict[tuple[str, int, int], list[MultiRecord]]:
    """Augmented copies written by ``augment`` for this run, keyed like the training pools."""
    out_dir = _out(state) / AUGMENTED_DIR / run_key(state, cfg)
    copies_path = out_dir / COPIES_NAME
    if not copies_path.is_file():
        return {}
    copies = json.loads(copies_path.read_text(encoding="utf-8"))
    key = (copies["source"], int(copies[Label.NORMAL.value]), int(copies[Label.ABNORMAL.value]))
    records = _load_records(out_dir / MANIFEST_NAME, state.get("jobs", 1))
    logger.info(f"Found {len(records)} exported augmented records for {key}")
    return {key: records}


def cmd_train(state: RunState) -> RunState:
    """Run the training schedule on original plus synthetic sources and save the selected model."""
    cfg: RunConfig = state["config"]
    key = run_key(state, cfg)
    datasets = {ORIGINAL_SOURCE: _original_subset(state, cfg, "train"), **_synthetic_datasets(state, cfg)}
    val_records = _original_subset(state, cfg, "val")
    train_dir = _out(state) / TRAIN_DIR / key
    if train_dir.exists():
        shutil.rmtree(train_dir)
    train_dir.mkdir(parents=True)

    model = create_classifier(cfg, seed=derive_seed(cfg.seed, "classifier_init", key))
    bank = default_noise_bank(cfg.target_fs, seed=derive_seed(cfg.seed, "noise_bank"))
    schedule = cfg.effective_schedule()
    logger.info(f"Training run {key} on sources { {name: len(recs) for name, recs in datasets.items()} }")
    result = run_schedule(model, schedule.stages, datasets, cfg.train_config(), seed=_train_seed(cfg, key),
                          val_records=val_records, bank=bank, checkpoint_dir=train_dir / "checkpoints",
                          log_path=train_dir / "epochs.jsonl", prebuilt=_exported_augmentations(state, cfg))
    model_path = save_model_checkpoint(result.model, train_dir / MODEL_NAME,
                                       {"run": key, "schedule": schedule.name, "best_epoch": result.best_epoch})
    written = [model_path, *result.checkpoints]
    if result.log:
        written.append(train_dir / "epochs.jsonl")
    return _finish(state, written, {
        "run": key, "model": str(model_path), "epochs": len(result.log), "best_epoch": result.best_epoch,
        "best_val_mcc": result.best_mcc,
    })


def cmd_eval(state: RunState) -> RunState:
    """Score the test split at fragment and subject level."""
    cfg: RunConfig = state["config"]
    key = run_key(state, cfg)
    model, _ = load_model_checkpoint(_require(_out(state) / TRAIN_DIR / key / MODEL_NAME, "train"))
    records = _original_subset(state, cfg, "test")
    fragments = segment_records(records, cfg.segment_spec())
    if not fragments:
        raise EvaluationError(f"Test split of run {key} yields no fragments", run=key)
    table = predictions_table(fragments, predict_fragments(model, fragments), cfg.threshold)
    run_id = str(state.get("run_id") or "0")
    fold = (state.get("fold") or 0) if cfg.mode == "multichannel" else None
    fragment_report, subject_report, subjects = evaluate_predictions(table, cfg.threshold, run_id=run_id, fold_id=fold)

    eval_dir = _out(state) / EVAL_DIR / key
    eval_dir.mkdir(parents=True, exist_ok=True)
    written = [eval_dir / METRICS_NAME, eval_dir / "predictions.csv", eval_dir / "subjects.csv"]
    written[0].write_text(json.dumps([fragment_report.as_dict(), subject_report.as_dict()], indent=2, sort_keys=True)
                          + "\n", encoding="utf-8")
    table.to_csv(written[1], index=False, float_format="%.6f")
    subjects.to_csv(written[2], index=False, float_format="%.6f")
    for level, frame, score in (("fragment", table, "prob"), ("subject", subjects, "score")):
        if frame["label"].nunique() < 2:
            logger.warning(f"Skipping {level} ROC for run {key}: single class in test split")
            continue
        path = eval_dir / f"roc_{level}.csv"
        roc_to_frame(roc(frame[score], frame["label"])).to_csv(path, index=False, float_format="%.6f")
        written.append(path)
    return _finish(state, written, {
        "run": key, "fragment": {"acc": fragment_report.acc, "mcc": fragment_report.mcc},
        "subject": {"acc": subject_report.acc, "mcc": subject_report.mcc},
    })


def cmd_report(state: RunState) -> RunState:
    """Aggregate every evaluated run into mean ± std tables and ROC bands."""
    eval_root = _require(_out(state) / EVAL_DIR, "evaluate")
    reports, curves = [], {}
    for metrics_path in sorted(eval_root.glob(f"*/{METRICS_NAME}")):
        reports += [report_from_dict(payload) for payload in json.loads(metrics_path.read_text(encoding="utf-8"))]
        for level in ("fragment", "subject"):
            roc_path = metrics_path.parent / f"roc_{level}.csv"
            if roc_path.is_file():
                curves.setdefault(level, []).append(roc_from_frame(pd.read_csv(roc_path)))
    if not reports:
        raise ConfigError(f"No evaluated runs under {eval_root}; run `evaluate` first", path=str(eval_root))
    written = report(reports, _out(state) / REPORT_DIR, curves)
    summary = json.loads(written["summary_json"].read_text(encoding="utf-8"))
    return _finish(state, written.values(), {
        "n_reports": len(reports),
        "subject_mcc": summary.get("subject", {}).get("mcc"),
        "subject_acc": summary.get("subject", {}).get("acc"),
    })


def _create_error_state(state: RunState, error: Exception, name: str) -> RunState:
    """
    Create an error state when a node raises.
    """
    exit_code = error.exit_code if isinstance(error, CardioforgeError) else 2
    logger.info(f"Creating error state for {name}: {type(error).__name__}")
    error_state: RunState = {
        **state,
        "summary": {"command": state.get("command", name), "status": "error"},
        "error": {
            "command": state.get("command", name),
            "error_type": type(error).__name__,
            "message": str(error),
            "context": {key: str(value) if isinstance(value, Path) else value
                        for key, value in getattr(error, "context", {}).items()},
        },
        "exit_code": exit_code,
    }
    return error_state


def run_command(state: RunState) -> RunState:
    """
    Load the run config and dispatch the state to the command's node.

    Args:
        state (RunState): Command, flags and config reference.

    Returns:
        RunState: The node's state, or an error state carrying the exit code.
    """
    name = state.get("command", "?")
    logger.info(f"Processing command: {name}")
    try:
        overrides = {"seed": state["seed"]} if state.get("seed") is not None else None
        if state.get("config") is None:
            state["config"] = load_run_config(RunConfig, state.get("config_ref") or DEFAULT_CONFIG, overrides=overrides)
        elif overrides:
            state["config"] = state["config"].model_copy(update=overrides)
        _out(state).mkdir(parents=True, exist_ok=True)
        node = globals()[command_router(name)]
        state = node(state)
        logger.info(f"Command {name} completed")
        return state
    except CardioforgeError as e:
        logger.error(f"Error in command {name}: {e}", exc_info=True)
        return _create_error_state(state, e, name)
    except OSError as e:
        logger.error(f"I/O error in command {name}: {e}", exc_info=True)
        return _create_error_state(state, e, name)
    except Exception as e:
        logger.error(f"Unexpected error in command {name}: {e}", exc_info=True)
        return _create_error_state(state, e, name)
