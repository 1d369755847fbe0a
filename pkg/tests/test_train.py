import json

import numpy as np
import pytest
import torch

from cardioforge import train
from cardioforge.augment import AugmentConfig, OnlineProbabilities
from cardioforge.dsp import SegmentSpec
from cardioforge.errors import ConfigError, TrainingError
from cardioforge.evaluate import predict_fragments
from cardioforge.model import ConvBlockConfig, EncoderConfig, HeadConfig, HeartSoundClassifier, LoRALinear
from cardioforge.state import Fragment, Label, Modality, MultiRecord, Recording, SourceKind
from cardioforge.train import (LoRAConfig, LRSchedule, OptimizerConfig, ScheduleStage, SearchDim, SVMConfig,
                               TrainConfig)

from conftest import sine

FS = 1000.0


def _encoder() -> EncoderConfig:
    return EncoderConfig(conv_blocks=[ConvBlockConfig(channels=4, kernel=8, stride=4),
                                      ConvBlockConfig(channels=4, kernel=4, stride=2)],
                         n_layers=1, d_model=8, d_mlp=16, n_heads=2)


def _model(n_inputs: int = 1) -> HeartSoundClassifier:
    torch.manual_seed(0)
    return HeartSoundClassifier(_encoder(), HeadConfig(hidden_size=8), n_inputs)


def _cfg(**changes) -> TrainConfig:
    values = dict(optimizer=OptimizerConfig(learning_rate=0.01, batch_size=8),
                  augment=AugmentConfig.disabled(),
                  segment=SegmentSpec(window_s=0.5, overlap_s=0.0, skip_head_s=0.0))
    values.update(changes)
    return TrainConfig(**values)


def _record(subject_id: str, label: Label, with_ecg: bool = False, source=SourceKind.ORIGINAL) -> MultiRecord:
    freq = 20.0 if label is Label.NORMAL else 120.0
    channels = [Recording(samples=sine(freq, FS, 3.0, 0.6), fs=FS)]
    if with_ecg:
        channels.append(Recording(samples=sine(freq / 10, FS, 3.0, 0.4), fs=FS, modality=Modality.ECG))
    return MultiRecord(subject_id=subject_id, label=label, channels=tuple(channels), source=source,
                       generator_tag="diffwave_style" if source is SourceKind.SYNTHETIC else None)


def _records(prefix: str, n_normal: int = 2, n_abnormal: int = 2, **kwargs) -> list[MultiRecord]:
    labels = [Label.NORMAL] * n_normal + [Label.ABNORMAL] * n_abnormal
    return [_record(f"{prefix}{i}", label, **kwargs) for i, label in enumerate(labels)]


def test_sgd_step_closed_forms():
    cfg = OptimizerConfig(learning_rate=0.1, momentum=0.0, weight_decay=0.0)
    (w,) = train.sgd_step([torch.tensor([1.0], dtype=torch.float64)], [0.5], {}, cfg)
    assert float(w) == pytest.approx(0.95)

    decay = cfg.model_copy(update={"weight_decay": 0.1})
    (w,) = train.sgd_step([torch.tensor([1.0], dtype=torch.float64)], [0.0], {}, decay)
    assert float(w) == pytest.approx(0.99)


def test_sgd_momentum_recurrence():
    cfg = OptimizerConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
    state: dict = {}
    params = [torch.tensor([0.0], dtype=torch.float64)]
    params = train.sgd_step(params, [1.0], state, cfg)
    assert float(params[0]) == pytest.approx(-0.1)
    params = train.sgd_step(params, [1.0], state, cfg)
    assert float(params[0]) == pytest.approx(-0.29)


def test_rmsprop_first_step():
    cfg = OptimizerConfig(kind="rmsprop", learning_rate=0.01, momentum=0.0, weight_decay=0.0)
    (w,) = train.rmsprop_step([torch.tensor([0.0], dtype=torch.float64)], [1.0], {}, cfg)
    assert float(w) == pytest.approx(-0.01 / (0.1 + 1e-8), rel=1e-9)


def test_rmsprop_zero_gradient_and_determinism():
    cfg = OptimizerConfig(kind="rmsprop", learning_rate=0.01, weight_decay=0.0)
    start = [torch.tensor([0.3, -0.2], dtype=torch.float64)]
    (w,) = train.rmsprop_step(start, [[0.0, 0.0]], {}, cfg)
    assert torch.equal(w, start[0])

    def trajectory():
        state, params = {}, [torch.tensor([1.0, 2.0], dtype=torch.float64)]
        for grad in ([0.5, -1.0], [0.2, 0.3], [-0.4, 0.1]):
            params = train.rmsprop_step(params, [grad], state, cfg)
        return params[0]

    assert torch.equal(trajectory(), trajectory())


def test_non_finite_gradient_is_a_training_error():
    with pytest.raises(TrainingError):
        train.sgd_step([torch.tensor([1.0])], [float("nan")], {}, OptimizerConfig())


def test_lr_schedule():
    sched = LRSchedule(gamma=0.1, step_size=3)
    assert train.lr_at(3, 0.001, sched) == pytest.approx(1e-4)
    assert train.lr_at(0, 0.001, sched) == 0.001
    assert train.lr_at(2, 0.001, sched) == 0.001
    assert train.lr_at(7, 0.001, LRSchedule(gamma=1.0, step_size=1)) == 0.001


def test_select_best():
    assert train.select_best(["a", "b", "c"], [0.1, 0.5, 0.3]) == (1, "b")
    assert train.select_best(["a", "b"], [0.5, 0.5]) == (1, "b")
    assert train.select_best(["only"], [-0.2]) == (0, "only")
    with pytest.raises(ConfigError):
        train.select_best([], [])


def test_class_weights_balance_counts():
    frags = [Fragment(samples=np.zeros(4), fs=FS, subject_id=str(i), label=label, offset=0)
             for i, label in enumerate([Label.NORMAL] * 3 + [Label.ABNORMAL])]
    assert torch.allclose(train.class_weights(frags), torch.tensor([4 / 6, 2.0]))
    assert torch.allclose(train.class_weights(frags[:3]), torch.tensor([0.5, 1.0]))


def test_packaged_schedules():
    staged = train.load_schedule("staged")
    assert len(staged.stages) == 6
    assert staged.total_epochs == 26
    assert staged.stages[0].rows() == [("original", 60, 30)]

    multichannel_staged = train.load_schedule("multichannel_staged")
    assert len(multichannel_staged.stages) == 2
    assert multichannel_staged.total_epochs == 12
    assert multichannel_staged.stages[1].normal_augments == [20, 4, 4]
    assert multichannel_staged.stages[1].abnormal_augments == [10, 2, 2]


def test_schedule_stage_validation():
    assert ScheduleStage(sources=["original", "diffwave"], epochs=1).normal_augments == [0, 0]
    with pytest.raises(ValueError):
        ScheduleStage(sources=["original"], epochs=1, normal_augments=[1, 2])
    with pytest.raises(ValueError):
        ScheduleStage(sources=["original"], epochs=0)


def test_scaled_schedule():
    staged = train.load_schedule("staged")
    desk = staged.scaled([1, 1, 1, 1, 1, 1])
    assert desk.total_epochs == 6
    assert desk.stages[3].sources == ["original", "diffwave", "wavegrad"]
    with pytest.raises(ConfigError):
        staged.scaled([1, 2])


def test_build_pool_caps_synthetic_sources():
    stage = ScheduleStage(sources=["original", "diffwave"], epochs=1, normal_augments=[1, 0],
                          abnormal_augments=[1, 0])
    datasets = {"original": _records("o", 1, 1),
                "diffwave": _records("d", 1, 1, source=SourceKind.SYNTHETIC)}
    cache: dict = {}
    pool = train.build_pool(stage, datasets, _cfg(), seed=0, cache=cache)
    from_original = [frag for frag in pool if not frag.subject_id.startswith("d")]
    from_synthetic = [frag for frag in pool if frag.subject_id.startswith("d")]
    assert len(from_original) == (2 + 2) * 6
    assert len(from_synthetic) == 2 * 2
    assert train.build_pool(stage, datasets, _cfg(), seed=0, cache=cache) == pool


def test_build_pool_uses_exported_copies():
    stage = ScheduleStage(sources=["original"], epochs=1, normal_augments=[2], abnormal_augments=[1])
    datasets = {"original": _records("o", 1, 1)}
    exported = [_record("o0", Label.NORMAL)]
    pool = train.build_pool(stage, datasets, _cfg(), seed=0, prebuilt={("original", 2, 1): exported})
    assert len(pool) == (2 + 1) * 6
    regenerated = train.build_pool(stage, datasets, _cfg(), seed=0, prebuilt={("original", 1, 1): exported})
    assert len(regenerated) == (2 + 2 + 1) * 6
    assert train.copy_counts(60, 30, 0.05) == {Label.NORMAL: 3, Label.ABNORMAL: 2}


def test_fragment_dataset_online_augment_is_seeded():
    frags = train.segment_records(_records("o", 1, 0), _cfg().segment)
    augment = AugmentConfig(online=OnlineProbabilities(mask=1.0, stretch=1.0))
    dataset = train.FragmentDataset(frags, augment, seed=4, epoch=2)
    first, label = dataset[0]
    again, _ = dataset[0]
    assert torch.equal(first, again)
    assert first.shape == (1, 500) and label == 0


def test_empty_schedule_leaves_model_unchanged():
    model = _model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    result = train.run_schedule(model, [], {"original": _records("o")}, _cfg())
    assert result.log == [] and result.model is model
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_missing_source_is_a_config_error():
    stage = ScheduleStage(sources=["original", "wavegrad"], epochs=1)
    with pytest.raises(ConfigError):
        train.run_schedule(_model(), [stage], {"original": _records("o")}, _cfg())


def test_run_schedule_logs_and_checkpoints(tmp_path):
    stages = [ScheduleStage(sources=["original"], epochs=2), ScheduleStage(sources=["original"], epochs=1)]
    cfg = _cfg(lr_schedule=LRSchedule(gamma=0.5, step_size=1))
    log_path = tmp_path / "epochs.jsonl"
    result = train.run_schedule(_model(), stages, {"original": _records("o")}, cfg, seed=3,
                                val_records=_records("v", 1, 1), checkpoint_dir=tmp_path / "ckpt",
                                log_path=log_path)
    assert [entry.stage for entry in result.log] == [0, 0, 1]
    assert [entry.lr for entry in result.log] == pytest.approx([0.01, 0.005, 0.0025])
    assert len(result.checkpoints) == 3 and all(path.is_file() for path in result.checkpoints)

    lines = [json.loads(line) for line in log_path.read_text(encoding="utf-8").splitlines()]
    assert len(lines) == 3
    assert set(lines[0]["val_metrics"]) == {"fragment", "subject"}
    assert 0 <= result.best_epoch <= 2
    assert result.best_mcc == lines[result.best_epoch]["val_metrics"]["subject"]["mcc"]


def test_run_schedule_is_reproducible():
    stages = [ScheduleStage(sources=["original"], epochs=2)]
    datasets = {"original": _records("o")}
    first = train.run_schedule(_model(), stages, datasets, _cfg(), seed=9).model.state_dict()
    second = train.run_schedule(_model(), stages, datasets, _cfg(), seed=9).model.state_dict()
    assert all(torch.equal(first[name], second[name]) for name in first)


def test_loss_drops_on_separable_records():
    records = _records("o", 4, 4)
    cfg = _cfg(lr_schedule=LRSchedule(gamma=1.0, step_size=1))
    result = train.run_schedule(_model(), [ScheduleStage(sources=["original"], epochs=50)], {"original": records},
                                cfg, seed=1)
    losses = [entry.train_loss for entry in result.log]
    assert len(losses) == 50
    assert losses[-1] <= 0.5 * losses[0]

    fragments = train.segment_records(records, cfg.segment)
    predicted = predict_fragments(result.model, fragments) >= 0.5
    assert predicted.tolist() == [Label(frag.label) is Label.ABNORMAL for frag in fragments]


def test_multi_input_models_pretrain_encoders():
    stages = [ScheduleStage(sources=["original"], epochs=1)]
    result = train.run_schedule(_model(n_inputs=2), stages, {"original": _records("o", with_ecg=True)}, _cfg())
    assert [entry.phase for entry in result.log] == ["pretrain_input0", "pretrain_input1", "schedule"]


def test_lora_and_svm_heads(tmp_path):
    cfg = _cfg(lora=LoRAConfig(enabled=True, rank=2, alpha=4.0), svm=SVMConfig(enabled=True, gamma=1.0))
    stages = [ScheduleStage(sources=["original"], epochs=1)]
    result = train.run_schedule(_model(), stages, {"original": _records("o")}, cfg,
                                checkpoint_dir=tmp_path)
    model = result.model
    assert not any(isinstance(module, LoRALinear) for module in model.modules())
    assert model.svm_head is not None
    assert len(result.checkpoints) == 1
    frags = train.segment_records(_records("t", 1, 1), cfg.segment)
    probs = model.predict_proba(torch.as_tensor(np.stack([f.samples for f in frags]), dtype=torch.float32))
    assert probs.shape == (len(frags),)


def test_random_search_validation():
    space = {"learning_rate": SearchDim(kind="log_uniform", low=1e-6, high=1e-2)}
    with pytest.raises(ConfigError):
        train.random_search(space, 0, 1, lambda params, run: 0.0)
    with pytest.raises(ConfigError):
        train.random_search({}, 3, 1, lambda params, run: 0.0)


def test_random_search_ties_keep_first_trial():
    space = {"learning_rate": SearchDim(kind="log_uniform", low=1e-6, high=1e-2)}
    best, trials = train.random_search(space, 5, 2, lambda params, run: 1.0, seed=1)
    assert best == trials[0].params
    assert all(trial.scores == [1.0, 1.0] for trial in trials)


def test_random_search_finds_learning_rate():
    space = {"learning_rate": SearchDim(kind="log_uniform", low=1e-6, high=1e-2)}
    best, trials = train.random_search(space, 50, 1, lambda params, run: -(params["learning_rate"] - 1e-3) ** 2,
                                       seed=0)
    assert len(trials) == 50
    assert 1e-4 <= best["learning_rate"] <= 1e-2
    again, _ = train.random_search(space, 50, 1, lambda params, run: -(params["learning_rate"] - 1e-3) ** 2,
                                   seed=0)
    assert again == best


def test_search_dims_and_trials(rng):
    for name, dim in train.default_search_space().items():
        value = dim.draw(rng)
        if dim.kind == "choice":
            assert value in dim.choices
        else:
            assert dim.low <= value <= dim.high, name
    with pytest.raises(ValueError):
        SearchDim(kind="uniform", low=2.0, high=1.0)
    with pytest.raises(ValueError):
        SearchDim(kind="log_uniform", low=0.0, high=1.0)

    cfg, head = train.apply_trial(TrainConfig(), HeadConfig(),
                                  {"learning_rate": 0.02, "step_size": 5, "hidden_size": 256})
    assert cfg.optimizer.learning_rate == 0.02
    assert cfg.lr_schedule.step_size == 5
    assert head.hidden_size == 256
    with pytest.raises(ConfigError):
        train.apply_trial(TrainConfig(), HeadConfig(), {"warmup": 3})
