import logging
from typing import Literal, Optional, Sequence

from cardioforge.errors import ConfigError
from cardioforge.state import Modality, MultiRecord

# Set up logger
logger = logging.getLogger(__name__)

# Define types for command and mode routing
CommandType = Literal['fixtures', 'preprocess', 'augment', 'synth-train', 'synth-generate', 'train', 'evaluate',
                      'report']
NodeType = Literal['cmd_fixtures', 'cmd_preprocess', 'cmd_augment', 'cmd_synth_train', 'cmd_synth_generate',
                   'cmd_train', 'cmd_eval', 'cmd_report']
ModeType = Literal['single_pcg', 'multimodal', 'multichannel']

COMMANDS: tuple[str, ...] = CommandType.__args__

# Window length per dataset mode (seconds)
MODE_WINDOW_S = {
    "single_pcg": 4.0,
    "multimodal": 4.0,
    "multichannel": 2.0,
}


def command_router(command: str) -> NodeType:
    """
    Route a CLI command name to its pipeline node.

    Args:
    command (str): Command as typed on the command line.

    Returns:
    NodeType: Name of the node function in ``cardioforge.node``.
    """
    logger.debug(f"Routing command: {command}")
    routes = {
        "fixtures": "cmd_fixtures",
        "preprocess": "cmd_preprocess",
        "augment": "cmd_augment",
        "synth-train": "cmd_synth_train",
        "synth-generate": "cmd_synth_generate",
        "train": "cmd_train",
        "evaluate": "cmd_eval",
        "report": "cmd_report",
    }
    if command not in routes:
        raise ConfigError(f"Unknown command: {command}", command=command, available=list(routes))
    return routes[command]


def mode_window(mode: ModeType, window_s: Optional[float] = None) -> float:
    """Explicit window length, or the mode default (4 s single/multimodal, 2 s multichannel)."""
    if mode not in MODE_WINDOW_S:
        raise ConfigError(f"Unknown dataset mode: {mode}", mode=mode)
    return MODE_WINDOW_S[mode] if window_s is None else window_s


def n_inputs_for(mode: ModeType, sites: Sequence[str] = ()) -> int:
    """Classifier inputs: 1 PCG, PCG + ECG, or one per auscultation site."""
    if mode == "single_pcg":
        return 1
    if mode == "multimodal":
        return 2
    if not sites:
        raise ConfigError("Multichannel mode needs the list of auscultation sites")
    return len(sites)


def select_inputs(mrec: MultiRecord, mode: ModeType, sites: Sequence[str] = ()) -> MultiRecord:
    """
    Keep and order the channels the classifier consumes in ``mode``.

    single_pcg keeps the first PCG channel, multimodal keeps PCG then ECG,
    multichannel keeps one PCG channel per site in ``sites`` order.
    """
    if mode == "multichannel":
        by_site = {ch.channel_site: ch for ch in mrec.channels}
        missing = [site for site in sites if site not in by_site]
        if missing or not sites:
            raise ConfigError(f"Record {mrec.subject_id} lacks sites {missing}", subject_id=mrec.subject_id)
        return mrec.with_channels([by_site[site] for site in sites])

    wanted = [Modality.PCG] if mode == "single_pcg" else [Modality.PCG, Modality.ECG]
    channels = []
    for modality in wanted:
        channel = next((ch for ch in mrec.channels if ch.modality is modality), None)
        if channel is None:
            raise ConfigError(f"Record {mrec.subject_id} has no {modality.value} channel for mode {mode}",
                              subject_id=mrec.subject_id)
        channels.append(channel)
    return mrec.with_channels(channels)
