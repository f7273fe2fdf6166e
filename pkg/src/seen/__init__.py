"""Spiking eye-emotion network over event-camera streams, with a numpy autodiff core."""

from .events import EventStream, SequenceRecord, WindowSpec, aggregate_window, slice_windows, testing_length
from .model import ModelConfig, SeenModel, load_checkpoint, save_checkpoint
from .snn import LifConfig, LifState, lif_step

__all__ = [
    "EventStream", "SequenceRecord", "WindowSpec", "aggregate_window", "slice_windows", "testing_length",
    "ModelConfig", "SeenModel", "load_checkpoint", "save_checkpoint", "LifConfig", "LifState", "lif_step",
]

__version__ = "0.1.0"
