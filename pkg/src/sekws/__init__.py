"""Single-channel speech enhancement frontends for keyword spotting."""

from .audio import FeatureConfig, LogMel, Waveform, read_wav, write_wav
from .checkpoint import load_checkpoint, save_checkpoint, tensor_digest
from .datamix import AugmentPolicy, LabeledUtterance, MixtureExample, augment, mix_at_snr
from .enhancer import ConvTasNetEnhancer, EnhancerConfig, IdentityEnhancer
from .exceptions import SekwsError
from .harness import DataSpec, MatrixRow, MatrixSpec, build_preset, plot_sweep, run_matrix
from .injection import AlphaGrid, SoftSwitch, inject, predict_alpha, sweep_alpha
from .objectives import combined_loss, sdr_db, sdr_improvement
from .pipeline import DataBundle, EvalReport, ExperimentSpec, TrainConfig, evaluate
from .spotter import KeywordSpotter
from .training import lr_schedule, sgd_step

__version__ = "0.1.0"

__all__ = [
    "AlphaGrid", "AugmentPolicy", "ConvTasNetEnhancer", "DataBundle", "DataSpec",
    "EnhancerConfig", "EvalReport", "ExperimentSpec", "FeatureConfig", "IdentityEnhancer",
    "KeywordSpotter", "LabeledUtterance", "LogMel", "MatrixRow", "MatrixSpec", "MixtureExample",
    "SekwsError", "SoftSwitch", "TrainConfig", "Waveform", "augment", "build_preset",
    "combined_loss", "evaluate", "inject", "load_checkpoint", "lr_schedule", "mix_at_snr",
    "plot_sweep", "predict_alpha", "read_wav", "run_matrix", "save_checkpoint", "sdr_db",
    "sdr_improvement", "sgd_step", "sweep_alpha", "tensor_digest", "write_wav",
]
