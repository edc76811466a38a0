"""DualVDT: variational time-series forecaster with a latent score-based prior."""

__version__ = "0.1.0"

from .core import DTYPE, DomainError, Rng, ShapeError, grad_check, op_set  # noqa: E402
from .data import (  # noqa: E402
    DataError,
    NormStats,
    RawSeries,
    SeriesWindow,
    fit_normalize,
    load_csv,
    make_windows,
    split_series,
    synth_sinusoids,
)
from .diffusion import NoiseSchedule, dsm_loss, make_schedule  # noqa: E402
from .samplers import SamplerSpec, sample_prior  # noqa: E402
from .model import (  # noqa: E402
    DualVDT,
    LossReport,
    ModelConfig,
    TrainConfig,
    evaluate,
    forecast,
    load_checkpoint,
    save_checkpoint,
    train,
)

__all__ = [
    "DTYPE", "DomainError", "Rng", "ShapeError", "grad_check", "op_set",
    "DataError", "NormStats", "RawSeries", "SeriesWindow", "fit_normalize", "load_csv",
    "make_windows", "split_series", "synth_sinusoids",
    "NoiseSchedule", "dsm_loss", "make_schedule", "SamplerSpec", "sample_prior",
    "DualVDT", "LossReport", "ModelConfig", "TrainConfig", "evaluate", "forecast",
    "load_checkpoint", "save_checkpoint", "train",
]
