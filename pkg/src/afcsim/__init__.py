"""Heralded single-photon storage in an atomic frequency comb memory: simulation and analysis."""

__version__ = "0.1.0"

from .config import RunConfig
from .correlation import G2Estimate, cauchy_schwarz, g2_auto_hbt, g2_cross
from .memory import CombDesign, MemoryEfficiency, SpinParams, efficiency_decomposition
from .sequence import NoiseModel, StorageSequence, run_sequence
from .source import BiphotonSpec
from .streams import TimestampStream, read_streams, write_streams

__all__ = [
    "BiphotonSpec", "CombDesign", "G2Estimate", "MemoryEfficiency", "NoiseModel", "RunConfig",
    "SpinParams", "StorageSequence", "TimestampStream", "cauchy_schwarz", "efficiency_decomposition",
    "g2_auto_hbt", "g2_cross", "read_streams", "run_sequence", "write_streams",
]
