"""Pattern-based hierarchical sparsity for binary activation matrices."""

from .arch import ArchConfig, ConfigError, load_config, parse_config
from .binmat import BitMatrix, FormatError, TernaryMatrix, TileSpec
from .calibration import CalibrationConfig, PatternSet, calibrate, kmeans_binary
from .compute import PWPTable, build_pwp_table, dense_matmul, phi_matmul
from .decompose import L1IndexMatrix, PhiMetrics, decompose, metrics, paft_regularizer, reconstruct
from .packing import Packer, PackerConfig, pack_stream
from .simulator import SimReport, sim_layer, sweep

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "ConfigError", "load_config", "parse_config",
    "BitMatrix", "FormatError", "TernaryMatrix", "TileSpec",
    "CalibrationConfig", "PatternSet", "calibrate", "kmeans_binary",
    "PWPTable", "build_pwp_table", "dense_matmul", "phi_matmul",
    "L1IndexMatrix", "PhiMetrics", "decompose", "metrics", "paft_regularizer", "reconstruct",
    "Packer", "PackerConfig", "pack_stream",
    "SimReport", "sim_layer", "sweep",
]
