"""Structured dropout with compute skipping for small dense networks."""

from .distsearch import (
    NoConvergenceError,
    PatternDistribution,
    SearchConfig,
    expected_global_rate,
    load_distribution,
    rate_vector,
    save_distribution,
    search,
)
from .gemm import LayerCounters, MacCounter, dense_gemm, row_skip_gemm, tile_skip_gemm, tiled_dense_gemm
from .nn import (
    DivergenceError,
    DropoutContext,
    DropoutMode,
    MlpModel,
    TrainConfig,
    accuracy,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .patterns import (
    DEFAULT_TILE_SHAPE,
    DropoutPattern,
    MaskGeometry,
    PatternKind,
    kept_row_indices,
    kept_tile_indices,
    materialize_mask,
    max_period,
    submodel_count,
)
from .report import RunReport, load_report, save_report
from .sampler import RngState, SampledPattern, sample_pattern

__version__ = "0.1.0"
