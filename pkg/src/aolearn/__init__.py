"""Analysis operator learning for cosparse signal models.

Learns K x d operators with unit-norm rows whose application to the training
signals is as sparse as possible, via four one-iteration update maps
(explicit and sequential projected descent with closed-form stepsize, an
implicit Euler step, and a smallest-eigenvector step), plus harnesses for
synthetic-recovery experiments and patch-based image denoising.
"""

__version__ = "0.1.0"

from . import backend
from .core import (
    AnalysisOperator,
    RandomSource,
    SignalBatch,
    SignalModelConfig,
    closeby_init,
    cosparse_projector,
    generate_signals,
    normalize_rows,
    random_operator,
)
from .objective import (
    AnalyserAccumulators,
    CosupportSelection,
    accumulate,
    cosupport_select,
    gradient_rows,
    objective_value,
    select_cosupports,
)
from .learners import (
    IterationInfo,
    ReplacementState,
    SaolState,
    StepsizeScalars,
    faol_iteration,
    iaol_iteration,
    iaol_step,
    optimal_stepsize,
    replace_coherent,
    saol_iteration,
    saol_pass,
    smallest_eigenvector,
    svaol_iteration,
    svaol_step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
