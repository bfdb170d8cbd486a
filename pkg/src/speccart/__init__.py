"""speccart: spatio-spectral radio-map tensor completion from sparse fibers.

Subpackages follow the processing chain: `simulate` generates shadowed
scenes and training corpora, `neural` trains the per-emitter completion
prior, `factor` holds the separable-NMF/NNLS machinery, `nasdac` and
`dowjons` are the two completion solvers, `baseline` the thin-plate-spline
reference, `metrics` the evaluation suite, and `theory` the recoverability
bound evaluators.  `cli` ties everything into reproducible experiments.
"""

from .core import (
    FactorModel,
    FiberObservations,
    GridSpec,
    Psd,
    RadioMapTensor,
    SensingMask,
    Slf,
    assemble,
    extract_G,
    fold,
    scatter_rows,
    unfold,
)

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "RadioMapTensor",
    "Slf",
    "Psd",
    "SensingMask",
    "FiberObservations",
    "FactorModel",
    "assemble",
    "unfold",
    "fold",
    "extract_G",
    "scatter_rows",
    "__version__",
]
