"""Learning Koopman singular functions by low-rank approximation.

The package is split into small modules:

``linalg``       dense SVD / eigen kernels (Jacobi, Hessenberg QR)
``autonn``       reverse-mode tape, MLP encoders, Adam, EMA, finite-difference jets
``systems``      simulators and pair datasets
``moments``      empirical second moments and nesting masks
``losses``       LoRA (plain, nested, generator) and VAMP / DPNet baselines
``inference``    CCA alignment, EDMD, spectra and multi-step prediction
``groundtruth``  finite-rank and finite-difference oracles
``metrics``      evaluation metrics
``cli``          the ``koopman-lora`` command
"""

from .errors import DivergenceError, GraphError, InvalidInputError, NumericalFailure

__version__ = "0.1.0"

__all__ = [
    "DivergenceError",
    "GraphError",
    "InvalidInputError",
    "NumericalFailure",
    "__version__",
]
