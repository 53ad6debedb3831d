"""Sparse functional PCA forecasting and mixed-model prediction for irregular longitudinal data."""

from sparsefpca.errors import ConfigError, DataError, NumericalError, SparseFpcaError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "NumericalError", "SparseFpcaError", "__version__"]
