"""Deep-Image-Prior pre-image recovery regularized by a learned loss estimator."""
from .errors import InputError, NumericalError, StateError

__version__ = "0.1.0"

__all__ = ["InputError", "NumericalError", "StateError", "__version__"]
