"""Sequence and vector VAEs with diagonal or isotropic Gaussian posteriors."""
from .distributions import DIAGONAL, ISOTROPIC, GaussianPosterior, Prior, verify_theorem1
from .models import SeqVae, SeqVaeConfig, VectorVae, VectorVaeConfig, untie_warm_start
from .objectives import ObjectiveConfig

__all__ = ["DIAGONAL", "ISOTROPIC", "GaussianPosterior", "Prior", "verify_theorem1", "SeqVae", "SeqVaeConfig",
           "VectorVae", "VectorVaeConfig", "untie_warm_start", "ObjectiveConfig"]
__version__ = "0.1.0"
