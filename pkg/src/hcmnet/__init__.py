"""Sigmoid networks for hierarchical composition models: approximation, estimation, complexity."""

from .hcm import HCMSpec, evaluate_hcm, load_hcm, validate_hcm
from .network import Network, NetworkClass, forward, in_class

__all__ = ["HCMSpec", "Network", "NetworkClass", "evaluate_hcm", "forward", "in_class",
           "load_hcm", "validate_hcm"]
__version__ = "0.1.0"
