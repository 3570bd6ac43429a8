"""Transfer-oriented adversarial attacks on small numpy networks."""

from .attacks import AttackConfig, AttackTrace, run
from .dataio import Dataset, load_idx, synth_blobs
from .nn import Network, forward, grad_input, load_network, save_network

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackTrace",
    "Dataset",
    "Network",
    "forward",
    "grad_input",
    "load_idx",
    "load_network",
    "run",
    "save_network",
    "synth_blobs",
]
