"""
AS-aware circuit selection for an onion-routing client
"""

from .bgp_risk import MoasAlert, MoasFeed, attack_success_matrix, hijack_feasible, intercept_feasible
from .circuits import CipollinoClient, ConnectionRequest, ExposureMode, compute_exposure, mark_safety
from .config import ClientConfig, load_config
from .errors import CipollinoError
from .pathcache import GraphUpdateBundle, PathOracle, fetch_update, load_update
from .simulation import ClientKind, ClientModel, run_simulation
from .topology import AsTopology, load_topology
from .tor_net import ConsensusSnapshot, load_consensus

__version__ = "0.1.0"

__all__ = [
    'AsTopology', 'CipollinoClient', 'CipollinoError', 'ClientConfig', 'ClientKind',
    'ClientModel', 'ConnectionRequest', 'ConsensusSnapshot', 'ExposureMode',
    'GraphUpdateBundle', 'MoasAlert', 'MoasFeed', 'PathOracle', 'attack_success_matrix',
    'compute_exposure', 'fetch_update', 'hijack_feasible', 'intercept_feasible',
    'load_config', 'load_consensus', 'load_topology', 'load_update', 'mark_safety',
    'run_simulation',
]
