"""Sum-of-Squares greedy matching with a static planning LP layer."""
from .instance import (
    ArrivalRates,
    InstanceError,
    MatchingInstance,
    ResourceClass,
    binpacking_instance,
    load_instance,
    validate,
)
from .spp import SppSolution, GpgReport, check_gpg, dual_from_basis, estimate_epsilon0, hindsight_opt, solve_spp
from .engine import SimState, simulate
from .trace import Trace

__version__ = "0.1.0"
