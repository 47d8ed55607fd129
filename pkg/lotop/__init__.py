"""Low-rank and topology-preserving B-spline registration of image sequences."""
__version__ = '0.1.0.dev0'

from . import analysis  # noqa: F401
from . import cli  # noqa: F401
from . import config  # noqa: F401
from . import deform  # noqa: F401
from . import energy  # noqa: F401
from . import exceptions  # noqa: F401
from . import lowrank  # noqa: F401
from . import random  # noqa: F401
from . import sequence  # noqa: F401
from . import solver  # noqa: F401
from . import synth  # noqa: F401
from ._tools import StallMonitor, Timer  # noqa: F401
from .config import EnergyConfig, LMSettings  # noqa: F401
from .deform import DeformationLattice, DisplacementField  # noqa: F401
from .sequence import CasoratiMatrix, ImageSequence  # noqa: F401
from .solver import RegistrationResult  # noqa: F401
