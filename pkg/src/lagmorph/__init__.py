"""Indirect image matching with a Lagrangian flow and an additive source."""
from .errors import ConvergenceError, InvalidInputError, NumericalBlowupError
from .grid import CellGrid, ScalarField, VelocityField
from .radon import RadonOperator, Sinogram, SinogramGeometry, level_geometry
from .functionals import Objective, ObjectiveConfig
from .ipalm import IpalmConfig, ipalm_solve
from .pipeline import reconstruct

__version__ = "0.1.0"
