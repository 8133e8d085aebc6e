"""Sequential testing of treatment-by-covariate interactions.

The main entry points are :func:`run_sequence` for a dataset and
:func:`mc_study` for simulation studies; ``seqint`` on the command line wraps
both.
"""

__version__ = "0.1.0"

from .calibration import BootstrapPlan, CalibrationResult, calibrate_step  # noqa: E402
from .core import DrRecipe, RctRecipe  # noqa: E402
from .data import Dataset, StepContext, validate  # noqa: E402
from .errors import DataError, NumericalError, SeqIntError  # noqa: E402
from .nuisance import NuisanceSpec  # noqa: E402
from .sequential import SequenceConfig, SequenceResult, StepResult, run_sequence, run_sequence_exploratory  # noqa: E402
from .simgen import McReport, MethodRun, Scenario, canonical, generate, mc_study, oracle_b  # noqa: E402

__all__ = [
    "BootstrapPlan", "CalibrationResult", "DataError", "Dataset", "DrRecipe", "McReport", "MethodRun",
    "NuisanceSpec", "NumericalError", "RctRecipe", "Scenario", "SeqIntError", "SequenceConfig", "SequenceResult",
    "StepContext", "StepResult", "calibrate_step", "canonical", "generate", "mc_study", "oracle_b",
    "run_sequence", "run_sequence_exploratory", "validate",
]
