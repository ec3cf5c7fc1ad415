"""Interpretable monotonic set functions built from calibrated lattices."""

from latticeagg.lattice_core import (
    Calibrator,
    Lattice,
    calibrate,
    calibrate_gradient,
    interpolate,
    isotonic_regression,
    lattice_gradient,
    project_calibrator,
    project_lattice,
)
from latticeagg.model import (
    AggModel,
    ExampleSet,
    explain,
    export_calibrator_curves,
    export_token_scores,
    forward,
    forward_batch,
    init_model,
    init_model_from_examples,
    phi_forward,
)
from latticeagg.training import TrainConfig, backprop, loss, project_all, train, tune

__version__ = "0.1.0"
