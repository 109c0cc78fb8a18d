"""Dynamic-accuracy derivative-free trust-region methods for bilevel hyperparameter learning."""
from .bilevel import (BilevelOracle, ReferenceOracle, Regularizer, ResidualEval, TrainingSet, WarmStartCache,
                      evaluate_to_f_accuracy, evaluate_to_x_accuracy, fixed_iteration_evaluate)
from .datagen import Dataset, SignalSpec, make_dataset
from .driver import IterationRecord, RunResult, TrustRegionConfig, run
from .exceptions import CertificationError, DomainError, GeometryError, NumericalError
from .model import InterpSet, LocalModel, fit, improve_geometry, lagrange_poisedness
from .problems import ConvexityBounds, ParamMap, ProblemInstance, convexity_constants, instantiate
from .solvers import FixedIterations, GradientCertified, fista_solve, gd_solve
from .trs import TrsSolution, solve_trs

__version__ = "0.1.0"
