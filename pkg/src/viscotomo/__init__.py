"""Visco-acoustic frequency-domain wave modelling and full-waveform inversion."""

from .attenuation import (ComplexFrequency, KSB, ColeCole, Generalized, KelvinVoigt,
                          KolskyFutterman, Maxwell, NoAttenuation, Szabo, Zener,
                          calibrate_to_quality, complex_wave_speed, dispersion_table,
                          evaluate_bulk_modulus, quality_factor, validate_attenuation)
from .errors import (CalibrationError, ConstraintViolation, ContractError, DomainError,
                     FactorizationError, ValidityError, ViscotomoError)
from .inversion import (InversionConfig, InversionHistory, adjoint_gradient, frequency_schedule,
                        invert, misfit)
from .medium import (MediumGrid, Parametrization, PhantomSpec, build_phantom, read_grid,
                     relative_model_error, reparametrize, write_grid)
from .signal import RickerSpec, TimeSignal, add_white_noise, laplace_fourier, ricker
from .solver import (Acquisition, ArraySource, BoundarySpec, FrequencyData, HelmholtzSystem,
                     PointSource, analytic_green_2d, assemble_system, factorize, forward_map)

__version__ = "0.1.0"
