"""Variational Fokker-Planck particle filters and smoothers for twin experiments."""
from .assimilate import (CycleResult, MethodSpec, RingGeometry, gaspari_cohn,
                         local_influence_set, local_vfp_analysis, localized_grad_log_q,
                         rblw_shrinkage, vfp_analysis, vfp_filter_run, vfps_drift, vfps_run)
from .baselines import etkf_analysis, sir_step, systematic_resample
from .densities import (GaussianError, CauchyError, ObservationModel, bessel_k_ratio, fit,
                        grad_log_density, hessian_log_density, obs_grad_log_likelihood)
from .dynamics import (ModelSystem, Trajectory, discrete_adjoint, integrate, lorenz63,
                       lorenz63_rhs, lorenz96, lorenz96_rhs, tangent_linear)
from .ensemble import Ensemble, anomalies, covariance, mean
from .flow import (DiffusionSpec, DriftContext, FlowConfig, coulomb_force, diffusion_apply,
                   flow_to_steady_state, optimal_drift, posterior_grad_log, rem_step)
from .harness import ExperimentConfig, generate_truth_and_obs, run_experiment
from .metrics import MetricSeries, rank_histogram, rmse

__version__ = "0.1.0"
