"""Nonstationary Gaussian process covariance via learned coordinate warps.

A warp ``g`` maps geographic sites into a space where the covariance is
stationary and isotropic: axis scaling (``aniso``), a thin plate
regression spline deformation (``deform``), or extra latent coordinates
(``expand``).
"""

__version__ = "0.1.0"

from .splinebasis import AnchorSet, PenaltyLayout, WarpBasis, build_basis, build_E, build_penalties, eta, truncate_basis
from .warp import FoldConfig, FoldPenalty, Tiling, Warp, WarpSpec, build_tiling, clockwise_area, fold_penalty, is_bijective
from .gplik import CovModel, CovParams, GPLikelihood, SampleCov, build_sigma, gp_loglik, powexp_corr
from .fit import FitContext, FittedModel, coefficient_uncertainty, fit, inner_newton, outer_optimize, penalized_loglik, reml_objective
from .postfit import PredictionResult, VariogramData, pivoted_cholesky, predict_dspace, predict_vcov, simulate_gp, variogram_data
from .censored import CensoredFit, CensoredMatrix, bvn_cdf, cencor, cencov, fit_marginal_censored, fit_pairwise_rho, fitcenmvn
from .modelio import load_model, save_model
