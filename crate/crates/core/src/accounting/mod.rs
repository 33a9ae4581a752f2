//! Privacy accounting for the Poisson binomial mechanism.

pub mod curve;
pub mod divergence;
pub mod pbm;
pub mod pmf;
pub mod select;

pub use curve::{
    compose, gaussian_curve, gaussian_mse, gaussian_rdp, params_hash, rdp_to_dp, rdp_to_dp_simple,
    subsample_estimate, CurveKind, RdpCurve, CONVERSION_ALPHAS, DEFAULT_ALPHAS,
};
pub use divergence::renyi_divergence;
pub use pbm::{
    calibrate_c0, calibration_grid, extreme_pair, pbm_asymptotic_curve, pbm_asymptotic_rdp,
    pbm_exact_curve, pbm_exact_rdp, pbm_exact_rdp_argmax, Direction, ExtremeConfig, KSet,
    CALIBRATED_C0,
};
pub use pmf::{binomial_logpmf, convolve, LogPmf};
pub use select::{achieved_approx_dp, select_params, select_params_approx_dp, SelectedParams};
