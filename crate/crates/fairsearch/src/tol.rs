//! Numerical tolerances shared by every module.
//!
//! Kept in one place so tests and the CLI can quote the same numbers.

/// Probabilities must sum to one within this.
pub const PROB_SUM: f64 = 1e-12;
/// Markov chain rows must sum to one within this.
pub const ROW_SUM: f64 = 1e-9;
/// Option values closer than this are tied (unadjusted instances).
pub const TIE: f64 = 1e-10;
/// Option values closer than this are tied after a dual adjustment.
pub const TIE_ADJUSTED: f64 = 1e-9;
/// Relative tolerance when comparing tie-break scores.
pub const SCORE: f64 = 1e-9;
/// Default cap on the product of support sizes for exact enumeration.
pub const ENUM_CAP: f64 = 1e7;
/// Default cap on memoised states in brute-force oracles.
pub const STATE_CAP: usize = 2_000_000;
/// Default bisection width for the scalar dual.
pub const DUAL_BISECTION: f64 = 1e-11;
/// Ellipsoid radius below which EEC declares the ellipsoid collapsed.
pub const EEC_RADIUS: f64 = 1e-7;
/// Residual allowed when recovering convex weights.
pub const WEIGHT_RESIDUAL: f64 = 1e-9;
/// Gittins index accuracy before the exact polish step.
pub const GITTINS: f64 = 1e-9;
