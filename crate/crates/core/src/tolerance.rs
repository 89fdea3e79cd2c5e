//! Numeric tolerances shared by the library and its test suites.
//!
//! Every comparison threshold used for an invariant lives here so that the
//! checks in different modules agree with each other.

/// Rigid-transform algebra: composition, inversion, interpolation (meters / radians).
pub const ALGEBRA: f64 = 1e-9;

/// Norm drift allowed on a unit quaternion after any operation.
pub const QUATERNION_NORM: f64 = 1e-9;

/// Step-bound slack when checking trajectory continuity.
pub const CONTINUITY: f64 = 1e-12;

/// Drift of an attached object relative to the end effector while held.
pub const ATTACHMENT: f64 = 1e-12;

/// Resting-contact slack: object bottoms may sit this far below a support surface.
pub const RESTING: f64 = 1e-6;

/// Forward-accumulated delta actions must reproduce recorded poses within this (meters).
pub const ACTION_ROUND_TRIP: f64 = 1e-6;

/// Normalize/denormalize round trip of action chunks.
pub const NORMALIZATION: f64 = 1e-9;
