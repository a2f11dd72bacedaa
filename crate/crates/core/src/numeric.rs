//! Shared numeric tolerances.
//!
//! Solver code and tests read the same constants so a tolerance change
//! moves both sides at once.

/// Tolerance record used across the crate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    /// Slack on the membership quadratic form, `(x-q)' Q^-1 (x-q) <= 1 + membership`.
    pub membership: f64,
    /// Relative asymmetry allowed in a shape matrix.
    pub symmetry: f64,
    /// Slack on the maximised quadratic form in ellipsoid containment.
    pub containment: f64,
    /// Strict-interior margin for automaton domains and guards.
    pub interior: f64,
}

pub const TOL: Tolerances = Tolerances {
    membership: 1e-9,
    symmetry: 1e-10,
    containment: 1e-8,
    interior: 1e-9,
};
