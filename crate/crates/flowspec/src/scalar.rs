//! Scalar abstraction for probability/score arithmetic.
//!
//! All score math in the tree, oracle and verifier modules is generic over
//! [`Prob`], so the same code runs in `f32` or `f64`. The crate root exports
//! concrete `f64` aliases which the simulator and CLI use.

use num_traits::Float;

/// Floating-point scalar used for probabilities and cumulative scores.
pub trait Prob:
    Float
    + num_traits::FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::fmt::LowerExp
    + Send
    + Sync
    + 'static
{
    /// Lower bound applied to stored scores so deep products never reach
    /// a denormal zero. Tree depths here stay small, so plain products are
    /// safe above this floor.
    fn score_floor() -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Prob for f32 {
    fn score_floor() -> Self {
        1e-30
    }
}

impl Prob for f64 {
    fn score_floor() -> Self {
        1e-300
    }
}

/// Total order for probabilities. Scores come from normalized
/// distributions and are never NaN.
pub fn cmp_prob<S: Prob>(a: S, b: S) -> std::cmp::Ordering {
    a.partial_cmp(&b).unwrap_or(std::cmp::Ordering::Equal)
}
