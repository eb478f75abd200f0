//! Concealment objectives: combining the target loss `a` with the
//! discriminator loss `d = -log D(x)` by weighted sum, harmonic mean, or the
//! hypercone gradient-space construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// D(x) is clamped to [1e-7, 1 - 1e-7] before the log, so `-log D` stays in
/// [NEG_LOG_D_MIN, NEG_LOG_D_MAX] and confident discriminators cannot push
/// the objective to infinity.
pub const DISC_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationKind {
    None,
    Sum,
    Harmonic,
    Hypercone,
}

impl AggregationKind {
    pub fn name(&self) -> &'static str {
        match self {
            AggregationKind::None => "none",
            AggregationKind::Sum => "sum",
            AggregationKind::Harmonic => "harmonic",
            AggregationKind::Hypercone => "hypercone",
        }
    }
}

impl std::fmt::Display for AggregationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub kind: AggregationKind,
    /// Discriminator weight for sum aggregation.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Harmonic stabilizer keeping the denominator positive.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Hypercone half-angle offset, radians.
    #[serde(default)]
    pub delta: f64,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_gamma() -> f64 {
    1e-8
}

impl Default for AggregationSpec {
    fn default() -> Self {
        Self {
            kind: AggregationKind::None,
            alpha: default_alpha(),
            gamma: default_gamma(),
            delta: 0.0,
        }
    }
}

impl AggregationSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn sum(alpha: f64) -> Self {
        Self {
            kind: AggregationKind::Sum,
            alpha,
            ..Self::default()
        }
    }

    pub fn harmonic() -> Self {
        Self {
            kind: AggregationKind::Harmonic,
            ..Self::default()
        }
    }

    pub fn hypercone(delta: f64) -> Self {
        Self {
            kind: AggregationKind::Hypercone,
            delta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidAggregation(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidAggregation(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        if self.kind == AggregationKind::Hypercone {
            let half_pi = std::f64::consts::FRAC_PI_2;
            if !(self.delta > -half_pi && self.delta < half_pi) {
                return Err(Error::InvalidAggregation(format!(
                    "delta {} outside (-pi/2, pi/2)",
                    self.delta
                )));
            }
        }
        Ok(())
    }
}

/// l_target + alpha * (-log D).
pub fn sum_objective(l_target: f64, neg_log_d: f64, alpha: f64) -> Result<f64> {
    for (name, v) in [
        ("l_target", l_target),
        ("neg_log_d", neg_log_d),
        ("alpha", alpha),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteInput(match name {
                "l_target" => "sum_objective l_target",
                "neg_log_d" => "sum_objective neg_log_d",
                _ => "sum_objective alpha",
            }));
        }
    }
    Ok(l_target + alpha * neg_log_d)
}

/// 2ad / (a + d + gamma).
pub fn harmonic_objective(a: f64, d: f64, gamma: f64) -> Result<f64> {
    if a < 0.0 || d < 0.0 || gamma < 0.0 {
        return Err(Error::NegativeInput("harmonic_objective"));
    }
    let denom = a + d + gamma;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * a * d / denom)
}

/// Partials of [`harmonic_objective`] with respect to (a, d), for chaining
/// gradients through the combined objective.
pub fn harmonic_partials(a: f64, d: f64, gamma: f64) -> (f64, f64) {
    let denom = a + d + gamma;
    let sq = denom * denom;
    if sq == 0.0 {
        return (0.0, 0.0);
    }
    (2.0 * d * (d + gamma) / sq, 2.0 * a * (a + gamma) / sq)
}

/// Clamp `-log D` to the range implied by [`DISC_CLAMP`]. Returns the
/// clamped value and whether the raw value was inside the range; outside it
/// the discriminator gradient is treated as zero so value and gradient stay
/// consistent.
pub fn clamp_neg_log_d(raw: f64) -> (f64, bool) {
    let max = -(DISC_CLAMP.ln());
    let min = -(1.0 - DISC_CLAMP).ln();
    if raw > max {
        (max, false)
    } else if raw < min {
        (min, false)
    } else {
        (raw, true)
    }
}

/// Redirect the target-loss gradient to the hypercone around the
/// discriminator gradient:
///
/// (cos d / sin phi) * sin(d + phi) * (g_t + g_d * (|g_t|/|g_d|) * (sin phi * tan d - cos phi))
///
/// where phi is the angle between the gradients. Near-collinear pairs
/// (phi outside [1e-6, pi - 1e-6]) fall back to `grad_target` since the
/// construction is undefined there; a zero-norm input is an error the caller
/// should also resolve by falling back.
pub fn hypercone_direction(grad_target: &[f64], grad_disc: &[f64], delta: f64) -> Result<Vec<f64>> {
    let nt = norm(grad_target);
    let nd = norm(grad_disc);
    if nt == 0.0 || nd == 0.0 {
        return Err(Error::DegenerateGradient("zero-norm gradient"));
    }
    let dot: f64 = grad_target
        .iter()
        .zip(grad_disc)
        .map(|(a, b)| a * b)
        .sum();
    let cos_phi = (dot / (nt * nd)).clamp(-1.0, 1.0);
    let phi = cos_phi.acos();
    if !(1e-6..=std::f64::consts::PI - 1e-6).contains(&phi) {
        return Ok(grad_target.to_vec());
    }
    let sin_phi = phi.sin();
    let lead = (delta.cos() / sin_phi) * (delta + phi).sin();
    let disc_coeff = (nt / nd) * (sin_phi * delta.tan() - cos_phi);
    Ok(grad_target
        .iter()
        .zip(grad_disc)
        .map(|(t, d)| lead * (t + disc_coeff * d))
        .collect())
}

/// Tensor form of [`hypercone_direction`], treating the whole tensor as one
/// gradient vector.
pub fn hypercone_gradient(grad_target: &Tensor, grad_disc: &Tensor, delta: f64) -> Result<Tensor> {
    if grad_target.shape() != grad_disc.shape() {
        return Err(Error::shape(
            "hypercone_gradient",
            format!("{:?}", grad_target.shape()),
            format!("{:?}", grad_disc.shape()),
        ));
    }
    let values = hypercone_direction(grad_target.values(), grad_disc.values(), delta)?;
    Tensor::new(grad_target.shape().to_vec(), values)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
