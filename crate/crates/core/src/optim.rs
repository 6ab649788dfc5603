//! Optimizers: the TSGO rotation of the center tensor with its angle
//! schedule, and a plain Adam baseline over all site tensors.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::linalg::DenseTensor;
use crate::loss::GradientTensor;
use crate::mps::Mps;

/// Gradients shorter than this are treated as a stationary point.
pub const MIN_GRADIENT_NORM: f64 = 1e-14;

pub const DEFAULT_SHRINK: f64 = 1.0 / 3.0;
pub const DEFAULT_MIN_THETA: f64 = 1e-4;

fn check_angle(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta < FRAC_PI_2) {
        return Err(Error::InvalidArgument(format!(
            "rotation angle {theta} must lie in (0, pi/2)"
        )));
    }
    Ok(())
}

/// `eta = tan(theta)`
pub fn learning_rate_from_angle(theta: f64) -> Result<f64> {
    check_angle(theta)?;
    Ok(theta.tan())
}

/// How the gradient enters the center update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepDirection {
    /// `T - tan(theta) g/|g|`: rotates the normalized state by exactly theta.
    #[default]
    Unit,
    /// `T - tan(theta) g`: the literal learning-rate form; the rotation
    /// angle then depends on `|g|`.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Rotated,
    /// The gradient vanished at the center; the state was left as is.
    Converged,
}

/// Updates the center tensor towards `-g` and renormalizes it.
pub fn tsgo_step(
    mps: &Mps,
    g: &GradientTensor,
    theta: f64,
    direction: StepDirection,
) -> Result<(Mps, StepOutcome)> {
    check_angle(theta)?;
    let c = mps
        .center()
        .ok_or_else(|| Error::InvalidArgument("tsgo_step needs a canonical MPS".into()))?;
    if g.site != c {
        return Err(Error::InvalidArgument(format!(
            "gradient is for site {} but the center is {c}",
            g.site
        )));
    }
    match rotate_tensor(mps.tensor(c), &g.values, theta, direction)? {
        Some(t) => {
            let mut out = mps.clone();
            out.replace_tensor(c, t)?;
            Ok((out, StepOutcome::Rotated))
        }
        None => Ok((mps.clone(), StepOutcome::Converged)),
    }
}

/// The normalized `T - step * g`, or `None` when `g` has vanished.
pub(crate) fn rotate_tensor(
    t: &DenseTensor,
    g: &DenseTensor,
    theta: f64,
    direction: StepDirection,
) -> Result<Option<DenseTensor>> {
    if g.shape() != t.shape() {
        return Err(Error::Shape(format!(
            "gradient extents {:?} vs center {:?}",
            g.shape(),
            t.shape()
        )));
    }
    let gnorm = g.norm();
    if gnorm < MIN_GRADIENT_NORM {
        return Ok(None);
    }
    let eta = theta.tan();
    let step = match direction {
        StepDirection::Unit => eta / gnorm,
        StepDirection::Raw => eta,
    };
    let mut t = t.clone();
    t.add_scaled(-step, g)?;
    let norm = t.norm();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::NonFinite("tsgo_step"));
    }
    t.scale_in_place(1.0 / norm);
    Ok(Some(t))
}

/// Rotation angle with the shrink-on-increase schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsgoState {
    pub theta: f64,
    pub initial_theta: f64,
    pub shrink_factor: f64,
    pub last_loss: Option<f64>,
    pub min_theta: f64,
}

impl TsgoState {
    pub fn new(theta0: f64) -> Result<Self> {
        Self::with_schedule(theta0, DEFAULT_SHRINK, DEFAULT_MIN_THETA)
    }

    pub fn with_schedule(theta0: f64, shrink_factor: f64, min_theta: f64) -> Result<Self> {
        check_angle(theta0)?;
        if !(shrink_factor > 0.0 && shrink_factor < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "shrink factor {shrink_factor} must lie in (0, 1)"
            )));
        }
        if min_theta.is_nan() || min_theta <= 0.0 {
            return Err(Error::InvalidArgument("min_theta must be positive".into()));
        }
        Ok(Self {
            theta: theta0,
            initial_theta: theta0,
            shrink_factor,
            last_loss: None,
            min_theta,
        })
    }

    /// Shrinks theta when the loss went up since the last observation.
    /// Theta never increases.
    pub fn schedule_update(&self, new_loss: f64) -> TsgoState {
        let mut next = *self;
        if let Some(last) = self.last_loss {
            if new_loss > last {
                let shrunk = (self.theta * self.shrink_factor).max(self.min_theta);
                next.theta = self.theta.min(shrunk);
            }
        }
        next.last_loss = Some(new_loss);
        next
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<DenseTensor>,
    second_moment: Vec<DenseTensor>,
    step_count: u64,
}

impl AdamState {
    pub fn new(params: &[DenseTensor], config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| DenseTensor::zeros(p.shape().to_vec()))
                .collect()
        };
        Self {
            config,
            first_moment: zeros(),
            second_moment: zeros(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [DenseTensor],
    grads: &[DenseTensor],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(Error::Shape(format!(
                "adam: parameter {i} has extents {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    let AdamConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        epsilon: eps,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(
        state
            .first_moment
            .iter_mut()
            .zip(state.second_moment.iter_mut()),
    ) {
        for (((pv, gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
