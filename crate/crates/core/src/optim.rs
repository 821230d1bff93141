//! Adaptive-moment optimizers and the step-decay learning-rate schedule.

use crate::error::{Result, SindyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Descent => -1.0,
            Direction::Ascent => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Standard,
    /// Applies twice the current adapted step minus the previous one.
    Optimistic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment estimates for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
    pub variant: Variant,
    /// Last adapted step, used by the optimistic variant.
    pub previous: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig, variant: Variant) -> Result<Self> {
        let AdamConfig { beta1, beta2, epsilon } = config;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) {
            return Err(SindyError::InvalidArgument(format!(
                "invalid moment settings beta1={beta1} beta2={beta2} epsilon={epsilon}"
            )));
        }
        Ok(Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            config,
            variant,
            previous: vec![0.0; len],
        })
    }

    pub fn standard(len: usize) -> Self {
        Self::new(len, AdamConfig::default(), Variant::Standard).expect("default settings are valid")
    }

    pub fn optimistic(len: usize) -> Self {
        Self::new(len, AdamConfig::default(), Variant::Optimistic).expect("default settings are valid")
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update of `params` in place. Entries with `frozen[i] == true` keep
    /// their value and moments untouched.
    ///
    /// A non-finite gradient leaves both params and state unchanged and is
    /// reported as an error.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        rate: f64,
        direction: Direction,
        frozen: Option<&[bool]>,
    ) -> Result<()> {
        let n = self.len();
        if params.len() != n || grads.len() != n || frozen.is_some_and(|f| f.len() != n) {
            return Err(SindyError::ShapeMismatch(format!(
                "optimizer block of {n} got {} params and {} grads",
                params.len(),
                grads.len()
            )));
        }
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(SindyError::InvalidArgument(format!("learning rate {rate}")));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(SindyError::InvalidArgument(format!("non-finite gradient at entry {i}")));
        }
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - beta2.powi(self.t.min(i32::MAX as u64) as i32);
        let sign = direction.sign();
        for i in 0..n {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let step = rate * mhat / (vhat.sqrt() + epsilon);
            let applied = match self.variant {
                Variant::Standard => step,
                Variant::Optimistic => {
                    let a = 2.0 * step - self.previous[i];
                    self.previous[i] = step;
                    a
                }
            };
            params[i] += sign * applied;
        }
        Ok(())
    }
}

/// Standard ADAM update.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    rate: f64,
    direction: Direction,
) -> Result<()> {
    if state.variant != Variant::Standard {
        return Err(SindyError::InvalidArgument("state is not a standard ADAM state".into()));
    }
    state.step(params, grads, rate, direction, None)
}

/// Optimistic ADAM ascent step.
pub fn optimistic_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    rate: f64,
) -> Result<()> {
    if state.variant != Variant::Optimistic {
        return Err(SindyError::InvalidArgument("state is not an optimistic ADAM state".into()));
    }
    state.step(params, grads, rate, Direction::Ascent, None)
}

/// `initial_rate · decay_factor^⌊epoch / decay_every⌋`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub initial_rate: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
}

impl Schedule {
    pub fn new(initial_rate: f64, decay_factor: f64, decay_every: u64) -> Result<Self> {
        let s = Self { initial_rate, decay_factor, decay_every };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_rate > 0.0 && self.initial_rate.is_finite()) {
            return Err(SindyError::InvalidArgument(format!(
                "initial rate {} must be positive",
                self.initial_rate
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(SindyError::InvalidArgument(format!(
                "decay factor {} not in (0, 1]",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(SindyError::InvalidArgument("decay_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn rate_at(&self, epoch: u64) -> f64 {
        let k = (epoch / self.decay_every).min(i32::MAX as u64) as i32;
        self.initial_rate * self.decay_factor.powi(k)
    }
}

pub fn rate_at(schedule: &Schedule, epoch: u64) -> f64 {
    schedule.rate_at(epoch)
}
