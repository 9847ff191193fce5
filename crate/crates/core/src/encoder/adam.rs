use crate::error::{Error, Result};
use crate::params::Parameters;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate that ramps linearly up to `peak` over the first
/// `warmup_fraction` of `total_steps`, then stays constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupSchedule {
    pub peak: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl WarmupSchedule {
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).ceil() as usize
    }

    /// Rate for zero-based `step`; step `t < W` gets `peak * (t + 1) / W`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = self.warmup_steps();
        if step < warmup {
            self.peak * (step + 1) as f64 / warmup as f64
        } else {
            self.peak
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> usize {
        self.step
    }
}

/// One Adam update. Fails without touching anything if a gradient is not finite.
pub fn adam_step<P: Parameters + ?Sized, G: Parameters + ?Sized>(
    params: &mut P,
    grads: &G,
    state: &mut AdamState,
    schedule: &WarmupSchedule,
) -> Result<()> {
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(name));
    }
    let g = grads.flatten();
    if params.num_params() != g.len() {
        return Err(Error::DimensionMismatch {
            what: "parameters vs gradients",
            expected: params.num_params(),
            got: g.len(),
        });
    }
    if state.m.is_empty() {
        state.m = vec![0.0; g.len()];
        state.v = vec![0.0; g.len()];
    }
    if state.m.len() != g.len() {
        return Err(Error::DimensionMismatch {
            what: "optimizer state",
            expected: state.m.len(),
            got: g.len(),
        });
    }
    let lr = schedule.lr_at(state.step);
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..g.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
    }
    let (m, v) = (&state.m, &state.v);
    let mut at = 0;
    params.visit_mut(&mut |_, _, data| {
        for (j, x) in data.iter_mut().enumerate() {
            let i = at + j;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        at += data.len();
    });
    Ok(())
}
