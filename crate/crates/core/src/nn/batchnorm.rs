use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Running statistics of one batch-norm layer. `None` until the first
/// train-mode pass, which initializes them from that batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Option<Vec<f64>>,
    pub running_var: Option<Vec<f64>>,
}

impl BatchNormState {
    pub fn is_initialized(&self) -> bool {
        self.running_mean.is_some() && self.running_var.is_some()
    }
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub fn channel_stats(values: &[f64], b: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    for s in 0..b {
        for (ci, mu) in mean.iter_mut().enumerate() {
            let off = (s * c + ci) * hw;
            *mu += values[off..off + hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; c];
    for s in 0..b {
        for ci in 0..c {
            let off = (s * c + ci) * hw;
            let mu = mean[ci];
            var[ci] += values[off..off + hw]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

/// Batch normalization of `[c, h, w]` or `[batch, c, h, w]` input.
///
/// Train mode normalizes with the batch statistics and folds them into the
/// running averages (`running = 0.9 * running + 0.1 * batch`). Infer mode uses
/// the running averages and fails if no train pass has happened yet.
pub fn batchnorm(
    tape: &mut Tape,
    x: Var,
    scale: Var,
    shift: Var,
    state: &mut BatchNormState,
    mode: Mode,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, c, hw) = match *shape.as_slice() {
        [c, h, w] => (1, c, h * w),
        [b, c, h, w] => (b, c, h * w),
        _ => return Err(Error::shape("batchnorm", &shape, &[0, 0, 0])),
    };
    match mode {
        Mode::Train => {
            let (mean, var) = channel_stats(tape.value(x), b, c, hw);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            match (&mut state.running_mean, &mut state.running_var) {
                (Some(rm), Some(rv)) if rm.len() == c && rv.len() == c => {
                    for i in 0..c {
                        rm[i] = BN_MOMENTUM * rm[i] + (1.0 - BN_MOMENTUM) * mean[i];
                        rv[i] = BN_MOMENTUM * rv[i] + (1.0 - BN_MOMENTUM) * var[i];
                    }
                }
                _ => {
                    state.running_mean = Some(mean.clone());
                    state.running_var = Some(var);
                }
            }
            tape.batchnorm_with_stats(x, scale, shift, mean, inv_std, true)
        }
        Mode::Infer => {
            let (Some(rm), Some(rv)) = (&state.running_mean, &state.running_var) else {
                return Err(Error::UninitializedStats);
            };
            if rm.len() != c {
                return Err(Error::shape("batchnorm running stats", &shape, &[rm.len()]));
            }
            let inv_std = rv.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            tape.batchnorm_with_stats(x, scale, shift, rm.clone(), inv_std, false)
        }
    }
}
