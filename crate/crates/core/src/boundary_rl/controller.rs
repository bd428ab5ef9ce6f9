//! State, step and reward rules of the loss-band controller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Last `k` batch losses followed by the previous signed step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerState<T> {
    pub losses: Vec<T>,
    pub prev_update: T,
}

impl<T: Scalar> ControllerState<T> {
    pub fn to_vec(&self) -> Vec<T> {
        let mut v = self.losses.clone();
        v.push(self.prev_update);
        v
    }

    pub fn latest_loss(&self) -> T {
        *self.losses.last().expect("state holds at least one loss")
    }
}

/// Builds the state from the loss history (oldest first). Histories shorter
/// than `k` are left-padded with their oldest value.
pub fn build_state<T: Scalar>(
    history: &[T],
    prev_update: T,
    k: usize,
) -> Result<ControllerState<T>> {
    if history.is_empty() {
        return Err(Error::Empty("loss history"));
    }
    if k == 0 {
        return Err(Error::invalid("state history length k must be positive"));
    }
    let tail = &history[history.len().saturating_sub(k)..];
    let mut losses = vec![tail[0]; k - tail.len()];
    losses.extend_from_slice(tail);
    Ok(ControllerState {
        losses,
        prev_update,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandConfig {
    pub l_low: f64,
    pub l_up: f64,
    pub target: f64,
    pub eta_pos: f64,
    pub eta_neg: f64,
    pub a_min: f64,
    pub a_max: f64,
}

impl BandConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.l_low,
            self.l_up,
            self.target,
            self.eta_pos,
            self.eta_neg,
            self.a_min,
            self.a_max,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("band parameters must be finite"));
        }
        if self.l_low >= self.l_up {
            return Err(Error::invalid(format!(
                "band lower bound {} not below upper bound {}",
                self.l_low, self.l_up
            )));
        }
        if self.target < self.l_low || self.target > self.l_up {
            return Err(Error::invalid(format!(
                "target loss {} outside the band",
                self.target
            )));
        }
        if self.eta_pos <= 0.0 || self.eta_neg <= 0.0 {
            return Err(Error::invalid("base step sizes must be positive"));
        }
        if self.a_min < 0.0 || self.a_min >= self.a_max {
            return Err(Error::invalid("action bounds need 0 <= a_min < a_max"));
        }
        Ok(())
    }

    /// Band `[low_mult * l, up_mult * l]` around a reference loss with its
    /// midpoint as the target.
    pub fn around(
        reference: f64,
        low_mult: f64,
        up_mult: f64,
        eta_pos: f64,
        eta_neg: f64,
    ) -> Result<Self> {
        let band = Self {
            l_low: low_mult * reference,
            l_up: up_mult * reference,
            target: 0.5 * (low_mult + up_mult) * reference,
            eta_pos,
            eta_neg,
            a_min: 0.0,
            a_max: 1.0,
        };
        band.validate()?;
        Ok(band)
    }

    pub fn contains(&self, loss: f64) -> bool {
        self.l_low <= loss && loss <= self.l_up
    }

    pub fn clip_action(&self, a: f64) -> f64 {
        a.clamp(self.a_min, self.a_max)
    }
}

/// Positive steps descend the reconstruction loss, negative steps ascend it.
pub fn signed_step<T: Scalar>(action: T, loss: T, band: &BandConfig) -> T {
    let l = loss.as_f64();
    if l > band.l_up {
        T::lit(band.eta_pos) * action
    } else if l < band.l_low {
        -(T::lit(band.eta_neg) * action)
    } else {
        T::zero()
    }
}

pub fn reward<T: Scalar>(l_before: T, l_after: T, band: &BandConfig) -> T {
    let target = T::lit(band.target);
    let bonus = if band.contains(l_after.as_f64()) {
        T::one()
    } else {
        T::zero()
    };
    (l_before - target).abs() - (l_after - target).abs() + bonus
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition<T> {
    pub step: usize,
    pub state: ControllerState<T>,
    pub action: T,
    pub update: T,
    pub reward: T,
    pub l_before: T,
    pub l_after: T,
}

impl<T: Scalar> Transition<T> {
    pub fn in_band(&self, band: &BandConfig) -> bool {
        band.contains(self.l_after.as_f64())
    }
}
