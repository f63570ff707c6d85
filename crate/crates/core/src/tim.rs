//! Per-channel temporal convolution filling the temporal-interaction slot that
//! follows channel enhancement inside every block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_KERNEL: usize = 3;

/// Starting kernel for every block's temporal convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimInit {
    /// `[0, 1, 0]` everywhere.
    #[default]
    Identity,
    /// One eighth of the channels read the previous frame, one eighth the
    /// next, the rest are identity.
    Shift,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimParams {
    /// `[C, Kt]`, `Kt` odd, cross-correlated over time with zero padding.
    pub wt: Tensor,
}

impl TimParams {
    /// Identity kernel `[0, 1, 0]` for every channel.
    pub fn identity(channels: usize) -> Self {
        Self::identity_with_size(channels, DEFAULT_KERNEL)
    }

    pub fn identity_with_size(channels: usize, k: usize) -> Self {
        let mut wt = Tensor::zeros(&[channels, k]);
        for c in 0..channels {
            wt.set(&[c, k / 2], 1.0);
        }
        Self { wt }
    }

    /// Kernel `[1, 0, 0]` (previous frame) on the first `C/8` channels and
    /// `[0, 0, 1]` on the next `C/8`, identity elsewhere.
    pub fn shift(channels: usize) -> Self {
        let mut p = Self::identity(channels);
        let fold = (channels / 8).max(1).min(channels / 2);
        for c in 0..2 * fold {
            p.wt.set(&[c, 1], 0.0);
            p.wt.set(&[c, if c < fold { 0 } else { 2 }], 1.0);
        }
        p
    }

    pub fn with_init(channels: usize, init: TimInit) -> Self {
        match init {
            TimInit::Identity => Self::identity(channels),
            TimInit::Shift => Self::shift(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.wt.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.wt.rank() != 2 || self.wt.shape()[1] % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal kernel must be [C, odd], got {:?}",
                self.wt.shape()
            )));
        }
        if !self.wt.all_finite() {
            return Err(Error::Numeric("temporal kernel".into()));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> Var {
        tape.leaf(self.wt.clone())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let k = self.bind(&mut tape);
        let y = tim_forward(&mut tape, xv, k)?;
        Ok(tape.value(y).clone())
    }
}

pub fn tim_forward(tape: &mut Tape, x: Var, kernel: Var) -> Result<Var> {
    tape.temporal_conv(x, kernel)
}
