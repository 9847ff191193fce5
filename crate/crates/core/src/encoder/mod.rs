//! Sequence encoders.
//!
//! [`SequenceEncoder`] is the seam between the linking models and whatever
//! produces a pooled representation of a `[CLS] ... [SEP]` sequence. The
//! crate ships one implementation, [`TransformerEncoder`], a small post-LN
//! transformer in 64-bit floats with a hand-written backward pass.

mod adam;
mod checkpoint;
mod transformer;

pub use adam::{adam_step, AdamState, WarmupSchedule, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, TensorRecord};
pub use transformer::{
    EncoderConfig, EncoderParams, LayerParams, TransformerEncoder, TransformerTape,
};

use crate::corpus::TokenSequence;
use crate::error::Result;
use crate::params::Parameters;

/// Pooled representation plus whatever the encoder needs to backpropagate.
#[derive(Debug, Clone)]
pub struct EncoderOutput<T> {
    pub pooled: Vec<f64>,
    pub tape: T,
}

pub trait SequenceEncoder {
    type Tape;
    type Grads: Parameters;

    /// Width `d` of the pooled vector.
    fn width(&self) -> usize;
    fn max_len(&self) -> usize;
    fn encode(&self, seq: &TokenSequence) -> Result<EncoderOutput<Self::Tape>>;
    fn zero_grads(&self) -> Self::Grads;

    /// Accumulate gradients of `<pooled, pooled_grad>` into `grads`.
    fn backprop_into(
        &self,
        output: &EncoderOutput<Self::Tape>,
        pooled_grad: &[f64],
        grads: &mut Self::Grads,
    ) -> Result<()>;

    fn backprop(&self, output: &EncoderOutput<Self::Tape>, pooled_grad: &[f64]) -> Result<Self::Grads> {
        let mut grads = self.zero_grads();
        self.backprop_into(output, pooled_grad, &mut grads)?;
        Ok(grads)
    }
}
