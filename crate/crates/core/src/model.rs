//! The interface shared by everything the trainer can fit.

use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::preprocess::FeatureKind;
use crate::tensor::{Checkpoint, ParamSet, Tape, Tensor, Var};

/// Result of a forward pass recorded on a tape.
pub struct Forward {
    pub logits: Var,
    /// Tape leaves of the model parameters, in registry order.
    pub bound: Vec<Var>,
}

pub trait Classifier {
    /// Feature streams the model reads from a batch.
    fn features(&self) -> Vec<FeatureKind>;

    fn classes(&self) -> usize;

    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// Records the forward pass. In training mode normalization layers use
    /// and update batch statistics.
    fn forward(&mut self, tape: &mut Tape, batch: &Batch, training: bool) -> Result<Forward>;

    /// Parameters plus non-trainable buffers, with an architecture header.
    fn checkpoint(&self) -> Checkpoint;

    fn restore(&mut self, checkpoint: &Checkpoint) -> Result<()>;

    /// Eval-mode logits without keeping the tape.
    fn predict_logits(&mut self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, false)?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Copies named tensors out of `checkpoint` into `params`, checking shapes.
pub(crate) fn restore_params(params: &mut ParamSet, checkpoint: &Checkpoint) -> Result<()> {
    for i in 0..params.len() {
        let name = params.name(i).to_string();
        let src = checkpoint
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {name}")))?;
        let dst = params.get_mut(i);
        if src.shape() != dst.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

pub(crate) fn check_architecture(checkpoint: &Checkpoint, expected: &str) -> Result<()> {
    if checkpoint.header.architecture != expected {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint {}, model {expected}",
            checkpoint.header.architecture
        )));
    }
    Ok(())
}
