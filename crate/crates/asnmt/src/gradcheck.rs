//! Central finite-difference oracle for model gradients. Test support;
//! kept independent of the backward pass it checks.

use crate::data::{Batch, PAD};
use crate::error::Result;
use crate::model::{label_smoothed_loss, Mode, TransformerModel};
use crate::tensor::Tape;

/// Teacher-forced, label-smoothed loss of a model on one batch.
pub fn batch_loss(model: &TransformerModel, batch: &Batch, smoothing: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let (logits, _) = model.forward_batch(&mut tape, batch, &mut Mode::Eval)?;
    let loss = label_smoothed_loss(&mut tape, logits, &batch.tgt_out, PAD, smoothing)?;
    Ok(tape.value(loss)[0])
}

/// Compare backward gradients of every registered parameter against
/// central finite differences with step `h`. Returns the worst relative
/// error and the path it occurred on.
pub fn model_grad_check(model: &TransformerModel, batch: &Batch, h: f64) -> (f64, String) {
    let smoothing = 0.1;
    let mut tape = Tape::new();
    let (logits, vars) = model.forward_batch(&mut tape, batch, &mut Mode::Eval).unwrap();
    let loss = label_smoothed_loss(&mut tape, logits, &batch.tgt_out, PAD, smoothing).unwrap();
    tape.backward(loss).unwrap();

    let mut worst = 0.0;
    let mut worst_path = String::new();
    let mut perturbed = model.clone();
    for (path, id) in vars.entries() {
        let analytic = tape.grad(*id).unwrap().to_vec();
        let n = analytic.len();
        for j in 0..n {
            let original = perturbed.params.get(path).unwrap().data[j];
            perturbed.params.get_mut(path).unwrap().data[j] = original + h;
            let plus = batch_loss(&perturbed, batch, smoothing).unwrap();
            perturbed.params.get_mut(path).unwrap().data[j] = original - h;
            let minus = batch_loss(&perturbed, batch, smoothing).unwrap();
            perturbed.params.get_mut(path).unwrap().data[j] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[j] - numeric).abs()
                / analytic[j].abs().max(numeric.abs()).max(1e-3);
            if err > worst {
                worst = err;
                worst_path = format!("{path}[{j}]");
            }
        }
    }
    (worst, worst_path)
}
