//! Whole-model central-difference verification in 64-bit.

use crate::tensor::{central_differences, relative_error, tensor_relative_error, DropoutMode, Graph};

use super::{Model, ModelError, ParamId, TokenBatch};

/// Outcome for one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    /// `max |a - n| / max(|a|, |n|, floor)` over the tensor's entries.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Compares the tape gradient of the dropout-free loss with central
/// differences of step `h` for every trainable tensor.
///
/// `floor` bounds the relative-error denominator from below. Some entries
/// have an exactly zero true gradient (the key-projection bias shifts every
/// score of a query equally, which softmax ignores), and their numeric
/// estimate is pure rounding noise; a floor keeps that noise from reading as
/// a large relative error.
pub fn gradient_check(
    model: &Model<f64>,
    src: &TokenBatch,
    tgt: &TokenBatch,
    targets: &TokenBatch,
    smoothing: f64,
    h: f64,
    floor: f64,
) -> Result<Vec<ParamCheck>, ModelError> {
    let (_, analytic) = model.gradients(DropoutMode::Off, src, tgt, targets, smoothing)?;
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(analytic.len());
    for ((id, name, tensor), grad) in model.store.iter().zip(&analytic) {
        let numeric = central_differences(tensor.data(), h, |point| {
            probe.store.get_mut(id).data_mut().copy_from_slice(point);
            let mut g = Graph::new(DropoutMode::Off);
            let (_, loss) = probe.loss(&mut g, src, tgt, targets, smoothing)?;
            Ok::<f64, ModelError>(g.value(loss)[0])
        })?;
        probe.store.get_mut(id).data_mut().copy_from_slice(tensor.data());
        let max_abs_err = grad
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        out.push(ParamCheck {
            name: name.to_string(),
            max_rel_err: relative_error(grad, &numeric, floor),
            max_abs_err,
        });
    }
    Ok(out)
}

/// Largest whole-tensor relative error between each block's gradient and the
/// sum of the per-position gradients of its untied clone, over every block
/// parameter of both stacks and every shared non-block parameter.
///
/// The denominator is floored at `1e-6` times the largest gradient entry of
/// the model, so tensors whose true gradient is exactly zero compare their
/// rounding residue against the model's gradient scale.
pub fn tied_gradient_error(
    model: &Model<f64>,
    src: &TokenBatch,
    tgt: &TokenBatch,
    targets: &TokenBatch,
    smoothing: f64,
) -> Result<f64, ModelError> {
    let clone = model.clone_untied();
    let (_, shared) = model.gradients(DropoutMode::Off, src, tgt, targets, smoothing)?;
    let (_, split) = clone.gradients(DropoutMode::Off, src, tgt, targets, smoothing)?;
    let scale = shared.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = 1e-6 * scale;

    let mut worst = 0.0f64;
    let mut compare = |original: ParamId, copies: Vec<ParamId>| {
        let mut sum = vec![0.0; shared[original.index()].len()];
        for c in copies {
            sum.iter_mut().zip(&split[c.index()]).for_each(|(s, g)| *s += g);
        }
        worst = worst.max(tensor_relative_error(&shared[original.index()], &sum, floor));
    };
    for slot in 0..model.store.encoder.len() {
        let positions = model.enc_assignment().positions_of(slot);
        for (k, id) in model.store.encoder_block_params(slot).into_iter().enumerate() {
            compare(id, positions.iter().map(|&l| clone.store.encoder_block_params(l)[k]).collect());
        }
    }
    for slot in 0..model.store.decoder.len() {
        let positions = model.dec_assignment().positions_of(slot);
        for (k, id) in model.store.decoder_block_params(slot).into_iter().enumerate() {
            compare(id, positions.iter().map(|&l| clone.store.decoder_block_params(l)[k]).collect());
        }
    }
    for (id, name, _) in model.store.iter() {
        if !name.starts_with("enc.block") && !name.starts_with("dec.block") {
            let twin = clone.store.id_of(name).expect("clone keeps non-block names");
            compare(id, vec![twin]);
        }
    }
    Ok(worst)
}
