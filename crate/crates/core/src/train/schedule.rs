use super::TrainError;

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`: linear warmup to a peak at
/// `step == warmup`, then inverse-square-root decay.
pub fn lr_schedule(step: usize, d_model: usize, warmup: usize) -> Result<f64, TrainError> {
    if step == 0 {
        return Err(TrainError::StepZero);
    }
    let s = step as f64;
    let w = warmup.max(1) as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}
