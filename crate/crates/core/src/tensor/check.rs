//! Central-difference gradient verification (64-bit only).

use super::{DropoutMode, Graph, Tensor, TensorError, Var};

/// Analytic and central-difference gradients side by side.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl FdReport {
    /// Largest coordinate-wise relative error with denominator floor `floor`.
    pub fn max_rel_err(&self, floor: f64) -> f64 {
        relative_error(&self.analytic, &self.numeric, floor)
    }
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Whole-tensor relative error `max_i |a_i - b_i| / max(‖a‖∞, ‖b‖∞, floor)`.
pub fn tensor_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / inf(a).max(inf(b)).max(floor)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn central_differences<E>(
    x: &[f64],
    h: f64,
    mut eval: impl FnMut(&[f64]) -> Result<f64, E>,
) -> Result<Vec<f64>, E> {
    let mut point = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let up = eval(&point)?;
        point[i] = orig - h;
        let down = eval(&point)?;
        point[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Compares the tape gradient of the scalar function `f` at `x` with central
/// differences of step `h`, returning the largest relative error (floor
/// `1e-12`).
///
/// Every evaluation of `f` runs on a graph with a distinct dropout key, so a
/// function that draws dropout masks is caught as non-deterministic.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    Ok(finite_diff_report(f, x, h)?.max_rel_err(1e-12))
}

pub fn finite_diff_report<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<FdReport, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let mut evaluations = 0u64;
    let graph_for = |evaluations: &mut u64| {
        *evaluations += 1;
        Graph::<f64>::new(DropoutMode::Keyed {
            seed: 0x6772_6164,
            step: *evaluations,
        })
    };

    let mut g = graph_for(&mut evaluations);
    let input = g.leaf(&x.clone().trainable());
    let out = f(&mut g, input)?;
    let first = g.value(out)[0];
    let analytic = g.backward(out)?.wrt(input);

    let mut eval = |data: &[f64]| -> Result<f64, TensorError> {
        let mut g = graph_for(&mut evaluations);
        let t = Tensor::new(x.shape(), data.to_vec())?;
        let input = g.leaf(&t);
        let out = f(&mut g, input)?;
        Ok(g.value(out)[0])
    };
    let second = eval(x.data())?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }
    let numeric = central_differences(x.data(), h, eval)?;
    Ok(FdReport { analytic, numeric })
}
