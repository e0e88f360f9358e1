//! Simplified admin initialization for deep Post-LN stacks.
//!
//! Every residual branch output is multiplied by a vector `ω` before the
//! residual add. A single profiling pass with all `ω = 1` measures the output
//! variance of each branch; layer `i` of a stack then gets
//! `ω = (1 + A_i)^(-1/2)`, where `A_i` is the summed branch variance of the
//! layers below it. The first layer of each stack keeps `ω = 1`.

use crate::tensor::{DropoutMode, Graph, Scalar};

use super::{Model, ModelError, TokenBatch};

impl<T: Scalar> Model<T> {
    /// Sets the admin scales from one dropout-free pass over a profiling batch.
    pub fn admin_profile_init(&mut self, src: &TokenBatch, tgt: &TokenBatch) -> Result<(), ModelError> {
        let Some(admin) = self.store.admin.clone() else {
            return Err(ModelError::AdminDisabled);
        };
        let all: Vec<_> = admin
            .encoder
            .iter()
            .flat_map(|l| l.iter().copied())
            .chain(admin.decoder.iter().flat_map(|l| l.iter().copied()))
            .collect();
        for &id in &all {
            self.store.get_mut(id).data_mut().fill(T::one());
        }

        let mut g = Graph::new(DropoutMode::Off);
        let pass = self.forward_inner(&mut g, src, tgt, true)?;
        let variances = pass.branch_variances;
        let enc_branches = 2 * admin.encoder.len();
        let (enc_var, dec_var) = variances.split_at(enc_branches);

        let enc_scales = depth_scales(enc_var, 2);
        let dec_scales = depth_scales(dec_var, 3);
        for (layer, ids) in admin.encoder.iter().enumerate() {
            for &id in ids {
                self.store.get_mut(id).data_mut().fill(T::cast_f64(enc_scales[layer]));
            }
        }
        for (layer, ids) in admin.decoder.iter().enumerate() {
            for &id in ids {
                self.store.get_mut(id).data_mut().fill(T::cast_f64(dec_scales[layer]));
            }
        }
        Ok(())
    }
}

/// `(1 + variance accumulated over earlier layers)^(-1/2)` per layer.
pub(crate) fn depth_scales(variances: &[f64], branches_per_layer: usize) -> Vec<f64> {
    let mut accumulated = 0.0f64;
    variances
        .chunks(branches_per_layer)
        .map(|layer| {
            let omega = (1.0 + accumulated).powf(-0.5);
            accumulated += layer.iter().sum::<f64>();
            omega
        })
        .collect()
}
