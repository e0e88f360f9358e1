use crate::tensor::{DropoutMode, Graph, Scalar, Tensor, Var};

use super::config::LnPlacement;
use super::store::{AttentionParams, Bindings, FeedForwardParams, NormParams, ParamId};
use super::{Model, ModelError};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// Row-major `[rows × len]` token ids, right-padded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    rows: usize,
    len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, rows: usize, len: usize) -> Result<Self, ModelError> {
        if rows == 0 || len == 0 || ids.len() != rows * len {
            return Err(ModelError::Config(format!(
                "token batch of {} ids cannot be shaped {rows}×{len}",
                ids.len()
            )));
        }
        Ok(TokenBatch { ids, rows, len })
    }

    /// Pads every sequence on the right to the longest one.
    pub fn from_sequences(seqs: &[Vec<usize>], pad: usize) -> Result<Self, ModelError> {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad, len - s.len()));
        }
        Self::new(ids, seqs.len(), len)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.len..(r + 1) * self.len]
    }

    /// Ids that are not `pad`.
    pub fn count_non_pad(&self, pad: usize) -> usize {
        self.ids.iter().filter(|&&t| t != pad).count()
    }
}

/// Encoder output kept on a graph for repeated decoding.
#[derive(Debug, Clone, Copy)]
pub struct Memory {
    pub states: Var,
    rows: usize,
    len: usize,
}

/// Result of recording one forward pass.
pub struct ForwardPass {
    /// `[B·T × V]` logits.
    pub logits: Var,
    pub bindings: Bindings,
    /// Variance of every residual branch output, encoder layers first, in
    /// layer then branch order. Filled only when probing was requested.
    pub branch_variances: Vec<f64>,
}

/// Sinusoidal position table `[len × d]`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

pub(crate) struct Pass<'m, T: Scalar> {
    model: &'m Model<T>,
    bindings: Bindings,
    probe: Option<Vec<f64>>,
}

impl<'m, T: Scalar> Pass<'m, T> {
    pub(crate) fn new(model: &'m Model<T>, probe: bool) -> Self {
        Pass {
            model,
            bindings: Bindings::new(model.store.len()),
            probe: probe.then(Vec::new),
        }
    }

    fn param(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        self.bindings.bind(g, &self.model.store, id)
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<(), ModelError> {
        let cfg = &self.model.config;
        if tokens.len > cfg.max_len {
            return Err(ModelError::TooLong { len: tokens.len, max: cfg.max_len });
        }
        if let Some(&id) = tokens.ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab: cfg.vocab_size });
        }
        Ok(())
    }

    fn embed(&mut self, g: &mut Graph<T>, table: ParamId, tokens: &TokenBatch) -> Result<Var, ModelError> {
        self.check_tokens(tokens)?;
        let d = self.model.config.d_model;
        let t = self.param(g, table);
        let x = g.gather(t, &tokens.ids)?;
        let x = g.scale(x, T::cast_f64((d as f64).sqrt()));
        let pe = positional_encoding(tokens.len, d);
        let tiled: Vec<T> = (0..tokens.rows)
            .flat_map(|_| pe.iter().map(|&v| T::cast_f64(v)))
            .collect();
        let x = g.add_const(x, &tiled)?;
        Ok(g.dropout(x, self.model.config.dropout))
    }

    fn linear(&mut self, g: &mut Graph<T>, x: Var, w: ParamId, b: ParamId) -> Result<Var, ModelError> {
        let (w, b) = (self.param(g, w), self.param(g, b));
        let y = g.matmul(x, w)?;
        Ok(g.add_bias(y, b)?)
    }

    fn norm(&mut self, g: &mut Graph<T>, x: Var, n: NormParams) -> Result<Var, ModelError> {
        let (gain, bias) = (self.param(g, n.gain), self.param(g, n.bias));
        Ok(g.layer_norm(x, gain, bias, T::cast_f64(LN_EPS))?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        g: &mut Graph<T>,
        p: &AttentionParams,
        queries: Var,
        keys: Var,
        rows: usize,
        mask: &[T],
    ) -> Result<Var, ModelError> {
        let heads = self.model.config.n_heads;
        let q = self.linear(g, queries, p.wq, p.bq)?;
        let k = self.linear(g, keys, p.wk, p.bk)?;
        let v = self.linear(g, keys, p.wv, p.bv)?;
        let q = g.split_heads(q, rows, heads)?;
        let k = g.split_heads(k, rows, heads)?;
        let v = g.split_heads(v, rows, heads)?;
        let scores = g.bmm_nt(q, k)?;
        let scores = g.scale(scores, T::cast_f64((self.model.config.head_dim() as f64).powf(-0.5)));
        let scores = g.add_const(scores, mask)?;
        let weights = g.softmax(scores, 2)?;
        let ctx = g.bmm(weights, v)?;
        let ctx = g.merge_heads(ctx, rows)?;
        self.linear(g, ctx, p.wo, p.bo)
    }

    fn feed_forward(&mut self, g: &mut Graph<T>, p: &FeedForwardParams, x: Var) -> Result<Var, ModelError> {
        let h = self.linear(g, x, p.w1, p.b1)?;
        let h = g.relu(h);
        self.linear(g, h, p.w2, p.b2)
    }

    /// One residual sublayer around `branch`, in the configured LN placement,
    /// with the branch output scaled by `scale` when admin is on.
    fn sublayer(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        norm: NormParams,
        scale: Option<ParamId>,
        branch: impl FnOnce(&mut Self, &mut Graph<T>, Var) -> Result<Var, ModelError>,
    ) -> Result<Var, ModelError> {
        let placement = self.model.config.ln_placement;
        let input = match placement {
            LnPlacement::Pre => self.norm(g, x, norm)?,
            LnPlacement::Post => x,
        };
        let y = branch(self, g, input)?;
        let y = g.dropout(y, self.model.config.dropout);
        if let Some(probe) = &mut self.probe {
            probe.push(variance(g.value(y)));
        }
        let y = match scale {
            Some(w) => {
                let w = self.param(g, w);
                g.scale_cols(y, w)?
            }
            None => y,
        };
        let sum = g.add(x, y)?;
        match placement {
            LnPlacement::Post => self.norm(g, sum, norm),
            LnPlacement::Pre => Ok(sum),
        }
    }

    fn encoder_layer(
        &mut self,
        g: &mut Graph<T>,
        layer: usize,
        x: Var,
        rows: usize,
        mask: &[T],
    ) -> Result<Var, ModelError> {
        let model = self.model;
        let block = model.store.encoder[model.enc_assignment.slot(layer)];
        let scales = model.store.admin.as_ref().map(|a| a.encoder[layer]);
        let x = self.sublayer(g, x, block.norms[0], scales.map(|s| s[0]), |p, g, h| {
            p.attention(g, &block.self_attn, h, h, rows, mask)
        })?;
        self.sublayer(g, x, block.norms[1], scales.map(|s| s[1]), |p, g, h| {
            p.feed_forward(g, &block.ffn, h)
        })
    }

    pub(crate) fn encode(&mut self, g: &mut Graph<T>, src: &TokenBatch) -> Result<Memory, ModelError> {
        let model = self.model;
        let cfg = &model.config;
        let pad = cfg.specials.pad;
        let mask = attention_mask::<T>(src, src, cfg.n_heads, pad, false);
        let mut x = self.embed(g, model.store.embeddings.source(), src)?;
        for layer in 0..cfg.enc_layers {
            x = self.encoder_layer(g, layer, x, src.rows, &mask)?;
        }
        if let Some(n) = model.store.encoder_final_norm {
            x = self.norm(g, x, n)?;
        }
        Ok(Memory { states: x, rows: src.rows, len: src.len })
    }

    /// Decoder stack over `tgt` attending to `memory`; returns `[B·T × V]` logits.
    pub(crate) fn decode(
        &mut self,
        g: &mut Graph<T>,
        memory: &Memory,
        src: &TokenBatch,
        tgt: &TokenBatch,
    ) -> Result<Var, ModelError> {
        if tgt.rows != memory.rows || src.rows != memory.rows || src.len != memory.len {
            return Err(ModelError::BatchMismatch { src: memory.rows, tgt: tgt.rows });
        }
        let model = self.model;
        let cfg = &model.config;
        let pad = cfg.specials.pad;
        let self_mask = attention_mask::<T>(tgt, tgt, cfg.n_heads, pad, true);
        let cross_mask = attention_mask::<T>(tgt, src, cfg.n_heads, pad, false);
        let mut x = self.embed(g, model.store.embeddings.target(), tgt)?;
        for layer in 0..cfg.dec_layers {
            let block = model.store.decoder[model.dec_assignment.slot(layer)];
            let scales = model.store.admin.as_ref().map(|a| a.decoder[layer]);
            x = self.sublayer(g, x, block.norms[0], scales.map(|s| s[0]), |p, g, h| {
                p.attention(g, &block.self_attn, h, h, tgt.rows, &self_mask)
            })?;
            x = self.sublayer(g, x, block.norms[1], scales.map(|s| s[1]), |p, g, h| {
                p.attention(g, &block.cross_attn, h, memory.states, tgt.rows, &cross_mask)
            })?;
            x = self.sublayer(g, x, block.norms[2], scales.map(|s| s[2]), |p, g, h| {
                p.feed_forward(g, &block.ffn, h)
            })?;
        }
        if let Some(n) = model.store.decoder_final_norm {
            x = self.norm(g, x, n)?;
        }
        match model.store.embeddings {
            super::Embeddings::Tied { table } => {
                let t = self.param(g, table);
                Ok(g.matmul_nt(x, t)?)
            }
            super::Embeddings::Untied { output, output_bias, .. } => {
                let (w, b) = (self.param(g, output), self.param(g, output_bias));
                let y = g.matmul_nt(x, w)?;
                Ok(g.add_bias(y, b)?)
            }
        }
    }

    pub(crate) fn finish(self, logits: Var) -> ForwardPass {
        ForwardPass {
            logits,
            bindings: self.bindings,
            branch_variances: self.probe.unwrap_or_default(),
        }
    }
}

/// Additive mask `[B·H × Sq × Sk]`: keys that are padding, or (when `causal`)
/// lie after the query, get a large negative score.
fn attention_mask<T: Scalar>(
    queries: &TokenBatch,
    keys: &TokenBatch,
    heads: usize,
    pad: usize,
    causal: bool,
) -> Vec<T> {
    let (sq, sk) = (queries.len, keys.len);
    let masked = T::cast_f64(MASKED);
    let mut mask = Vec::with_capacity(queries.rows * heads * sq * sk);
    for b in 0..queries.rows {
        let key_row = keys.row(b);
        for _ in 0..heads {
            for q in 0..sq {
                for (k, &id) in key_row.iter().enumerate() {
                    let hidden = id == pad || (causal && k > q);
                    mask.push(if hidden { masked } else { T::zero() });
                }
            }
        }
    }
    mask
}

fn variance<T: Scalar>(values: &[T]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    values.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n
}

impl<T: Scalar> Model<T> {
    /// Records a full encoder-decoder pass for teacher-forced `tgt` inputs.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        src: &TokenBatch,
        tgt: &TokenBatch,
    ) -> Result<ForwardPass, ModelError> {
        self.forward_inner(g, src, tgt, false)
    }

    pub(crate) fn forward_inner(
        &self,
        g: &mut Graph<T>,
        src: &TokenBatch,
        tgt: &TokenBatch,
        probe: bool,
    ) -> Result<ForwardPass, ModelError> {
        if src.rows != tgt.rows {
            return Err(ModelError::BatchMismatch { src: src.rows, tgt: tgt.rows });
        }
        let mut pass = Pass::new(self, probe);
        let memory = pass.encode(g, src)?;
        let logits = pass.decode(g, &memory, src, tgt)?;
        Ok(pass.finish(logits))
    }

    /// Mean label-smoothed cross-entropy of `targets` (one per `tgt` position,
    /// pad positions ignored) under teacher forcing.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        src: &TokenBatch,
        tgt: &TokenBatch,
        targets: &TokenBatch,
        smoothing: f64,
    ) -> Result<(ForwardPass, Var), ModelError> {
        if targets.rows != tgt.rows || targets.len != tgt.len {
            return Err(ModelError::BatchMismatch { src: tgt.rows, tgt: targets.rows });
        }
        let pass = self.forward(g, src, tgt)?;
        let loss = g.cross_entropy(pass.logits, &targets.ids, smoothing, self.config.specials.pad)?;
        Ok((pass, loss))
    }

    /// Loss value and the gradient of every parameter, indexed by [`ParamId`].
    /// Parameters the pass does not touch get zeros.
    pub fn gradients(
        &self,
        dropout: DropoutMode,
        src: &TokenBatch,
        tgt: &TokenBatch,
        targets: &TokenBatch,
        smoothing: f64,
    ) -> Result<(T, Vec<Vec<T>>), ModelError> {
        let mut g = Graph::new(dropout);
        let (pass, loss) = self.loss(&mut g, src, tgt, targets, smoothing)?;
        let grads = g.backward(loss)?;
        let per_param = self
            .store
            .iter()
            .map(|(id, _, t)| match pass.bindings.var(id) {
                Some(v) => grads.wrt(v),
                None => vec![T::zero(); t.numel()],
            })
            .collect();
        Ok((g.value(loss)[0], per_param))
    }

    /// Logits `[B × T × V]` with dropout off.
    pub fn logits(&self, src: &TokenBatch, tgt: &TokenBatch) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new(DropoutMode::Off);
        let pass = self.forward(&mut g, src, tgt)?;
        let v = self.config.vocab_size;
        Ok(Tensor::new(&[tgt.rows, tgt.len, v], g.value(pass.logits).to_vec())?)
    }

    /// Output of encoder layer `layer` (0-based) applied to activations
    /// `input` of shape `[B·S × d]`, with `src` supplying the padding mask.
    pub fn encoder_layer_output(
        &self,
        layer: usize,
        input: &Tensor<T>,
        src: &TokenBatch,
    ) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new(DropoutMode::Off);
        let mask = attention_mask::<T>(src, src, self.config.n_heads, self.config.specials.pad, false);
        let mut pass = Pass::new(self, false);
        let x = g.leaf(input);
        let y = pass.encoder_layer(&mut g, layer, x, src.rows, &mask)?;
        Ok(g.to_tensor(y))
    }

    /// Encodes `src` once for incremental decoding on the same graph.
    pub fn encode(&self, g: &mut Graph<T>, src: &TokenBatch) -> Result<(Memory, Bindings), ModelError> {
        let mut pass = Pass::new(self, false);
        let memory = pass.encode(g, src)?;
        Ok((memory, pass.bindings))
    }

    /// Decoder logits `[B·T × V]` for `tgt` against an encoded `memory`.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        bindings: &mut Bindings,
        memory: &Memory,
        src: &TokenBatch,
        tgt: &TokenBatch,
    ) -> Result<Var, ModelError> {
        let mut pass = Pass {
            model: self,
            bindings: std::mem::replace(bindings, Bindings::new(0)),
            probe: None,
        };
        let out = pass.decode(g, memory, src, tgt);
        *bindings = pass.bindings;
        out
    }
}
