//! Trainable state: `M_enc` encoder blocks, `M_dec` decoder blocks,
//! embeddings, optional final norms and optional per-position residual scales.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::seed::rng_for;
use crate::tensor::{Gradients, Scalar, Tensor, Var};

use super::config::{LnPlacement, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderBlock {
    pub self_attn: AttentionParams,
    pub ffn: FeedForwardParams,
    pub norms: [NormParams; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderBlock {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ffn: FeedForwardParams,
    pub norms: [NormParams; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Embeddings {
    /// One table for source, target and output projection.
    Tied { table: ParamId },
    Untied {
        source: ParamId,
        target: ParamId,
        output: ParamId,
        output_bias: ParamId,
    },
}

impl Embeddings {
    pub fn source(&self) -> ParamId {
        match *self {
            Embeddings::Tied { table } => table,
            Embeddings::Untied { source, .. } => source,
        }
    }

    pub fn target(&self) -> ParamId {
        match *self {
            Embeddings::Tied { table } => table,
            Embeddings::Untied { target, .. } => target,
        }
    }
}

/// Residual branch scales, one vector per branch per layer position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdminScales {
    pub encoder: Vec<[ParamId; 2]>,
    pub decoder: Vec<[ParamId; 3]>,
}

#[derive(Debug, Clone)]
pub struct ParameterStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    pub embeddings: Embeddings,
    pub encoder: Vec<EncoderBlock>,
    pub decoder: Vec<DecoderBlock>,
    pub encoder_final_norm: Option<NormParams>,
    pub decoder_final_norm: Option<NormParams>,
    pub admin: Option<AdminScales>,
}

/// How a freshly allocated tensor is filled.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Normal { std: f64 },
}

/// Draws initial values for the parameter called `name`. Each parameter has
/// its own stream keyed by name, so the values do not depend on allocation
/// order.
pub(crate) fn init_values(seed: u64, name: &str, shape: &[usize], init: Init) -> Vec<f64> {
    let n: usize = shape.iter().product();
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Xavier => {
            let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            let mut rng = rng_for(seed, name);
            (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
        }
        Init::Normal { std } => {
            let mut rng = rng_for(seed, name);
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
    }
}

pub(crate) struct StoreBuilder<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    seed: u64,
}

impl<T: Scalar> StoreBuilder<T> {
    pub(crate) fn new(seed: u64) -> Self {
        StoreBuilder {
            names: Vec::new(),
            tensors: Vec::new(),
            seed,
        }
    }

    pub(crate) fn add(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let data = init_values(self.seed, &name, shape, init)
            .into_iter()
            .map(T::cast_f64)
            .collect();
        let tensor = Tensor::new(shape, data).expect("positive shape").trainable();
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    fn attention(&mut self, prefix: &str, d: usize) -> AttentionParams {
        let mut w = |suffix: &str| self.add(format!("{prefix}.w{suffix}"), &[d, d], Init::Xavier);
        let (wq, wk, wv, wo) = (w("q"), w("k"), w("v"), w("o"));
        let mut b = |suffix: &str| self.add(format!("{prefix}.b{suffix}"), &[d], Init::Zeros);
        let (bq, bk, bv, bo) = (b("q"), b("k"), b("v"), b("o"));
        AttentionParams { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> FeedForwardParams {
        FeedForwardParams {
            w1: self.add(format!("{prefix}.w1"), &[d, d_ff], Init::Xavier),
            b1: self.add(format!("{prefix}.b1"), &[d_ff], Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), &[d_ff, d], Init::Xavier),
            b2: self.add(format!("{prefix}.b2"), &[d], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormParams {
        NormParams {
            gain: self.add(format!("{prefix}.gain"), &[d], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), &[d], Init::Zeros),
        }
    }

    fn finish(self) -> (Vec<String>, Vec<Tensor<T>>) {
        (self.names, self.tensors)
    }
}

impl<T: Scalar> ParameterStore<T> {
    /// Allocates `enc_blocks` + `dec_blocks` blocks and the embeddings.
    /// Admin scales (when enabled) start at one.
    pub fn allocate(config: &ModelConfig, seed: u64) -> Self {
        let d = config.d_model;
        let v = config.vocab_size;
        let mut b = StoreBuilder::<T>::new(seed);
        let emb_init = Init::Normal { std: (d as f64).powf(-0.5) };

        let embeddings = if config.tie_embeddings {
            Embeddings::Tied {
                table: b.add("embed.shared".into(), &[v, d], emb_init),
            }
        } else {
            Embeddings::Untied {
                source: b.add("embed.source".into(), &[v, d], emb_init),
                target: b.add("embed.target".into(), &[v, d], emb_init),
                output: b.add("embed.output".into(), &[v, d], emb_init),
                output_bias: b.add("embed.output_bias".into(), &[v], Init::Zeros),
            }
        };

        let encoder = (0..config.enc_blocks)
            .map(|i| {
                let p = format!("enc.block{}", i + 1);
                EncoderBlock {
                    self_attn: b.attention(&format!("{p}.self_attn"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, config.d_ff),
                    norms: [b.norm(&format!("{p}.norm1"), d), b.norm(&format!("{p}.norm2"), d)],
                }
            })
            .collect();
        let decoder = (0..config.dec_blocks)
            .map(|i| {
                let p = format!("dec.block{}", i + 1);
                DecoderBlock {
                    self_attn: b.attention(&format!("{p}.self_attn"), d),
                    cross_attn: b.attention(&format!("{p}.cross_attn"), d),
                    ffn: b.ffn(&format!("{p}.ffn"), d, config.d_ff),
                    norms: [
                        b.norm(&format!("{p}.norm1"), d),
                        b.norm(&format!("{p}.norm2"), d),
                        b.norm(&format!("{p}.norm3"), d),
                    ],
                }
            })
            .collect();

        let (encoder_final_norm, decoder_final_norm) = match config.ln_placement {
            LnPlacement::Pre => (Some(b.norm("enc.final_norm", d)), Some(b.norm("dec.final_norm", d))),
            LnPlacement::Post => (None, None),
        };

        let admin = config.admin.then(|| AdminScales {
            encoder: (0..config.enc_layers)
                .map(|l| [0, 1].map(|k| b.add(format!("admin.enc.layer{}.branch{}", l + 1, k + 1), &[d], Init::Ones)))
                .collect(),
            decoder: (0..config.dec_layers)
                .map(|l| {
                    [0, 1, 2].map(|k| b.add(format!("admin.dec.layer{}.branch{}", l + 1, k + 1), &[d], Init::Ones))
                })
                .collect(),
        });

        let (names, tensors) = b.finish();
        ParameterStore {
            names,
            tensors,
            embeddings,
            encoder,
            decoder,
            encoder_final_norm,
            decoder_final_norm,
            admin,
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds each bound leaf's gradient into its parameter.
    pub fn accumulate_grads(&mut self, bindings: &Bindings, grads: &Gradients<T>) {
        for (i, var) in bindings.vars.iter().enumerate() {
            if let Some(g) = var.and_then(|v| grads.get(v)) {
                self.tensors[i]
                    .accumulate_grad(g)
                    .expect("bound leaf has the parameter's shape");
            }
        }
    }

    /// Every layer-specific parameter of the encoder block serving each slot.
    pub fn encoder_block_params(&self, slot: usize) -> Vec<ParamId> {
        let b = &self.encoder[slot];
        let mut ids = attention_ids(&b.self_attn);
        ids.extend(ffn_ids(&b.ffn));
        ids.extend(b.norms.iter().flat_map(norm_ids));
        ids
    }

    pub fn decoder_block_params(&self, slot: usize) -> Vec<ParamId> {
        let b = &self.decoder[slot];
        let mut ids = attention_ids(&b.self_attn);
        ids.extend(attention_ids(&b.cross_attn));
        ids.extend(ffn_ids(&b.ffn));
        ids.extend(b.norms.iter().flat_map(norm_ids));
        ids
    }

    pub(crate) fn from_parts(
        names: Vec<String>,
        tensors: Vec<Tensor<T>>,
        layout: &ParameterStore<T>,
    ) -> Self {
        ParameterStore {
            names,
            tensors,
            embeddings: layout.embeddings,
            encoder: layout.encoder.clone(),
            decoder: layout.decoder.clone(),
            encoder_final_norm: layout.encoder_final_norm,
            decoder_final_norm: layout.decoder_final_norm,
            admin: layout.admin.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            embeddings: self.embeddings,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            encoder_final_norm: self.encoder_final_norm,
            decoder_final_norm: self.decoder_final_norm,
            admin: self.admin.clone(),
        }
    }
}

pub(crate) fn attention_ids(a: &AttentionParams) -> Vec<ParamId> {
    vec![a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo]
}

pub(crate) fn ffn_ids(f: &FeedForwardParams) -> Vec<ParamId> {
    vec![f.w1, f.b1, f.w2, f.b2]
}

pub(crate) fn norm_ids(n: &NormParams) -> Vec<ParamId> {
    vec![n.gain, n.bias]
}

/// Leaf handles of the parameters recorded on one graph. A parameter enters
/// the graph at most once, however many layers use it.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Option<Var>>,
}

impl Bindings {
    pub fn new(params: usize) -> Self {
        Bindings { vars: vec![None; params] }
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    pub(crate) fn bind<T: Scalar>(
        &mut self,
        g: &mut crate::tensor::Graph<T>,
        store: &ParameterStore<T>,
        id: ParamId,
    ) -> Var {
        *self.vars[id.0].get_or_insert_with(|| g.leaf(store.get(id)))
    }
}
