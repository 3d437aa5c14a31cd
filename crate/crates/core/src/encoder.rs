//! Pre-norm classification encoder built from either attention kind.
//!
//! Token ids are shifted by one on entry: embedding row 0 is the reserved CLS
//! token, input token `t` uses row `t + 1`. The CLS slot is sequence position 0
//! and is read from the residual stream after the last block. Sorting only ever
//! reorders rows inside the attention sublayer, so that position keeps its meaning.

use rand::Rng;

use crate::attention::{
    attention_forward, AttentionParams, MhaParams, PermutationRecord, SliceSortParams,
    SortStrategy,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const CLS_TOKEN: usize = 0;
pub const CLS_POSITION: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    SoftmaxMha,
    SliceSort,
}

/// Per-model sort schedule; turned into a per-layer [`SortStrategy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyKind {
    Ascending,
    Interleave,
    MaxExchange,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_mult: usize,
    /// Input token alphabet size, excluding CLS.
    pub vocab: usize,
    /// Sequence length including the CLS slot.
    pub seq_len: usize,
    pub n_classes: usize,
    pub attention: AttentionKind,
    pub strategy: StrategyKind,
    pub output_projection: bool,
    pub positional_encoding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            d_model: 32,
            heads: 4,
            head_dim: 8,
            ffn_mult: 2,
            vocab: 8,
            seq_len: 64,
            n_classes: 4,
            attention: AttentionKind::SliceSort,
            strategy: StrategyKind::Ascending,
            output_projection: true,
            positional_encoding: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads * self.head_dim != self.d_model {
            return Err(Error::Config(format!(
                "heads × head_dim = {} × {} must equal d_model = {}",
                self.heads, self.head_dim, self.d_model
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::Config(format!(
                "seq_len {} leaves no room next to the CLS slot",
                self.seq_len
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be even for sinusoidal positions",
                self.d_model
            )));
        }
        if self.n_classes == 0 || self.vocab == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("vocab, n_classes and ffn_mult must be positive".into()));
        }
        Ok(())
    }

    /// Strategy for layer `layer` (1-based).
    pub fn strategy_for_layer(&self, layer: usize) -> SortStrategy {
        match self.strategy {
            StrategyKind::Ascending => SortStrategy::Ascending,
            StrategyKind::MaxExchange => SortStrategy::MaxExchange,
            StrategyKind::Interleave => SortStrategy::OrderInterleave {
                layer,
                layers: self.layers,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub attention: AttentionParams<T>,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    /// `(vocab + 1) × d_model`; row 0 is CLS.
    pub embedding: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_gamma: T,
    pub final_beta: T,
    pub classifier_w: T,
    pub classifier_b: T,
}

impl<T> LayerParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerParams<U> {
        LayerParams {
            ln1_gamma: f(&self.ln1_gamma),
            ln1_beta: f(&self.ln1_beta),
            attention: self.attention.map(f),
            ln2_gamma: f(&self.ln2_gamma),
            ln2_beta: f(&self.ln2_beta),
            ffn_w1: f(&self.ffn_w1),
            ffn_b1: f(&self.ffn_b1),
            ffn_w2: f(&self.ffn_w2),
            ffn_b2: f(&self.ffn_b2),
        }
    }

    pub fn tensors(&self) -> Vec<&T> {
        let mut out = vec![&self.ln1_gamma, &self.ln1_beta];
        out.extend(self.attention.tensors());
        out.extend([
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.ln1_gamma, &mut self.ln1_beta];
        out.extend(self.attention.tensors_mut());
        out.extend([
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
        ]);
        out
    }
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            embedding: f(&self.embedding),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            final_gamma: f(&self.final_gamma),
            final_beta: f(&self.final_beta),
            classifier_w: f(&self.classifier_w),
            classifier_b: f(&self.classifier_b),
        }
    }

    /// All parameters in a fixed order shared with [`EncoderParams::tensors_mut`].
    pub fn tensors(&self) -> Vec<&T> {
        let mut out = vec![&self.embedding];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend([
            &self.final_gamma,
            &self.final_beta,
            &self.classifier_w,
            &self.classifier_b,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([
            &mut self.final_gamma,
            &mut self.final_beta,
            &mut self.classifier_w,
            &mut self.classifier_b,
        ]);
        out
    }
}

impl EncoderParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let hidden = d * config.ffn_mult;
        let embedding = Tensor::randn(&[config.vocab + 1, d], 1.0, rng);
        let layers = (0..config.layers)
            .map(|_| {
                let attention = match config.attention {
                    AttentionKind::SoftmaxMha => AttentionParams::Softmax(MhaParams::init(
                        d,
                        config.heads,
                        config.head_dim,
                        rng,
                    )),
                    AttentionKind::SliceSort => AttentionParams::SliceSort(SliceSortParams::init(
                        d,
                        config.heads * config.head_dim,
                        config.output_projection,
                        rng,
                    )),
                };
                LayerParams {
                    ln1_gamma: Tensor::full(&[d], 1.0),
                    ln1_beta: Tensor::zeros(&[d]),
                    attention,
                    ln2_gamma: Tensor::full(&[d], 1.0),
                    ln2_beta: Tensor::zeros(&[d]),
                    ffn_w1: Tensor::randn(&[d, hidden], 1.0 / (d as f64).sqrt(), rng),
                    ffn_b1: Tensor::zeros(&[hidden]),
                    ffn_w2: Tensor::randn(&[hidden, d], 1.0 / (hidden as f64).sqrt(), rng),
                    ffn_b2: Tensor::zeros(&[d]),
                }
            })
            .collect();
        Ok(EncoderParams {
            embedding,
            layers,
            final_gamma: Tensor::full(&[d], 1.0),
            final_beta: Tensor::zeros(&[d]),
            classifier_w: Tensor::randn(&[d, config.n_classes], 1.0 / (d as f64).sqrt(), rng),
            classifier_b: Tensor::zeros(&[config.n_classes]),
        })
    }
}

/// Total scalar parameter count.
pub fn count_params(params: &EncoderParams<Tensor>) -> usize {
    params.tensors().iter().map(|t| t.numel()).sum()
}

/// Interleaved sin/cos positions: `[p, 2k] = sin(p / 10000^(2k/d))`, `[p, 2k+1] = cos(·)`.
pub fn sinusoidal_pe(seq_len: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 {
        return Err(Error::Contract(format!(
            "sinusoidal encoding needs an even width, got {d_model}"
        )));
    }
    let mut pe = Tensor::zeros(&[seq_len, d_model]);
    for p in 0..seq_len {
        for k in 0..d_model / 2 {
            let freq = 10000f64.powf(-((2 * k) as f64) / d_model as f64);
            let angle = p as f64 * freq;
            pe.set(p, 2 * k, angle.sin());
            pe.set(p, 2 * k + 1, angle.cos());
        }
    }
    Ok(pe)
}

/// Output of one block plus its attention-sublayer output.
pub struct BlockOutput {
    pub output: Var,
    pub attention_output: Var,
    pub record: Option<PermutationRecord>,
}

/// `h = x + Attn(LN(x))`, `out = h + FFN(LN(h))` with `FFN(z) = gelu(z·W1 + b1)·W2 + b2`.
pub fn encoder_block_forward(
    g: &mut Graph,
    x: Var,
    params: &LayerParams<Var>,
    strategy: SortStrategy,
) -> Result<BlockOutput> {
    let normed = g.layer_norm(x, params.ln1_gamma, params.ln1_beta, LAYER_NORM_EPS)?;
    let (attention_output, record) = attention_forward(g, normed, &params.attention, strategy)?;
    let h = g.add(x, attention_output)?;
    let normed = g.layer_norm(h, params.ln2_gamma, params.ln2_beta, LAYER_NORM_EPS)?;
    let z = g.matmul(normed, params.ffn_w1)?;
    let z = g.add_row(z, params.ffn_b1)?;
    let z = g.gelu(z);
    let z = g.matmul(z, params.ffn_w2)?;
    let z = g.add_row(z, params.ffn_b2)?;
    let output = g.add(h, z)?;
    Ok(BlockOutput {
        output,
        attention_output,
        record,
    })
}

/// Everything a forward pass exposes.
pub struct ForwardTrace {
    /// `1 × n_classes`.
    pub logits: Var,
    pub attention_outputs: Vec<Var>,
    pub records: Vec<PermutationRecord>,
}

/// Parameters registered in one graph, with the positional table shared across samples.
pub struct GraphModel<'c> {
    config: &'c EncoderConfig,
    params: EncoderParams<Var>,
    positions: Option<Var>,
}

impl<'c> GraphModel<'c> {
    /// Register `params` as trainable leaves.
    pub fn register(
        g: &mut Graph,
        config: &'c EncoderConfig,
        params: &EncoderParams<Tensor>,
    ) -> Result<Self> {
        Self::build(g, config, params, true)
    }

    /// Register `params` as constants (inference only).
    pub fn frozen(
        g: &mut Graph,
        config: &'c EncoderConfig,
        params: &EncoderParams<Tensor>,
    ) -> Result<Self> {
        Self::build(g, config, params, false)
    }

    fn build(
        g: &mut Graph,
        config: &'c EncoderConfig,
        params: &EncoderParams<Tensor>,
        trainable: bool,
    ) -> Result<Self> {
        config.validate()?;
        if params.layers.len() != config.layers {
            return Err(Error::Contract(format!(
                "{} layer parameter sets for a {}-layer config",
                params.layers.len(),
                config.layers
            )));
        }
        let params = params.map(&mut |t| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        });
        Self::from_vars(g, config, params)
    }

    /// Wrap parameters that are already nodes of `g`.
    pub fn from_vars(
        g: &mut Graph,
        config: &'c EncoderConfig,
        params: EncoderParams<Var>,
    ) -> Result<Self> {
        config.validate()?;
        let positions = if config.positional_encoding {
            Some(g.constant(sinusoidal_pe(config.seq_len, config.d_model)?))
        } else {
            None
        };
        Ok(GraphModel {
            config,
            params,
            positions,
        })
    }

    pub fn params(&self) -> &EncoderParams<Var> {
        &self.params
    }

    /// Forward one sequence of `seq_len - 1` input tokens.
    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<ForwardTrace> {
        let cfg = self.config;
        if ids.len() + 1 != cfg.seq_len {
            return Err(Error::Contract(format!(
                "expected {} tokens after CLS, got {}",
                cfg.seq_len - 1,
                ids.len()
            )));
        }
        let mut rows = Vec::with_capacity(cfg.seq_len);
        rows.push(CLS_TOKEN);
        for &t in ids {
            if t >= cfg.vocab {
                return Err(Error::Index(format!(
                    "token {t} outside input vocabulary of {}",
                    cfg.vocab
                )));
            }
            rows.push(t + 1);
        }
        let mut x = g.embedding(self.params.embedding, &rows)?;
        if let Some(pe) = self.positions {
            x = g.add(x, pe)?;
        }
        let mut attention_outputs = Vec::with_capacity(cfg.layers);
        let mut records = Vec::new();
        for (i, layer) in self.params.layers.iter().enumerate() {
            let block = encoder_block_forward(g, x, layer, cfg.strategy_for_layer(i + 1))?;
            x = block.output;
            attention_outputs.push(block.attention_output);
            records.extend(block.record);
        }
        let cls = g.row(x, CLS_POSITION)?;
        let cls = g.layer_norm(
            cls,
            self.params.final_gamma,
            self.params.final_beta,
            LAYER_NORM_EPS,
        )?;
        let logits = g.matmul(cls, self.params.classifier_w)?;
        let logits = g.add_row(logits, self.params.classifier_b)?;
        Ok(ForwardTrace {
            logits,
            attention_outputs,
            records,
        })
    }

    /// Gradients for every parameter in [`EncoderParams::tensors`] order; zero where
    /// the loss did not reach a parameter.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.params
            .tensors()
            .into_iter()
            .map(|&v| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
            })
            .collect()
    }
}

/// Class logits (length `n_classes`) for one sequence.
pub fn model_forward(
    ids: &[usize],
    params: &EncoderParams<Tensor>,
    config: &EncoderConfig,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let model = GraphModel::frozen(&mut g, config, params)?;
    let trace = model.forward(&mut g, ids)?;
    Ok(Tensor::vector(g.value(trace.logits).data().to_vec()))
}
