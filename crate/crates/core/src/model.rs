//! Deterministic toy vision-language transformer.
//!
//! The input sequence is laid out as `[vision tokens | text tokens]`. Each
//! layer is causal multi-head self-attention followed by a two-layer ReLU
//! feed-forward block, both residual, with no normalization and no biases.
//! After every layer the head-averaged post-softmax attention is sliced into
//! its text-to-text and text-to-vision blocks and handed to a [`PrefillHook`],
//! which may drop vision tokens before the next layer runs.
//!
//! Weight initialization order (all from one [`SeededRng`] seeded with
//! `ModelConfig::seed`, row-major, one standard normal per entry), per layer:
//! `wq`, `wk`, `wv`, `wo`, `w1`, `w2`. Query and key projections are
//! `I + QK_NOISE * G / sqrt(d)` so that embedding similarity carries through
//! to attention; the remaining matrices are scaled Gaussians.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{softmax_rows, Mask, Matrix, SeededRng};

const QK_NOISE: f64 = 0.5;
const BRANCH_SCALE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 32,
            hidden_dim: 64,
            ffn_dim: 256,
            num_heads: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 || self.num_heads == 0
        {
            return Err(Error::InvalidConfig(format!(
                "all dimensions must be >= 1: {self:?}"
            )));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    w2: Matrix,
}

impl LayerWeights {
    fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let d = cfg.hidden_dim;
        let m = cfg.ffn_dim;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let near_identity = |rng: &mut SeededRng| {
            let mut w = rng.normal_matrix(d, d, QK_NOISE * inv_sqrt_d);
            for i in 0..d {
                w[(i, i)] += 1.0;
            }
            w
        };
        let wq = near_identity(rng);
        let wk = near_identity(rng);
        let wv = rng.normal_matrix(d, d, inv_sqrt_d);
        let wo = rng.normal_matrix(d, d, BRANCH_SCALE * inv_sqrt_d);
        let w1 = rng.normal_matrix(d, m, inv_sqrt_d);
        let w2 = rng.normal_matrix(m, d, BRANCH_SCALE / (m as f64).sqrt());
        Self {
            wq,
            wk,
            wv,
            wo,
            w1,
            w2,
        }
    }
}

/// Immutable model weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    layers: Vec<LayerWeights>,
}

/// Hidden states for one sample, vision rows first.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub vision_count: usize,
    pub text_count: usize,
    pub hidden: Matrix,
    /// Original absolute positions; never renumbered after pruning.
    pub position_ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(vision_count: usize, text_count: usize, hidden: Matrix) -> Result<Self> {
        let seq = Self {
            vision_count,
            text_count,
            position_ids: (0..vision_count + text_count).collect(),
            hidden,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.vision_count + self.text_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Original positions of the vision tokens still alive.
    pub fn vision_ids(&self) -> &[usize] {
        &self.position_ids[..self.vision_count]
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.rows() != self.len() {
            return Err(Error::DimensionMismatch {
                op: "TokenSequence rows",
                expected: self.len(),
                actual: self.hidden.rows(),
            });
        }
        if self.position_ids.len() != self.len() {
            return Err(Error::DimensionMismatch {
                op: "TokenSequence position_ids",
                expected: self.len(),
                actual: self.position_ids.len(),
            });
        }
        if !self.position_ids.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "position_ids must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    fn retain_vision(&mut self, keep: &[usize]) {
        let rows: Vec<usize> = keep
            .iter()
            .copied()
            .chain(self.vision_count..self.len())
            .collect();
        self.hidden = self.hidden.select_rows(&rows);
        self.position_ids = rows.iter().map(|&r| self.position_ids[r]).collect();
        self.vision_count = keep.len();
    }
}

/// Text-query attention blocks of one layer, averaged over heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAttention {
    pub layer_index: usize,
    /// `T x T`, causal within the text block.
    pub t2t: Matrix,
    /// `T x V_l`, columns ordered as `vision_ids`.
    pub t2v: Matrix,
    /// Original positions of the vision tokens alive at this layer.
    pub vision_ids: Vec<usize>,
}

impl LayerAttention {
    pub fn text_count(&self) -> usize {
        self.t2t.rows()
    }

    pub fn vision_count(&self) -> usize {
        self.vision_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMaps {
    pub sample_id: String,
    pub per_layer: Vec<LayerAttention>,
}

impl AttentionMaps {
    pub fn num_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn text_count(&self) -> usize {
        self.per_layer.first().map_or(0, LayerAttention::text_count)
    }

    /// Vision tokens present before any pruning.
    pub fn initial_vision_ids(&self) -> &[usize] {
        self.per_layer.first().map_or(&[], |l| &l.vision_ids)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.text_count();
        let mut prev_layer = None;
        let mut prev_v = usize::MAX;
        for l in &self.per_layer {
            if let Some(p) = prev_layer {
                if l.layer_index <= p {
                    return Err(Error::InvalidConfig(format!(
                        "layer indices must be strictly increasing ({} after {p})",
                        l.layer_index
                    )));
                }
            }
            if l.t2t.shape() != (t, t) || l.t2v.shape() != (t, l.vision_ids.len()) {
                return Err(Error::DimensionMismatch {
                    op: "AttentionMaps layer shape",
                    expected: t,
                    actual: l.t2t.rows(),
                });
            }
            if l.vision_ids.len() > prev_v {
                return Err(Error::InvalidConfig(format!(
                    "vision count grows at layer {}",
                    l.layer_index
                )));
            }
            prev_layer = Some(l.layer_index);
            prev_v = l.vision_ids.len();
        }
        Ok(())
    }
}

/// Called after each layer with that layer's attention blocks.
///
/// Returning `Some(indices)` keeps only those vision tokens; indices refer to
/// columns of `attn.t2v` (equivalently, positions in `attn.vision_ids`).
pub trait PrefillHook {
    fn after_layer(&mut self, attn: &LayerAttention) -> Result<Option<Vec<usize>>>;
}

impl<F> PrefillHook for F
where
    F: FnMut(&LayerAttention) -> Result<Option<Vec<usize>>>,
{
    fn after_layer(&mut self, attn: &LayerAttention) -> Result<Option<Vec<usize>>> {
        self(attn)
    }
}

/// Keeps every token.
#[derive(Debug, Default, Clone, Copy)]
pub struct KeepAll;

impl PrefillHook for KeepAll {
    fn after_layer(&mut self, _: &LayerAttention) -> Result<Option<Vec<usize>>> {
        Ok(None)
    }
}

/// Splits a full `(V+T) x (V+T)` attention matrix into its text-query blocks.
pub fn extract_blocks(full: &Matrix, vision: usize, text: usize) -> Result<(Matrix, Matrix)> {
    let n = vision + text;
    if full.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            op: "extract_blocks",
            expected: n,
            actual: full.rows(),
        });
    }
    let t2t = full.slice(vision..n, vision..n)?;
    let t2v = full.slice(vision..n, 0..vision)?;
    Ok((t2t, t2v))
}

impl Model {
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(cfg.seed);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerWeights::init(&cfg, &mut rng))
            .collect();
        Ok(Self { cfg, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Flat view of all weights in initialization order.
    pub fn weights(&self) -> impl Iterator<Item = &Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2])
    }

    /// Runs every layer over `seq`, calling `hook` after each one.
    pub fn prefill(
        &self,
        sample_id: &str,
        mut seq: TokenSequence,
        hook: &mut dyn PrefillHook,
    ) -> Result<(TokenSequence, AttentionMaps)> {
        seq.validate()?;
        if seq.hidden.cols() != self.cfg.hidden_dim {
            return Err(Error::DimensionMismatch {
                op: "prefill hidden dim",
                expected: self.cfg.hidden_dim,
                actual: seq.hidden.cols(),
            });
        }
        if seq.is_empty() {
            return Err(Error::Empty("prefill sequence"));
        }

        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (layer_index, w) in self.layers.iter().enumerate() {
            let full = self.layer_forward(w, &mut seq)?;
            let (t2t, t2v) = extract_blocks(&full, seq.vision_count, seq.text_count)?;
            let attn = LayerAttention {
                layer_index,
                t2t,
                t2v,
                vision_ids: seq.vision_ids().to_vec(),
            };

            if let Some(mut keep) = hook.after_layer(&attn)? {
                keep.sort_unstable();
                if keep.windows(2).any(|p| p[0] == p[1]) {
                    return Err(Error::InvalidHookSelection {
                        layer: layer_index,
                        reason: "duplicate indices".into(),
                    });
                }
                if let Some(&bad) = keep.iter().find(|&&i| i >= seq.vision_count) {
                    return Err(Error::InvalidHookSelection {
                        layer: layer_index,
                        reason: format!(
                            "index {bad} out of range for {} vision tokens",
                            seq.vision_count
                        ),
                    });
                }
                seq.retain_vision(&keep);
            }
            per_layer.push(attn);
        }

        let maps = AttentionMaps {
            sample_id: sample_id.to_owned(),
            per_layer,
        };
        Ok((seq, maps))
    }

    /// Updates `seq.hidden` in place and returns the head-averaged attention.
    fn layer_forward(&self, w: &LayerWeights, seq: &mut TokenSequence) -> Result<Matrix> {
        let n = seq.len();
        let heads = self.cfg.num_heads;
        let dh = self.cfg.head_dim();
        let x = &seq.hidden;

        let q = x.matmul(&w.wq)?;
        let k = x.matmul(&w.wk)?;
        let v = x.matmul(&w.wv)?;
        let mask = Mask::causal(n, n);
        let scale = 1.0 / (dh as f64).sqrt();

        let mut avg = Matrix::zeros(n, n);
        let mut concat = Matrix::zeros(n, self.cfg.hidden_dim);
        for h in 0..heads {
            let qh = q.column_block(h * dh, dh);
            let kh = k.column_block(h * dh, dh);
            let vh = v.column_block(h * dh, dh);
            let mut logits = qh.matmul(&kh.transpose())?;
            logits.scale(scale);
            let probs = softmax_rows(&logits, Some(&mask))?;
            let out = probs.matmul(&vh)?;
            for i in 0..n {
                concat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(out.row(i));
            }
            avg.add_assign(&probs)?;
        }
        avg.scale(1.0 / heads as f64);

        let attn_out = concat.matmul(&w.wo)?;
        seq.hidden.add_assign(&attn_out)?;

        let mut inner = seq.hidden.matmul(&w.w1)?;
        inner.map_inplace(|z| z.max(0.0));
        let ffn_out = inner.matmul(&w.w2)?;
        seq.hidden.add_assign(&ffn_out)?;

        if !seq.hidden.all_finite() {
            return Err(Error::NonFinite("hidden state"));
        }
        Ok(avg)
    }
}

/// Parameters for a synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub vision_count: usize,
    pub text_count: usize,
    /// Fraction of vision tokens that share the text topic direction.
    pub planted_fraction: f64,
    /// Weight of the shared topic direction in planted and text embeddings.
    pub signal_strength: f64,
    pub seed: u64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            vision_count: 144,
            text_count: 16,
            planted_fraction: 0.1,
            signal_strength: 0.7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sequence: TokenSequence,
    /// Vision positions carrying the planted signal, ascending.
    pub planted: Vec<usize>,
}

/// Draws a sample with a planted text-correlated subset of vision tokens.
///
/// Draw order: topic direction (`d` normals), planted index set, vision
/// embeddings row by row, then text embeddings. Every embedding is a standard
/// normal noise vector; text tokens and planted vision tokens additionally
/// get `signal_strength * topic`.
pub fn generate_sample(spec: &SampleSpec, hidden_dim: usize) -> Result<Sample> {
    if !(0.0..=1.0).contains(&spec.planted_fraction) {
        return Err(Error::InvalidFraction(spec.planted_fraction));
    }
    let mut rng = SeededRng::new(spec.seed);
    let topic: Vec<f64> = (0..hidden_dim).map(|_| rng.next_normal()).collect();
    let planted_count = if spec.planted_fraction > 0.0 {
        crate::rank::fraction_count(spec.planted_fraction, spec.vision_count)
    } else {
        0
    };
    let planted = rng.sample_indices(spec.vision_count, planted_count);

    let n = spec.vision_count + spec.text_count;
    let mut hidden = rng.normal_matrix(n, hidden_dim, 1.0);
    let mut add_topic = |row: usize| {
        for (x, t) in hidden.row_mut(row).iter_mut().zip(&topic) {
            *x += spec.signal_strength * t;
        }
    };
    planted.iter().for_each(|&i| add_topic(i));
    (spec.vision_count..n).for_each(&mut add_topic);

    Ok(Sample {
        sequence: TokenSequence::new(spec.vision_count, spec.text_count, hidden)?,
        planted,
    })
}
