//! Cross-attention between modalities and the per-sample alignment weights.
//!
//! Local scores come from KL divergences between the softmaxed local tokens
//! of the two cross-attended modalities. Global scores come from the
//! text-bridged cosine similarity matrices. Each score list is turned into a
//! weight list by a batch-mean threshold, and the final weight of a sample is
//! the product of its two weights. All of this runs on detached values: the
//! weights never carry gradient into the loss.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoders::{AttentionParams, TokenSet};
use crate::error::{Error, Result};
use crate::nn::{Bindings, LayerNormParams, ParamStore};
use crate::tensor::kernels::{cosine_similarity, kl_contributions, l2_normalize, softmax_rows_inplace};
use crate::tensor::{Graph, Precision, Tensor, Var};

/// How scores above the threshold are mapped to weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum WeightMode {
    /// `e^s − 1` above the threshold, as the weighting rule is printed.
    Literal,
    /// `e^(t − s)` above the threshold: continuous at `t`, decreasing, in (0, 1].
    #[default]
    Attenuate,
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::Literal => "literal",
            WeightMode::Attenuate => "attenuate",
        })
    }
}

impl FromStr for WeightMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(WeightMode::Literal),
            "attenuate" => Ok(WeightMode::Attenuate),
            other => Err(Error::Config(format!("unknown weight mode {other:?}"))),
        }
    }
}

/// One shared cross-attention layer: `q + Attn(LN(q), LN(kv))`.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub ln: LayerNormParams,
    pub attn: AttentionParams,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln: LayerNormParams::new(store, "cross.ln", d),
            attn: AttentionParams::new(store, "cross.attn", d, heads, rng),
        }
    }

    /// Residual cross-attention block over `blocks` stacked samples. Output
    /// has the query's token count.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, queries: Var, keys_values: Var, blocks: usize) -> Result<Var> {
        let (qd, kd) = (g.value(queries).matrix_dims().1, g.value(keys_values).matrix_dims().1);
        if qd != kd {
            return Err(Error::dim("cross_attention", g.value(queries).shape(), g.value(keys_values).shape()));
        }
        let qn = self.ln.forward(g, p, queries)?;
        let kvn = self.ln.forward(g, p, keys_values)?;
        let a = self.attn.forward(g, p, qn, kvn, blocks)?;
        g.add(queries, a)
    }

    /// Block output for one query/key-value pair of token sets.
    pub fn apply(&self, store: &ParamStore, query: &TokenSet, kv: &TokenSet) -> Result<TokenSet> {
        let mut g = Graph::new(Precision::F64);
        let p = store.bind_frozen(&mut g);
        let q = g.constant(query.stacked());
        let k = g.constant(kv.stacked());
        let out = self.forward(&mut g, &p, q, k, 1)?;
        TokenSet::from_stacked(g.value(out).data(), query.width(), query.modality)
    }
}

/// Plain multi-head attention with queries from `query` and keys/values
/// from `kv`; both global and local tokens take part.
pub fn cross_attention(query: &TokenSet, kv: &TokenSet, params: &AttentionParams, store: &ParamStore) -> Result<TokenSet> {
    if query.width() != kv.width() {
        return Err(Error::dim("cross_attention", &[query.width()], &[kv.width()]));
    }
    let mut g = Graph::new(Precision::F64);
    let p = store.bind_frozen(&mut g);
    let q = g.constant(query.stacked());
    let k = g.constant(kv.stacked());
    let out = params.forward(&mut g, &p, q, k, 1)?;
    TokenSet::from_stacked(g.value(out).data(), query.width(), query.modality)
}

fn rank3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, m, n] => Ok((b, m, n)),
        _ => Err(Error::Rank {
            op,
            expected: 3,
            shape: t.shape().to_vec(),
        }),
    }
}

/// Per-sample local alignment scores from `[B × m × n]` local tokens.
///
/// Each token is softmaxed over its feature axis; the per-token KL uses the
/// image distribution as `p` and the sketch distribution as `q`. The
/// per-token KL values are L2-normalized over the tokens and summed, and the
/// resulting `[B]` vector is L2-normalized over the batch. Larger means the
/// two modalities diverge more.
pub fn local_alignment_scores(sketch_locals: &Tensor, image_locals: &Tensor) -> Result<Vec<f64>> {
    let (b, m, n) = rank3("local_alignment_scores", sketch_locals)?;
    if sketch_locals.shape() != image_locals.shape() {
        return Err(Error::dim("local_alignment_scores", sketch_locals.shape(), image_locals.shape()));
    }
    if b < 2 {
        return Err(Error::DegenerateBatch {
            op: "local_alignment_scores",
            size: b,
        });
    }
    let mut ds = sketch_locals.data().to_vec();
    let mut di = image_locals.data().to_vec();
    softmax_rows_inplace(&mut ds, n);
    softmax_rows_inplace(&mut di, n);
    let mut raw = Vec::with_capacity(b);
    for s in 0..b {
        let per_token = (0..m)
            .map(|t| {
                let off = (s * m + t) * n;
                kl_contributions(&di[off..off + n], &ds[off..off + n]).map(|c| c.iter().sum::<f64>())
            })
            .collect::<Result<Vec<f64>>>()?;
        raw.push(l2_normalize(&per_token).iter().sum::<f64>());
    }
    Ok(l2_normalize(&raw))
}

/// `[B × B]` row-softmaxed cosine matrix between text rows and modality
/// rows, summed over the text axis and divided by `B`.
fn text_bridged_distribution(text: &Tensor, modality: &Tensor) -> Result<Vec<f64>> {
    let (b, d) = text.matrix_dims();
    let mut sims = vec![0.0; b * b];
    for j in 0..b {
        for k in 0..b {
            sims[j * b + k] = cosine_similarity(&text.data()[j * d..(j + 1) * d], &modality.data()[k * d..(k + 1) * d])?;
        }
    }
    softmax_rows_inplace(&mut sims, b);
    let mut out = vec![0.0; b];
    for row in sims.chunks_exact(b) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(out.into_iter().map(|v| v / b as f64).collect())
}

/// Per-sample global alignment scores from batch-aligned `[B × d]` text,
/// sketch and image global tokens. The image-derived distribution is `p`,
/// the sketch-derived one is `q`; the absolute per-element KL terms are
/// L2-normalized over the batch.
pub fn global_alignment_scores(text_globals: &Tensor, sketch_globals: &Tensor, image_globals: &Tensor) -> Result<Vec<f64>> {
    if text_globals.rank() != 2 {
        return Err(Error::Rank {
            op: "global_alignment_scores",
            expected: 2,
            shape: text_globals.shape().to_vec(),
        });
    }
    for other in [sketch_globals, image_globals] {
        if other.shape() != text_globals.shape() {
            return Err(Error::dim("global_alignment_scores", text_globals.shape(), other.shape()));
        }
    }
    let q = text_bridged_distribution(text_globals, sketch_globals)?;
    let p = text_bridged_distribution(text_globals, image_globals)?;
    let terms: Vec<f64> = kl_contributions(&p, &q)?.into_iter().map(f64::abs).collect();
    Ok(l2_normalize(&terms))
}

/// Batch mean of the scores.
pub fn batch_threshold(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

pub fn apply_threshold(scores: &[f64], threshold: f64, mode: WeightMode) -> Vec<f64> {
    scores
        .iter()
        .map(|&s| {
            if s <= threshold {
                1.0
            } else {
                match mode {
                    WeightMode::Literal => s.exp() - 1.0,
                    WeightMode::Attenuate => (threshold - s).exp(),
                }
            }
        })
        .collect()
}

pub fn final_weights(local_list: &[f64], global_list: &[f64]) -> Result<Vec<f64>> {
    if local_list.len() != global_list.len() {
        return Err(Error::dim("final_weights", &[local_list.len()], &[global_list.len()]));
    }
    Ok(local_list.iter().zip(global_list).map(|(a, b)| a * b).collect())
}

/// Which weight levels contribute to the final list; a disabled level
/// contributes a list of ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeightLevels {
    pub local: bool,
    pub global: bool,
}

impl WeightLevels {
    pub const ALL: WeightLevels = WeightLevels {
        local: true,
        global: true,
    };
    pub const NONE: WeightLevels = WeightLevels {
        local: false,
        global: false,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightComputation {
    pub local_scores: Vec<f64>,
    pub global_scores: Vec<f64>,
    pub t_l: f64,
    pub t_g: f64,
    pub local_list: Vec<f64>,
    pub global_list: Vec<f64>,
    pub fin_list: Vec<f64>,
    pub mode: WeightMode,
}

impl WeightComputation {
    pub fn from_scores(local_scores: Vec<f64>, global_scores: Vec<f64>, mode: WeightMode, levels: WeightLevels) -> Result<Self> {
        let t_l = batch_threshold(&local_scores);
        let t_g = batch_threshold(&global_scores);
        let ones = || vec![1.0; local_scores.len()];
        let local_list = if levels.local {
            apply_threshold(&local_scores, t_l, mode)
        } else {
            ones()
        };
        let global_list = if levels.global {
            apply_threshold(&global_scores, t_g, mode)
        } else {
            ones()
        };
        let fin_list = final_weights(&local_list, &global_list)?;
        Ok(Self {
            local_scores,
            global_scores,
            t_l,
            t_g,
            local_list,
            global_list,
            fin_list,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.fin_list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fin_list.is_empty()
    }
}
