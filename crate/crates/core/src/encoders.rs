//! Patch tokenization, pre-norm transformer encoders and the per-class text
//! feature provider.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Bindings, LayerNormParams, Linear, ParamId, ParamStore};
use crate::tensor::{Graph, Precision, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Side length of the square input grid.
    pub grid: usize,
    pub patch: usize,
    pub channels: usize,
    /// Token width.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Width of the per-class text table rows.
    pub d_text: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            grid: 32,
            patch: 4,
            channels: 1,
            d: 64,
            layers: 4,
            heads: 4,
            d_text: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.grid == 0 || !self.grid.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "grid {} is not divisible by patch {}",
                self.grid, self.patch
            )));
        }
        if self.heads == 0 || self.d == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.channels == 0 || self.d_text == 0 {
            return Err(Error::Config("channels and d_text must be positive".into()));
        }
        Ok(())
    }

    /// Local tokens per sample, `(grid/patch)²`.
    pub fn n_tokens(&self) -> usize {
        let side = self.grid / self.patch;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [self.grid, self.grid, self.channels]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Sketch,
    Image,
    Text,
}

/// One sample's encoded tokens: the global slot plus the patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub global: Vec<f64>,
    /// `[n_tokens × d]`
    pub local: Tensor,
    pub modality: Modality,
}

impl TokenSet {
    pub fn width(&self) -> usize {
        self.global.len()
    }

    /// All tokens stacked as `[(n+1) × d]`, global first.
    pub fn stacked(&self) -> Tensor {
        let (n, d) = self.local.matrix_dims();
        let mut data = self.global.clone();
        data.extend_from_slice(self.local.data());
        Tensor::new(vec![n + 1, d], data).expect("token shape")
    }

    /// Inverse of [`TokenSet::stacked`].
    pub fn from_stacked(tokens: &[f64], d: usize, modality: Modality) -> Result<Self> {
        if d == 0 || !tokens.len().is_multiple_of(d) || tokens.len() < 2 * d {
            return Err(Error::dim("TokenSet::from_stacked", &[tokens.len()], &[d]));
        }
        let n = tokens.len() / d - 1;
        Ok(Self {
            global: tokens[..d].to_vec(),
            local: Tensor::new(vec![n, d], tokens[d..].to_vec())?,
            modality,
        })
    }
}

/// Splits a `[batch·(n+1) × d]` token matrix into per-sample token sets.
pub fn split_token_sets(tokens: &Tensor, batch: usize, modality: Modality) -> Result<Vec<TokenSet>> {
    let (rows, d) = tokens.matrix_dims();
    if batch == 0 || rows % batch != 0 {
        return Err(Error::dim("split_token_sets", tokens.shape(), &[batch]));
    }
    tokens
        .data()
        .chunks_exact(rows / batch * d)
        .map(|chunk| TokenSet::from_stacked(chunk, d, modality))
        .collect()
}

/// Flattens each sample's non-overlapping patches, row-major over patches and
/// `(y, x, channel)` within a patch, into `[batch·n_tokens × patch_dim]`.
pub fn patchify(samples: &[&Tensor], cfg: &EncoderConfig) -> Result<Tensor> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("patchify"));
    }
    let (g, p, c) = (cfg.grid, cfg.patch, cfg.channels);
    let side = g / p;
    let mut out = Vec::with_capacity(samples.len() * g * g * c);
    for s in samples {
        if s.shape() != cfg.sample_shape() {
            return Err(Error::dim("patchify", s.shape(), &cfg.sample_shape()));
        }
        let x = s.data();
        for py in 0..side {
            for px in 0..side {
                for y in 0..p {
                    let start = ((py * p + y) * g + px * p) * c;
                    out.extend_from_slice(&x[start..start + p * c]);
                }
            }
        }
    }
    Tensor::new(vec![samples.len() * side * side, cfg.patch_dim()], out)
}

/// Query/key/value/output projections of one multi-head attention layer.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut proj = |tag: &str| store.add(format!("{name}.{tag}"), normal_tensor(rng, &[d, d], std));
        Self {
            wq: proj("wq"),
            wk: proj("wk"),
            wv: proj("wv"),
            wo: proj("wo"),
            heads,
        }
    }

    /// Attention of `queries` over `keys_values`, both stacked over `blocks`
    /// independent samples.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, queries: Var, keys_values: Var, blocks: usize) -> Result<Var> {
        let q = g.matmul(queries, p[self.wq])?;
        let k = g.matmul(keys_values, p[self.wk])?;
        let v = g.matmul(keys_values, p[self.wv])?;
        let heads = g.attention(q, k, v, blocks, self.heads)?;
        g.matmul(heads, p[self.wo])
    }
}

/// Multi-head self-attention of one token matrix `[t × d]`, no residual.
pub fn self_attention(tokens: &Tensor, params: &AttentionParams, store: &ParamStore) -> Result<Tensor> {
    let mut g = Graph::new(Precision::F64);
    let p = store.bind_frozen(&mut g);
    let x = g.constant(tokens.clone());
    let out = params.forward(&mut g, &p, x, x, 1)?;
    Ok(g.value(out).clone())
}

/// Pre-norm transformer block: `z + MSA(LN(z))`, then `z + MLP(LN(z))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), d),
            attn: AttentionParams::new(store, &format!("{name}.attn"), d, heads, rng),
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), d),
            fc1: Linear::new(store, &format!("{name}.fc1"), d, 4 * d, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * d, d, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, z: Var, blocks: usize) -> Result<Var> {
        let h = self.ln1.forward(g, p, z)?;
        let a = self.attn.forward(g, p, h, h, blocks)?;
        let z = g.add(z, a)?;
        let h = self.ln2.forward(g, p, z)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let m = self.fc2.forward(g, p, h)?;
        g.add(z, m)
    }
}

/// Patch-embedding transformer encoder for one modality.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch_proj: Linear,
    pub positions: ParamId,
    pub global_token: ParamId,
    pub blocks: Vec<Block>,
}

/// Learning-rate multiplier of the positional offsets. They start at the
/// usual small scale, which keeps an untrained encoder blind to layout, and
/// would otherwise need many epochs to grow large enough to matter next to
/// the patch projections.
pub const POSITION_LR_SCALE: f64 = 100.0;

fn patch_projection(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Linear {
    Linear::new(store, &format!("{name}.patch_proj"), cfg.patch_dim(), cfg.d, true, rng)
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let patch_proj = patch_projection(store, name, cfg, rng);
        Ok(Self::with_patch_projection(store, name, patch_proj, cfg, rng))
    }

    /// An encoder whose patch projection is named after `modality_name` and
    /// whose remaining parameters are named after `trunk_name`.
    pub fn with_trunk_name(
        store: &mut ParamStore,
        modality_name: &str,
        trunk_name: &str,
        cfg: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let patch_proj = patch_projection(store, modality_name, cfg, rng);
        Ok(Self::with_patch_projection(store, trunk_name, patch_proj, cfg, rng))
    }

    fn with_patch_projection(store: &mut ParamStore, name: &str, patch_proj: Linear, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let positions = store.add(format!("{name}.positions"), normal_tensor(rng, &[cfg.n_tokens(), cfg.d], 0.02));
        let global_token = store.add(format!("{name}.global_token"), normal_tensor(rng, &[1, cfg.d], 1.0));
        let blocks = (0..cfg.layers)
            .map(|l| Block::new(store, &format!("{name}.block{l}"), cfg.d, cfg.heads, rng))
            .collect();
        Self {
            config: *cfg,
            patch_proj,
            positions,
            global_token,
            blocks,
        }
    }

    /// A second encoder with its own patch projection and every other
    /// parameter shared with `self`.
    pub fn sharing_trunk(&self, store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Self {
        Self {
            patch_proj: patch_projection(store, name, &self.config, rng),
            ..self.clone()
        }
    }

    /// Embedded tokens `[batch·(n+1) × d]`: per sample, the global token then
    /// the projected patches plus positional offsets.
    pub fn embed(&self, g: &mut Graph, p: &Bindings, patches: Var, batch: usize) -> Result<Var> {
        let n = self.config.n_tokens();
        let locals = self.patch_proj.forward(g, p, patches)?;
        let locals = g.add_tiled(locals, p[self.positions])?;
        let all = g.concat_rows(&[locals, p[self.global_token]])?;
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::once(batch * n).chain(b * n..(b + 1) * n))
            .collect();
        g.gather_rows(all, &order)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, patches: Var, batch: usize) -> Result<Var> {
        let mut z = self.embed(g, p, patches, batch)?;
        for block in &self.blocks {
            z = block.forward(g, p, z, batch)?;
        }
        Ok(z)
    }

    /// Encodes raw samples without recording gradients.
    pub fn encode_batch(&self, store: &ParamStore, samples: &[&Tensor], modality: Modality, precision: Precision) -> Result<Vec<TokenSet>> {
        let mut g = Graph::new(precision);
        let p = store.bind_frozen(&mut g);
        let patches = g.constant(patchify(samples, &self.config)?);
        let z = self.forward(&mut g, &p, patches, samples.len())?;
        split_token_sets(g.value(z), samples.len(), modality)
    }
}

/// Encodes one raw `grid × grid × channels` sample.
pub fn encode(sample: &Tensor, encoder: &Encoder, store: &ParamStore, modality: Modality) -> Result<TokenSet> {
    let mut sets = encoder.encode_batch(store, &[sample], modality, Precision::F64)?;
    Ok(sets.remove(0))
}

/// Trainable per-class embedding table followed by a linear projection to
/// the token width. Stands in for a frozen text encoder over class
/// descriptions.
#[derive(Clone, Debug)]
pub struct TextProvider {
    pub table: ParamId,
    pub proj: Linear,
    seen: Vec<bool>,
}

impl TextProvider {
    pub fn new(store: &mut ParamStore, num_classes: usize, seen_classes: &[usize], cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut seen = vec![false; num_classes];
        for &c in seen_classes {
            *seen.get_mut(c).ok_or_else(|| Error::Config(format!("seen class {c} ≥ {num_classes}")))? = true;
        }
        let table = store.add("text.table", normal_tensor(rng, &[num_classes, cfg.d_text], 1.0));
        let proj = Linear::new(store, "text.proj", cfg.d_text, cfg.d, true, rng);
        Ok(Self { table, proj, seen })
    }

    pub fn num_classes(&self) -> usize {
        self.seen.len()
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen.get(class).copied().unwrap_or(false)
    }

    /// Text features `[batch × d]` for `classes`. While training, only seen
    /// classes may be read.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, classes: &[usize], training: bool) -> Result<Var> {
        for &c in classes {
            if c >= self.seen.len() {
                return Err(Error::dim("text_feature", &[c], &[self.seen.len()]));
            }
            if training && !self.seen[c] {
                return Err(Error::SplitViolation {
                    class: c,
                    reason: "unseen class requested during training",
                });
            }
        }
        let rows = g.gather_rows(p[self.table], classes)?;
        self.proj.forward(g, p, rows)
    }
}

/// `f_t` applied to one class's table row.
pub fn text_feature(class: usize, provider: &TextProvider, store: &ParamStore, training: bool) -> Result<Vec<f64>> {
    let mut g = Graph::new(Precision::F64);
    let p = store.bind_frozen(&mut g);
    let v = provider.forward(&mut g, &p, &[class], training)?;
    Ok(g.value(v).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use crate::tensor::kernels::cosine_similarity;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            grid: 8,
            patch: 4,
            channels: 1,
            d: 8,
            layers: 2,
            heads: 2,
            d_text: 8,
        }
    }

    fn sample(cfg: &EncoderConfig, seed: u64) -> Tensor {
        let mut rng = SeedTree::new(seed).stream("sample");
        normal_tensor(&mut rng, &cfg.sample_shape(), 1.0)
    }

    #[test]
    fn token_counts() {
        let c = EncoderConfig::default();
        assert_eq!(c.n_tokens(), 64);
        let paper = EncoderConfig {
            grid: 224,
            patch: 16,
            channels: 3,
            d: 768,
            layers: 12,
            heads: 12,
            d_text: 512,
        };
        paper.validate().unwrap();
        assert_eq!(paper.n_tokens(), 196);
        let bad = EncoderConfig { grid: 30, ..c };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        let cfg = EncoderConfig {
            grid: 4,
            patch: 2,
            ..small_cfg()
        };
        let s = Tensor::new(vec![4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&[&s], &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn zero_input_embeds_to_positional_offsets() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(1).stream("init");
        let enc = Encoder::new(&mut store, "enc", &EncoderConfig { layers: 0, ..cfg }, &mut rng).unwrap();
        let zero = Tensor::zeros(&cfg.sample_shape());
        let ts = encode(&zero, &enc, &store, Modality::Sketch).unwrap();
        assert_eq!(ts.local.data(), store.get(enc.positions).data());
        assert_eq!(ts.global, store.get(enc.global_token).data());
    }

    #[test]
    fn output_shape_and_finiteness() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(2).stream("init");
        let enc = Encoder::new(&mut store, "enc", &cfg, &mut rng).unwrap();
        let s = sample(&cfg, 3);
        let ts = encode(&s, &enc, &store, Modality::Image).unwrap();
        assert_eq!(ts.local.shape(), &[cfg.n_tokens(), cfg.d]);
        assert_eq!(ts.width(), cfg.d);
        assert!(ts.local.is_finite());
        assert_eq!(ts.stacked().shape(), &[cfg.n_tokens() + 1, cfg.d]);
    }

    #[test]
    fn zeroed_branches_make_encoder_the_identity_on_embeddings() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(4).stream("init");
        let enc = Encoder::new(&mut store, "enc", &cfg, &mut rng).unwrap();
        for b in &enc.blocks {
            for id in [b.attn.wo, b.fc2.weight, b.fc2.bias.unwrap()] {
                store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let s = sample(&cfg, 5);
        let mut g = Graph::new(Precision::F64);
        let p = store.bind_frozen(&mut g);
        let patches = g.constant(patchify(&[&s], &cfg).unwrap());
        let embedded = enc.embed(&mut g, &p, patches, 1).unwrap();
        let out = enc.forward(&mut g, &p, patches, 1).unwrap();
        assert_eq!(g.value(embedded), g.value(out));
    }

    #[test]
    fn single_token_attention_is_value_then_output_projection() {
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(6).stream("init");
        let attn = AttentionParams::new(&mut store, "a", 8, 2, &mut rng);
        let token = normal_tensor(&mut rng, &[1, 8], 1.0);
        let out = self_attention(&token, &attn, &store).unwrap();
        let wv = crate::tensor::kernels::matmul(&token, store.get(attn.wv)).unwrap();
        let want = crate::tensor::kernels::matmul(&wv, store.get(attn.wo)).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn duplicate_tokens_give_duplicate_outputs() {
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(7).stream("init");
        let attn = AttentionParams::new(&mut store, "a", 8, 2, &mut rng);
        let row = normal_tensor(&mut rng, &[1, 8], 1.0);
        let other = normal_tensor(&mut rng, &[1, 8], 1.0);
        let tokens = Tensor::from_rows(&[row.data().to_vec(), other.data().to_vec(), row.data().to_vec()]).unwrap();
        let out = self_attention(&tokens, &attn, &store).unwrap();
        assert_eq!(out.row(0), out.row(2));
    }

    #[test]
    fn text_features_are_deterministic_and_guarded() {
        let cfg = EncoderConfig::default();
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(8).stream("init");
        let text = TextProvider::new(&mut store, 4, &[0, 1, 2], &cfg, &mut rng).unwrap();
        let a = text_feature(1, &text, &store, true).unwrap();
        assert_eq!(a, text_feature(1, &text, &store, true).unwrap());
        assert_eq!(a.len(), cfg.d);
        assert!(matches!(
            text_feature(3, &text, &store, true),
            Err(Error::SplitViolation { class: 3, .. })
        ));
        assert!(text_feature(3, &text, &store, false).is_ok());
    }

    #[test]
    fn distinct_classes_have_low_text_similarity() {
        let cfg = EncoderConfig::default();
        let mut low = 0;
        for seed in 0..100 {
            let mut store = ParamStore::new();
            let mut rng = SeedTree::new(seed).stream("init");
            let text = TextProvider::new(&mut store, 2, &[0, 1], &cfg, &mut rng).unwrap();
            let a = text_feature(0, &text, &store, true).unwrap();
            let b = text_feature(1, &text, &store, true).unwrap();
            if cosine_similarity(&a, &b).unwrap() < 0.5 {
                low += 1;
            }
        }
        assert!(low >= 99, "{low}/100 seeds below 0.5");
    }

    #[test]
    fn gradient_reaches_table_row_and_projection() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = SeedTree::new(9).stream("init");
        let text = TextProvider::new(&mut store, 3, &[0, 1, 2], &cfg, &mut rng).unwrap();
        let mut g = Graph::new(Precision::F64);
        let p = store.bind(&mut g);
        let t = text.forward(&mut g, &p, &[1], true).unwrap();
        let loss = g.sum(t).unwrap();
        let grads = g.backward(loss).unwrap();
        let table_grad = grads.get_or_zeros(p[text.table]);
        assert!(table_grad.row(1).iter().any(|x| *x != 0.0));
        assert!(table_grad.row(0).iter().all(|x| *x == 0.0));
        assert!(grads.get_or_zeros(p[text.proj.weight]).data().iter().any(|x| *x != 0.0));
    }
}
