//! Inference-time embedding, pair scoring, ranking and retrieval metrics.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::encoders::{Modality, TokenSet};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::tensor::kernels::{cosine_similarity, dot, layer_norm, matmul, softmax_rows_inplace};
use crate::tensor::{Precision, Tensor};
use crate::weighting::CrossAttention;

/// How a sketch query is compared with a gallery image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ScoreMode {
    /// Cosine between the global tokens of the two cross-attended directions.
    #[default]
    Cross,
    /// Cosine between the uni-modal global tokens.
    Fast,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::Cross => "cross",
            ScoreMode::Fast => "fast",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(ScoreMode::Cross),
            "fast" => Ok(ScoreMode::Fast),
            other => Err(Error::Config(format!("unknown score mode {other:?}"))),
        }
    }
}

/// Embeds samples with the modality's encoder. Text features are never
/// consulted. With `strict_zs`, any sample of a seen class is rejected.
pub fn embed_split(model: &Model, samples: &[&Tensor], classes: &[usize], modality: Modality, strict_zs: bool) -> Result<Vec<TokenSet>> {
    if samples.len() != classes.len() {
        return Err(Error::dim("embed_split", &[samples.len()], &[classes.len()]));
    }
    if strict_zs {
        if let Some(&c) = classes.iter().find(|&&c| model.text.is_seen(c)) {
            return Err(Error::SplitViolation {
                class: c,
                reason: "seen class in zero-shot evaluation",
            });
        }
    }
    model.embed(samples, modality, Precision::F64)
}

/// One token set run through the cross block's shared layer norm and
/// projected, so that the global row of `CB(a → b)` costs one attention row.
struct Prepared {
    global: Vec<f64>,
    /// Query projection of the normalized global token.
    query: Vec<f64>,
    /// `[t × d]` key and value projections of all normalized tokens.
    keys: Tensor,
    values: Tensor,
}

/// Computes cross-mode pair scores without building a tape per pair.
pub struct CrossScorer<'a> {
    cross: &'a CrossAttention,
    store: &'a ParamStore,
}

impl<'a> CrossScorer<'a> {
    pub fn new(cross: &'a CrossAttention, store: &'a ParamStore) -> Self {
        Self { cross, store }
    }

    fn prepare(&self, set: &TokenSet) -> Result<Prepared> {
        let s = self.store;
        let normed = layer_norm(&set.stacked(), s.get(self.cross.ln.gain), s.get(self.cross.ln.bias))?;
        let q_all = matmul(&Tensor::new(vec![1, set.width()], normed.row(0).to_vec())?, s.get(self.cross.attn.wq))?;
        Ok(Prepared {
            global: set.global.clone(),
            query: q_all.into_data(),
            keys: matmul(&normed, s.get(self.cross.attn.wk))?,
            values: matmul(&normed, s.get(self.cross.attn.wv))?,
        })
    }

    /// Global row of `query + Attn(LN(query), LN(kv))`.
    fn cross_global(&self, query: &Prepared, kv: &Prepared) -> Result<Vec<f64>> {
        let d = query.global.len();
        let heads = self.cross.attn.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (t, _) = kv.keys.matrix_dims();
        let mut mixed = vec![0.0; d];
        let mut logits = vec![0.0; t];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for (j, l) in logits.iter_mut().enumerate() {
                *l = scale * dot(&query.query[cols.clone()], &kv.keys.row(j)[cols.clone()]);
            }
            softmax_rows_inplace(&mut logits, t);
            for (j, &w) in logits.iter().enumerate() {
                for (m, v) in mixed[cols.clone()].iter_mut().zip(&kv.values.row(j)[cols.clone()]) {
                    *m += w * v;
                }
            }
        }
        let out = matmul(&Tensor::new(vec![1, d], mixed)?, self.store.get(self.cross.attn.wo))?;
        Ok(query.global.iter().zip(out.data()).map(|(a, b)| a + b).collect())
    }

    /// `[queries × gallery]` score matrix.
    pub fn score_matrix(&self, queries: &[TokenSet], gallery: &[TokenSet]) -> Result<Vec<Vec<f64>>> {
        let qs = queries.iter().map(|q| self.prepare(q)).collect::<Result<Vec<_>>>()?;
        let gs = gallery.iter().map(|g| self.prepare(g)).collect::<Result<Vec<_>>>()?;
        qs.iter()
            .map(|q| {
                gs.iter()
                    .map(|g| cosine_similarity(&self.cross_global(q, g)?, &self.cross_global(g, q)?))
                    .collect()
            })
            .collect()
    }
}

/// Similarity of one sketch query and one gallery image.
pub fn pair_score(query: &TokenSet, item: &TokenSet, cross: &CrossAttention, store: &ParamStore, mode: ScoreMode) -> Result<f64> {
    match mode {
        ScoreMode::Fast => cosine_similarity(&query.global, &item.global),
        ScoreMode::Cross => {
            let to_item = cross.apply(store, query, item)?;
            let to_query = cross.apply(store, item, query)?;
            cosine_similarity(&to_item.global, &to_query.global)
        }
    }
}

/// `[queries × gallery]` scores under `mode`.
pub fn score_matrix(queries: &[TokenSet], gallery: &[TokenSet], cross: &CrossAttention, store: &ParamStore, mode: ScoreMode) -> Result<Vec<Vec<f64>>> {
    match mode {
        ScoreMode::Fast => queries
            .iter()
            .map(|q| gallery.iter().map(|g| cosine_similarity(&q.global, &g.global)).collect())
            .collect(),
        ScoreMode::Cross => CrossScorer::new(cross, store).score_matrix(queries, gallery),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KMetric {
    pub k: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub split: String,
    pub num_queries: usize,
    pub num_gallery: usize,
    /// Queries with no relevant gallery item; left out of every mean.
    pub excluded_queries: usize,
    pub map_all: f64,
    pub map_at_k: Vec<KMetric>,
    pub prec_at_k: Vec<KMetric>,
    /// Gallery ids per query, best first.
    #[serde(skip)]
    pub rankings: Vec<Vec<usize>>,
    /// `None` for excluded queries.
    #[serde(skip)]
    pub average_precision: Vec<Option<f64>>,
    /// 1-based rank of the first relevant item.
    #[serde(skip)]
    pub first_relevant_rank: Vec<Option<usize>>,
}

impl RetrievalReport {
    pub fn map_at(&self, k: usize) -> Option<f64> {
        self.map_at_k.iter().find(|m| m.k == k).map(|m| m.value)
    }

    pub fn prec_at(&self, k: usize) -> Option<f64> {
        self.prec_at_k.iter().find(|m| m.k == k).map(|m| m.value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `query_id,ap,first_relevant_rank`, excluded queries left out.
    pub fn per_query_csv(&self) -> String {
        let mut out = String::from("query_id,ap,first_relevant_rank\n");
        for (q, (ap, first)) in self.average_precision.iter().zip(&self.first_relevant_rank).enumerate() {
            if let (Some(ap), Some(first)) = (ap, first) {
                out.push_str(&format!("{q},{ap},{first}\n"));
            }
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>_per_query.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.json")), self.to_json())?;
        fs::write(dir.join(format!("{stem}_per_query.csv")), self.per_query_csv())?;
        Ok(())
    }
}

/// Gallery ids by descending score, ties by ascending id. `-0.0` ties
/// with `0.0`.
pub fn rank_gallery(scores: &[f64]) -> Vec<usize> {
    let key = |x: f64| if x == 0.0 { 0.0 } else { x };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| key(scores[b]).total_cmp(&key(scores[a])).then(a.cmp(&b)));
    order
}

/// Average precision truncated at `k` over a relevance vector in rank order.
pub fn average_precision(relevant_in_order: &[bool], k: usize) -> Option<f64> {
    let total = relevant_in_order.iter().filter(|&&r| r).count();
    if total == 0 || k == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevant_in_order.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Some(sum / k.min(total) as f64)
}

/// Ranks the gallery for every query and aggregates mAP@all, mAP@K and
/// Prec@K over queries that have at least one relevant item.
pub fn rank_and_score(
    scores: &[Vec<f64>],
    query_labels: &[usize],
    gallery_labels: &[usize],
    k_list: &[usize],
    split: &str,
) -> Result<RetrievalReport> {
    if gallery_labels.is_empty() {
        return Err(Error::EmptyInput("rank_and_score: gallery"));
    }
    if scores.len() != query_labels.len() {
        return Err(Error::dim("rank_and_score", &[scores.len()], &[query_labels.len()]));
    }
    let n = gallery_labels.len();
    let mut rankings = Vec::with_capacity(scores.len());
    let mut aps = Vec::with_capacity(scores.len());
    let mut firsts = Vec::with_capacity(scores.len());
    let mut map_k = vec![0.0; k_list.len()];
    let mut prec_k = vec![0.0; k_list.len()];
    let mut included = 0usize;
    for (row, &label) in scores.iter().zip(query_labels) {
        if row.len() != n {
            return Err(Error::dim("rank_and_score", &[row.len()], &[n]));
        }
        let order = rank_gallery(row);
        let rel: Vec<bool> = order.iter().map(|&g| gallery_labels[g] == label).collect();
        let ap = average_precision(&rel, n);
        firsts.push(rel.iter().position(|&r| r).map(|p| p + 1));
        if ap.is_some() {
            included += 1;
            for (i, &k) in k_list.iter().enumerate() {
                map_k[i] += average_precision(&rel, k).unwrap_or(0.0);
                prec_k[i] += rel.iter().take(k).filter(|&&r| r).count() as f64 / k as f64;
            }
        }
        aps.push(ap);
        rankings.push(order);
    }
    let denom = included.max(1) as f64;
    let map_all = aps.iter().flatten().sum::<f64>() / denom;
    let pack = |vals: Vec<f64>| {
        k_list
            .iter()
            .zip(vals)
            .map(|(&k, v)| KMetric { k, value: v / denom })
            .collect()
    };
    Ok(RetrievalReport {
        split: split.to_string(),
        num_queries: query_labels.len(),
        num_gallery: n,
        excluded_queries: query_labels.len() - included,
        map_all,
        map_at_k: pack(map_k),
        prec_at_k: pack(prec_k),
        rankings,
        average_precision: aps,
        first_relevant_rank: firsts,
    })
}

/// Expected mAP@all of a uniformly random ranking: per query, the mean over
/// ranks of the precision at each relevant position, averaged over queries.
pub fn random_ranking_map(query_labels: &[usize], gallery_labels: &[usize]) -> f64 {
    let n = gallery_labels.len();
    let per_query: Vec<f64> = query_labels
        .iter()
        .map(|&q| gallery_labels.iter().filter(|&&g| g == q).count())
        .filter(|&r| r > 0)
        .map(|r| {
            // Rank k is relevant with probability r/n; given that, the
            // expected hit count in the top k is 1 + (r−1)(k−1)/(n−1).
            let (n, r) = (n as f64, r as f64);
            if n <= 1.0 {
                return 1.0;
            }
            let mut s = 0.0;
            for k in 1..=n as usize {
                let k = k as f64;
                s += (1.0 + (r - 1.0) * (k - 1.0) / (n - 1.0)) / k;
            }
            s / n
        })
        .collect();
    if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().sum::<f64>() / per_query.len() as f64
    }
}

/// Mean fraction of the gallery that is relevant to a query.
pub fn chance_level(query_labels: &[usize], gallery_labels: &[usize]) -> f64 {
    if query_labels.is_empty() || gallery_labels.is_empty() {
        return 0.0;
    }
    let n = gallery_labels.len() as f64;
    query_labels
        .iter()
        .map(|&q| gallery_labels.iter().filter(|&&g| g == q).count() as f64 / n)
        .sum::<f64>()
        / query_labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::model::ModelConfig;
    use crate::nn::normal_tensor;
    use crate::rng::SeedTree;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn single_relevant_first_gives_one() {
        assert_eq!(average_precision(&[true, false, false], 3), Some(1.0));
    }

    #[test]
    fn hand_average_precision() {
        let ap = average_precision(&[true, false, true, false], 4).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        // Truncated at 2: only the first hit counts, denominator min(2, 2).
        assert_eq!(average_precision(&[true, false, true, false], 2), Some(0.5));
        assert_eq!(average_precision(&[false, false], 2), None);
    }

    #[test]
    fn ties_break_by_gallery_id() {
        assert_eq!(rank_gallery(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn report_counts_and_exclusions() {
        let scores = vec![vec![0.9, 0.1, 0.5, 0.2], vec![0.1, 0.2, 0.3, 0.4]];
        let r = rank_and_score(&scores, &[0, 7], &[0, 1, 0, 1], &[1, 2], "test").unwrap();
        assert_eq!(r.excluded_queries, 1);
        assert_eq!(r.average_precision[1], None);
        assert_eq!(r.map_all, 1.0);
        assert_eq!(r.prec_at(2), Some(1.0));
        assert_eq!(r.rankings[0], vec![0, 2, 3, 1]);
        assert_eq!(r.per_query_csv(), "query_id,ap,first_relevant_rank\n0,1,1\n");
        assert!(r.to_json().contains("\"map_all\": 1.0"));
        assert!(matches!(
            rank_and_score(&scores, &[0, 1], &[], &[1], "test"),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn all_relevant_gives_exactly_one() {
        let mut rng = SeedTree::new(3).stream("s");
        let scores: Vec<Vec<f64>> = (0..5).map(|_| (0..30).map(|_| rng.random()).collect()).collect();
        let r = rank_and_score(&scores, &[2; 5], &[2; 30], &[10], "all").unwrap();
        assert_eq!(r.map_all, 1.0);
        assert_eq!(r.map_at(10), Some(1.0));
    }

    #[test]
    fn signed_zeros_tie() {
        assert_eq!(rank_gallery(&[-0.0, 0.0, 0.5, -1.0]), vec![2, 0, 1, 3]);
    }

    #[test]
    fn chance_levels() {
        let q = [0, 1, 2, 3];
        let g: Vec<usize> = (0..100).map(|i| i / 25).collect();
        assert_eq!(chance_level(&q, &g), 0.25);
        let m = random_ranking_map(&q, &g);
        assert!((m - 0.2817).abs() < 1e-3, "{m}");
        // Single relevant item among n: E[1/rank] = H_n / n.
        let h3 = 1.0 + 0.5 + 1.0 / 3.0;
        assert!((random_ranking_map(&[0], &[0, 1, 1]) - h3 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn random_ranking_map_matches_simulation() {
        let q = [0, 1];
        let g = [0, 0, 1, 1, 1, 2, 2, 2];
        let mut rng = SeedTree::new(4).stream("sim");
        let trials = 20000;
        let mut total = 0.0;
        for _ in 0..trials {
            let scores: Vec<Vec<f64>> = (0..2).map(|_| (0..g.len()).map(|_| rng.random()).collect()).collect();
            total += rank_and_score(&scores, &q, &g, &[], "sim").unwrap().map_all;
        }
        let sim = total / trials as f64;
        assert!((sim - random_ranking_map(&q, &g)).abs() < 5e-3, "{sim}");
    }

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                grid: 8,
                patch: 4,
                channels: 1,
                d: 8,
                layers: 1,
                heads: 2,
                d_text: 4,
            },
            num_classes: 4,
            seen_classes: vec![0, 1],
            sharing: crate::model::EncoderSharing::Separate,
        };
        Model::new(cfg, &SeedTree::new(5)).unwrap()
    }

    fn samples(n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = SeedTree::new(seed).stream("x");
        (0..n).map(|_| normal_tensor(&mut rng, &[8, 8, 1], 1.0)).collect()
    }

    #[test]
    fn embedding_shapes_determinism_and_guard() {
        let m = tiny_model();
        let xs = samples(3, 6);
        let refs: Vec<&Tensor> = xs.iter().collect();
        let a = embed_split(&m, &refs, &[2, 3, 2], Modality::Sketch, true).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|t| t.width() == 8));
        assert_eq!(a, embed_split(&m, &refs, &[2, 3, 2], Modality::Sketch, true).unwrap());
        assert!(matches!(
            embed_split(&m, &refs, &[2, 1, 2], Modality::Sketch, true),
            Err(Error::SplitViolation { class: 1, .. })
        ));
        assert!(embed_split(&m, &refs, &[2, 1, 2], Modality::Sketch, false).is_ok());
    }

    #[test]
    fn self_score_fast_is_one_and_scores_are_bounded() {
        let m = tiny_model();
        let xs = samples(4, 7);
        let refs: Vec<&Tensor> = xs.iter().collect();
        let q = m.embed(&refs, Modality::Sketch, Precision::F64).unwrap();
        let mut as_image = q[0].clone();
        as_image.modality = Modality::Image;
        let s = pair_score(&q[0], &as_image, &m.cross, &m.store, ScoreMode::Fast).unwrap();
        assert!((s - 1.0).abs() < 1e-6);
        for mode in [ScoreMode::Fast, ScoreMode::Cross] {
            for row in score_matrix(&q, &q, &m.cross, &m.store, mode).unwrap() {
                assert!(row.iter().all(|s| (-1.0..=1.0).contains(s)));
            }
        }
    }

    #[test]
    fn fast_cross_scorer_matches_tape_block() {
        let m = tiny_model();
        let xs = samples(5, 8);
        let refs: Vec<&Tensor> = xs.iter().collect();
        let q = m.embed(&refs[..2], Modality::Sketch, Precision::F64).unwrap();
        let g = m.embed(&refs[2..], Modality::Image, Precision::F64).unwrap();
        let fast = score_matrix(&q, &g, &m.cross, &m.store, ScoreMode::Cross).unwrap();
        for (i, row) in fast.iter().enumerate() {
            for (j, &s) in row.iter().enumerate() {
                let slow = pair_score(&q[i], &g[j], &m.cross, &m.store, ScoreMode::Cross).unwrap();
                assert!((s - slow).abs() < 1e-12, "{s} vs {slow}");
            }
        }
    }

    #[test]
    fn zeroed_cross_layer_reduces_cross_to_fast() {
        let mut m = tiny_model();
        let wo = m.cross.attn.wo;
        m.store.get_mut(wo).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let xs = samples(6, 9);
        let refs: Vec<&Tensor> = xs.iter().collect();
        let q = m.embed(&refs[..2], Modality::Sketch, Precision::F64).unwrap();
        let g = m.embed(&refs[2..], Modality::Image, Precision::F64).unwrap();
        let cross = score_matrix(&q, &g, &m.cross, &m.store, ScoreMode::Cross).unwrap();
        let fast = score_matrix(&q, &g, &m.cross, &m.store, ScoreMode::Fast).unwrap();
        for (a, b) in cross.iter().zip(&fast) {
            assert_eq!(rank_gallery(a), rank_gallery(b));
        }
    }

    fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, Vec<usize>)> {
        (1usize..6, 2usize..25).prop_flat_map(|(q, g)| {
            (
                prop::collection::vec(prop::collection::vec(-3.0f64..3.0, g), q),
                prop::collection::vec(0usize..3, q),
                prop::collection::vec(0usize..3, g),
            )
        })
    }

    proptest! {
        #[test]
        fn monotone_transforms_leave_metrics_unchanged((scores, ql, gl) in instance()) {
            let a = rank_and_score(&scores, &ql, &gl, &[1, 5, 10], "p").unwrap();
            let warped: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|s| (2.0 * s).exp() + 1.0).collect()).collect();
            let b = rank_and_score(&warped, &ql, &gl, &[1, 5, 10], "p").unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn k_times_prec_is_nondecreasing((scores, ql, gl) in instance()) {
            let ks: Vec<usize> = (1..=gl.len()).collect();
            for (row, &label) in scores.iter().zip(&ql) {
                let r = rank_and_score(std::slice::from_ref(row), &[label], &gl, &ks, "p").unwrap();
                if r.excluded_queries == 1 {
                    continue;
                }
                let counts: Vec<f64> = r.prec_at_k.iter().map(|m| m.value * m.k as f64).collect();
                for w in counts.windows(2) {
                    prop_assert!(w[1] >= w[0] - 1e-9);
                    prop_assert!((w[1] - w[1].round()).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn metrics_in_unit_interval_and_rankings_are_permutations((scores, ql, gl) in instance()) {
            let r = rank_and_score(&scores, &ql, &gl, &[3, 100], "p").unwrap();
            for ranking in &r.rankings {
                let mut sorted = ranking.clone();
                sorted.sort_unstable();
                prop_assert_eq!(sorted, (0..gl.len()).collect::<Vec<_>>());
            }
            for v in std::iter::once(r.map_all).chain(r.map_at_k.iter().map(|m| m.value)).chain(r.prec_at_k.iter().map(|m| m.value)) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let included: Vec<f64> = r.average_precision.iter().flatten().copied().collect();
            if !included.is_empty() {
                let mean = included.iter().sum::<f64>() / included.len() as f64;
                prop_assert!((mean - r.map_all).abs() < 1e-12);
            }
        }
    }
}
