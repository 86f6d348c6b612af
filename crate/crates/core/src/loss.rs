//! Domain-balanced quadruplets and the weighted quadruplet loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels::norm;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Margin of the sketch-anchor / negative-image triplet.
    pub alpha: f64,
    /// Margin of the sketch-anchor / negative-sketch triplet.
    pub beta: f64,
    pub reduction: Reduction,
    /// When false only the image-negative triplet is used.
    pub domain_term: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.3,
            reduction: Reduction::Sum,
            domain_term: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "margins must be non-negative (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Slot `i` anchors on sketch `i` with positive image `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuadrupletBatch {
    pub neg_image: Vec<usize>,
    pub neg_sketch: Vec<usize>,
}

impl QuadrupletBatch {
    pub fn len(&self) -> usize {
        self.neg_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neg_image.is_empty()
    }
}

/// Draws, for every slot, a negative image and a negative sketch uniformly
/// from the in-batch slots of a different class.
pub fn sample_quadruplets(labels: &[usize], rng: &mut impl Rng) -> Result<QuadrupletBatch> {
    let mut neg_image = Vec::with_capacity(labels.len());
    let mut neg_sketch = Vec::with_capacity(labels.len());
    for &anchor in labels {
        let candidates: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != anchor).collect();
        if candidates.is_empty() {
            return Err(Error::NoNegative);
        }
        neg_image.push(candidates[rng.random_range(0..candidates.len())]);
        neg_sketch.push(candidates[rng.random_range(0..candidates.len())]);
    }
    Ok(QuadrupletBatch { neg_image, neg_sketch })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff)
}

/// `[‖anc − pos‖ − ‖anc − neg‖ + alpha]₊`
pub fn triplet_original(anc: &[f64], pos: &[f64], neg: &[f64], alpha: f64) -> f64 {
    (dist(anc, pos) - dist(anc, neg) + alpha).max(0.0)
}

/// `[‖anc − pos‖ − ‖anc − neg_sketch‖ + beta]₊`
pub fn triplet_domain(anc_sketch: &[f64], pos_image: &[f64], neg_sketch: &[f64], beta: f64) -> f64 {
    triplet_original(anc_sketch, pos_image, neg_sketch, beta)
}

/// Tape node of the total loss plus the weighted component values for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub loss_o: f64,
    pub loss_d: f64,
}

/// `Σ_i w_i · (L_o(i) + L_d(i))` over `[B × d]` sketch and image globals.
/// The weights enter as constants.
pub fn weighted_quadruplet_loss(
    g: &mut Graph,
    sketch_globals: Var,
    image_globals: Var,
    quads: &QuadrupletBatch,
    fin_list: &[f64],
    config: &LossConfig,
) -> Result<LossTerms> {
    if g.value(image_globals).shape() != g.value(sketch_globals).shape() {
        return Err(Error::dim("weighted_quadruplet_loss", g.value(sketch_globals).shape(), g.value(image_globals).shape()));
    }
    let (b, _) = g.value(sketch_globals).matrix_dims();
    if quads.len() != b {
        return Err(Error::dim("weighted_quadruplet_loss", &[b], &[quads.len()]));
    }
    let distance = |g: &mut Graph, source: Var, idx: Option<&[usize]>| -> Result<Var> {
        let other = match idx {
            Some(idx) => g.gather_rows(source, idx)?,
            None => source,
        };
        let diff = g.sub(sketch_globals, other)?;
        g.row_norms(diff)
    };
    let d_pos = distance(g, image_globals, None)?;
    let d_neg_image = distance(g, image_globals, Some(&quads.neg_image))?;
    let d_neg_sketch = if config.domain_term {
        Some(distance(g, sketch_globals, Some(&quads.neg_sketch))?)
    } else {
        None
    };
    weighted_hinge_loss(g, QuadrupletDistances { d_pos, d_neg_image, d_neg_sketch }, fin_list, config)
}

/// `[B]` distance vectors of the three pairs of every quadruplet slot.
#[derive(Clone, Copy, Debug)]
pub struct QuadrupletDistances {
    /// Anchor sketch to its paired image.
    pub d_pos: Var,
    pub d_neg_image: Var,
    /// Anchor sketch to the negative sketch; `None` drops the domain term.
    pub d_neg_sketch: Option<Var>,
}

/// The weighted loss from per-slot distances, however they were measured.
pub fn weighted_hinge_loss(g: &mut Graph, dists: QuadrupletDistances, fin_list: &[f64], config: &LossConfig) -> Result<LossTerms> {
    let b = g.value(dists.d_pos).len();
    if fin_list.len() != b || g.value(dists.d_neg_image).len() != b {
        return Err(Error::dim("weighted_quadruplet_loss", &[b], &[fin_list.len(), g.value(dists.d_neg_image).len()]));
    }
    let scale = match config.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / b as f64,
    };
    let weights = Tensor::vector(fin_list.iter().map(|w| w * scale).collect());
    let hinge = |g: &mut Graph, d_neg: Var, margin: f64| -> Result<Var> {
        let gap = g.sub(dists.d_pos, d_neg)?;
        let gap = g.add_scalar(gap, margin)?;
        g.relu(gap)
    };
    let l_o = hinge(g, dists.d_neg_image, config.alpha)?;
    let weighted_o = g.mul_const(l_o, &weights)?;
    let sum_o = g.sum(weighted_o)?;
    let loss_o = g.value(sum_o).data()[0];
    // Summing each term separately keeps the image-negative part bitwise
    // identical whether or not the domain term is present.
    let (total, loss_d) = match dists.d_neg_sketch.filter(|_| config.domain_term) {
        Some(d_neg) => {
            let l_d = hinge(g, d_neg, config.beta)?;
            let weighted_d = g.mul_const(l_d, &weights)?;
            let sum_d = g.sum(weighted_d)?;
            let loss_d = g.value(sum_d).data()[0];
            (g.add(sum_o, sum_d)?, loss_d)
        }
        None => (sum_o, 0.0),
    };
    Ok(LossTerms { total, loss_o, loss_d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_tensor;
    use crate::rng::SeedTree;
    use crate::tensor::Precision;

    #[test]
    fn quadruplet_negatives_respect_classes() {
        let mut rng = SeedTree::new(1).stream("q");
        let q = sample_quadruplets(&[0, 0, 1, 1], &mut rng).unwrap();
        for i in 0..4 {
            assert_ne!(i / 2, q.neg_image[i] / 2);
            assert_ne!(i / 2, q.neg_sketch[i] / 2);
        }
        let q = sample_quadruplets(&[3, 7], &mut rng).unwrap();
        assert_eq!(q.neg_image, vec![1, 0]);
        assert_eq!(q.neg_sketch, vec![1, 0]);
        assert!(matches!(sample_quadruplets(&[2, 2, 2, 2], &mut rng), Err(Error::NoNegative)));
    }

    #[test]
    fn quadruplet_sampling_is_seeded() {
        let labels = [0, 1, 2, 0, 1, 2, 3, 3];
        let a = sample_quadruplets(&labels, &mut SeedTree::new(9).stream("q")).unwrap();
        let b = sample_quadruplets(&labels, &mut SeedTree::new(9).stream("q")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_original(&[0.5, 1.0], &[0.5, 1.0], &[2.0, 0.0], 0.0), 0.0);
        assert_eq!(triplet_original(&[0.0], &[1.0], &[3.0], 0.3), 0.0);
        assert!((triplet_original(&[0.0], &[1.0], &[1.1], 0.3) - 0.2).abs() < 1e-12);
        assert_eq!(triplet_domain(&[1.0, 1.0], &[1.0, 1.0], &[0.0, 3.0], 0.0), 0.0);
        assert_eq!(triplet_domain(&[0.0, 0.0], &[0.0, 1.0], &[2.0, 0.0], 0.5), 0.0);
    }

    fn loss_value(sk: &Tensor, im: &Tensor, q: &QuadrupletBatch, w: &[f64], cfg: &LossConfig) -> f64 {
        let mut g = Graph::new(Precision::F64);
        let (s, i) = (g.constant(sk.clone()), g.constant(im.clone()));
        let t = weighted_quadruplet_loss(&mut g, s, i, q, w, cfg).unwrap();
        g.value(t.total).data()[0]
    }

    #[test]
    fn single_slot_sum() {
        // anc=[0], pos=[1.1], neg_image=[1.2] (L_o = 0.2), neg_sketch=[1.1] (L_d = 0.3)
        // with a second slot placed far away so it contributes nothing.
        let sk = Tensor::new(vec![2, 1], vec![0.0, 1.1]).unwrap();
        let im = Tensor::new(vec![2, 1], vec![1.1, 1.2]).unwrap();
        let q = QuadrupletBatch {
            neg_image: vec![1, 0],
            neg_sketch: vec![1, 0],
        };
        let cfg = LossConfig::default();
        let got = loss_value(&sk, &im, &q, &[1.0, 0.0], &cfg);
        assert!((got - 0.5).abs() < 1e-12, "{got}");
    }

    #[test]
    fn weights_scale_slots() {
        let q = QuadrupletBatch {
            neg_image: vec![1, 0],
            neg_sketch: vec![1, 0],
        };
        let cfg = LossConfig::default();
        // Far-apart classes satisfy the margins: loss 0 whatever the weights.
        let sk = Tensor::new(vec![2, 1], vec![0.0, 10.0]).unwrap();
        assert_eq!(loss_value(&sk, &sk, &q, &[0.5, 2.0], &cfg), 0.0);

        // Slot 0: d_pos 1.1, d_neg_image 1.2, d_neg_sketch 1.2 → 0.2 + 0.2.
        // Slot 1: image 1 sits on the radius-1.2 circle at distance 1.0 from
        // sketch 1, so d_neg_image = √2.65 → 0 and d_neg_sketch 1.2 → 0.1.
        let theta = 2.0 * (1.0f64 / 2.4).asin();
        let sk = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 1.2]).unwrap();
        let im = Tensor::new(vec![2, 2], vec![1.1, 0.0, 1.2 * theta.sin(), 1.2 * theta.cos()]).unwrap();
        let per_slot = [
            loss_value(&sk, &im, &q, &[1.0, 0.0], &cfg),
            loss_value(&sk, &im, &q, &[0.0, 1.0], &cfg),
        ];
        assert!((per_slot[0] - 0.4).abs() < 1e-12, "{per_slot:?}");
        assert!((per_slot[1] - 0.1).abs() < 1e-12, "{per_slot:?}");
        let got = loss_value(&sk, &im, &q, &[0.5, 2.0], &cfg);
        assert!((got - 0.4).abs() < 1e-12, "{got}");
    }

    #[test]
    fn zero_weights_annihilate_loss_and_gradient() {
        let mut rng = SeedTree::new(2).stream("x");
        let mut g = Graph::new(Precision::F64);
        let s = g.param(normal_tensor(&mut rng, &[4, 3], 1.0));
        let i = g.param(normal_tensor(&mut rng, &[4, 3], 1.0));
        let q = sample_quadruplets(&[0, 1, 0, 1], &mut rng).unwrap();
        let t = weighted_quadruplet_loss(&mut g, s, i, &q, &[0.0; 4], &LossConfig::default()).unwrap();
        assert_eq!(g.value(t.total).data()[0], 0.0);
        let grads = g.backward(t.total).unwrap();
        assert!(grads.get_or_zeros(s).data().iter().all(|x| *x == 0.0));
        assert!(grads.get_or_zeros(i).data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn mean_reduction_divides_by_batch() {
        let mut rng = SeedTree::new(3).stream("x");
        let sk = normal_tensor(&mut rng, &[4, 3], 1.0);
        let im = normal_tensor(&mut rng, &[4, 3], 1.0);
        let q = sample_quadruplets(&[0, 1, 0, 1], &mut rng).unwrap();
        let sum = loss_value(&sk, &im, &q, &[1.0; 4], &LossConfig::default());
        let mean = loss_value(&sk, &im, &q, &[1.0; 4], &LossConfig { reduction: Reduction::Mean, ..LossConfig::default() });
        assert!((sum / 4.0 - mean).abs() < 1e-12);
    }

    #[test]
    fn dropping_domain_term_gives_plain_triplet() {
        let mut rng = SeedTree::new(4).stream("x");
        let sk = normal_tensor(&mut rng, &[6, 3], 1.0);
        let im = normal_tensor(&mut rng, &[6, 3], 1.0);
        let q = sample_quadruplets(&[0, 1, 2, 0, 1, 2], &mut rng).unwrap();
        let cfg = LossConfig { domain_term: false, ..LossConfig::default() };
        let got = loss_value(&sk, &im, &q, &[1.0; 6], &cfg);
        let want: f64 = (0..6)
            .map(|k| triplet_original(sk.row(k), im.row(k), im.row(q.neg_image[k]), cfg.alpha))
            .sum();
        assert!((got - want).abs() < 1e-12);
    }
}
