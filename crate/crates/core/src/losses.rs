//! Training objectives as plain `f64` functions returning a value and its
//! analytic gradient, so they can be checked in isolation and spliced into a
//! tape as custom scalar nodes.

use crate::error::{Error, Result};
use crate::geometry::{giou_with_grad, BBox};

/// Loss coefficients of the weighted objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Individual objectness (focal).
    pub ind: f64,
    /// Interaction classes (asymmetric loss).
    pub cls: f64,
    /// Localization, applied on top of the inner `l1` and `giou` weights.
    pub loc: f64,
    pub l1: f64,
    pub giou: f64,
    /// Pose-guided part attention.
    pub part: f64,
    /// Group–individual association.
    pub assn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ind: 1.0, cls: 2.0, loc: 1.0, l1: 2.5, giou: 1.0, part: 10.0, assn: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("ind", self.ind),
            ("cls", self.cls),
            ("loc", self.loc),
            ("l1", self.l1),
            ("giou", self.giou),
            ("part", self.part),
            ("assn", self.assn),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted values of the five losses on one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub ind: f64,
    pub cls: f64,
    pub loc: f64,
    pub part: f64,
    pub assn: f64,
}

impl LossComponents {
    pub const NAMES: [&'static str; 5] = ["ind", "cls", "loc", "part", "assn"];

    pub fn as_array(&self) -> [f64; 5] {
        [self.ind, self.cls, self.loc, self.part, self.assn]
    }

    pub fn outer_weights(w: &LossWeights) -> [f64; 5] {
        [w.ind, w.cls, w.loc, w.part, w.assn]
    }
}

/// `λ_i L_ind + λ_c L_cls + λ_l L_loc + λ_p L_part + λ_a L_assn`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    let weights = LossComponents::outer_weights(w);
    c.as_array().iter().zip(weights).filter(|(_, w)| *w != 0.0).map(|(v, w)| w * v).sum()
}

/// A scalar loss and its gradient with respect to the inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossGrad {
    fn zero(n: usize) -> Self {
        Self { value: 0.0, grad: vec![0.0; n] }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of a single logit.
pub fn bce_with_logit(x: f64, target: bool) -> f64 {
    if target {
        softplus(-x)
    } else {
        softplus(x)
    }
}

/// Mean binary cross-entropy over logits.
pub fn bce_loss(logits: &[f64], targets: &[bool]) -> LossGrad {
    assert_eq!(logits.len(), targets.len());
    let n = logits.len();
    if n == 0 {
        return LossGrad::zero(0);
    }
    let inv = 1.0 / n as f64;
    let value = logits.iter().zip(targets).map(|(&x, &t)| bce_with_logit(x, t)).sum::<f64>() * inv;
    let grad = logits.iter().zip(targets).map(|(&x, &t)| (sigmoid(x) - if t { 1.0 } else { 0.0 }) * inv).collect();
    LossGrad { value, grad }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    /// Positive-class weight; `None` weights both classes by 1.
    pub alpha: Option<f64>,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: Some(0.25) }
    }
}

/// Mean sigmoid focal loss.
pub fn focal_loss(logits: &[f64], targets: &[bool], params: &FocalParams) -> LossGrad {
    assert_eq!(logits.len(), targets.len());
    let n = logits.len();
    if n == 0 {
        return LossGrad::zero(0);
    }
    let inv = 1.0 / n as f64;
    let g = params.gamma;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&x, &t) in logits.iter().zip(targets) {
        let p = sigmoid(x);
        if t {
            let a = params.alpha.unwrap_or(1.0);
            let log_p = -softplus(-x);
            let q = 1.0 - p;
            value += -a * q.powf(g) * log_p;
            grad.push(a * q.powf(g) * (g * p * log_p - q) * inv);
        } else {
            let a = params.alpha.map_or(1.0, |a| 1.0 - a);
            let log_q = -softplus(x);
            value += -a * p.powf(g) * log_q;
            grad.push(a * (p.powf(g + 1.0) - g * p.powf(g) * (1.0 - p) * log_q) * inv);
        }
    }
    LossGrad { value: value * inv, grad }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AslParams {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    /// Probability shift applied to negatives.
    pub margin: f64,
}

impl Default for AslParams {
    fn default() -> Self {
        Self { gamma_pos: 0.0, gamma_neg: 4.0, margin: 0.05 }
    }
}

/// Mean asymmetric loss over all logits.
pub fn asl_loss(logits: &[f64], targets: &[bool], params: &AslParams) -> LossGrad {
    assert_eq!(logits.len(), targets.len());
    let n = logits.len();
    if n == 0 {
        return LossGrad::zero(0);
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&x, &t) in logits.iter().zip(targets) {
        let p = sigmoid(x);
        if t {
            let g = params.gamma_pos;
            let log_p = -softplus(-x);
            let q = 1.0 - p;
            value += -q.powf(g) * log_p;
            grad.push(q.powf(g) * (g * p * log_p - q) * inv);
        } else {
            let g = params.gamma_neg;
            if params.margin == 0.0 {
                let log_q = -softplus(x);
                value += -p.powf(g) * log_q;
                grad.push((p.powf(g + 1.0) - g * p.powf(g) * (1.0 - p) * log_q) * inv);
            } else {
                let q = p - params.margin;
                if q <= 0.0 {
                    grad.push(0.0);
                    continue;
                }
                let log_1mq = (-q).ln_1p();
                value += -q.powf(g) * log_1mq;
                let d_pow = if g == 0.0 { 0.0 } else { g * q.powf(g - 1.0) };
                let d_q = q.powf(g) / (1.0 - q) - d_pow * log_1mq;
                grad.push(d_q * p * (1.0 - p) * inv);
            }
        }
    }
    LossGrad { value: value * inv, grad }
}

/// Box regression over matched pairs: `λ_ℓ1 · mean_pairs Σ_coords |Δ| + λ_GIoU · mean_pairs (1 − giou)`.
///
/// The gradient is with respect to the predicted `(cx, cy, w, h)`, flattened.
pub fn loc_loss(pred: &[BBox], gt: &[BBox], l1_weight: f64, giou_weight: f64) -> LossGrad {
    assert_eq!(pred.len(), gt.len());
    let n = pred.len();
    if n == 0 {
        return LossGrad::zero(0);
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(4 * n);
    for (p, g) in pred.iter().zip(gt) {
        let (pa, ga) = (p.to_array(), g.to_array());
        let (gi, d_gi) = giou_with_grad(*p, *g);
        value += giou_weight * (1.0 - gi);
        for k in 0..4 {
            let d = pa[k] - ga[k];
            value += l1_weight * d.abs();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            grad.push((l1_weight * sign - giou_weight * d_gi[k]) * inv);
        }
    }
    LossGrad { value: value * inv, grad }
}

/// Mean squared error between attention maps and binary masks.
///
/// `attn` and `masks` hold `supervised.len()` maps of `cells` entries each. Each
/// supervised map contributes its spatial mean; the sum is divided by the
/// number of supervised maps. Unsupervised maps get zero gradient.
pub fn part_loss(attn: &[f64], masks: &[f64], supervised: &[bool], cells: usize) -> LossGrad {
    assert_eq!(attn.len(), masks.len(), "attention and mask shapes differ");
    assert_eq!(attn.len(), supervised.len() * cells, "map count mismatch");
    let n_sup = supervised.iter().filter(|&&s| s).count();
    let mut out = LossGrad::zero(attn.len());
    if n_sup == 0 || cells == 0 {
        return out;
    }
    let scale = 1.0 / (n_sup as f64 * cells as f64);
    for (m, _) in supervised.iter().enumerate().filter(|(_, &s)| s) {
        let range = m * cells..(m + 1) * cells;
        for i in range {
            let d = attn[i] - masks[i];
            out.value += d * d * scale;
            out.grad[i] = 2.0 * d * scale;
        }
    }
    out
}

/// Association BCE over matched groups and matched individuals.
///
/// `similarity` is the row-major `(num_groups, num_individuals)` logit matrix.
/// `group_query[i]` is the prediction matched to ground-truth group `i`,
/// `individual_query[j]` the prediction matched to ground-truth person `j`, and
/// `membership[i][j]` is `a_i(j)`.
pub fn assn_loss(
    similarity: &[f64],
    num_individuals: usize,
    membership: &[Vec<bool>],
    group_query: &[usize],
    individual_query: &[usize],
) -> LossGrad {
    assert_eq!(membership.len(), group_query.len());
    let mut out = LossGrad::zero(similarity.len());
    let count = group_query.len() * individual_query.len();
    if count == 0 {
        return out;
    }
    let inv = 1.0 / count as f64;
    for (row, &gq) in membership.iter().zip(group_query) {
        assert_eq!(row.len(), individual_query.len(), "membership row length");
        for (&a, &iq) in row.iter().zip(individual_query) {
            let idx = gq * num_individuals + iq;
            let x = similarity[idx];
            out.value += bce_with_logit(x, a) * inv;
            out.grad[idx] += (sigmoid(x) - if a { 1.0 } else { 0.0 }) * inv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let denom = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / denom < tol, "entry {i}: {x} vs {y}");
        }
    }

    #[test]
    fn table_weights_sum_to_nineteen() {
        let ones = LossComponents { ind: 1.0, cls: 1.0, loc: 1.0, part: 1.0, assn: 1.0 };
        assert_eq!(total_loss(&ones, &LossWeights::default()), 19.0);
        assert_eq!(total_loss(&LossComponents::default(), &LossWeights::default()), 0.0);
        let no_assn = LossWeights { assn: 0.0, ..LossWeights::default() };
        assert_eq!(total_loss(&ones, &no_assn), 14.0);
    }

    #[test]
    fn rejects_negative_weights() {
        assert!(LossWeights { part: -1.0, ..LossWeights::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }

    #[test]
    fn focal_scalar_value() {
        let l = focal_loss(&[0.0], &[true], &FocalParams::default());
        let expected = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((l.value - expected).abs() < 1e-15);
        let l = focal_loss(&[40.0], &[true], &FocalParams::default());
        assert!(l.value < 1e-15);
    }

    #[test]
    fn asl_scalar_values() {
        let p = AslParams::default();
        // positive at p = 0.5: -log 0.5
        let l = asl_loss(&[0.0], &[true], &p);
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
        // negative at p = 0.5: q = 0.45, -q^4 log(0.55)
        let l = asl_loss(&[0.0], &[false], &p);
        let q: f64 = 0.45;
        assert!((l.value - (-q.powi(4) * 0.55f64.ln())).abs() < 1e-15);
        // confident negative is clipped to exactly zero by the margin
        let l = asl_loss(&[-10.0], &[false], &p);
        assert_eq!(l.value, 0.0);
        let l = asl_loss(&[30.0, -30.0], &[true, false], &p);
        assert!(l.value < 1e-12);
    }

    #[test]
    fn loc_known_offset() {
        let p = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let g = BBox::new(0.55, 0.5, 0.2, 0.2).unwrap();
        let l = loc_loss(&[p], &[g], 2.5, 1.0);
        let expected = 2.5 * 0.05 + (1.0 - crate::geometry::giou(p, g));
        assert!((l.value - expected).abs() < 1e-12);
        assert_eq!(loc_loss(&[p], &[p], 2.5, 1.0).value, 0.0);
    }

    #[test]
    fn part_uniform_against_zero_mask() {
        let cells = 16 * 16;
        let attn = vec![1.0 / cells as f64; 2 * cells];
        let masks = vec![0.0; 2 * cells];
        let l = part_loss(&attn, &masks, &[true, true], cells);
        let expected = (1.0 / cells as f64).powi(2);
        assert!((l.value - expected).abs() < 1e-18);
        assert_eq!(part_loss(&attn, &attn, &[true, true], cells).value, 0.0);
        // unsupervised maps do not count
        let l1 = part_loss(&attn, &masks, &[true, false], cells);
        assert!((l1.value - expected).abs() < 1e-18);
        assert!(l1.grad[cells..].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn assn_examples() {
        let membership = vec![vec![true, false, true], vec![false, true, false]];
        let gq = [1, 0];
        let iq = [2, 0, 3];
        let n_i = 4;
        let mut s = vec![0.0; 2 * n_i];
        let l = assn_loss(&s, n_i, &membership, &gq, &iq);
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
        for (row, &g) in membership.iter().zip(&gq) {
            for (&a, &i) in row.iter().zip(&iq) {
                s[g * n_i + i] = if a { 20.0 } else { -20.0 };
            }
        }
        assert!(assn_loss(&s, n_i, &membership, &gq, &iq).value < 1e-6);
        // hand-expanded sum on random logits
        let s: Vec<f64> = (0..2 * n_i).map(|k| (k as f64 - 3.5) * 0.7).collect();
        let mut expected = 0.0;
        for (row, &g) in membership.iter().zip(&gq) {
            for (&a, &i) in row.iter().zip(&iq) {
                let p = 1.0 / (1.0 + (-s[g * n_i + i]).exp());
                expected -= if a { p.ln() } else { (1.0 - p).ln() };
            }
        }
        expected /= 6.0;
        assert!((assn_loss(&s, n_i, &membership, &gq, &iq).value - expected).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;
        for _ in 0..10 {
            let n = 6;
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            let fp = FocalParams::default();
            let g = focal_loss(&x, &t, &fp).grad;
            assert_close(&g, &fd(|v| focal_loss(v, &t, &fp).value, &x, h), 1e-5);
            let ap = AslParams::default();
            let g = asl_loss(&x, &t, &ap).grad;
            assert_close(&g, &fd(|v| asl_loss(v, &t, &ap).value, &x, h), 1e-5);
            let g = bce_loss(&x, &t).grad;
            assert_close(&g, &fd(|v| bce_loss(v, &t).value, &x, h), 1e-5);
        }
    }

    fn arb_batch() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (1usize..20).prop_flat_map(|n| (prop::collection::vec(-12.0f64..12.0, n), prop::collection::vec(any::<bool>(), n)))
    }

    proptest! {
        #[test]
        fn focal_without_focusing_is_bce((x, t) in arb_batch()) {
            let f = focal_loss(&x, &t, &FocalParams { gamma: 0.0, alpha: None });
            let b = bce_loss(&x, &t);
            prop_assert!((f.value - b.value).abs() < 1e-9);
            for (a, b) in f.grad.iter().zip(&b.grad) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn asl_without_asymmetry_is_bce((x, t) in arb_batch()) {
            let f = asl_loss(&x, &t, &AslParams { gamma_pos: 0.0, gamma_neg: 0.0, margin: 0.0 });
            let b = bce_loss(&x, &t);
            prop_assert!((f.value - b.value).abs() < 1e-9);
        }

        #[test]
        fn losses_nonnegative_and_finite((x, t) in arb_batch()) {
            for v in [
                focal_loss(&x, &t, &FocalParams::default()).value,
                asl_loss(&x, &t, &AslParams::default()).value,
                bce_loss(&x, &t).value,
            ] {
                prop_assert!(v.is_finite() && v >= 0.0);
            }
        }

        #[test]
        fn assn_ignores_unmatched_entries(noise in prop::collection::vec(-5.0f64..5.0, 12), bump in -3.0f64..3.0) {
            let membership = vec![vec![true, false], vec![false, true]];
            let (gq, iq, n_i) = ([2usize, 0], [1usize, 3], 4);
            let base = assn_loss(&noise, n_i, &membership, &gq, &iq).value;
            let mut s = noise.clone();
            for g in 0..3 {
                for i in 0..n_i {
                    if !(gq.contains(&g) && iq.contains(&i)) {
                        s[g * n_i + i] += bump;
                    }
                }
            }
            prop_assert_eq!(assn_loss(&s, n_i, &membership, &gq, &iq).value.to_bits(), base.to_bits());
        }
    }
}
