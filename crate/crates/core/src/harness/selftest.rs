//! Oracle suites run by the `selftest` command.
//!
//! Each suite checks a production routine against an independent, slower
//! reference on seeded random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Split;
use crate::evaluation::evaluate;
use crate::geometry::BBox;
use crate::inference::{suppresses, triplet_nms, ImageTriplets, Triplet};
use crate::losses::{asl_loss, assn_loss, focal_loss, loc_loss, part_loss, AslParams, FocalParams, LossGrad};
use crate::matching::{hungarian, CostMatrix};
use crate::partmask::{keypoint_mask, Grid, Keypoint};

/// Outcome of one suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: Vec<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

type Suite = fn(&mut ChaCha8Rng) -> (usize, Vec<String>);

const SUITES: [(&str, Suite); 5] = [
    ("hungarian_brute_force", hungarian_suite),
    ("loss_gradients", gradient_suite),
    ("triplet_nms", nms_suite),
    ("part_masks", mask_suite),
    ("evaluator_fixture", evaluator_suite),
];

pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    SUITES
        .iter()
        .enumerate()
        .map(|(i, (name, suite))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (cases, failures) = suite(&mut rng);
            SuiteResult { name, cases, failures }
        })
        .collect()
}

/// Minimum over every injective truth-to-query map (rows are queries).
fn permutations_min(c: &CostMatrix) -> f64 {
    fn go(c: &CostMatrix, col: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if col == c.cols() {
            *best = best.min(acc);
            return;
        }
        for row in 0..c.rows() {
            if !used[row] {
                used[row] = true;
                go(c, col + 1, used, acc + c.get(row, col), best);
                used[row] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.rows()], 0.0, &mut best);
    best
}

fn hungarian_suite(rng: &mut ChaCha8Rng) -> (usize, Vec<String>) {
    let mut failures = Vec::new();
    let cases = 200;
    for case in 0..cases {
        let cols = rng.random_range(0..=5);
        let rows = cols + rng.random_range(0..=2);
        // Small integer costs make ties common.
        let c = CostMatrix::from_fn(rows, cols, |_, _| rng.random_range(0..6) as f64);
        match hungarian(&c) {
            Ok(a) => {
                let (got, want) = (a.cost(&c), permutations_min(&c));
                if got != want {
                    failures.push(format!("case {case}: cost {got}, optimum {want}"));
                }
            }
            Err(e) => failures.push(format!("case {case}: {e}")),
        }
    }
    (cases, failures)
}

fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = 1e-6;
    (0..x.len())
        .map(|i| {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn compare_grad(name: &str, case: usize, got: &LossGrad, f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Option<String> {
    let want = central_difference(f, x);
    for (i, (a, b)) in got.grad.iter().zip(&want).enumerate() {
        let scale = a.abs().max(b.abs()).max(1e-3);
        if (a - b).abs() / scale > 1e-4 {
            return Some(format!("{name} case {case} entry {i}: analytic {a}, numeric {b}"));
        }
    }
    None
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::raw(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.1..0.4), rng.random_range(0.1..0.4))
}

fn boxes_of(x: &[f64]) -> Vec<BBox> {
    x.chunks(4).map(|c| BBox::raw(c[0], c[1], c[2], c[3])).collect()
}

fn gradient_suite(rng: &mut ChaCha8Rng) -> (usize, Vec<String>) {
    let mut failures = Vec::new();
    let per_loss = 20;
    for case in 0..per_loss {
        let n = rng.random_range(1..8);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let targets: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();

        let fp = FocalParams::default();
        let f = |x: &[f64]| focal_loss(x, &targets, &fp).value;
        failures.extend(compare_grad("focal", case, &focal_loss(&logits, &targets, &fp), &f, &logits));

        let ap = AslParams::default();
        let f = |x: &[f64]| asl_loss(x, &targets, &ap).value;
        failures.extend(compare_grad("asl", case, &asl_loss(&logits, &targets, &ap), &f, &logits));

        let gt: Vec<BBox> = (0..n).map(|_| random_box(rng)).collect();
        let pred: Vec<f64> = (0..n).flat_map(|_| random_box(rng).to_array()).collect();
        let f = |x: &[f64]| loc_loss(&boxes_of(x), &gt, 5.0, 2.0).value;
        failures.extend(compare_grad("loc", case, &loc_loss(&boxes_of(&pred), &gt, 5.0, 2.0), &f, &pred));

        let (maps, cells) = (rng.random_range(1..4), 6);
        let attn: Vec<f64> = (0..maps * cells).map(|_| rng.random_range(0.01..1.0)).collect();
        let masks: Vec<f64> = (0..maps * cells).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let sup: Vec<bool> = (0..maps).map(|_| rng.random_bool(0.8)).collect();
        let f = |x: &[f64]| part_loss(x, &masks, &sup, cells).value;
        failures.extend(compare_grad("part", case, &part_loss(&attn, &masks, &sup, cells), &f, &attn));

        let (n_g, n_i) = (rng.random_range(1..4), rng.random_range(1..5));
        let sim: Vec<f64> = (0..n_g * n_i).map(|_| rng.random_range(-4.0..4.0)).collect();
        let gq: Vec<usize> = (0..rng.random_range(0..=n_g)).collect();
        let iq: Vec<usize> = (0..rng.random_range(0..=n_i)).rev().collect();
        let membership: Vec<Vec<bool>> = gq.iter().map(|_| iq.iter().map(|_| rng.random_bool(0.5)).collect()).collect();
        let f = |x: &[f64]| assn_loss(x, n_i, &membership, &gq, &iq).value;
        failures.extend(compare_grad("assn", case, &assn_loss(&sim, n_i, &membership, &gq, &iq), &f, &sim));
    }
    (5 * per_loss, failures)
}

fn random_triplet(rng: &mut ChaCha8Rng) -> Triplet {
    // Few distinct boxes so suppression actually fires.
    let pick = |rng: &mut ChaCha8Rng| {
        let k = rng.random_range(0..4) as f64;
        BBox::raw(0.3 + 0.05 * k, 0.4, 0.2 + 0.02 * k, 0.3)
    };
    Triplet {
        individual_box: pick(rng),
        group_box: pick(rng),
        class_id: rng.random_range(0..2),
        score: rng.random_range(0..20) as f64 / 20.0,
        individual_index: rng.random_range(0..12),
        group_index: rng.random_range(0..16),
    }
}

/// Brute-force greedy: repeatedly take the best remaining triplet and drop
/// everything it suppresses.
fn nms_oracle(ts: &[Triplet], theta: f64) -> Vec<Triplet> {
    let mut rest = ts.to_vec();
    let mut kept = Vec::new();
    while !rest.is_empty() {
        let best = (0..rest.len())
            .min_by(|&a, &b| crate::inference::score_order(&rest[a], &rest[b]))
            .unwrap();
        let top = rest.remove(best);
        rest.retain(|t| !suppresses(&top, t, theta));
        kept.push(top);
    }
    kept
}

fn nms_suite(rng: &mut ChaCha8Rng) -> (usize, Vec<String>) {
    let mut failures = Vec::new();
    let cases = 200;
    for case in 0..cases {
        let n = rng.random_range(0..15);
        let ts: Vec<Triplet> = (0..n).map(|_| random_triplet(rng)).collect();
        let got = triplet_nms(&ts, 0.5);
        if got != nms_oracle(&ts, 0.5) {
            failures.push(format!("case {case}: differs from greedy oracle"));
        }
        if triplet_nms(&got, 0.5) != got {
            failures.push(format!("case {case}: not idempotent"));
        }
    }
    (cases, failures)
}

fn mask_suite(rng: &mut ChaCha8Rng) -> (usize, Vec<String>) {
    let mut failures = Vec::new();
    let cases = 200;
    let grid = Grid { width: 16, height: 16, stride: 8 };
    for case in 0..cases {
        let kp = Keypoint::new(rng.random_range(-10.0..140.0), rng.random_range(-10.0..140.0));
        let s = rng.random_range(0.0..60.0);
        let m = keypoint_mask(kp, s, grid);
        // Cells whose center lies in [c - s/2, c + s/2], counted per axis.
        let axis = |c: f64| (0..16).filter(|&u| (grid.center(u) - c).abs() <= s / 2.0).count();
        let want = axis(kp.x) * axis(kp.y);
        if m.count() != want {
            failures.push(format!("case {case}: {} cells, expected {want}", m.count()));
        }
    }
    (cases, failures)
}

fn evaluator_suite(rng: &mut ChaCha8Rng) -> (usize, Vec<String>) {
    let mut failures = Vec::new();
    let spec = crate::data::SynthSpec { num_scenes: 6, seed: rng.random(), ..Default::default() };
    let split: Split = match crate::data::generate_synthetic(&spec) {
        Ok((s, _)) => s,
        Err(e) => return (1, vec![e.to_string()]),
    };
    let gt = split.ground_truth();
    match evaluate(&gt, &gt, split.num_classes()) {
        Ok(r) if r.ar_percent() == 100.0 => {}
        Ok(r) => failures.push(format!("perfect predictions scored AR {}", r.ar_percent())),
        Err(e) => failures.push(e.to_string()),
    }
    let empty: Vec<ImageTriplets> =
        gt.iter().map(|g| ImageTriplets { image_id: g.image_id.clone(), triplets: Vec::new() }).collect();
    match evaluate(&empty, &gt, split.num_classes()) {
        Ok(r) if r.ar_percent() == 0.0 => {}
        Ok(r) => failures.push(format!("empty predictions scored AR {}", r.ar_percent())),
        Err(e) => failures.push(e.to_string()),
    }
    (2, failures)
}
