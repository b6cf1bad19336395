//! Binary attention targets derived from body keypoints.
//!
//! A mask cell `(u, v)` of a stride-`s` feature grid is on when its pixel
//! center `((u + ½)·stride, (v + ½)·stride)` lies inside the square window of
//! side `α · max(w, h)` centered on the keypoint.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Keypoint order used everywhere (13 entries, no facial sub-points).
pub const PART_NAMES: [&str; 13] = [
    "face",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

pub const NUM_PARTS: usize = PART_NAMES.len();

/// Index into [`PART_NAMES`].
pub mod part {
    pub const FACE: usize = 0;
    pub const L_SHOULDER: usize = 1;
    pub const R_SHOULDER: usize = 2;
    pub const L_ELBOW: usize = 3;
    pub const R_ELBOW: usize = 4;
    pub const L_WRIST: usize = 5;
    pub const R_WRIST: usize = 6;
    pub const L_HIP: usize = 7;
    pub const R_HIP: usize = 8;
    pub const L_KNEE: usize = 9;
    pub const R_KNEE: usize = 10;
    pub const L_ANKLE: usize = 11;
    pub const R_ANKLE: usize = 12;
}

/// A keypoint in image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub valid: bool,
}

impl Keypoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y, valid: true }
    }

    pub const fn missing() -> Self {
        Self { x: 0.0, y: 0.0, valid: false }
    }
}

/// Keypoints of every individual in a scene, indexed `[person][part]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeypointSet {
    pub persons: Vec<Vec<Keypoint>>,
}

impl KeypointSet {
    pub fn new(persons: Vec<Vec<Keypoint>>) -> Self {
        Self { persons }
    }

    /// Every person must carry exactly `parts` keypoints.
    pub fn check_parts(&self, parts: usize) -> Result<()> {
        for (i, kp) in self.persons.iter().enumerate() {
            if kp.len() != parts {
                return Err(Error::KeypointCount { expected: parts, found: kp.len(), location: format!("person {i}") });
            }
        }
        Ok(())
    }
}

/// Feature-grid geometry: `width × height` cells of `stride` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub stride: usize,
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// Pixel-space center of cell index `u` along one axis.
    pub fn center(&self, u: usize) -> f64 {
        (u as f64 + 0.5) * self.stride as f64
    }
}

/// One binary mask on the feature grid, row-major `[v][u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartMask {
    pub grid: Grid,
    pub cells: Vec<bool>,
    /// False when the keypoint was missing; such masks are all zero and unsupervised.
    pub valid: bool,
}

impl PartMask {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.cells[v * self.grid.width + u]
    }
}

/// Window side `α · max(w, h)` in pixels for a normalized box on a `width × height` image.
pub fn window_size(b: BBox, alpha: f64, width: usize, height: usize) -> f64 {
    alpha * (b.w * width as f64).max(b.h * height as f64)
}

/// Mask for a single keypoint with window side `s` (pixels).
pub fn keypoint_mask(kp: Keypoint, s: f64, grid: Grid) -> PartMask {
    let mut cells = vec![false; grid.cells()];
    if kp.valid && s > 0.0 {
        let half = s / 2.0;
        for v in 0..grid.height {
            if (grid.center(v) - kp.y).abs() > half {
                continue;
            }
            for u in 0..grid.width {
                if (grid.center(u) - kp.x).abs() <= half {
                    cells[v * grid.width + u] = true;
                }
            }
        }
    }
    PartMask { grid, cells, valid: kp.valid }
}

/// Masks for every `(person, part)`, person-major.
///
/// `boxes` are the normalized person boxes on an image of `image_size = (width, height)`.
pub fn keypoints_to_masks(
    kps: &KeypointSet,
    boxes: &[BBox],
    parts: usize,
    alpha: f64,
    image_size: (usize, usize),
    grid: Grid,
) -> Result<Vec<PartMask>> {
    kps.check_parts(parts)?;
    if kps.persons.len() != boxes.len() {
        return Err(Error::Annotation {
            location: "keypoints".into(),
            message: format!("{} keypoint records for {} persons", kps.persons.len(), boxes.len()),
        });
    }
    let mut out = Vec::with_capacity(boxes.len() * parts);
    for (person, b) in kps.persons.iter().zip(boxes) {
        let s = window_size(*b, alpha, image_size.0, image_size.1);
        out.extend(person.iter().map(|&kp| keypoint_mask(kp, s, grid)));
    }
    Ok(out)
}

/// Shift every valid keypoint of person `i` by `Uniform(−ε·s_i, ε·s_i)` per coordinate.
pub fn perturb_keypoints<R: Rng + ?Sized>(kps: &KeypointSet, epsilon: f64, window: &[f64], rng: &mut R) -> KeypointSet {
    assert!(epsilon >= 0.0, "perturbation scale must be nonnegative");
    assert_eq!(window.len(), kps.persons.len());
    if epsilon == 0.0 {
        return kps.clone();
    }
    let persons = kps
        .persons
        .iter()
        .zip(window)
        .map(|(person, &s)| {
            let r = epsilon * s;
            person
                .iter()
                .map(|kp| {
                    if !kp.valid || r <= 0.0 {
                        return *kp;
                    }
                    let dx = rng.random_range(-r..=r);
                    let dy = rng.random_range(-r..=r);
                    Keypoint { x: kp.x + dx, y: kp.y + dy, valid: true }
                })
                .collect()
        })
        .collect();
    KeypointSet { persons }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const GRID: Grid = Grid { width: 16, height: 16, stride: 8 };

    #[test]
    fn window_examples() {
        let b = BBox::new(0.5, 0.5, 100.0 / 128.0, 50.0 / 128.0).unwrap();
        assert!((window_size(b, 0.2, 128, 128) - 20.0).abs() < 1e-12);
        let b = BBox::new(0.5, 0.5, 50.0 / 128.0, 50.0 / 128.0).unwrap();
        assert!((window_size(b, 0.2, 128, 128) - 10.0).abs() < 1e-12);
        assert_eq!(window_size(b, 0.0, 128, 128), 0.0);
        assert_eq!(keypoint_mask(Keypoint::new(64.0, 64.0), 0.0, GRID).count(), 0);
    }

    #[test]
    fn three_by_three_block() {
        // cell (7, 7) has center (60, 60); s = 3 strides covers cells 6..=8
        let m = keypoint_mask(Keypoint::new(60.0, 60.0), 24.0, GRID);
        assert_eq!(m.count(), 9);
        for v in 6..=8 {
            for u in 6..=8 {
                assert!(m.get(u, v));
            }
        }
    }

    #[test]
    fn clipped_outside_image() {
        let m = keypoint_mask(Keypoint::new(-6.0, 130.0), 24.0, GRID);
        // x: centers 4 only; y: centers 124 only
        assert_eq!(m.count(), 1);
        assert!(m.get(0, 15));
        let far = keypoint_mask(Keypoint::new(-100.0, 64.0), 24.0, GRID);
        assert_eq!(far.count(), 0);
    }

    #[test]
    fn disjoint_windows_disjoint_masks() {
        let a = keypoint_mask(Keypoint::new(20.0, 20.0), 16.0, GRID);
        let b = keypoint_mask(Keypoint::new(100.0, 100.0), 16.0, GRID);
        assert!(a.cells.iter().zip(&b.cells).all(|(x, y)| !(*x && *y)));
    }

    #[test]
    fn invalid_keypoints_give_empty_unsupervised_masks() {
        let m = keypoint_mask(Keypoint::missing(), 30.0, GRID);
        assert_eq!(m.count(), 0);
        assert!(!m.valid);
    }

    #[test]
    fn wrong_keypoint_count_rejected() {
        let kps = KeypointSet::new(vec![vec![Keypoint::new(1.0, 1.0); 12]]);
        let b = BBox::new(0.5, 0.5, 0.3, 0.5).unwrap();
        let err = keypoints_to_masks(&kps, &[b], NUM_PARTS, 0.2, (128, 128), GRID).unwrap_err();
        assert!(matches!(err, Error::KeypointCount { expected: 13, found: 12, .. }));
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let kps = KeypointSet::new(vec![vec![Keypoint::new(3.0, 4.0), Keypoint::missing()]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(perturb_keypoints(&kps, 0.0, &[10.0], &mut rng), kps);
    }

    #[test]
    fn perturbation_is_uniform() {
        // Kolmogorov–Smirnov against Uniform(-r, r), 1% critical value 1.628 / sqrt(n)
        let n = 100_000;
        let (eps, s) = (2.0, 5.0);
        let r = eps * s;
        let kps = KeypointSet::new(vec![vec![Keypoint::new(0.0, 0.0)]]);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut xs: Vec<f64> = (0..n).map(|_| perturb_keypoints(&kps, eps, &[s], &mut rng).persons[0][0].x).collect();
        xs.sort_by(f64::total_cmp);
        let mut d: f64 = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            let cdf = ((x + r) / (2.0 * r)).clamp(0.0, 1.0);
            d = d.max((cdf - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - cdf).abs());
        }
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
        assert!(xs.iter().all(|x| x.abs() <= r));
    }

    fn axis_count(c: f64, s: f64, n: usize, stride: f64) -> usize {
        let lo = ((c - s / 2.0) / stride - 0.5).ceil().max(0.0);
        let hi = ((c + s / 2.0) / stride - 0.5).floor().min(n as f64 - 1.0);
        if hi < lo {
            0
        } else {
            (hi - lo) as usize + 1
        }
    }

    proptest! {
        #[test]
        fn count_equals_clipped_area(x in -20.0f64..150.0, y in -20.0f64..150.0, s in 0.0f64..60.0) {
            let m = keypoint_mask(Keypoint::new(x, y), s, GRID);
            let expected = axis_count(x, s, 16, 8.0) * axis_count(y, s, 16, 8.0);
            prop_assert_eq!(m.count(), expected);
        }

        #[test]
        fn one_stride_shift_moves_block(x in 30.0f64..90.0, y in 30.0f64..90.0, s in 4.0f64..20.0) {
            let a = keypoint_mask(Keypoint::new(x, y), s, GRID);
            let b = keypoint_mask(Keypoint::new(x + 8.0, y), s, GRID);
            prop_assert_eq!(a.count(), b.count());
            for v in 0..16 {
                for u in 0..15 {
                    prop_assert_eq!(a.get(u, v), b.get(u + 1, v));
                }
            }
        }
    }
}
