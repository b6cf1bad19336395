//! Procedural scenes of stick-figure persons with colored part markers.
//!
//! Labels come from a fixed rule table over the keypoints and person boxes
//! ([`label_scene`]), so they can be recomputed from stored annotations.
//! Lengths in the rules are measured in torso units `T` (shoulder-to-hip
//! height). Person `a` is left of person `b` when its shoulder midpoint is.
//!
//! | id | name         | subject gets the class when                                   | group box   |
//! |----|--------------|---------------------------------------------------------------|-------------|
//! | 0  | wave         | a wrist is above the face marker                              | own box     |
//! | 1  | point        | a wrist is level with its shoulder and ≥ 0.7 T out sideways   | own box     |
//! | 2  | akimbo       | both wrists within 0.3 T of their hips, elbows ≥ 0.4 T out    | own box     |
//! | 3  | crouch       | ankles less than 1.3 T below the hips                         | own box     |
//! | 4  | mutual_gaze  | subject and its neighbour face each other                     | pair hull   |
//! | 5  | look_at      | subject faces its neighbour, the neighbour does not face back | pair hull   |
//! | 6  | handshake    | a wrist of each is within 0.3 T of the other's                | pair hull   |
//! | 7  | side_by_side | both face front, shoulder midpoints within 1.8 T              | pair hull   |
//!
//! Only horizontally adjacent persons form pairs. Each group record lists
//! the acting individual as its single member.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Group, RgbImage, Scene, Split};
use crate::error::{Error, Result};
use crate::geometry::CornerBox;
use crate::partmask::{part, Keypoint, KeypointSet, NUM_PARTS};

pub const CLASS_NAMES: [&str; 8] =
    ["wave", "point", "akimbo", "crouch", "mutual_gaze", "look_at", "handshake", "side_by_side"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();

/// Marker color per part, indexed like [`PART_NAMES`](crate::partmask::PART_NAMES).
pub const PART_COLORS: [[u8; 3]; NUM_PARTS] = [
    [255, 255, 0],
    [255, 0, 0],
    [0, 0, 255],
    [255, 128, 0],
    [0, 160, 255],
    [255, 0, 255],
    [0, 255, 0],
    [128, 0, 0],
    [0, 0, 128],
    [255, 128, 192],
    [128, 255, 255],
    [128, 128, 0],
    [0, 128, 128],
];

const MARKER_RADIUS: f64 = 1.6;
const LIMB_THICKNESS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub num_scenes: usize,
    /// Inclusive range of persons per scene.
    pub persons: (usize, usize),
    /// Inclusive range of group records per scene.
    pub groups: (usize, usize),
    /// Inclusive range of person height as a fraction of image height.
    pub person_height: (f64, f64),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            num_scenes: 64,
            persons: (2, 3),
            groups: (1, 8),
            person_height: (0.4, 0.5),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.width < 32 || self.height < 32 {
            return bad(format!("image {}x{} smaller than 32x32", self.width, self.height));
        }
        if self.persons.0 == 0 || self.persons.0 > self.persons.1 {
            return bad(format!("person range {:?}", self.persons));
        }
        if self.groups.0 > self.groups.1 {
            return bad(format!("group range {:?}", self.groups));
        }
        let (lo, hi) = self.person_height;
        if !(lo > 0.0 && lo <= hi && hi <= 0.9) {
            return bad(format!("person height range {:?} must lie in (0, 0.9]", self.person_height));
        }
        // Smallest layout: every neighbour at the side-by-side minimum plus the outer arm reach.
        let t = 0.3 * lo * self.height as f64;
        let needed = t * (1.3 * (self.persons.1 - 1) as f64 + 2.6);
        if needed > self.width as f64 {
            return bad(format!(
                "{} persons of height {:.1}px need at least {needed:.1}px of width, image has {}",
                self.persons.1,
                lo * self.height as f64,
                self.width
            ));
        }
        if 4.0 * t < 6.0 * MARKER_RADIUS {
            return bad(format!("persons of {:.1}px are too small for distinguishable markers", lo * self.height as f64));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Arm {
    Down,
    Raised,
    Extended,
    Akimbo,
    Reach(f64, f64),
}

#[derive(Clone, Debug)]
struct Figure {
    cx: f64,
    top: f64,
    h: f64,
    facing: i8,
    arms: [Arm; 2],
    crouch: bool,
    body: [u8; 3],
    skin: [u8; 3],
}

/// Quarter-pixel grid keeps stored coordinates exact in decimal text.
fn q(v: f64) -> f64 {
    (v * 4.0).round() / 4.0
}

impl Figure {
    fn torso(&self) -> f64 {
        0.3 * self.h
    }

    fn head_radius(&self) -> f64 {
        0.09 * self.h
    }

    fn shoulder(&self, side: usize) -> (f64, f64) {
        let s = if side == 0 { -1.0 } else { 1.0 };
        (q(self.cx + s * 0.35 * self.torso()), q(self.top + 0.2 * self.h))
    }

    fn keypoints(&self) -> Vec<Keypoint> {
        let t = self.torso();
        let r = self.head_radius();
        let mut k = vec![Keypoint::missing(); NUM_PARTS];
        let mut set = |i: usize, x: f64, y: f64| k[i] = Keypoint::new(q(x), q(y));
        set(part::FACE, self.cx + f64::from(self.facing) * 0.8 * r, self.top + r);
        let hip_y = self.top + 0.2 * self.h + t;
        for side in 0..2 {
            let sg = if side == 0 { -1.0 } else { 1.0 };
            let (sx, sy) = self.shoulder(side);
            let (hx, hy) = (self.cx + sg * 0.25 * t, hip_y);
            let (ex, ey, wx, wy) = match self.arms[side] {
                Arm::Down => (sx + sg * 0.1 * t, sy + 0.45 * t, sx + sg * 0.12 * t, sy + 0.9 * t),
                Arm::Raised => (sx + sg * 0.3 * t, sy - 0.3 * t, sx + sg * 0.35 * t, sy - 0.8 * t),
                Arm::Extended => (sx + sg * 0.45 * t, sy + 0.02 * t, sx + sg * 0.9 * t, sy + 0.04 * t),
                Arm::Akimbo => (sx + sg * 0.6 * t, sy + 0.5 * t, hx + sg * 0.1 * t, hy - 0.1 * t),
                Arm::Reach(x, y) => ((sx + x) / 2.0, (sy + y) / 2.0 + 0.15 * t, x, y),
            };
            let (kx, ky, ax, ay) = if self.crouch {
                (self.cx + sg * 0.55 * t, hy + 0.3 * t, self.cx + sg * 0.35 * t, hy + 0.9 * t)
            } else {
                (self.cx + sg * 0.25 * t, self.top + 0.75 * self.h, self.cx + sg * 0.28 * t, self.top + self.h)
            };
            let off = side; // left entries precede right ones in the part table
            set(part::L_SHOULDER + off, sx, sy);
            set(part::L_ELBOW + off, ex, ey);
            set(part::L_WRIST + off, wx, wy);
            set(part::L_HIP + off, hx, hy);
            set(part::L_KNEE + off, kx, ky);
            set(part::L_ANKLE + off, ax, ay);
        }
        k
    }

    /// Tight pixel box around everything drawn, on whole pixels.
    fn bbox(&self, kps: &[Keypoint], width: usize, height: usize) -> CornerBox {
        let pad = (LIMB_THICKNESS / 2.0).max(MARKER_RADIUS);
        let r = self.head_radius();
        let mut c = CornerBox { x1: self.cx - r, y1: self.top, x2: self.cx + r, y2: self.top + 2.0 * r };
        for kp in kps {
            c.x1 = c.x1.min(kp.x - pad);
            c.y1 = c.y1.min(kp.y - pad);
            c.x2 = c.x2.max(kp.x + pad);
            c.y2 = c.y2.max(kp.y + pad);
        }
        CornerBox {
            x1: c.x1.floor().max(0.0),
            y1: c.y1.floor().max(0.0),
            x2: c.x2.ceil().min(width as f64),
            y2: c.y2.ceil().min(height as f64),
        }
    }

    fn draw(&self, im: &mut RgbImage, kps: &[Keypoint]) {
        let p = |i: usize| (kps[i].x, kps[i].y);
        im.fill_convex(&[p(part::L_SHOULDER), p(part::R_SHOULDER), p(part::R_HIP), p(part::L_HIP)], self.body);
        for off in 0..2 {
            for (a, b) in [
                (part::L_SHOULDER, part::L_ELBOW),
                (part::L_ELBOW, part::L_WRIST),
                (part::L_HIP, part::L_KNEE),
                (part::L_KNEE, part::L_ANKLE),
            ] {
                im.line(p(a + off), p(b + off), LIMB_THICKNESS, self.body);
            }
        }
        let r = self.head_radius();
        im.fill_circle(self.cx, self.top + r, r, self.skin);
        for (i, color) in PART_COLORS.iter().enumerate() {
            im.fill_circle(kps[i].x, kps[i].y, MARKER_RADIUS, *color);
        }
    }
}

// ---- rule table ----

fn mid(a: Keypoint, b: Keypoint) -> (f64, f64) {
    ((a.x + b.x) / 2.0, (a.y + b.y) / 2.0)
}

fn dist(a: Keypoint, b: Keypoint) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

struct Pose<'a>(&'a [Keypoint]);

impl Pose<'_> {
    fn kp(&self, i: usize) -> Keypoint {
        self.0[i]
    }

    fn torso(&self) -> f64 {
        mid(self.kp(part::L_HIP), self.kp(part::R_HIP)).1 - mid(self.kp(part::L_SHOULDER), self.kp(part::R_SHOULDER)).1
    }

    fn shoulder_mid_x(&self) -> f64 {
        mid(self.kp(part::L_SHOULDER), self.kp(part::R_SHOULDER)).0
    }

    /// -1 facing left, +1 facing right, 0 facing front.
    fn facing(&self) -> i8 {
        let d = self.kp(part::FACE).x - self.shoulder_mid_x();
        if d >= 0.12 * self.torso() {
            1
        } else if d <= -0.12 * self.torso() {
            -1
        } else {
            0
        }
    }

    fn wrists(&self) -> [Keypoint; 2] {
        [self.kp(part::L_WRIST), self.kp(part::R_WRIST)]
    }

    fn solo_classes(&self) -> [bool; 4] {
        let t = self.torso();
        let face = self.kp(part::FACE);
        let side = |s: usize| {
            let sg = if s == 0 { -1.0 } else { 1.0 };
            (sg, self.kp(part::L_SHOULDER + s), self.kp(part::L_ELBOW + s), self.kp(part::L_WRIST + s), self.kp(part::L_HIP + s))
        };
        let wave = self.wrists().iter().any(|w| w.y < face.y);
        let point = (0..2).any(|s| {
            let (sg, sh, _, w, _) = side(s);
            (w.y - sh.y).abs() <= 0.25 * t && sg * (w.x - sh.x) >= 0.7 * t
        });
        let akimbo = (0..2).all(|s| {
            let (sg, sh, el, w, hip) = side(s);
            dist(w, hip) <= 0.3 * t && sg * (el.x - sh.x) >= 0.4 * t
        });
        let ankles = mid(self.kp(part::L_ANKLE), self.kp(part::R_ANKLE)).1;
        let hips = mid(self.kp(part::L_HIP), self.kp(part::R_HIP)).1;
        let crouch = ankles - hips < 1.3 * t;
        [wave, point, akimbo, crouch]
    }
}

fn hull(a: CornerBox, b: CornerBox) -> CornerBox {
    CornerBox { x1: a.x1.min(b.x1), y1: a.y1.min(b.y1), x2: a.x2.max(b.x2), y2: a.y2.max(b.y2) }
}

/// Group records implied by the rule table. Persons are ordered left to
/// right by shoulder midpoint for the pair rules; output order is all solo
/// records by person index, then pair records left to right.
pub fn label_scene(persons: &[CornerBox], kps: &KeypointSet) -> Vec<Group> {
    let poses: Vec<Pose> = kps.persons.iter().map(|p| Pose(p)).collect();
    let mut groups = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let solo = pose.solo_classes();
        if solo.iter().any(|&c| c) {
            let mut classes = vec![false; NUM_CLASSES];
            classes[..4].copy_from_slice(&solo);
            groups.push(Group { bbox: persons[i], members: vec![i], classes });
        }
    }
    let mut order: Vec<usize> = (0..poses.len()).collect();
    order.sort_by(|&a, &b| poses[a].shoulder_mid_x().total_cmp(&poses[b].shoulder_mid_x()).then(a.cmp(&b)));
    for w in order.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (pa, pb) = (&poses[a], &poses[b]);
        let a_looks = pa.facing() == 1;
        let b_looks = pb.facing() == -1;
        let t_min = pa.torso().min(pb.torso());
        let shake = pa.wrists().iter().any(|&wa| pb.wrists().iter().any(|&wb| dist(wa, wb) <= 0.3 * t_min));
        let side = pa.facing() == 0
            && pb.facing() == 0
            && (pb.shoulder_mid_x() - pa.shoulder_mid_x()).abs() <= 1.8 * pa.torso().max(pb.torso());
        let bbox = hull(persons[a], persons[b]);
        for (subject, looks, looked_back) in [(a, a_looks, b_looks), (b, b_looks, a_looks)] {
            let mut classes = vec![false; NUM_CLASSES];
            classes[4] = looks && looked_back;
            classes[5] = looks && !looked_back;
            classes[6] = shake;
            classes[7] = side;
            if classes.iter().any(|&c| c) {
                groups.push(Group { bbox, members: vec![subject], classes });
            }
        }
    }
    groups
}

// ---- layout sampling ----

#[derive(Clone, Copy, Debug, PartialEq)]
enum Pair {
    Apart,
    Gaze,
    LookAt,
    Handshake,
    SideBySide,
}

fn pick<T: Copy, R: Rng>(rng: &mut R, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

fn sample_figures<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Option<Vec<Figure>> {
    let n = rng.random_range(spec.persons.0..=spec.persons.1);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let heights: Vec<f64> =
        (0..n).map(|_| q(rng.random_range(spec.person_height.0..=spec.person_height.1) * h)).collect();
    let mut facing: Vec<Option<i8>> = vec![None; n];
    let mut arms: Vec<[Option<Arm>; 2]> = vec![[None; 2]; n];
    let mut pairs = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n.saturating_sub(1) {
        let mut kind = pick(rng, &[Pair::Apart, Pair::Gaze, Pair::LookAt, Pair::Handshake, Pair::SideBySide]);
        let want: (i8, i8) = match kind {
            Pair::Apart => (facing[i].unwrap_or(0), 0),
            Pair::Gaze => (1, -1),
            Pair::LookAt => {
                if rng.random_bool(0.5) {
                    (1, pick(rng, &[0, 1]))
                } else {
                    (pick(rng, &[0, -1]), -1)
                }
            }
            Pair::Handshake => {
                if rng.random_bool(0.5) {
                    (1, -1)
                } else {
                    (0, 0)
                }
            }
            Pair::SideBySide => (0, 0),
        };
        if facing[i].is_some_and(|f| f != want.0) {
            kind = Pair::Apart;
        } else if kind != Pair::Apart {
            facing[i] = Some(want.0);
            facing[i + 1] = Some(want.1);
        }
        pairs.push(kind);
    }
    // Horizontal layout in units of the larger torso of each pair.
    let torso: Vec<f64> = heights.iter().map(|h| 0.3 * h).collect();
    let mut cx = vec![0.0; n];
    for i in 1..n {
        let t = torso[i - 1].max(torso[i]);
        let (lo, hi) = match pairs[i - 1] {
            Pair::Handshake => (1.7, 2.1),
            Pair::SideBySide => (1.3, 1.6),
            Pair::Gaze | Pair::LookAt => (1.9, 2.6),
            Pair::Apart => (2.3, 3.0),
        };
        cx[i] = cx[i - 1] + rng.random_range(lo..=hi) * t;
    }
    let reach = 1.3;
    let left = reach * torso[0];
    let span = cx[n - 1] + reach * torso[n - 1] + left;
    if span > w - 2.0 {
        return None;
    }
    let shift = left + 1.0 + rng.random_range(0.0..=(w - 2.0 - span));
    let mut figs: Vec<Figure> = (0..n)
        .map(|i| {
            let hgt = heights[i];
            let lo = 1.0 + 0.1 * hgt;
            let hi = h - hgt - 1.0;
            let top = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            Figure {
                cx: q(cx[i] + shift),
                top: q(top),
                h: hgt,
                facing: 0,
                arms: [Arm::Down; 2],
                crouch: rng.random_bool(0.2),
                body: [rng.random_range(40..110), rng.random_range(40..110), rng.random_range(40..110)],
                skin: pick(rng, &[[224, 172, 105], [198, 134, 66], [141, 85, 36], [255, 219, 172]]),
            }
        })
        .collect();
    for (i, kind) in pairs.iter().enumerate() {
        if *kind == Pair::Handshake {
            let (a, b) = (&figs[i], &figs[i + 1]);
            let (sa, sb) = (a.shoulder(1), b.shoulder(0));
            let tx = q((sa.0 + sb.0) / 2.0);
            let ty = q((sa.1 + sb.1) / 2.0 + 0.5 * a.torso().min(b.torso()));
            arms[i][1] = Some(Arm::Reach(tx, ty));
            arms[i + 1][0] = Some(Arm::Reach(tx, ty));
        }
    }
    for (i, f) in figs.iter_mut().enumerate() {
        f.facing = facing[i].unwrap_or_else(|| pick(rng, &[-1, 0, 1]));
        let free: Vec<usize> = (0..2).filter(|&s| arms[i][s].is_none()).collect();
        let intent = rng.random_range(0..5);
        match intent {
            1 if !free.is_empty() => arms[i][pick(rng, &free)] = Some(Arm::Raised),
            2 if !free.is_empty() => arms[i][pick(rng, &free)] = Some(Arm::Extended),
            3 if free.len() == 2 => arms[i] = [Some(Arm::Akimbo); 2],
            _ => {}
        }
        f.arms = [arms[i][0].unwrap_or(Arm::Down), arms[i][1].unwrap_or(Arm::Down)];
    }
    Some(figs)
}

/// One scene from its own random stream.
fn generate_scene(spec: &SynthSpec, index: usize) -> Result<(Scene, RgbImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    for _ in 0..10_000 {
        let Some(figs) = sample_figures(spec, &mut rng) else { continue };
        let kps: Vec<Vec<Keypoint>> = figs.iter().map(Figure::keypoints).collect();
        let (w, h) = (spec.width as f64, spec.height as f64);
        let inside = kps.iter().flatten().all(|k| k.x >= 1.0 && k.y >= 1.0 && k.x <= w - 1.0 && k.y <= h - 1.0);
        if !inside {
            continue;
        }
        let persons: Vec<CornerBox> = figs.iter().zip(&kps).map(|(f, k)| f.bbox(k, spec.width, spec.height)).collect();
        let keypoints = KeypointSet::new(kps);
        let groups = label_scene(&persons, &keypoints);
        if groups.len() < spec.groups.0 || groups.len() > spec.groups.1 {
            continue;
        }
        let bg = [rng.random_range(170..235), rng.random_range(170..235), rng.random_range(170..235)];
        let mut im = RgbImage::filled(spec.width, spec.height, bg);
        for px in im.data.chunks_exact_mut(3) {
            let d: i16 = rng.random_range(-6..=6);
            for c in px {
                *c = (i16::from(*c) + d).clamp(0, 255) as u8;
            }
        }
        for (f, k) in figs.iter().zip(&keypoints.persons) {
            f.draw(&mut im, k);
        }
        let image_id = format!("{index:06}");
        let scene = Scene {
            image: format!("images/{image_id}.png"),
            image_id,
            width: spec.width,
            height: spec.height,
            persons,
            groups,
            keypoints: Some(keypoints),
        };
        return Ok((scene, im));
    }
    Err(Error::Config(format!("synthetic spec: no feasible layout found for scene {index}; widen the ranges")))
}

/// Deterministic synthetic split with rendered images.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Split, Vec<RgbImage>)> {
    spec.validate()?;
    let mut scenes = Vec::with_capacity(spec.num_scenes);
    let mut images = Vec::with_capacity(spec.num_scenes);
    for i in 0..spec.num_scenes {
        let (s, im) = generate_scene(spec, i)?;
        scenes.push(s);
        images.push(im);
    }
    Ok((Split { class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(), scenes }, images))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn figure(arms: [Arm; 2], facing: i8, crouch: bool) -> Figure {
        Figure { cx: 64.0, top: 20.0, h: 60.0, facing, arms, crouch, body: [0; 3], skin: [0; 3] }
    }

    fn solo(f: &Figure) -> [bool; 4] {
        Pose(&f.keypoints()).solo_classes()
    }

    #[test]
    fn each_pose_triggers_its_own_rule() {
        assert_eq!(solo(&figure([Arm::Down; 2], 0, false)), [false; 4]);
        assert_eq!(solo(&figure([Arm::Raised, Arm::Down], 0, false)), [true, false, false, false]);
        assert_eq!(solo(&figure([Arm::Down, Arm::Extended], 0, false)), [false, true, false, false]);
        assert_eq!(solo(&figure([Arm::Akimbo; 2], 0, false)), [false, false, true, false]);
        assert_eq!(solo(&figure([Arm::Akimbo, Arm::Down], 0, false)), [false; 4]);
        assert_eq!(solo(&figure([Arm::Down; 2], 0, true)), [false, false, false, true]);
        for f in [-1, 0, 1] {
            assert_eq!(Pose(&figure([Arm::Down; 2], f, false).keypoints()).facing(), f);
        }
    }

    #[test]
    fn pair_rules() {
        let mut a = figure([Arm::Down; 2], 1, false);
        let mut b = figure([Arm::Down; 2], -1, false);
        a.cx = 30.0;
        b.cx = 70.0;
        let boxes = vec![a.bbox(&a.keypoints(), 128, 128), b.bbox(&b.keypoints(), 128, 128)];
        let kps = |a: &Figure, b: &Figure| KeypointSet::new(vec![a.keypoints(), b.keypoints()]);
        let g = label_scene(&boxes, &kps(&a, &b));
        assert_eq!(g.len(), 2);
        assert!(g.iter().all(|g| g.class_ids() == vec![4]));
        assert!(g[0].bbox.x1 == boxes[0].x1 && g[0].bbox.x2 == boxes[1].x2);
        b.facing = 0;
        let g = label_scene(&boxes, &kps(&a, &b));
        assert_eq!((g.len(), g[0].members.clone(), g[0].class_ids()), (1, vec![0], vec![5]));
        a.facing = 0;
        let g = label_scene(&boxes, &kps(&a, &b));
        assert!(g.is_empty(), "too far apart for side-by-side");
        b.cx = 58.0;
        let g = label_scene(&boxes, &kps(&a, &b));
        assert!(g.iter().all(|g| g.class_ids() == vec![7]));
        let target = (44.0, 20.0 + 12.0 + 9.0);
        a.arms[1] = Arm::Reach(target.0, target.1);
        b.arms[0] = Arm::Reach(target.0, target.1);
        let g = label_scene(&boxes, &kps(&a, &b));
        assert!(g.iter().all(|g| g.class_ids() == vec![6, 7]));
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let spec = SynthSpec { persons: (6, 6), ..SynthSpec::default() };
        assert!(spec.validate().unwrap_err().to_string().contains("width"));
        assert!(SynthSpec { persons: (3, 2), ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec { person_height: (0.1, 0.1), width: 32, height: 32, ..SynthSpec::default() }.validate().is_err());
    }

    #[test]
    fn generated_scenes_are_well_formed() {
        let spec = SynthSpec { num_scenes: 20, seed: 3, ..SynthSpec::default() };
        let (split, images) = generate_synthetic(&spec).unwrap();
        split.validate().unwrap();
        for (s, im) in split.scenes.iter().zip(&images) {
            assert!(!s.groups.is_empty());
            assert_eq!((im.width, im.height), (128, 128));
            for g in &s.groups {
                for &m in &g.members {
                    let (gb, pb) = (g.bbox, s.persons[m]);
                    assert!(gb.x1 <= pb.x1 && gb.y1 <= pb.y1 && gb.x2 >= pb.x2 && gb.y2 >= pb.y2);
                }
            }
            // Face markers are painted at the keypoint.
            let kp = s.keypoints.as_ref().unwrap().persons[0][part::FACE];
            assert_eq!(im.get(kp.x as usize, kp.y as usize), PART_COLORS[part::FACE]);
        }
    }
}
