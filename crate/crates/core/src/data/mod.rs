//! Scene annotations, split files, and the synthetic scene generator.
//!
//! A split is a JSON document:
//!
//! ```text
//! {
//!   "schema_version": 1,
//!   "class_names": ["wave", ...],
//!   "keypoints": "keypoints.json",          // optional sidecar, relative to the split file
//!   "scenes": [
//!     {
//!       "image_id": "000000",
//!       "image": "images/000000.png",       // relative to the split file
//!       "width": 128, "height": 128,
//!       "persons": [[x1, y1, x2, y2], ...], // pixels
//!       "groups": [{"box": [x1, y1, x2, y2], "members": [0], "classes": [4, 6]}]
//!     }
//!   ]
//! }
//! ```
//!
//! The keypoint sidecar holds, per image and per person, the 13 part entries
//! `[x, y, valid]` in pixels, ordered as [`PART_NAMES`](crate::partmask::PART_NAMES).
//!
//! Each ground-truth triplet is `(member box, group box, class)` for every
//! member of every group and every active class.

mod image;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use image::{save_gray_png, RgbImage};
pub use synth::{generate_synthetic, SynthSpec, CLASS_NAMES};

use crate::error::{Error, Result};
use crate::geometry::{BBox, CornerBox};
use crate::inference::{ImageTriplets, Triplet};
use crate::partmask::{Keypoint, KeypointSet, NUM_PARTS, PART_NAMES};

pub const SCHEMA_VERSION: u32 = 1;

/// A group annotation: its box, the individuals it is recorded for, and its
/// multi-hot interaction vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    /// Pixel corners.
    pub bbox: CornerBox,
    pub members: Vec<usize>,
    pub classes: Vec<bool>,
}

impl Group {
    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.iter().enumerate().filter(|(_, &on)| on).map(|(k, _)| k).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image_id: String,
    /// Image path relative to the split file.
    pub image: String,
    pub width: usize,
    pub height: usize,
    /// Pixel corners of each individual.
    pub persons: Vec<CornerBox>,
    pub groups: Vec<Group>,
    pub keypoints: Option<KeypointSet>,
}

fn normalize(c: CornerBox, width: usize, height: usize) -> BBox {
    let (w, h) = (width as f64, height as f64);
    BBox::from_corners(CornerBox { x1: c.x1 / w, y1: c.y1 / h, x2: c.x2 / w, y2: c.y2 / h })
}

impl Scene {
    pub fn person_boxes(&self) -> Vec<BBox> {
        self.persons.iter().map(|&c| normalize(c, self.width, self.height)).collect()
    }

    pub fn group_boxes(&self) -> Vec<BBox> {
        self.groups.iter().map(|g| normalize(g.bbox, self.width, self.height)).collect()
    }

    /// Every `(member, group, class)` combination, score 1.
    pub fn ground_truth(&self) -> ImageTriplets {
        let persons = self.person_boxes();
        let mut triplets = Vec::new();
        for (gi, (g, gb)) in self.groups.iter().zip(self.group_boxes()).enumerate() {
            for &m in &g.members {
                for k in g.class_ids() {
                    triplets.push(Triplet {
                        individual_box: persons[m],
                        group_box: gb,
                        class_id: k,
                        score: 1.0,
                        individual_index: m,
                        group_index: gi,
                    });
                }
            }
        }
        ImageTriplets { image_id: self.image_id.clone(), triplets }
    }

    /// Structural checks; `num_classes` fixes the class-vector length.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let loc = |what: String| format!("scene {}: {what}", self.image_id);
        let err = |what: String, message: String| Error::Annotation { location: loc(what), message };
        if self.width == 0 || self.height == 0 {
            return Err(err("size".into(), format!("{}x{} image", self.width, self.height)));
        }
        let check_box = |c: &CornerBox, what: String| -> Result<()> {
            let finite = [c.x1, c.y1, c.x2, c.y2].iter().all(|v| v.is_finite());
            let inside = c.x1 >= 0.0 && c.y1 >= 0.0 && c.x2 <= self.width as f64 && c.y2 <= self.height as f64;
            if !finite || !inside || c.x2 <= c.x1 || c.y2 <= c.y1 {
                return Err(err(
                    what,
                    format!("box [{}, {}, {}, {}] outside {}x{} or empty", c.x1, c.y1, c.x2, c.y2, self.width, self.height),
                ));
            }
            Ok(())
        };
        for (i, p) in self.persons.iter().enumerate() {
            check_box(p, format!("person {i}"))?;
        }
        for (gi, g) in self.groups.iter().enumerate() {
            check_box(&g.bbox, format!("group {gi}"))?;
            if g.members.is_empty() {
                return Err(err(format!("group {gi}"), "no members".into()));
            }
            if let Some(&m) = g.members.iter().find(|&&m| m >= self.persons.len()) {
                return Err(err(format!("group {gi}"), format!("member {m} but only {} persons", self.persons.len())));
            }
            if g.classes.len() != num_classes {
                return Err(err(format!("group {gi}"), format!("{} class flags for {num_classes} classes", g.classes.len())));
            }
        }
        if let Some(kps) = &self.keypoints {
            kps.check_parts(NUM_PARTS).map_err(|e| err("keypoints".into(), e.to_string()))?;
            if kps.persons.len() != self.persons.len() {
                return Err(err(
                    "keypoints".into(),
                    format!("{} keypoint records for {} persons", kps.persons.len(), self.persons.len()),
                ));
            }
        }
        Ok(())
    }
}

/// A labelled split.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub class_names: Vec<String>,
    pub scenes: Vec<Scene>,
}

impl Split {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn ground_truth(&self) -> Vec<ImageTriplets> {
        self.scenes.iter().map(Scene::ground_truth).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (i, s) in self.scenes.iter().enumerate() {
            if let Some(j) = seen.insert(s.image_id.as_str(), i) {
                return Err(Error::Annotation {
                    location: format!("scene {i}"),
                    message: format!("image id {} already used by scene {j}", s.image_id),
                });
            }
            s.validate(self.num_classes())?;
        }
        Ok(())
    }
}

/// Training targets for one scene's groups.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupTargets {
    pub boxes: Vec<BBox>,
    /// `membership[g][j]`: individual `j` belongs to group `g`.
    pub membership: Vec<Vec<bool>>,
    pub classes: Vec<Vec<bool>>,
}

pub fn derive_group_targets(scene: &Scene) -> GroupTargets {
    let n = scene.persons.len();
    let membership = scene
        .groups
        .iter()
        .map(|g| {
            let mut row = vec![false; n];
            for &m in &g.members {
                row[m] = true;
            }
            row
        })
        .collect();
    GroupTargets {
        boxes: scene.group_boxes(),
        membership,
        classes: scene.groups.iter().map(|g| g.classes.clone()).collect(),
    }
}

// ---- on-disk records ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    schema_version: u32,
    class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keypoints: Option<String>,
    scenes: Vec<SceneRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    image_id: String,
    image: String,
    width: usize,
    height: usize,
    persons: Vec<[f64; 4]>,
    groups: Vec<GroupRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    members: Vec<usize>,
    classes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeypointFile {
    schema_version: u32,
    parts: Vec<String>,
    images: Vec<KeypointRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeypointRecord {
    image_id: String,
    persons: Vec<Vec<(f64, f64, bool)>>,
}

fn corners(v: [f64; 4]) -> CornerBox {
    CornerBox { x1: v[0], y1: v[1], x2: v[2], y2: v[3] }
}

fn array(c: CornerBox) -> [f64; 4] {
    [c.x1, c.y1, c.x2, c.y2]
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn check_version(found: u32, path: &Path) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(Error::Annotation {
            location: path.display().to_string(),
            message: format!("schema version {found}, expected {SCHEMA_VERSION}"),
        });
    }
    Ok(())
}

/// Read and validate a split file (and its keypoint sidecar, when named).
pub fn load_split(path: &Path) -> Result<Split> {
    let file: SplitFile = read_json(path)?;
    check_version(file.schema_version, path)?;
    let num_classes = file.class_names.len();
    let mut scenes = Vec::with_capacity(file.scenes.len());
    for (i, r) in file.scenes.into_iter().enumerate() {
        let mut groups = Vec::with_capacity(r.groups.len());
        for (gi, g) in r.groups.into_iter().enumerate() {
            let mut classes = vec![false; num_classes];
            for k in g.classes {
                if k >= num_classes {
                    return Err(Error::Annotation {
                        location: format!("{} scene {i} ({}) group {gi}", path.display(), r.image_id),
                        message: format!("class {k} out of range for {num_classes} classes"),
                    });
                }
                classes[k] = true;
            }
            groups.push(Group { bbox: corners(g.bbox), members: g.members, classes });
        }
        scenes.push(Scene {
            image_id: r.image_id,
            image: r.image,
            width: r.width,
            height: r.height,
            persons: r.persons.into_iter().map(corners).collect(),
            groups,
            keypoints: None,
        });
    }
    if let Some(name) = &file.keypoints {
        let kp_path = path.parent().unwrap_or(Path::new(".")).join(name);
        attach_keypoints(&mut scenes, &kp_path)?;
    }
    let split = Split { class_names: file.class_names, scenes };
    split.validate().map_err(|e| match e {
        Error::Annotation { location, message } => {
            Error::Annotation { location: format!("{}: {location}", path.display()), message }
        }
        other => other,
    })?;
    Ok(split)
}

fn attach_keypoints(scenes: &mut [Scene], path: &Path) -> Result<()> {
    let file: KeypointFile = read_json(path)?;
    check_version(file.schema_version, path)?;
    if file.parts != PART_NAMES {
        return Err(Error::Annotation {
            location: path.display().to_string(),
            message: format!("part table {:?} differs from {:?}", file.parts, PART_NAMES),
        });
    }
    let mut by_id: BTreeMap<String, KeypointSet> = BTreeMap::new();
    for rec in file.images {
        let persons = rec
            .persons
            .into_iter()
            .map(|p| p.into_iter().map(|(x, y, valid)| Keypoint { x, y, valid }).collect())
            .collect();
        by_id.insert(rec.image_id, KeypointSet::new(persons));
    }
    for s in scenes {
        s.keypoints = by_id.remove(&s.image_id);
    }
    if let Some(id) = by_id.keys().next() {
        return Err(Error::Annotation {
            location: path.display().to_string(),
            message: format!("keypoints for unknown image {id}"),
        });
    }
    Ok(())
}

/// Write `split` to `path`; keypoints, when any scene has them, go to
/// `keypoints.json` next to it.
pub fn save_split(path: &Path, split: &Split) -> Result<()> {
    split.validate()?;
    let has_kps = split.scenes.iter().any(|s| s.keypoints.is_some());
    let file = SplitFile {
        schema_version: SCHEMA_VERSION,
        class_names: split.class_names.clone(),
        keypoints: has_kps.then(|| keypoint_file_name(path)),
        scenes: split
            .scenes
            .iter()
            .map(|s| SceneRecord {
                image_id: s.image_id.clone(),
                image: s.image.clone(),
                width: s.width,
                height: s.height,
                persons: s.persons.iter().map(|&c| array(c)).collect(),
                groups: s
                    .groups
                    .iter()
                    .map(|g| GroupRecord { bbox: array(g.bbox), members: g.members.clone(), classes: g.class_ids() })
                    .collect(),
            })
            .collect(),
    };
    write_json(path, &file)?;
    if has_kps {
        let kp = KeypointFile {
            schema_version: SCHEMA_VERSION,
            parts: PART_NAMES.iter().map(|s| s.to_string()).collect(),
            images: split
                .scenes
                .iter()
                .filter_map(|s| {
                    s.keypoints.as_ref().map(|k| KeypointRecord {
                        image_id: s.image_id.clone(),
                        persons: k.persons.iter().map(|p| p.iter().map(|kp| (kp.x, kp.y, kp.valid)).collect()).collect(),
                    })
                })
                .collect(),
        };
        write_json(&path.with_file_name(keypoint_file_name(path)), &kp)?;
    }
    Ok(())
}

fn keypoint_file_name(split_path: &Path) -> String {
    let stem = split_path.file_stem().and_then(|s| s.to_str()).unwrap_or("split");
    format!("{stem}.keypoints.json")
}

/// Path of a scene's image on disk.
pub fn image_path(split_path: &Path, scene: &Scene) -> PathBuf {
    split_path.parent().unwrap_or(Path::new(".")).join(&scene.image)
}

/// Write a generated split: images under `dir/images/`, annotations to `dir/split.json`.
pub fn write_dataset(dir: &Path, split: &Split, images: &[RgbImage]) -> Result<PathBuf> {
    assert_eq!(split.scenes.len(), images.len());
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for (s, im) in split.scenes.iter().zip(images) {
        im.save_png(&dir.join(&s.image))?;
    }
    let path = dir.join("split.json");
    save_split(&path, split)?;
    Ok(path)
}

/// Load a split together with its decoded images.
pub fn load_dataset(split_path: &Path) -> Result<(Split, Vec<RgbImage>)> {
    let split = load_split(split_path)?;
    let images = split
        .scenes
        .iter()
        .map(|s| {
            let im = RgbImage::load_png(&image_path(split_path, s))?;
            if (im.width, im.height) != (s.width, s.height) {
                return Err(Error::Image {
                    path: image_path(split_path, s),
                    message: format!("{}x{} pixels, annotation says {}x{}", im.width, im.height, s.width, s.height),
                });
            }
            Ok(im)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((split, images))
}
