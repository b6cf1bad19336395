use partgroup::data::synth::label_scene;
use partgroup::data::{generate_synthetic, load_dataset, load_split, save_split, write_dataset, SynthSpec};
use partgroup::geometry::BBox;

fn spec(n: usize, seed: u64) -> SynthSpec {
    SynthSpec { num_scenes: n, seed, ..Default::default() }
}

#[test]
fn save_load_round_trip_is_bit_exact() {
    let (split, _) = generate_synthetic(&spec(40, 11)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("split.json");
    save_split(&path, &split).unwrap();
    assert_eq!(load_split(&path).unwrap(), split);
}

#[test]
fn dataset_round_trip_keeps_pixels() {
    let (split, images) = generate_synthetic(&spec(5, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write_dataset(dir.path(), &split, &images).unwrap();
    let (s2, i2) = load_dataset(&path).unwrap();
    assert_eq!(s2, split);
    assert_eq!(i2, images);
}

#[test]
fn fixed_seed_writes_byte_identical_files() {
    let write = |dir: &std::path::Path| {
        let (split, images) = generate_synthetic(&spec(6, 5)).unwrap();
        write_dataset(dir, &split, &images).unwrap();
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write(a.path());
    write(b.path());
    let mut names: Vec<_> = walk(a.path());
    names.sort();
    assert!(names.len() > 6);
    for rel in names {
        let x = std::fs::read(a.path().join(&rel)).unwrap();
        let y = std::fs::read(b.path().join(&rel)).unwrap();
        assert!(x == y, "{} differs", rel.display());
    }
}

fn walk(root: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out
}

#[test]
fn different_seeds_give_different_scenes() {
    let (a, _) = generate_synthetic(&spec(3, 1)).unwrap();
    let (b, _) = generate_synthetic(&spec(3, 2)).unwrap();
    assert_ne!(a, b);
}

#[test]
fn rule_replay_reproduces_every_label() {
    let (split, _) = generate_synthetic(&spec(1000, 99)).unwrap();
    let mut class_counts = [0usize; 8];
    for s in &split.scenes {
        let kps = s.keypoints.as_ref().expect("generator emits keypoints");
        assert_eq!(label_scene(&s.persons, kps), s.groups, "scene {}", s.image_id);
        for g in &s.groups {
            for k in g.class_ids() {
                class_counts[k] += 1;
            }
        }
    }
    assert!(class_counts.iter().all(|&c| c > 0), "{class_counts:?}");
}

#[test]
fn group_boxes_contain_their_members() {
    let (split, _) = generate_synthetic(&spec(200, 4)).unwrap();
    for s in &split.scenes {
        let persons = s.person_boxes();
        for (g, gb) in s.groups.iter().zip(s.group_boxes()) {
            for &m in &g.members {
                let p: BBox = persons[m];
                let (pc, gc) = (p.to_corners(), gb.to_corners());
                assert!(gc.x1 <= pc.x1 + 1e-12 && gc.y1 <= pc.y1 + 1e-12 && gc.x2 >= pc.x2 - 1e-12 && gc.y2 >= pc.y2 - 1e-12);
            }
        }
    }
}

#[test]
fn scene_counts_stay_in_configured_ranges() {
    let sp = spec(200, 8);
    let (split, images) = generate_synthetic(&sp).unwrap();
    assert_eq!(split.scenes.len(), 200);
    assert_eq!(images.len(), 200);
    for (s, im) in split.scenes.iter().zip(&images) {
        assert!((sp.persons.0..=sp.persons.1).contains(&s.persons.len()));
        assert!((sp.groups.0..=sp.groups.1).contains(&s.groups.len()), "{} groups", s.groups.len());
        assert_eq!((im.width, im.height), (sp.width, sp.height));
    }
    split.validate().unwrap();
}

#[test]
fn loader_accepts_generator_output_and_rejects_tampering() {
    let (split, images) = generate_synthetic(&spec(4, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write_dataset(dir.path(), &split, &images).unwrap();
    load_split(&path).unwrap();

    let text = std::fs::read_to_string(&path).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["scenes"][2]["groups"][0]["members"] = serde_json::json!([7]);
    std::fs::write(&path, v.to_string()).unwrap();
    let err = load_split(&path).unwrap_err().to_string();
    assert!(err.contains("member 7"), "{err}");
}
