//! Corpus generation, ingestion and flow precomputation against the on-disk
//! layout contract.

mod common;

use std::collections::BTreeMap;
use std::path::Path;

use videorep::corpus::skeleton::{NUM_JOINTS, L_HIP, L_SHOULDER, R_HIP, R_SHOULDER};
use videorep::corpus::{generate_corpus, Corpus, CorpusError, GenerateConfig};
use videorep::flow::FlowParams;

fn small_config() -> GenerateConfig {
    GenerateConfig {
        num_clips: 4,
        frames_per_clip: 30,
        frame_size: 96,
        ..GenerateConfig::default()
    }
}

/// Every file under a directory, with contents, for byte-identity checks.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn generation_counts_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(dir.path(), &small_config(), 7).unwrap();
    assert_eq!(corpus.clips().len(), 4);
    for meta in corpus.clips() {
        assert_eq!(meta.frame_count, 30);
        assert_eq!((meta.width, meta.height), (96, 96));
        assert!(meta.has_joints);
        assert!(meta.label.is_some());
        let clip = corpus.load_clip(&meta.id).unwrap();
        let joints = clip.joints.as_ref().unwrap();
        assert_eq!(joints.len(), 30);
        assert_eq!(joints[0].len(), NUM_JOINTS);
    }
}

#[test]
fn generation_is_deterministic_byte_for_byte() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    generate_corpus(d1.path(), &small_config(), 7).unwrap();
    generate_corpus(d2.path(), &small_config(), 7).unwrap();
    let s1 = snapshot(d1.path());
    let s2 = snapshot(d2.path());
    assert_eq!(s1.len(), s2.len());
    for (name, bytes) in &s1 {
        assert_eq!(Some(bytes), s2.get(name).as_deref(), "file {name} differs");
    }
}

#[test]
fn different_seeds_differ() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    generate_corpus(d1.path(), &small_config(), 7).unwrap();
    generate_corpus(d2.path(), &small_config(), 8).unwrap();
    assert_ne!(snapshot(d1.path()), snapshot(d2.path()));
}

#[test]
fn ingest_roundtrips_generated_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let generated = generate_corpus(dir.path(), &small_config(), 3).unwrap();
    let reopened = Corpus::open(dir.path()).unwrap();
    assert_eq!(generated.clips().len(), reopened.clips().len());
    for (a, b) in generated.clips().iter().zip(reopened.clips()) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.frame_count, b.frame_count);
        assert_eq!(a.label, b.label);
        assert_eq!(a.has_joints, b.has_joints);
    }
    // joint annotations parse to the same values
    let ca = generated.load_clip(&generated.clips()[0].id).unwrap();
    let cb = reopened.load_clip(&reopened.clips()[0].id).unwrap();
    assert_eq!(ca.joints, cb.joints);
}

#[test]
fn clips_without_annotations_are_ingestable() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(dir.path(), &small_config(), 3).unwrap();
    for meta in Corpus::open(dir.path()).unwrap().clips() {
        std::fs::remove_file(meta.dir.join("joints.txt")).unwrap();
        std::fs::remove_file(meta.dir.join("label.txt")).unwrap();
    }
    let corpus = Corpus::open(dir.path()).unwrap();
    for meta in corpus.clips() {
        assert!(!meta.has_joints);
        assert!(meta.label.is_none());
    }
    let clip = corpus.load_clip("clip_0000").unwrap();
    assert!(clip.joints.is_none());
}

#[test]
fn short_joint_line_is_a_parse_error_naming_clip_and_frame() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(dir.path(), &small_config(), 3).unwrap();
    let joints_path = dir.path().join("clip_0001").join("joints.txt");
    let text = std::fs::read_to_string(&joints_path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // drop one pair from frame 4
    lines[4] = lines[4].rsplit_once(' ').unwrap().0.to_string();
    std::fs::write(&joints_path, lines.join("\n") + "\n").unwrap();

    let err = Corpus::open(dir.path()).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, CorpusError::Parse { line: 5, .. }), "{msg}");
    assert!(msg.contains("clip_0001"), "{msg}");
    assert!(msg.contains("frame 4"), "{msg}");
    assert!(msg.contains("expected 9"), "{msg}");
}

#[test]
fn non_contiguous_frames_error_lists_the_gap() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(dir.path(), &small_config(), 3).unwrap();
    let victim = dir.path().join("clip_0002").join("frames").join("00017.pgm");
    std::fs::remove_file(&victim).unwrap();
    let err = Corpus::open(dir.path()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("not contiguous"), "{msg}");
    assert!(msg.contains("17"), "{msg}");
}

#[test]
fn unknown_clip_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(dir.path(), &small_config(), 3).unwrap();
    assert!(matches!(
        corpus.load_clip("nope"),
        Err(CorpusError::UnknownClip(_))
    ));
}

#[test]
fn bone_lengths_constant_across_a_loaded_clip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(dir.path(), &small_config(), 11).unwrap();
    let clip = corpus.load_clip("clip_0000").unwrap();
    let joints = clip.joints.as_ref().unwrap();
    // shoulder->elbow->wrist chains have fixed bone lengths; written with
    // 2-decimal precision so allow 0.5 px
    let dist = |a: (f32, f32), b: (f32, f32)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let ref0: Vec<f32> = vec![
        dist(joints[0][L_SHOULDER], joints[0][3]),
        dist(joints[0][3], joints[0][5]),
        dist(joints[0][R_SHOULDER], joints[0][4]),
        dist(joints[0][4], joints[0][6]),
        dist(joints[0][L_HIP], joints[0][R_HIP]),
    ];
    for frame in joints.iter() {
        let now = vec![
            dist(frame[L_SHOULDER], frame[3]),
            dist(frame[3], frame[5]),
            dist(frame[R_SHOULDER], frame[4]),
            dist(frame[4], frame[6]),
            dist(frame[L_HIP], frame[R_HIP]),
        ];
        for (a, b) in ref0.iter().zip(&now) {
            assert!((a - b).abs() < 0.5, "bone length drifted: {a} vs {b}");
        }
    }
}

#[test]
fn precompute_writes_frame_count_minus_one_flows_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let mut corpus = generate_corpus(
        dir.path(),
        &GenerateConfig {
            num_clips: 2,
            frames_per_clip: 12,
            ..small_config()
        },
        5,
    )
    .unwrap();
    let params = FlowParams::default();
    let warnings = corpus.precompute_flows(&params, 1).unwrap();
    assert!(warnings.is_empty(), "{warnings:?}");
    for meta in corpus.clips() {
        assert_eq!(meta.flow_count, 11);
    }
    let before = snapshot(dir.path());

    // second run writes nothing
    let warnings = corpus.precompute_flows(&params, 1).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(before, snapshot(dir.path()));

    // corrupting one flow file triggers a recompute with a warning
    let victim = dir.path().join("clip_0000").join("flow").join("00003.flo1");
    std::fs::write(&victim, b"FLO1garbage").unwrap();
    let warnings = corpus.precompute_flows(&params, 1).unwrap();
    assert_eq!(warnings.len(), 1, "{warnings:?}");
    assert!(warnings[0].contains("00003.flo1"), "{warnings:?}");
    assert_eq!(before, snapshot(dir.path()), "recompute restored the file");
}

#[test]
fn static_background_region_has_near_zero_flow() {
    let dir = tempfile::tempdir().unwrap();
    let mut corpus = generate_corpus(
        dir.path(),
        &GenerateConfig {
            num_clips: 1,
            frames_per_clip: 6,
            ..small_config()
        },
        13,
    )
    .unwrap();
    corpus.precompute_flows(&FlowParams::default(), 1).unwrap();
    let clip = corpus.load_clip("clip_0000").unwrap();
    let joints = clip.joints.as_ref().unwrap();

    // pixels far from every joint in every frame are static background
    let far_from_figure = |x: usize, y: usize| {
        joints.iter().all(|frame| {
            frame.iter().all(|&(jx, jy)| {
                let d2 = (x as f32 - jx).powi(2) + (y as f32 - jy).powi(2);
                d2 > 22.0 * 22.0
            })
        })
    };
    let flow = clip.flow(2).unwrap();
    let a = clip.frame(2).unwrap().to_frame();
    let b = clip.frame(3).unwrap().to_frame();
    let mut checked = 0usize;
    for y in (8..88).step_by(4) {
        for x in (8..88).step_by(4) {
            if !far_from_figure(x, y) {
                continue;
            }
            let i = y * flow.width + x;
            let mag = (flow.u[i].powi(2) + flow.v[i].powi(2)).sqrt();
            assert!(mag < 0.3, "flow {mag} at static ({x}, {y})");
            if let Some((sx, sy)) = common::block_match_at(&a, &b, x, y, 4, 3) {
                assert_eq!((sx, sy), (0, 0), "oracle found motion at ({x}, {y})");
            }
            checked += 1;
        }
    }
    assert!(checked > 30, "too few static pixels checked: {checked}");
}
