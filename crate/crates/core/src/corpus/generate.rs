//! Synthetic action-video generator: renders the stick figure over textured
//! noise and writes clips in the on-disk corpus layout.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::skeleton::{default_actions, default_skeleton, ActionScript, SkeletonModel};
use super::{pgm, Corpus, CorpusError, GrayImage, Result};

#[derive(Debug, Clone)]
pub struct GenerateConfig {
    pub num_clips: usize,
    pub frames_per_clip: usize,
    pub frame_size: usize,
    pub actions: Vec<ActionScript>,
    /// Per-clip amplitude scale range.
    pub amp_jitter: (f32, f32),
    pub line_thickness: f32,
}

impl Default for GenerateConfig {
    fn default() -> GenerateConfig {
        GenerateConfig {
            num_clips: 40,
            frames_per_clip: 30,
            frame_size: 96,
            actions: default_actions(),
            amp_jitter: (0.8, 1.2),
            line_thickness: 2.2,
        }
    }
}

/// Generate a corpus under `root`. Deterministic for a fixed seed: clip i
/// draws from its own counter-derived rng stream. Every clip gets frames,
/// full joint annotations and an action label; actions rotate round-robin
/// so labels stay balanced.
pub fn generate_corpus(root: &Path, config: &GenerateConfig, seed: u64) -> Result<Corpus> {
    if config.actions.is_empty() {
        return Err(CorpusError::Validation("no actions configured".into()));
    }
    if config.frames_per_clip < 2 {
        return Err(CorpusError::Validation(
            "frames_per_clip must be at least 2".into(),
        ));
    }
    let skel = default_skeleton();
    let size = config.frame_size as f32;

    std::fs::create_dir_all(root).map_err(|source| CorpusError::Io {
        path: root.display().to_string(),
        source,
    })?;

    let mut ids = Vec::with_capacity(config.num_clips);
    for clip_idx in 0..config.num_clips {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(clip_idx as u64 + 1)),
        );
        let action = &config.actions[clip_idx % config.actions.len()];
        let amp_scale = rng.random_range(config.amp_jitter.0..=config.amp_jitter.1);
        let phase_shift = rng.random_range(0.0..std::f32::consts::TAU);

        // simulate the whole jittered trajectory from a zero start to learn
        // its exact bounding box, then jitter the start within the frame
        let mut bbox = (f32::INFINITY, f32::NEG_INFINITY, f32::INFINITY, f32::NEG_INFINITY);
        for t in 0..config.frames_per_clip {
            let deltas = action.deltas_at(t, skel.bones.len(), amp_scale, phase_shift);
            let rootpos = action.root_at(t, (0.0, 0.0));
            for (x, y) in skel.joint_positions(rootpos, &deltas) {
                bbox.0 = bbox.0.min(x);
                bbox.1 = bbox.1.max(x);
                bbox.2 = bbox.2.min(y);
                bbox.3 = bbox.3.max(y);
            }
        }
        let pad = skel.head_radius + config.line_thickness / 2.0 + 2.0;
        let x_lo = pad - bbox.0;
        let x_hi = size - 1.0 - pad - bbox.1;
        let y_lo = pad - bbox.2;
        let y_hi = size - 1.0 - pad - bbox.3;
        if x_lo >= x_hi || y_lo >= y_hi {
            return Err(CorpusError::Validation(format!(
                "action `{}` does not fit a {}px frame",
                action.name, config.frame_size
            )));
        }
        let start = (rng.random_range(x_lo..x_hi), rng.random_range(y_lo..y_hi));
        let background = textured_background(config.frame_size, &mut rng);

        let id = format!("clip_{clip_idx:04}");
        let clip_dir = root.join(&id);
        let frames_dir = clip_dir.join("frames");
        std::fs::create_dir_all(&frames_dir).map_err(|source| CorpusError::Io {
            path: frames_dir.display().to_string(),
            source,
        })?;

        let mut joint_lines = String::new();
        for t in 0..config.frames_per_clip {
            let deltas = action.deltas_at(t, skel.bones.len(), amp_scale, phase_shift);
            let rootpos = action.root_at(t, start);
            let frame = render_frame(&skel, &background, rootpos, &deltas, config.line_thickness);
            pgm::write_pgm(&frames_dir.join(format!("{t:05}.pgm")), &frame)?;

            let joints = skel.joint_positions(rootpos, &deltas);
            let line = joints
                .iter()
                .map(|(x, y)| {
                    debug_assert!(
                        *x >= 0.0 && *x < size && *y >= 0.0 && *y < size,
                        "joint left the frame: ({x}, {y})"
                    );
                    format!("{x:.2},{y:.2}")
                })
                .collect::<Vec<_>>()
                .join(" ");
            joint_lines.push_str(&line);
            joint_lines.push('\n');
        }
        write_text(&clip_dir.join("joints.txt"), &joint_lines)?;
        write_text(&clip_dir.join("label.txt"), &format!("{}\n", action.id))?;
        ids.push(id);
    }
    write_text(&root.join("index.txt"), &(ids.join("\n") + "\n"))?;
    Corpus::open(root)
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Smooth mid-gray noise; the blur leaves a few-pixel correlation length so
/// the flow solver has gradients to work with.
fn textured_background(size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut field: Vec<f32> = (0..size * size).map(|_| rng.random_range(0.0f32..1.0)).collect();
    let src = field.clone();
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let xx = (x as i32 + dx).clamp(0, size as i32 - 1) as usize;
                    let yy = (y as i32 + dy).clamp(0, size as i32 - 1) as usize;
                    acc += src[yy * size + xx];
                }
            }
            field[y * size + x] = acc / 9.0;
        }
    }
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in &field {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    field
        .iter()
        .map(|v| (40.0 + 130.0 * (v - lo) / (hi - lo)) as u8)
        .collect()
}

const FIGURE_BRIGHTNESS: f32 = 235.0;

fn render_frame(
    skel: &SkeletonModel,
    background: &[u8],
    root: (f32, f32),
    deltas: &[f32],
    thickness: f32,
) -> GrayImage {
    let size = (background.len() as f64).sqrt() as usize;
    let mut coverage = vec![0.0f32; size * size];
    for (a, b) in skel.segments(root, deltas) {
        rasterize_segment(&mut coverage, size, a, b, thickness);
    }
    // head disc around the nose
    let nose = skel.joint_positions(root, deltas)[0];
    rasterize_disc(&mut coverage, size, nose, skel.head_radius);

    let pixels = background
        .iter()
        .zip(&coverage)
        .map(|(&bg, &c)| {
            let v = bg as f32 + c.clamp(0.0, 1.0) * (FIGURE_BRIGHTNESS - bg as f32);
            v.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage {
        width: size,
        height: size,
        pixels,
    }
}

/// Anti-aliased thick segment: coverage from the distance to the segment.
fn rasterize_segment(
    coverage: &mut [f32],
    size: usize,
    a: (f32, f32),
    b: (f32, f32),
    thickness: f32,
) {
    let r = thickness / 2.0;
    let pad = r + 1.5;
    let x0 = ((a.0.min(b.0) - pad).floor().max(0.0)) as usize;
    let x1 = ((a.0.max(b.0) + pad).ceil().min(size as f32 - 1.0)) as usize;
    let y0 = ((a.1.min(b.1) - pad).floor().max(0.0)) as usize;
    let y1 = ((a.1.max(b.1) + pad).ceil().min(size as f32 - 1.0)) as usize;
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = (abx * abx + aby * aby).max(1e-9);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f32 - a.0, y as f32 - a.1);
            let t = ((px * abx + py * aby) / len2).clamp(0.0, 1.0);
            let (dx, dy) = (px - t * abx, py - t * aby);
            let dist = (dx * dx + dy * dy).sqrt();
            let c = (r + 0.5 - dist).clamp(0.0, 1.0);
            let at = y * size + x;
            if c > coverage[at] {
                coverage[at] = c;
            }
        }
    }
}

fn rasterize_disc(coverage: &mut [f32], size: usize, center: (f32, f32), radius: f32) {
    let pad = radius + 1.5;
    let x0 = ((center.0 - pad).floor().max(0.0)) as usize;
    let x1 = ((center.0 + pad).ceil().min(size as f32 - 1.0)) as usize;
    let y0 = ((center.1 - pad).floor().max(0.0)) as usize;
    let y1 = ((center.1 + pad).ceil().min(size as f32 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f32 - center.0;
            let dy = y as f32 - center.1;
            let dist = (dx * dx + dy * dy).sqrt();
            let c = (radius + 0.5 - dist).clamp(0.0, 1.0);
            let at = y * size + x;
            if c > coverage[at] {
                coverage[at] = c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figure_pixels_are_brighter_than_background() {
        let skel = default_skeleton();
        let bg = vec![100u8; 96 * 96];
        let frame = render_frame(&skel, &bg, (48.0, 60.0), &vec![0.0; skel.bones.len()], 2.2);
        // the spine midpoint should be fully covered
        let at = |x: usize, y: usize| frame.pixels[y * 96 + x];
        assert!(at(48, 52) > 220, "spine pixel {}", at(48, 52));
        assert_eq!(at(5, 5), 100, "far corner untouched");
    }
}
