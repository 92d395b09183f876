//! Helpers shared by the integration suites: textured test imagery and the
//! exhaustive block-matching flow oracle (independent of the variational
//! solver).

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use videorep::flow::Frame;

/// Smoothly textured noise in [0,1]; flow needs spatial gradients.
pub fn textured_noise(width: usize, height: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f32> = (0..width * height).map(|_| rng.random_range(0.0..1.0)).collect();
    for _ in 0..2 {
        let src = data.clone();
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let xx = (x as i32 + dx).clamp(0, width as i32 - 1) as usize;
                        let yy = (y as i32 + dy).clamp(0, height as i32 - 1) as usize;
                        acc += src[yy * width + xx];
                    }
                }
                data[y * width + x] = acc / 9.0;
            }
        }
    }
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in &data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    data.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    data
}

/// A frame pair whose content moves by exactly (dx, dy): both frames are
/// windows into one larger noise field.
pub fn translated_pair(size: usize, dx: i32, dy: i32, seed: u64) -> (Frame, Frame) {
    let margin = 8usize;
    let big_w = size + 2 * margin;
    let big_h = size + 2 * margin;
    let noise = textured_noise(big_w, big_h, seed);
    let window = |ox: i32, oy: i32| -> Frame {
        let mut data = vec![0.0f32; size * size];
        for y in 0..size {
            for x in 0..size {
                let sx = (x as i32 + ox) as usize;
                let sy = (y as i32 + oy) as usize;
                data[y * size + x] = noise[sy * big_w + sx];
            }
        }
        Frame::new(size, size, data)
    };
    let a = window(margin as i32, margin as i32);
    let b = window(margin as i32 - dx, margin as i32 - dy);
    (a, b)
}

/// Integer shift minimizing window SSD at one point; `None` when the search
/// window would leave the frame.
pub fn block_match_at(
    a: &Frame,
    b: &Frame,
    cx: usize,
    cy: usize,
    radius: i32,
    max_shift: i32,
) -> Option<(i32, i32)> {
    let (w, h) = (a.width as i32, a.height as i32);
    let cx = cx as i32;
    let cy = cy as i32;
    if cx - radius - max_shift < 0
        || cy - radius - max_shift < 0
        || cx + radius + max_shift >= w
        || cy + radius + max_shift >= h
    {
        return None;
    }
    let mut best = f64::INFINITY;
    let mut best_shift = (0i32, 0i32);
    for sy in -max_shift..=max_shift {
        for sx in -max_shift..=max_shift {
            let mut ssd = 0.0f64;
            for oy in -radius..=radius {
                for ox in -radius..=radius {
                    let d = a.data[((cy + oy) * w + cx + ox) as usize]
                        - b.data[((cy + oy + sy) * w + cx + ox + sx) as usize];
                    ssd += (d * d) as f64;
                }
            }
            if ssd < best {
                best = ssd;
                best_shift = (sx, sy);
            }
        }
    }
    Some(best_shift)
}

/// Mean block-matched shift over a sparse interior grid.
pub fn block_match_mean_flow(a: &Frame, b: &Frame, max_shift: i32, margin: usize) -> (f32, f32) {
    let radius = 4i32;
    let step = 3usize;
    let lo = margin + (max_shift + radius) as usize;
    let mut sum_u = 0.0f64;
    let mut sum_v = 0.0f64;
    let mut count = 0usize;
    for cy in (lo..a.height - lo).step_by(step) {
        for cx in (lo..a.width - lo).step_by(step) {
            if let Some((sx, sy)) = block_match_at(a, b, cx, cy, radius, max_shift) {
                sum_u += sx as f64;
                sum_v += sy as f64;
                count += 1;
            }
        }
    }
    ((sum_u / count as f64) as f32, (sum_v / count as f64) as f32)
}
