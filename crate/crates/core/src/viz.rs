//! Small visualization helpers: first-layer filter grids and color-coded
//! flow images for the qualitative probes.

use crate::corpus::GrayImage;
use crate::tensor::Tensor;

/// Tile conv filters [OC, IC, KH, KW] into a grayscale grid, each filter
/// normalized to its own full range; multi-channel filters show the channel
/// mean.
pub fn filter_grid(weights: &Tensor) -> GrayImage {
    let &[oc, ic, kh, kw] = weights.shape() else {
        panic!("filter grids take [OC, IC, KH, KW] conv weights");
    };
    let cols = (oc as f32).sqrt().ceil() as usize;
    let rows = oc.div_ceil(cols);
    let gap = 1usize;
    let width = cols * (kw + gap) + gap;
    let height = rows * (kh + gap) + gap;
    let mut pixels = vec![32u8; width * height];
    for f in 0..oc {
        // channel-mean filter
        let mut mean = vec![0.0f32; kh * kw];
        for c in 0..ic {
            let at = (f * ic + c) * kh * kw;
            for i in 0..kh * kw {
                mean[i] += weights.data()[at + i] / ic as f32;
            }
        }
        let lo = mean.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = mean.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = (hi - lo).max(1e-12);
        let gx = gap + (f % cols) * (kw + gap);
        let gy = gap + (f / cols) * (kh + gap);
        for y in 0..kh {
            for x in 0..kw {
                let v = (mean[y * kw + x] - lo) / span;
                pixels[(gy + y) * width + gx + x] = (v * 255.0).round() as u8;
            }
        }
    }
    GrayImage {
        width,
        height,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_dimensions_fit_all_filters() {
        let w = Tensor::from_vec(&[10, 1, 5, 5], (0..250).map(|i| i as f32).collect()).unwrap();
        let img = filter_grid(&w);
        // 4 columns x 3 rows of 5px tiles with 1px gaps
        assert_eq!(img.width, 4 * 6 + 1);
        assert_eq!(img.height, 3 * 6 + 1);
        // each tile normalized to the full 0..255 range
        assert!(img.pixels.iter().any(|&p| p == 255));
        assert!(img.pixels.iter().any(|&p| p == 0));
    }
}
