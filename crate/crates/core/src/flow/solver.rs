//! Coarse-to-fine Horn-Schunck solver.
//!
//! Each pyramid level warps the second frame by the current flow, computes
//! brightness derivatives, and runs Jacobi iterations for a flow increment.
//! Inputs are [0,1] grayscale; internally intensities are scaled to 0..255
//! so the default smoothness weight is balanced against the data term.

use super::{FlowError, FlowField, Result};

/// Grayscale frame with values normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Frame {
        assert_eq!(data.len(), width * height);
        Frame {
            width,
            height,
            data,
        }
    }

    fn at(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    pub fn sample_bilinear(&self, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.width - 1) as f32);
        let y = y.clamp(0.0, (self.height - 1) as f32);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let w = self.width;
        let d = &self.data;
        (1.0 - fy) * ((1.0 - fx) * d[y0 * w + x0] + fx * d[y0 * w + x1])
            + fy * ((1.0 - fx) * d[y1 * w + x0] + fx * d[y1 * w + x1])
    }

    /// 5-tap Gaussian blur then 2x2 block averaging. Block averaging keeps
    /// the operation mirror-symmetric for even extents, which the flip
    /// equivariance of the solver depends on.
    fn downsample(&self) -> Frame {
        let blurred = self.gauss5();
        let w2 = (self.width + 1) / 2;
        let h2 = (self.height + 1) / 2;
        let mut data = vec![0.0f32; w2 * h2];
        for y in 0..h2 {
            for x in 0..w2 {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += blurred.at((2 * x + dx) as isize, (2 * y + dy) as isize);
                    }
                }
                data[y * w2 + x] = acc / 4.0;
            }
        }
        Frame::new(w2, h2, data)
    }

    fn gauss5(&self) -> Frame {
        const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let mut tmp = vec![0.0f32; self.data.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let mut acc = 0.0;
                for (i, k) in K.iter().enumerate() {
                    acc += k * self.at(x as isize + i as isize - 2, y as isize);
                }
                tmp[y * self.width + x] = acc;
            }
        }
        let half = Frame::new(self.width, self.height, tmp);
        let mut out = vec![0.0f32; self.data.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let mut acc = 0.0;
                for (i, k) in K.iter().enumerate() {
                    acc += k * half.at(x as isize, y as isize + i as isize - 2);
                }
                out[y * self.width + x] = acc;
            }
        }
        Frame::new(self.width, self.height, out)
    }
}

/// Luma conversion for callers holding RGB data (weights 0.299/0.587/0.114).
pub fn rgb_to_luma(rgb: &[u8], width: usize, height: usize) -> Frame {
    assert_eq!(rgb.len(), width * height * 3);
    let data = rgb
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
        .collect();
    Frame::new(width, height, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    /// Smoothness weight of the regularizer.
    pub alpha: f32,
    /// Jacobi iterations per pyramid level.
    pub iterations: usize,
    /// Pyramid depth including the full-resolution level.
    pub pyramid_levels: usize,
}

impl Default for FlowParams {
    fn default() -> FlowParams {
        FlowParams {
            alpha: 15.0,
            iterations: 100,
            pyramid_levels: 3,
        }
    }
}

/// Displacement field moving `frame_a` toward `frame_b`. Deterministic for
/// fixed inputs and params.
pub fn estimate_flow(frame_a: &Frame, frame_b: &Frame, params: &FlowParams) -> Result<FlowField> {
    if frame_a.width != frame_b.width || frame_a.height != frame_b.height {
        return Err(FlowError::SizeMismatch(
            frame_a.width,
            frame_a.height,
            frame_b.width,
            frame_b.height,
        ));
    }
    if params.iterations == 0 {
        return Err(FlowError::BadParams("iterations must be positive".into()));
    }
    if params.pyramid_levels == 0 {
        return Err(FlowError::BadParams(
            "pyramid_levels must be positive".into(),
        ));
    }

    let scale = |f: &Frame| {
        Frame::new(
            f.width,
            f.height,
            f.data.iter().map(|v| v * 255.0).collect(),
        )
    };
    let mut pyr_a = vec![scale(frame_a)];
    let mut pyr_b = vec![scale(frame_b)];
    for _ in 1..params.pyramid_levels {
        let next_a = pyr_a.last().unwrap().downsample();
        if next_a.width < 8 || next_a.height < 8 {
            break;
        }
        pyr_a.push(next_a);
        pyr_b.push(pyr_b.last().unwrap().downsample());
    }

    let coarsest = pyr_a.len() - 1;
    let mut flow = FlowField::zeros(pyr_a[coarsest].width, pyr_a[coarsest].height);
    for level in (0..=coarsest).rev() {
        let a = &pyr_a[level];
        let b = &pyr_b[level];
        if flow.width != a.width || flow.height != a.height {
            flow = upsample_flow(&flow, a.width, a.height);
        }
        horn_schunck_level(a, b, &mut flow, params.alpha, params.iterations);
        median3(&mut flow);
    }
    Ok(flow)
}

fn upsample_flow(flow: &FlowField, width: usize, height: usize) -> FlowField {
    let sx = flow.width as f32 / width as f32;
    let sy = flow.height as f32 / height as f32;
    let gain = 1.0 / sx;
    let mut out = FlowField::zeros(width, height);
    let uf = Frame::new(flow.width, flow.height, flow.u.clone());
    let vf = Frame::new(flow.width, flow.height, flow.v.clone());
    for y in 0..height {
        for x in 0..width {
            // pixel-center alignment; mirror-symmetric for exact 2x factors
            let fx = (x as f32 + 0.5) * sx - 0.5;
            let fy = (y as f32 + 0.5) * sy - 0.5;
            out.u[y * width + x] = uf.sample_bilinear(fx, fy) * gain;
            out.v[y * width + x] = vf.sample_bilinear(fx, fy) * gain;
        }
    }
    out
}

/// One pyramid level: warp b by the incoming flow, then Jacobi-iterate the
/// classic update on a flow increment.
fn horn_schunck_level(a: &Frame, b: &Frame, flow: &mut FlowField, alpha: f32, iterations: usize) {
    let (w, h) = (a.width, a.height);
    let n = w * h;
    let mut warped = vec![0.0f32; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            warped[i] = b.sample_bilinear(x as f32 + flow.u[i], y as f32 + flow.v[i]);
        }
    }
    let warped = Frame::new(w, h, warped);

    let mut ix = vec![0.0f32; n];
    let mut iy = vec![0.0f32; n];
    let mut it = vec![0.0f32; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (xi, yi) = (x as isize, y as isize);
            // central differences averaged over both frames
            ix[i] = 0.25
                * (a.at(xi + 1, yi) - a.at(xi - 1, yi) + warped.at(xi + 1, yi)
                    - warped.at(xi - 1, yi));
            iy[i] = 0.25
                * (a.at(xi, yi + 1) - a.at(xi, yi - 1) + warped.at(xi, yi + 1)
                    - warped.at(xi, yi - 1));
            it[i] = warped.data[i] - a.data[i];
        }
    }

    let alpha2 = alpha * alpha;
    let mut du = vec![0.0f32; n];
    let mut dv = vec![0.0f32; n];
    let mut du_next = vec![0.0f32; n];
    let mut dv_next = vec![0.0f32; n];
    for _ in 0..iterations {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (ubar, vbar) = neighborhood_average(&du, &dv, x, y, w, h);
                let num = ix[i] * ubar + iy[i] * vbar + it[i];
                let den = alpha2 + ix[i] * ix[i] + iy[i] * iy[i];
                du_next[i] = ubar - ix[i] * num / den;
                dv_next[i] = vbar - iy[i] * num / den;
            }
        }
        std::mem::swap(&mut du, &mut du_next);
        std::mem::swap(&mut dv, &mut dv_next);
    }
    for i in 0..n {
        flow.u[i] += du[i];
        flow.v[i] += dv[i];
    }
}

/// Horn-Schunck weighted neighborhood average (4-neighbors 1/6, diagonals
/// 1/12), replicate at borders.
fn neighborhood_average(
    u: &[f32],
    v: &[f32],
    x: usize,
    y: usize,
    w: usize,
    h: usize,
) -> (f32, f32) {
    let at = |dx: isize, dy: isize| -> usize {
        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        yy * w + xx
    };
    let cross = [at(-1, 0), at(1, 0), at(0, -1), at(0, 1)];
    let diag = [at(-1, -1), at(1, -1), at(-1, 1), at(1, 1)];
    let mut ubar = 0.0;
    let mut vbar = 0.0;
    for &i in &cross {
        ubar += u[i] / 6.0;
        vbar += v[i] / 6.0;
    }
    for &i in &diag {
        ubar += u[i] / 12.0;
        vbar += v[i] / 12.0;
    }
    (ubar, vbar)
}

fn median3(flow: &mut FlowField) {
    let (w, h) = (flow.width, flow.height);
    let mut window = [0.0f32; 9];
    for plane in [&mut flow.u, &mut flow.v] {
        let src = plane.clone();
        for y in 0..h {
            for x in 0..w {
                let mut k = 0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        window[k] = src[yy * w + xx];
                        k += 1;
                    }
                }
                window.sort_by(|a, b| a.partial_cmp(b).unwrap());
                plane[y * w + x] = window[4];
            }
        }
    }
}
