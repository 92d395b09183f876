//! Dense two-frame optical flow and the flow transforms used by triplet
//! augmentation.
//!
//! The solver is a coarse-to-fine Horn-Schunck scheme; flow values are
//! pixels-per-frame displacements, u positive rightward, v positive
//! downward (image row order).

mod color;
mod format;
mod solver;

pub use color::{flow_to_color, RgbImage};
pub use format::{read_flo1, write_flo1, FLO1_MAGIC};
pub use solver::{estimate_flow, rgb_to_luma, Frame, FlowParams};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("frames differ in size: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("invalid flow parameter: {0}")]
    BadParams(String),
    #[error("flow file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, FlowError>;

/// Per-pixel (u, v) displacement map between two frames, row-major f32.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> FlowField {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn magnitude_max(&self) -> f32 {
        self.u
            .iter()
            .chain(self.v.iter())
            .fold(0.0f32, |m, &x| m.max(x.abs()))
    }

    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> FlowField {
        assert!(x0 + size <= self.width && y0 + size <= self.height);
        let mut out = FlowField::zeros(size, size);
        for y in 0..size {
            let src = (y0 + y) * self.width + x0;
            let dst = y * size;
            out.u[dst..dst + size].copy_from_slice(&self.u[src..src + size]);
            out.v[dst..dst + size].copy_from_slice(&self.v[src..src + size]);
        }
        out
    }
}

/// Mirror a field about the vertical axis: the horizontal component flips
/// sign, the vertical component is carried across unchanged.
pub fn hflip_flow(field: &FlowField) -> FlowField {
    let (w, h) = (field.width, field.height);
    let mut out = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let src = y * w + (w - 1 - x);
            out.u[y * w + x] = -field.u[src];
            out.v[y * w + x] = field.v[src];
        }
    }
    out
}

/// A stack of `frame_gap` consecutive flow fields covering frames
/// n -> n+1, ..., n+gap-1 -> n+gap. Stacking interleaves per-field (u, v)
/// planes, giving 2*gap network channels; Motion ConvNet conv1 weights
/// depend on this order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBlock {
    pub fields: Vec<FlowField>,
    /// Crop origin in source-frame coordinates when patch-cropped.
    pub crop_origin: Option<(usize, usize)>,
}

impl FlowBlock {
    pub fn new(fields: Vec<FlowField>) -> FlowBlock {
        FlowBlock {
            fields,
            crop_origin: None,
        }
    }

    pub fn frame_gap(&self) -> usize {
        self.fields.len()
    }

    pub fn channels(&self) -> usize {
        2 * self.fields.len()
    }

    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> FlowBlock {
        FlowBlock {
            fields: self.fields.iter().map(|f| f.crop(x0, y0, size)).collect(),
            crop_origin: Some((x0, y0)),
        }
    }

    /// Interleaved channel stack [2*gap, H, W]: (u1, v1, u2, v2, ...).
    pub fn to_channels(&self) -> Vec<f32> {
        let (w, h) = match self.fields.first() {
            Some(f) => (f.width, f.height),
            None => return Vec::new(),
        };
        let plane = w * h;
        let mut out = Vec::with_capacity(2 * self.fields.len() * plane);
        for f in &self.fields {
            out.extend_from_slice(&f.u);
            out.extend_from_slice(&f.v);
        }
        out
    }
}

/// Temporal reversal: field order reversed and every displacement negated,
/// approximating the flow of the reversed frame order.
pub fn reverse_flow_block(block: &FlowBlock) -> FlowBlock {
    let fields = block
        .fields
        .iter()
        .rev()
        .map(|f| FlowField {
            width: f.width,
            height: f.height,
            u: f.u.iter().map(|x| -x).collect(),
            v: f.v.iter().map(|x| -x).collect(),
        })
        .collect();
    FlowBlock {
        fields,
        crop_origin: block.crop_origin,
    }
}
