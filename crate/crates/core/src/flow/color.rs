//! Color-coded flow visualization: hue encodes direction, saturation
//! encodes magnitude, zero flow maps to white.

use super::FlowField;

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

/// Hue = atan2(v, u), saturation = min(magnitude / max_magnitude, 1),
/// value = 1. Magnitudes above `max_magnitude` saturate.
pub fn flow_to_color(field: &FlowField, max_magnitude: f32) -> RgbImage {
    assert!(max_magnitude > 0.0, "max_magnitude must be positive");
    let mut data = Vec::with_capacity(field.width * field.height * 3);
    for i in 0..field.width * field.height {
        let (u, v) = (field.u[i], field.v[i]);
        let mag = (u * u + v * v).sqrt();
        let hue_deg = v.atan2(u).to_degrees().rem_euclid(360.0);
        let sat = (mag / max_magnitude).min(1.0);
        let (r, g, b) = hsv_to_rgb(hue_deg, sat, 1.0);
        data.extend_from_slice(&[r, g, b]);
    }
    RgbImage {
        width: field.width,
        height: field.height,
        data,
    }
}

fn hsv_to_rgb(h_deg: f32, s: f32, v: f32) -> (u8, u8, u8) {
    let c = v * s;
    let hp = h_deg / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to8 = |f: f32| ((f + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    (to8(r1), to8(g1), to8(b1))
}
