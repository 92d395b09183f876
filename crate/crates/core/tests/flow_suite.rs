//! Flow solver checks against an exhaustive integer block-matching oracle.
//!
//! The oracle shares nothing with the variational solver: it scores integer
//! shifts by window SSD, so agreement on translated textures validates the
//! solver rather than restating it.

mod common;

use common::{block_match_mean_flow, textured_noise, translated_pair};
use videorep::flow::{estimate_flow, hflip_flow, reverse_flow_block, FlowBlock, FlowParams, Frame};

fn interior_mean(flow: &videorep::flow::FlowField, margin: usize) -> (f32, f32, f32) {
    let mut su = 0.0f64;
    let mut sv = 0.0f64;
    let mut sabs_v = 0.0f64;
    let mut n = 0usize;
    for y in margin..flow.height - margin {
        for x in margin..flow.width - margin {
            let i = y * flow.width + x;
            su += flow.u[i] as f64;
            sv += flow.v[i] as f64;
            sabs_v += flow.v[i].abs() as f64;
            n += 1;
        }
    }
    ((su / n as f64) as f32, (sv / n as f64) as f32, (sabs_v / n as f64) as f32)
}

#[test]
fn zero_motion_null_at_every_pyramid_config() {
    let noise = textured_noise(48, 48, 5);
    let f = Frame::new(48, 48, noise);
    for levels in 1..=4 {
        let params = FlowParams {
            pyramid_levels: levels,
            ..FlowParams::default()
        };
        let flow = estimate_flow(&f, &f, &params).unwrap();
        assert!(
            flow.magnitude_max() < 1e-3,
            "levels {levels}: residual {}",
            flow.magnitude_max()
        );
    }
}

#[test]
fn recovers_two_pixel_right_translation_and_matches_oracle() {
    let (a, b) = translated_pair(96, 2, 0, 11);
    let flow = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
    let (mu, _, mav) = interior_mean(&flow, 4);
    assert!((1.6..=2.4).contains(&mu), "mean interior u = {mu}");
    assert!(mav < 0.3, "mean |v| = {mav}");

    let (ou, ov) = block_match_mean_flow(&a, &b, 4, 4);
    assert!((ou - 2.0).abs() < 0.2, "oracle mean u = {ou}");
    assert!(ov.abs() < 0.2, "oracle mean v = {ov}");
    assert!((mu - ou).abs() < 0.4, "solver {mu} vs oracle {ou}");
}

#[test]
fn recovers_one_pixel_down_translation() {
    let (a, b) = translated_pair(96, 0, 1, 13);
    let flow = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
    let (_, mv, _) = interior_mean(&flow, 4);
    assert!((0.7..=1.3).contains(&mv), "mean interior v = {mv}");
    let (ou, ov) = block_match_mean_flow(&a, &b, 4, 4);
    assert!((ov - 1.0).abs() < 0.2, "oracle mean v = {ov}");
    assert!(ou.abs() < 0.2);
}

#[test]
fn translation_grid_mean_endpoint_error_below_half_pixel() {
    // every integer translation in [-3,3]^2, interior margin 2*|shift|
    let mut worst = 0.0f32;
    for dy in -3i32..=3 {
        for dx in -3i32..=3 {
            let (a, b) = translated_pair(96, dx, dy, 1000 + (dx + 4) as u64 * 16 + (dy + 4) as u64);
            let flow = estimate_flow(&a, &b, &FlowParams::default()).unwrap();
            let margin = (2 * dx.abs().max(dy.abs()).max(1)) as usize;
            let mut epe = 0.0f64;
            let mut n = 0usize;
            for y in margin..flow.height - margin {
                for x in margin..flow.width - margin {
                    let i = y * flow.width + x;
                    let du = flow.u[i] - dx as f32;
                    let dv = flow.v[i] - dy as f32;
                    epe += ((du * du + dv * dv).sqrt()) as f64;
                    n += 1;
                }
            }
            let mean_epe = (epe / n as f64) as f32;
            worst = worst.max(mean_epe);
            assert!(
                mean_epe < 0.5,
                "shift ({dx},{dy}): mean endpoint error {mean_epe}"
            );
        }
    }
    println!("worst mean endpoint error over the grid: {worst:.3}");
}

#[test]
fn flip_equivariance() {
    let (a, b) = translated_pair(96, 2, 1, 21);
    let params = FlowParams::default();
    let direct = hflip_flow(&estimate_flow(&a, &b, &params).unwrap());

    let flip_frame = |f: &Frame| {
        let mut data = vec![0.0f32; f.data.len()];
        for y in 0..f.height {
            for x in 0..f.width {
                data[y * f.width + x] = f.data[y * f.width + (f.width - 1 - x)];
            }
        }
        Frame::new(f.width, f.height, data)
    };
    let flipped = estimate_flow(&flip_frame(&a), &flip_frame(&b), &params).unwrap();

    let mut max_dev = 0.0f32;
    for i in 0..direct.u.len() {
        max_dev = max_dev.max((direct.u[i] - flipped.u[i]).abs());
        max_dev = max_dev.max((direct.v[i] - flipped.v[i]).abs());
    }
    assert!(max_dev < 0.2, "flip equivariance deviation {max_dev}");
}

#[test]
fn temporal_reversal_approximates_backward_flow() {
    let (a, b) = translated_pair(96, 2, -1, 33);
    let params = FlowParams::default();
    let forward = FlowBlock::new(vec![estimate_flow(&a, &b, &params).unwrap()]);
    let backward = estimate_flow(&b, &a, &params).unwrap();
    let reversed = reverse_flow_block(&forward);

    let mut abs_err = 0.0f64;
    let margin = 4usize;
    let mut n = 0usize;
    let f = &reversed.fields[0];
    for y in margin..f.height - margin {
        for x in margin..f.width - margin {
            let i = y * f.width + x;
            abs_err += ((f.u[i] - backward.u[i]).abs() + (f.v[i] - backward.v[i]).abs()) as f64 / 2.0;
            n += 1;
        }
    }
    let mean = (abs_err / n as f64) as f32;
    assert!(mean < 0.3, "reversal mean abs error {mean}");
}
