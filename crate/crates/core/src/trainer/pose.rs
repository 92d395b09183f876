//! Pose fine-tuning: figure-centered crops, +/-1 target heatmaps with a 3x3
//! positive neighborhood, and the class-balanced gradient reweighting that
//! keeps training from collapsing to the all-background answer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::skeleton::{L_HIP, L_SHOULDER, NUM_JOINTS, R_HIP, R_SHOULDER};
use crate::corpus::{Corpus, GrayImage};
use crate::metrics::{decode_heatmap, SkeletonEval};
use crate::nets::{build_pose_net, ArchConfig, PoseNet};
use crate::tensor::{sgd_momentum_step, ParamSet, Tape, Tensor};

use super::{split_clips, HistoryRecord, Result, TrainerError};

#[derive(Debug, Clone)]
pub struct PoseTrainConfig {
    /// Torso box half-extents are multiplied by this factor before cropping.
    pub torso_expansion: f32,
    pub crop_size: usize,
    pub heatmap_size: usize,
    /// Positive neighborhood radius r: a (2r+1)^2 block per joint.
    pub neighborhood_radius: usize,
    pub schedule: Vec<(f32, usize)>,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f32,
    /// Iterations between validation probes in the history.
    pub eval_interval: usize,
}

impl PoseTrainConfig {
    pub fn mini() -> PoseTrainConfig {
        PoseTrainConfig {
            torso_expansion: 1.5,
            crop_size: 64,
            heatmap_size: 16,
            neighborhood_radius: 1,
            schedule: vec![(2e-2, 500), (5e-3, 200)],
            momentum: 0.9,
            batch_size: 8,
            seed: 0,
            validation_fraction: 0.2,
            eval_interval: 50,
        }
    }

    /// Full-scale reference: 256px crops, 60x60 heatmaps.
    pub fn paper() -> PoseTrainConfig {
        PoseTrainConfig {
            torso_expansion: 1.5,
            crop_size: 256,
            heatmap_size: 60,
            neighborhood_radius: 1,
            schedule: vec![(1e-3, 15_000), (1e-4, 5_000)],
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
            validation_fraction: 0.2,
            eval_interval: 500,
        }
    }

    pub fn preset(name: &str) -> Option<PoseTrainConfig> {
        match name {
            "mini" => Some(PoseTrainConfig::mini()),
            "paper" => Some(PoseTrainConfig::paper()),
            _ => None,
        }
    }
}

/// A figure-centered square crop and its joints in crop coordinates.
#[derive(Debug, Clone)]
pub struct FigureCrop {
    pub image: GrayImage,
    pub joints: [(f32, f32); NUM_JOINTS],
}

/// Crop a frame around the figure: the torso box (shoulders and hips)
/// expanded by `expansion`, squared, then grown as needed so every joint
/// stays inside (the re-crop rule), clamped to the frame, and rescaled to
/// `crop_size`.
pub fn crop_figure(
    frame: &GrayImage,
    joints: &[(f32, f32); NUM_JOINTS],
    expansion: f32,
    crop_size: usize,
) -> Result<FigureCrop> {
    let torso = [
        joints[L_SHOULDER],
        joints[R_SHOULDER],
        joints[L_HIP],
        joints[R_HIP],
    ];
    let (mut x0, mut x1, mut y0, mut y1) = (f32::INFINITY, f32::NEG_INFINITY, f32::INFINITY, f32::NEG_INFINITY);
    for (x, y) in torso {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let cx = 0.5 * (x0 + x1);
    let cy = 0.5 * (y0 + y1);
    let mut half = 0.5 * ((x1 - x0).max(y1 - y0)) * expansion;
    // grow until every joint fits, with a small margin
    for (x, y) in joints {
        half = half.max((x - cx).abs() + 2.0).max((y - cy).abs() + 2.0);
    }
    let side = ((2.0 * half).ceil() as usize).clamp(8, frame.width.min(frame.height));
    let ox = ((cx - side as f32 / 2.0).round() as isize)
        .clamp(0, (frame.width - side) as isize) as usize;
    let oy = ((cy - side as f32 / 2.0).round() as isize)
        .clamp(0, (frame.height - side) as isize) as usize;
    let image = frame.crop(ox, oy, side).resize(crop_size, crop_size);
    let scale = crop_size as f32 / side as f32;
    let mapped: [(f32, f32); NUM_JOINTS] = std::array::from_fn(|j| {
        let (x, y) = joints[j];
        (
            ((x - ox as f32 + 0.5) * scale - 0.5).clamp(0.0, crop_size as f32 - 1.0),
            ((y - oy as f32 + 0.5) * scale - 0.5).clamp(0.0, crop_size as f32 - 1.0),
        )
    });
    Ok(FigureCrop {
        image,
        joints: mapped,
    })
}

/// K target maps, all -1 except a (2r+1)^2 block of +1 centered at each
/// joint position mapped to heatmap coordinates by nearest-integer scaling
/// (blocks clip at borders). Joints must lie inside the crop.
pub fn pose_target_heatmaps(
    joints: &[(f32, f32)],
    crop_size: usize,
    heatmap_size: usize,
    radius: usize,
) -> Result<Tensor> {
    let k = joints.len();
    let h = heatmap_size;
    let mut data = vec![-1.0f32; k * h * h];
    let scale = h as f32 / crop_size as f32;
    for (j, &(x, y)) in joints.iter().enumerate() {
        if x < 0.0 || x >= crop_size as f32 || y < 0.0 || y >= crop_size as f32 {
            return Err(TrainerError::BadConfig(format!(
                "joint {j} at ({x}, {y}) outside the {crop_size}px crop; re-crop the frame"
            )));
        }
        let hx = ((x * scale).round() as isize).clamp(0, h as isize - 1);
        let hy = ((y * scale).round() as isize).clamp(0, h as isize - 1);
        let r = radius as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                let px = hx + dx;
                let py = hy + dy;
                if px >= 0 && px < h as isize && py >= 0 && py < h as isize {
                    data[j * h * h + py as usize * h + px as usize] = 1.0;
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[k, h, h], data)?)
}

/// Base euclidean gradient (pred - target) rescaled per pixel by 1/P on
/// positive pixels and 1/N on negative pixels, counted per joint map. The
/// per-class weight mass is then exactly 1 on each side.
pub fn reweighted_euclidean_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(TrainerError::BadConfig(format!(
            "prediction {:?} and target {:?} shapes differ",
            pred.shape(),
            target.shape()
        )));
    }
    let &[k, h, w] = pred.shape() else {
        return Err(TrainerError::BadConfig(format!(
            "expected [K, H, W] heatmaps, got {:?}",
            pred.shape()
        )));
    };
    let plane = h * w;
    let mut grad = vec![0.0f32; pred.numel()];
    for j in 0..k {
        let t = &target.data()[j * plane..(j + 1) * plane];
        let p = &pred.data()[j * plane..(j + 1) * plane];
        let positives = t.iter().filter(|&&v| v > 0.0).count();
        let negatives = plane - positives;
        if positives == 0 || negatives == 0 {
            return Err(TrainerError::BadConfig(format!(
                "joint map {j} is all-{} (P={positives}, N={negatives})",
                if positives == 0 { "negative" } else { "positive" }
            )));
        }
        let wp = 1.0 / positives as f32;
        let wn = 1.0 / negatives as f32;
        for i in 0..plane {
            let weight = if t[i] > 0.0 { wp } else { wn };
            grad[j * plane + i] = weight * (p[i] - t[i]);
        }
    }
    Ok(Tensor::from_vec(pred.shape(), grad)?)
}

#[derive(Debug)]
pub struct PoseOutcome {
    pub net: PoseNet,
    pub history: Vec<HistoryRecord>,
    pub train_clips: Vec<String>,
    pub val_clips: Vec<String>,
}

/// Fine-tune a pose network on annotated clips. `init` carries unsupervised
/// appearance parameters (under `app.`) for conv1-5; pass None for random
/// initialization. The recorded val_acc is the mean PDJ at 0.2 torso
/// diameters over held-out crops.
pub fn finetune_pose(
    corpus: &Corpus,
    arch: &ArchConfig,
    init: Option<&ParamSet>,
    cfg: &PoseTrainConfig,
    mut on_record: impl FnMut(&HistoryRecord),
) -> Result<PoseOutcome> {
    let (train_ids, val_ids) = split_clips(corpus, cfg.validation_fraction);
    let train_set = load_crop_dataset(corpus, &train_ids, cfg)?;
    let val_set = load_crop_dataset(corpus, &val_ids, cfg)?;
    if train_set.is_empty() {
        return Err(TrainerError::NotEnoughClips(
            "no annotated training frames".into(),
        ));
    }

    let mut net = build_pose_net(
        arch,
        init,
        NUM_JOINTS,
        cfg.heatmap_size,
        cfg.crop_size,
        cfg.seed ^ 0x706f7365,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = NUM_JOINTS;
    let plane = cfg.heatmap_size * cfg.heatmap_size;
    let mut history = Vec::new();
    let mut iter = 0usize;
    let total: usize = cfg.schedule.iter().map(|(_, n)| n).sum();
    let mut last_val = f32::NAN;

    for &(lr, steps) in &cfg.schedule {
        for _ in 0..steps {
            iter += 1;
            let n = cfg.batch_size.min(train_set.len());
            let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..train_set.len())).collect();
            let mut data = Vec::with_capacity(n * cfg.crop_size * cfg.crop_size);
            for &i in &picks {
                data.extend_from_slice(train_set[i].0.data());
            }
            let crops = Tensor::from_vec(&[n, 1, cfg.crop_size, cfg.crop_size], data)?;

            let mut tape = Tape::new();
            let out = net.forward(&mut tape, crops)?;
            let pred = tape.value(out).clone();

            // per-sample reweighted gradients, averaged over the K maps and
            // the batch; the recorded loss is the matching weighted SSE
            let mut seed = vec![0.0f32; pred.numel()];
            let mut loss = 0.0f64;
            let scale = 1.0 / (k * n) as f32;
            for (bi, &i) in picks.iter().enumerate() {
                let target = &train_set[i].1;
                let sample =
                    Tensor::from_vec(&[k, cfg.heatmap_size, cfg.heatmap_size],
                        pred.data()[bi * k * plane..(bi + 1) * k * plane].to_vec())?;
                let g = reweighted_euclidean_grad(&sample, target)?;
                for (w, (gv, (pv, tv))) in seed[bi * k * plane..(bi + 1) * k * plane]
                    .iter_mut()
                    .zip(g.data().iter().zip(sample.data().iter().zip(target.data())))
                {
                    *w = gv * scale;
                    loss += 0.5 * (*gv as f64) * ((*pv - *tv) as f64);
                }
            }
            let loss = (loss * scale as f64) as f32;
            tape.backward_seeded(out, &seed, &mut net.params)?;
            sgd_momentum_step(&mut net.params, lr, cfg.momentum)?;

            if iter % cfg.eval_interval == 0 || iter == total || iter == 1 {
                last_val = eval_pdj02(&net, &val_set, cfg)?;
            }
            let rec = HistoryRecord {
                iteration: iter as u32,
                loss,
                val_acc: last_val,
            };
            on_record(&rec);
            history.push(rec);
        }
    }
    Ok(PoseOutcome {
        net,
        history,
        train_clips: train_ids,
        val_clips: val_ids,
    })
}

type CropDataset = Vec<(Tensor, Tensor, [(f32, f32); NUM_JOINTS])>;

/// Crops, target heatmaps and crop-space joints for every frame of the
/// given clips. Clips without annotations are an error.
fn load_crop_dataset(corpus: &Corpus, ids: &[String], cfg: &PoseTrainConfig) -> Result<CropDataset> {
    let mut out = Vec::new();
    for id in ids {
        let clip = corpus.load_clip(id)?;
        let Some(tracks) = clip.joints.clone() else {
            return Err(TrainerError::MissingAnnotations(id.clone()));
        };
        for f in 0..clip.frame_count {
            let frame = clip.frame(f)?;
            let crop = crop_figure(&frame, &tracks[f], cfg.torso_expansion, cfg.crop_size)?;
            let target = pose_target_heatmaps(
                &crop.joints,
                cfg.crop_size,
                cfg.heatmap_size,
                cfg.neighborhood_radius,
            )?;
            let data: Vec<f32> = crop.image.pixels.iter().map(|&p| p as f32 / 255.0).collect();
            let tensor = Tensor::from_vec(&[1, cfg.crop_size, cfg.crop_size], data)?;
            out.push((tensor, target, crop.joints));
        }
    }
    Ok(out)
}

/// Mean PDJ at threshold 0.2 over a crop dataset.
fn eval_pdj02(net: &PoseNet, set: &CropDataset, cfg: &PoseTrainConfig) -> Result<f32> {
    if set.is_empty() {
        return Ok(f32::NAN);
    }
    let skel = SkeletonEval::arms_default();
    let mut acc = crate::metrics::PdjAccumulator::new(NUM_JOINTS, &[0.2]);
    let scale = cfg.crop_size as f32 / cfg.heatmap_size as f32;
    for chunk in set.chunks(16) {
        let mut data = Vec::new();
        for (t, _, _) in chunk {
            data.extend_from_slice(t.data());
        }
        let crops = Tensor::from_vec(&[chunk.len(), 1, cfg.crop_size, cfg.crop_size], data)?;
        let maps = net.heatmaps(crops)?;
        let plane = cfg.heatmap_size * cfg.heatmap_size;
        for (bi, (_, _, joints)) in chunk.iter().enumerate() {
            let pred: Vec<(f32, f32)> = (0..NUM_JOINTS)
                .map(|j| {
                    let at = (bi * NUM_JOINTS + j) * plane;
                    let (hx, hy) =
                        decode_heatmap(&maps.data()[at..at + plane], cfg.heatmap_size, 20.min(plane));
                    (hx * scale, hy * scale)
                })
                .collect();
            acc.add(&pred, joints, &skel);
        }
    }
    Ok(acc.mean_rate(0))
}
